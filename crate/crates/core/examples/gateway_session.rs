//! Start the console gateway, run a temperature test through it and read
//! the result, using plain HTTP/1.1 over a socket.

use std::io::{Read, Write};
use std::net::TcpStream;

use umphcs::gateway::{GatewayConfig, GatewayHandle};
use umphcs::records::RecordStore;

fn call(addr: &str, method: &str, path: &str, body: &str) -> std::io::Result<String> {
    let mut s = TcpStream::connect(addr)?;
    write!(
        s,
        "{method} {path} HTTP/1.1\r\nHost: {addr}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    )?;
    let mut out = String::new();
    s.read_to_string(&mut out)?;
    Ok(out.split("\r\n\r\n").nth(1).unwrap_or_default().to_owned())
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let store = dir.path().join("store.jsonl");
    RecordStore::open(&store)?.add_patient("p1", "Asha", "north")?;

    let gw = GatewayHandle::spawn("127.0.0.1:0", GatewayConfig::new(&store))?;
    let addr = gw.local_addr().to_string();
    println!("GET /patients -> {}", call(&addr, "GET", "/patients", "")?);
    let start = r#"{"patient":"p1","test":"temperature","params":{"celsius":38.6}}"#;
    println!("POST /session/start -> {}", call(&addr, "POST", "/session/start", start)?);
    println!("GET /session/result -> {}", call(&addr, "GET", "/session/result", "")?);
    println!("POST /session/pot -> {}", call(&addr, "POST", "/session/pot", r#"{"code":100}"#)?);
    gw.shutdown();
    Ok(())
}
