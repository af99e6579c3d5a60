//! Upload a kiosk's store to a central server, show that a second sync
//! sends nothing, and read a patient's history back line by line.

use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;

use umphcs::records::{Payload, RecordStore, TestKind};
use umphcs::sync::{client_sync, ServerStore, SyncServer};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let server = SyncServer::bind("127.0.0.1:0", ServerStore::in_memory())?;
    let endpoint = server.local_addr().to_string();

    let dir = tempfile::tempdir()?;
    let mut store = RecordStore::open(dir.path().join("kiosk.jsonl"))?;
    store.add_patient("p1", "Asha", "north")?;
    for c in [36.9, 37.4, 38.3] {
        store.record("p1", "kiosk-1", TestKind::Temperature, Payload::scalar(TestKind::Temperature, c)?)?;
    }
    println!("first sync:  {:?}", client_sync(&mut store, &endpoint)?);
    println!("second sync: {:?}", client_sync(&mut store, &endpoint)?);

    let mut conn = TcpStream::connect(&endpoint)?;
    conn.write_all(b"HELLO v1\nLIST p1\nFLAGS north\nQUIT\n")?;
    for line in BufReader::new(conn).lines() {
        println!("  {}", line?);
    }
    server.shutdown();
    Ok(())
}
