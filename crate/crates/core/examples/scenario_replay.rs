//! Replay the bundled clinic-day scenario twice and check that the report
//! and the store come out byte for byte the same.

use std::path::Path;

use umphcs::advice::AdviceRules;
use umphcs::scenario::{run_scenario, Scenario};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let file = Path::new(env!("CARGO_MANIFEST_DIR")).join("examples/data/clinic_day.jsonl");
    let scenario = Scenario::load(&file)?;
    let dir = tempfile::tempdir()?;

    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let path = dir.path().join(format!("{run}.jsonl"));
        let mut store = scenario.open_store(&path)?;
        let report = run_scenario(&scenario, &mut store, &AdviceRules::default())?;
        outputs.push((report.render(), std::fs::read(&path)?));
    }
    print!("{}", outputs[0].0);
    println!("identical report: {}, identical store: {}", outputs[0].0 == outputs[1].0, outputs[0].1 == outputs[1].1);
    Ok(())
}
