//! Record weights for a village, then screen one patient and the region.

use umphcs::records::{Payload, RecordStore, ScreeningConfig, TestKind};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let mut store = RecordStore::open(dir.path().join("village.jsonl"))?;
    let histories: [(&str, &[f64]); 4] = [
        ("rahim", &[18.2, 17.9, 17.5, 17.1]),
        ("mita", &[15.0, 15.4, 15.6]),
        ("joy", &[21.0, 20.1, 20.6]),
        ("lina", &[12.4, 12.1, 11.6, 11.0, 10.7]),
    ];
    for (id, kgs) in histories {
        store.add_patient(id, id, "char-island")?;
        for &kg in kgs {
            store.record(id, "kiosk-7", TestKind::Weight, Payload::scalar(TestKind::Weight, kg)?)?;
        }
    }

    let cfg = ScreeningConfig::default();
    for (id, _) in histories {
        match store.screen_patient(id, &cfg)? {
            Some(f) => println!("{id}: {:.1}% decline over {} visits", f.severity * 100.0, f.evidence.len()),
            None => println!("{id}: no flag"),
        }
    }
    if let Some(alert) = store.screen_region("char-island", &cfg) {
        println!("region: {} of {} flagged ({:.0}%)", alert.flagged, alert.eligible, alert.fraction * 100.0);
    }
    Ok(())
}
