//! First-run timestamps survive repeated stores and a restart.

use std::time::Duration;

use ehr_gateway::audit::{read_records, AuditClock, AuditKey, AuditRecord, AuditStore, JsonlAuditStore};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("audit.jsonl");
    let clock = AuditClock::default();
    let key = AuditKey::new("demo_lepto", "P-FIG4", ["H-1001".to_string(), "C-2001".to_string()]);

    let record = |session: &str| {
        let now = clock.now();
        AuditRecord {
            classifier_id: key.classifier_id.clone(),
            patient_id: key.patient_id.clone(),
            test_ids: key.test_ids.clone(),
            prediction: "1".into(),
            first_run_timestamp: now,
            session_id: session.into(),
            recorded_at: now,
        }
    };

    let store = JsonlAuditStore::open(&path)?;
    let first = store.store_result(record("000001"))?;
    std::thread::sleep(Duration::from_millis(20));
    let second = store.store_result(record("000002"))?;
    drop(store);

    let reopened = JsonlAuditStore::open(&path)?;
    println!("first store   {}", first.first_run_timestamp);
    println!("second store  {} (recorded {})", second.first_run_timestamp, second.recorded_at);
    println!("after reopen  {:?}", reopened.lookup_first_run(&key)?);
    println!("\n{}", std::fs::read_to_string(&path)?);
    println!("{} lines, {} key", read_records(&path)?.len(), reopened.len_keys());
    Ok(())
}
