//! Serve the fixture corpus over the lab-data endpoint and query it with the
//! gateway's EHR client, with and without injected latency and faults.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::time::{Duration, Instant};

use chrono::NaiveDate;
use ehr_gateway::ehr_client::{compute_fetch_window, EhrClient};
use ehr_gateway::mock_ehr::{Fault, FixtureSet, MockEhr};
use ehr_gateway::registry::FetchWindow;

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let fixtures = FixtureSet::load_dir(concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/ehr"))?;
    let mock = MockEhr::start(fixtures, "demo-code", SocketAddr::from(([127, 0, 0, 1], 0))).await?;
    println!("mock EHR on {}", mock.base_url());

    let ehr = EhrClient::new(mock.base_url(), "demo-code", Duration::from_secs(2));
    let query = NaiveDate::from_ymd_opt(2024, 6, 27).unwrap();
    let windows: BTreeMap<_, _> = [("Hematology", 1), ("Chemistry", 2), ("Microbiology", 5)]
        .into_iter()
        .map(|(s, d)| (s.to_string(), compute_fetch_window(query, FetchWindow::new(d, d))))
        .collect();

    let fetched = ehr.fetch_sections("P-FIG4", &windows).await?;
    for (section, records) in &fetched.by_section {
        let ids: Vec<_> = records.iter().map(|r| r.test_id.as_str()).collect();
        println!("  {section:<13} {ids:?}");
    }

    mock.control().set_default_latency(Duration::from_millis(100));
    let t = Instant::now();
    ehr.fetch_sections("P-FIG4", &windows).await?;
    println!("3 sections at 100 ms each took {:?}", t.elapsed());

    mock.control().set_fault("Chemistry", Some(Fault::Status(500)));
    if let Err(e) = ehr.fetch_sections("P-FIG4", &windows).await {
        println!("with a fault: {e}");
    }
    println!("hits: {:?}", mock.control().stats());
    mock.stop().await;
    Ok(())
}
