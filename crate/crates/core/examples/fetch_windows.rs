//! Per-section fetch windows for a query date.
//!
//!     cargo run --example fetch_windows -- 2024-06-27

use chrono::NaiveDate;
use ehr_gateway::ehr_client::compute_fetch_window;
use ehr_gateway::load_config;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let query = std::env::args().nth(1).unwrap_or_else(|| "2024-06-27".into());
    let query = NaiveDate::parse_from_str(&query, "%Y-%m-%d")?;
    let config = load_config(concat!(env!("CARGO_MANIFEST_DIR"), "/config/gateway.toml"))?;

    for spec in &config.classifiers {
        println!("{} (query date {query})", spec.classifier_id);
        for (section, window) in &spec.windows {
            let range = compute_fetch_window(query, *window);
            println!(
                "  {section:<13} -{}/+{} days  {range}  ({} days)",
                window.days_before,
                window.days_after,
                range.width_days()
            );
        }
    }
    Ok(())
}
