//! Parse a lab-result XML document and print the records.
//!
//!     cargo run --example parse_lab_xml -- crates/core/fixtures/ehr/p-notes.xml

use ehr_gateway::ehr_client::parse_lab_xml;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let path = std::env::args()
        .nth(1)
        .unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/xml/cbc_single.xml").into());
    let records = parse_lab_xml(&std::fs::read(&path)?)?;
    for r in &records {
        println!(
            "{} {} {}/{} {} {}",
            r.test_id,
            r.result_datetime,
            r.section,
            r.test_type,
            r.report_status.as_str(),
            r.species
        );
        for a in &r.analytes {
            println!("    {:<14} {:<24?} {}", a.name, a.raw_value, a.unit);
        }
    }

    // errors name the element path
    let broken = br#"<LabResults patient_id="P" species="Canine"><Test section="Hematology"/></LabResults>"#;
    if let Err(e) = parse_lab_xml(broken) {
        println!("\nrejected: {e}");
    }
    Ok(())
}
