//! Status filtering, test-type split and the all-vs-all merge on the
//! two-CBC, two-chemistry fixture patient.

use std::collections::BTreeSet;

use chrono::NaiveDate;
use ehr_gateway::ehr_client::compute_fetch_window;
use ehr_gateway::mock_ehr::FixtureSet;
use ehr_gateway::preprocess::{apply_pre_merge_rule, filter_by_status, merge_all_vs_all, split_by_test_type};
use ehr_gateway::registry::PreMergeRule;
use ehr_gateway::load_config;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = env!("CARGO_MANIFEST_DIR");
    let config = load_config(format!("{dir}/config/gateway.toml"))?;
    let spec = &config.classifiers[0];
    let query = NaiveDate::from_ymd_opt(2024, 6, 27).unwrap();

    // what the EHR would return for each section window
    let records: Vec<_> = FixtureSet::load_dir(format!("{dir}/fixtures/ehr"))?
        .records
        .into_iter()
        .filter(|r| r.patient_id == "P-FIG4")
        .filter(|r| {
            spec.windows
                .get(&r.section)
                .is_some_and(|w| compute_fetch_window(query, *w).contains(r.result_datetime.date()))
        })
        .collect();
    println!("{} records in window", records.len());

    let kept = filter_by_status(records, &spec.status_rule);
    let tables = split_by_test_type(kept);
    for t in &tables {
        let ids: Vec<_> = t.records.iter().map(|r| r.test_id.as_str()).collect();
        println!("  {:<10} {ids:?}", t.test_type);
    }

    let required: &BTreeSet<String> = &spec.required_test_types;
    for rule in [PreMergeRule::AllCombinations, PreMergeRule::FirstPerType] {
        let merged = merge_all_vs_all(&apply_pre_merge_rule(tables.clone(), rule), required, spec.combination_cap)?;
        println!("{rule:?}: {} combinations", merged.len());
        for c in merged {
            println!("  {:?}", c.test_ids());
        }
    }
    Ok(())
}
