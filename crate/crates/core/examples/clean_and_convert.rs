//! Value cleaning, unit conversion and categorical encoding.

use std::collections::BTreeMap;

use ehr_gateway::load_config;
use ehr_gateway::preprocess::{clean_numeric, encode_categorical, is_censored, UnitTable};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let config = load_config(concat!(env!("CARGO_MANIFEST_DIR"), "/config/gateway.toml"))?;
    let units = UnitTable::new(config.unit_conversions);

    for raw in ["5.2 *", "<0.1", "3.42 H", "17.35 (slight clumping)", "12.4 hemolyzed", "hemolyzed", "1.2.3"] {
        let censored = if is_censored(raw) { " censored" } else { "" };
        println!("{raw:<26} -> {:?}{censored}", clean_numeric(raw));
    }

    println!();
    let cases = [
        (1.5, "mg", "µg", None),
        (2.0, "mg/dL", "µmol/L", Some("Creatinine")),
        (265.3, "µmol/L", "mg/dL", Some("Creatinine")),
        (27.5, "g/L", "g/dL", None),
        (2.0, "mg/dL", "mmol/L", None),
    ];
    for (v, from, to, analyte) in cases {
        match units.convert(v, from, to, analyte) {
            Ok(out) => println!("{v} {from} -> {out} {to}"),
            Err(e) => println!("{v} {from} -> {e}"),
        }
    }

    println!();
    let grades: BTreeMap<String, f64> = [("absent", 0.0), ("mild", 1.0), ("marked", 2.0)]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
    for raw in ["Marked", " MILD ", "absent", "severe"] {
        println!("{raw:?} -> {:?}", encode_categorical(raw, &grades));
    }
    Ok(())
}
