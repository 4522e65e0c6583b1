//! Run the multi-class reference sidecar and dispatch a batch to it.

use ehr_gateway::dispatch::{dispatch, HttpTransport, SidecarRequest};
use ehr_gateway::preprocess::FeatureRow;
use ehr_gateway::ref_classifier::{self, RuleModel};
use ehr_gateway::load_config;

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = env!("CARGO_MANIFEST_DIR");
    let model = RuleModel::load(format!("{dir}/config/models/demo_shunt.toml"))?;
    println!("model {} labels {:?}", model.name, model.labels());
    let server = ref_classifier::serve(model, 0).await?;

    let config = load_config(format!("{dir}/config/gateway.toml"))?;
    let mut spec = config
        .classifiers
        .into_iter()
        .find(|c| c.classifier_id == "demo_shunt")
        .expect("demo_shunt configured");
    spec.sidecar.port = server.addr().port();

    let row = |ids: [&str; 2], mcv, albumin, bun, micro: Option<f64>| FeatureRow {
        classifier_id: spec.classifier_id.clone(),
        values: vec![
            ("mcv".into(), Some(mcv)),
            ("albumin".into(), Some(albumin)),
            ("bun".into(), Some(bun)),
            ("microcytosis".into(), micro),
        ],
        test_ids: ids.map(String::from).to_vec(),
    };
    let rows = vec![
        row(["C-1", "H-1"], 61.0, 2.2, 6.0, Some(2.0)),
        row(["C-2", "H-1"], 63.0, 3.1, 15.0, None),
        row(["C-2", "H-2"], 70.0, 3.1, 15.0, Some(0.0)),
    ];
    println!("wire request: {}", serde_json::to_string(&SidecarRequest::from_rows(&spec, &rows))?);

    for outcome in dispatch(&spec, &rows, &HttpTransport::new()).await {
        println!("row {} -> {:?}", outcome.row_index, outcome.prediction);
    }
    server.stop().await;
    Ok(())
}
