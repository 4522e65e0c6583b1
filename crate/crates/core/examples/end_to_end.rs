//! The whole chain on loopback: mock EHR, one reference classifier per
//! configured classifier, and the gateway. Sends a few requests the way an
//! EHR would and prints the responses and one session log.

use std::net::SocketAddr;

use ehr_gateway::mock_ehr::{FixtureSet, MockEhr};
use ehr_gateway::ref_classifier::{self, RuleModel};
use ehr_gateway::{load_config, Gateway};

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = env!("CARGO_MANIFEST_DIR");
    let any = SocketAddr::from(([127, 0, 0, 1], 0));
    let work = tempfile::tempdir()?;

    let mut config = load_config(format!("{dir}/config/gateway.toml"))?;
    let mock = MockEhr::start(FixtureSet::load_dir(format!("{dir}/fixtures/ehr"))?, &config.ehr.auth_code, any).await?;
    config.ehr.base_url = mock.base_url();
    config.audit.path = work.path().join("audit.jsonl");
    config.log_dir = work.path().join("logs");

    let mut sidecars = Vec::new();
    for spec in &mut config.classifiers {
        let model = RuleModel::load(format!("{dir}/config/models/{}.toml", spec.classifier_id))?;
        let server = ref_classifier::serve(model, 0).await?;
        spec.sidecar.port = server.addr().port();
        sidecars.push(server);
    }

    let gateway = Gateway::from_config(&config, Some(7))?;
    let server = gateway.serve(any).await?;
    let http = reqwest::Client::new();
    let mut last_session = String::new();
    for (route, patient, species) in [
        ("lepto", "P-FIG4", "Canine"),
        ("shunt", "P-FIG4", "Canine"),
        ("addisons", "P-FIG4", "Canine"),
        ("lepto", "P-NOCBC", "Canine"),
        ("lepto", "P-FEL", "Feline"),
        ("lepto", "P-MANY", "Canine"),
    ] {
        let response = http
            .post(format!("{}/ml_classifier_run/{route}", server.base_url()))
            .json(&serde_json::json!({ "patient_id": patient, "query_date": "2024-06-27", "species": species }))
            .send()
            .await?;
        let text = response.text().await?;
        println!("{route} {patient}\n{text}\n");
        let body: serde_json::Value = serde_json::from_str(&text)?;
        if route == "lepto" && patient == "P-FIG4" {
            last_session = body["session_id"].as_str().unwrap_or_default().to_string();
        }
    }

    println!("session {last_session}:");
    for event in gateway.sessions().read_session(&last_session)? {
        println!("  {} {:<10} {}", event.ts, event.step, event.detail);
    }
    println!("\naudit store:\n{}", std::fs::read_to_string(&config.audit.path)?);

    server.stop().await;
    for s in sidecars {
        s.stop().await;
    }
    mock.stop().await;
    Ok(())
}
