//! A full desk-scale stack on ephemeral loopback ports: mock EHR serving
//! `fixtures/ehr`, one reference classifier per configured classifier, and
//! the gateway in front.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use ehr_gateway::audit::JsonlAuditStore;
use ehr_gateway::dispatch::{HttpTransport, SidecarTransport, TransportError, TransportReply};
use ehr_gateway::ehr_client::EhrClient;
use ehr_gateway::gateway::{GatewayParts, SessionLog};
use ehr_gateway::mock_ehr::{FixtureSet, MockEhr};
use ehr_gateway::preprocess::{clean_numeric, UnitTable};
use ehr_gateway::ref_classifier::{self, RuleModel};
use ehr_gateway::server::ServerHandle;
use ehr_gateway::{load_config, Gateway, GatewayConfig, Registry};
use serde_json::Value;

pub const AUTH: &str = "test-auth-code";

pub fn manifest_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

pub fn shipped_config() -> GatewayConfig {
    load_config(manifest_dir().join("config/gateway.toml")).expect("shipped config is valid")
}

pub fn fixtures() -> FixtureSet {
    FixtureSet::load_dir(manifest_dir().join("fixtures/ehr")).expect("fixtures parse")
}

pub fn model(classifier_id: &str) -> RuleModel {
    RuleModel::load(manifest_dir().join(format!("config/models/{classifier_id}.toml"))).expect("model loads")
}

fn loopback() -> SocketAddr {
    SocketAddr::from(([127, 0, 0, 1], 0))
}

/// Counts sidecar POSTs made by the gateway.
pub struct CountingTransport {
    inner: HttpTransport,
    pub hits: AtomicUsize,
}

#[async_trait]
impl SidecarTransport for CountingTransport {
    async fn post_json(&self, url: &str, body: Vec<u8>, timeout: Duration) -> Result<TransportReply, TransportError> {
        self.hits.fetch_add(1, Ordering::SeqCst);
        self.inner.post_json(url, body, timeout).await
    }
}

#[derive(Default)]
pub struct Options {
    pub rng_seed: Option<u64>,
    /// Replaces the model served for a classifier id.
    pub models: HashMap<String, RuleModel>,
    /// Points a classifier at an existing port instead of starting a
    /// reference classifier for it.
    pub sidecar_ports: HashMap<String, u16>,
    /// Applied to the configuration after ports and paths are filled in.
    pub tweak: Option<Box<dyn FnOnce(&mut GatewayConfig)>>,
}

pub struct Stack {
    pub gateway: Gateway,
    pub server: ServerHandle,
    pub mock: MockEhr,
    pub sidecars: HashMap<String, ServerHandle>,
    pub transport: Arc<CountingTransport>,
    pub config: GatewayConfig,
    pub dir: tempfile::TempDir,
    pub http: reqwest::Client,
}

impl Stack {
    pub async fn start() -> Self {
        Self::with(Options::default()).await
    }

    pub async fn with(mut options: Options) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let mock = MockEhr::start(fixtures(), AUTH, loopback()).await.unwrap();
        let mut config = shipped_config();
        config.ehr.base_url = mock.base_url();
        config.ehr.auth_code = AUTH.into();
        config.audit.path = dir.path().join("audit.jsonl");
        config.log_dir = dir.path().join("logs");
        if let Some(tweak) = options.tweak.take() {
            tweak(&mut config);
        }
        config.validate().expect("tweaked config stays valid");

        let mut sidecars = HashMap::new();
        for spec in &mut config.classifiers {
            let id = spec.classifier_id.clone();
            if let Some(port) = options.sidecar_ports.get(&id) {
                spec.sidecar.port = *port;
                continue;
            }
            let served = options.models.remove(&id).unwrap_or_else(|| model(&id));
            let handle = ref_classifier::serve(served, 0).await.unwrap();
            spec.sidecar.port = handle.addr().port();
            sidecars.insert(id, handle);
        }

        let transport = Arc::new(CountingTransport {
            inner: HttpTransport::new(),
            hits: AtomicUsize::new(0),
        });
        let gateway = Gateway::new(GatewayParts {
            registry: Registry::new(config.classifiers.iter().cloned()),
            allowed_ips: config.allowed_ips.clone(),
            ehr: EhrClient::from_config(&config.ehr),
            units: UnitTable::new(config.unit_conversions.iter().cloned()),
            transport: transport.clone(),
            audit: Arc::new(JsonlAuditStore::open(&config.audit.path).unwrap()),
            sessions: SessionLog::open(&config.log_dir).unwrap(),
            rng_seed: options.rng_seed,
        });
        let server = gateway.serve(loopback()).await.unwrap();
        Self {
            gateway,
            server,
            mock,
            sidecars,
            transport,
            config,
            dir,
            http: reqwest::Client::new(),
        }
    }

    pub fn url(&self, path: &str) -> String {
        format!("{}{}", self.server.base_url(), path)
    }

    pub fn ehr_hits(&self) -> u64 {
        self.mock.control().total_hits()
    }

    pub fn sidecar_hits(&self) -> usize {
        self.transport.hits.load(Ordering::SeqCst)
    }

    pub async fn stop_sidecar(&mut self, classifier_id: &str) {
        if let Some(handle) = self.sidecars.remove(classifier_id) {
            handle.stop().await;
        }
    }

    /// Raw POST; returns status and the body text.
    pub async fn post_raw(&self, path: &str, body: &str, forwarded_for: Option<&str>) -> (u16, String) {
        let mut request = self
            .http
            .post(self.url(path))
            .header("content-type", "application/json")
            .body(body.to_string());
        if let Some(ip) = forwarded_for {
            request = request.header("x-forwarded-for", ip);
        }
        let response = request.send().await.unwrap();
        let status = response.status().as_u16();
        (status, response.text().await.unwrap())
    }

    pub async fn predict(&self, route: &str, patient_id: &str, query_date: &str, species: &str) -> (u16, Value) {
        let body = serde_json::json!({
            "patient_id": patient_id,
            "query_date": query_date,
            "species": species,
        });
        let (status, text) = self
            .post_raw(&format!("/ml_classifier_run/{route}"), &body.to_string(), None)
            .await;
        (status, serde_json::from_str(&text).unwrap_or(Value::Null))
    }

    pub async fn admin(&self, classifier_id: &str, enabled: bool) -> u16 {
        self.post_raw(
            &format!("/admin/route/{classifier_id}"),
            &serde_json::json!({ "enabled": enabled }).to_string(),
            None,
        )
        .await
        .0
    }

    /// Text of the audit store and every session log file.
    pub fn persisted_text(&self) -> String {
        let mut text = std::fs::read_to_string(&self.config.audit.path).unwrap_or_default();
        let mut paths: Vec<_> = std::fs::read_dir(&self.config.log_dir)
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        paths.sort();
        for path in paths {
            text.push_str(&std::fs::read_to_string(path).unwrap());
        }
        text
    }
}

/// `results[*].test_ids` as sets.
pub fn id_sets(body: &Value) -> Vec<BTreeSet<String>> {
    body["results"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| {
            r["test_ids"]
                .as_array()
                .unwrap()
                .iter()
                .map(|v| v.as_str().unwrap().to_string())
                .collect()
        })
        .collect()
}

/// Every analyte value and species string in the fixture corpus, in the
/// forms they could take if leaked: the raw text and the cleaned number.
pub fn fixture_secrets() -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    for record in fixtures().records {
        out.insert(record.species.clone());
        for analyte in &record.analytes {
            let raw = analyte.raw_value.trim();
            if raw.chars().any(|c| c.is_ascii_digit()) {
                out.insert(raw.to_string());
            }
            if let Some(v) = clean_numeric(raw) {
                if v.fract() != 0.0 {
                    out.insert(v.to_string());
                }
            }
        }
    }
    out
}

/// Occurrences of `needle` in `haystack` that are not part of a longer
/// number, e.g. `6.5` inside the timestamp fraction `:56.512345Z`.
pub fn standalone_occurrences(haystack: &str, needle: &str) -> usize {
    let numeric = needle.starts_with(|c: char| c.is_ascii_digit());
    let bytes = haystack.as_bytes();
    haystack
        .match_indices(needle)
        .filter(|(i, m)| {
            if !numeric {
                return true;
            }
            let before = i.checked_sub(1).map(|j| bytes[j]);
            let after = bytes.get(i + m.len()).copied();
            let digitish = |b: Option<u8>| b.is_some_and(|b| b.is_ascii_digit() || b == b'.');
            !digitish(before) && !after.is_some_and(|b| b.is_ascii_digit())
        })
        .count()
}

pub fn median(mut samples: Vec<Duration>) -> Duration {
    samples.sort();
    let n = samples.len();
    if n % 2 == 1 {
        samples[n / 2]
    } else {
        (samples[n / 2 - 1] + samples[n / 2]) / 2
    }
}

pub fn windows_for(config: &GatewayConfig, classifier_id: &str) -> BTreeMap<String, ehr_gateway::registry::FetchWindow> {
    config
        .classifiers
        .iter()
        .find(|c| c.classifier_id == classifier_id)
        .unwrap()
        .windows
        .clone()
}

pub struct GoldenCase {
    pub raw: String,
    pub from: String,
    pub to: String,
    pub analyte: Option<String>,
    /// `None` means the value must come out Missing.
    pub expected: Option<f64>,
    pub note: String,
}

/// `fixtures/golden/clean_convert.tsv`. Fields are not trimmed: leading and
/// trailing spaces in `raw` are part of the case.
pub fn golden_cases() -> Vec<GoldenCase> {
    let text = std::fs::read_to_string(manifest_dir().join("fixtures/golden/clean_convert.tsv")).unwrap();
    text.lines()
        .filter(|l| !l.starts_with('#'))
        .map(|line| {
            let f: Vec<&str> = line.split('\t').collect();
            assert_eq!(f.len(), 6, "{line:?}");
            GoldenCase {
                raw: f[0].to_string(),
                from: f[1].to_string(),
                to: f[2].to_string(),
                analyte: (f[3] != "-").then(|| f[3].to_string()),
                expected: (f[4] != "missing").then(|| f[4].parse().unwrap()),
                note: f[5].to_string(),
            }
        })
        .collect()
}

/// Clean then convert, the way a numeric feature is built.
pub fn golden_actual(case: &GoldenCase, units: &UnitTable) -> Option<f64> {
    clean_numeric(&case.raw).and_then(|v| units.convert(v, &case.from, &case.to, case.analyte.as_deref()).ok())
}

pub fn shipped_units() -> UnitTable {
    UnitTable::new(shipped_config().unit_conversions)
}
