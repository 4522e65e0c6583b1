//! Stand-in for the EHR lab-data endpoint.
//!
//! Serves fixture records over the same contract [`crate::ehr_client`]
//! consumes, checks the auth header, counts hits per section and can inject
//! latency or faults per section. `GET /__stats` reports the counters.

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use axum::extract::{Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use chrono::NaiveDate;
use quick_xml::escape::escape;
use serde::{Deserialize, Serialize};

use crate::server::ServerHandle;
use crate::ehr_client::{parse_lab_xml, LabRecord, XmlError, AUTH_HEADER, DATETIME_FORMAT, DATE_FORMAT};

/// Writes records in the lab-result XML schema.
pub fn serialize_lab_xml(patient_id: &str, species: &str, records: &[LabRecord]) -> String {
    let mut out = String::from("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    out.push_str(&format!(
        "<LabResults patient_id=\"{}\" species=\"{}\">\n",
        escape(patient_id),
        escape(species)
    ));
    for r in records {
        out.push_str(&format!(
            "  <Test test_id=\"{}\" section=\"{}\" test_type=\"{}\" status=\"{}\" datetime=\"{}\">\n",
            escape(r.test_id.as_str()),
            escape(r.section.as_str()),
            escape(r.test_type.as_str()),
            r.report_status.as_str(),
            r.result_datetime.format(DATETIME_FORMAT)
        ));
        for a in &r.analytes {
            out.push_str(&format!(
                "    <Analyte name=\"{}\" unit=\"{}\">{}</Analyte>\n",
                escape(a.name.as_str()),
                escape(a.unit.as_str()),
                escape(a.raw_value.as_str())
            ));
        }
        out.push_str("  </Test>\n");
    }
    out.push_str("</LabResults>\n");
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fault {
    Status(u16),
    MalformedBody,
}

#[derive(Debug, thiserror::Error)]
pub enum FixtureError {
    #[error("fixture I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("fixture {file}: {source}")]
    Xml {
        file: String,
        #[source]
        source: XmlError,
    },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FixtureSet {
    pub records: Vec<LabRecord>,
    pub latency: HashMap<String, Duration>,
    pub default_latency: Duration,
    pub faults: HashMap<String, Fault>,
}

impl FixtureSet {
    pub fn new(records: Vec<LabRecord>) -> Self {
        Self {
            records,
            ..Self::default()
        }
    }

    /// Loads every `*.xml` file in `dir`, in file-name order.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self, FixtureError> {
        let mut paths: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "xml"))
            .collect();
        paths.sort();
        let mut records = Vec::new();
        for path in paths {
            let bytes = std::fs::read(&path)?;
            let parsed = parse_lab_xml(&bytes).map_err(|source| FixtureError::Xml {
                file: path.display().to_string(),
                source,
            })?;
            records.extend(parsed);
        }
        Ok(Self::new(records))
    }

    pub fn latency_for(&self, section: &str) -> Duration {
        self.latency.get(section).copied().unwrap_or(self.default_latency)
    }
}

#[derive(Debug, Clone, Deserialize)]
pub struct LabQuery {
    pub patient_id: String,
    pub section: String,
    pub start: String,
    pub end: String,
}

/// Response to one lab-data request, before latency is applied.
pub fn serve_labdata(
    fixtures: &FixtureSet,
    auth_code: &str,
    presented_auth: Option<&str>,
    query: &LabQuery,
) -> (StatusCode, String) {
    if presented_auth != Some(auth_code) {
        return (StatusCode::UNAUTHORIZED, "missing or invalid authorization code".into());
    }
    if let Some(fault) = fixtures.faults.get(&query.section) {
        return match fault {
            Fault::Status(code) => (
                StatusCode::from_u16(*code).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR),
                "injected fault".into(),
            ),
            Fault::MalformedBody => (StatusCode::OK, "<LabResults><Test></LabResults".into()),
        };
    }
    let parse = |s: &str| NaiveDate::parse_from_str(s, DATE_FORMAT);
    let (Ok(start), Ok(end)) = (parse(&query.start), parse(&query.end)) else {
        return (StatusCode::BAD_REQUEST, "start and end must be YYYY-MM-DD".into());
    };
    let matching: Vec<LabRecord> = fixtures
        .records
        .iter()
        .filter(|r| {
            let day = r.result_datetime.date();
            r.patient_id == query.patient_id && r.section == query.section && start <= day && day <= end
        })
        .cloned()
        .collect();
    let species = fixtures
        .records
        .iter()
        .find(|r| r.patient_id == query.patient_id)
        .map(|r| r.species.as_str())
        .unwrap_or("");
    (StatusCode::OK, serialize_lab_xml(&query.patient_id, species, &matching))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockStats {
    pub total: u64,
    pub by_section: BTreeMap<String, u64>,
}

#[derive(Debug)]
struct MockState {
    fixtures: RwLock<FixtureSet>,
    auth_code: String,
    total: AtomicU64,
    by_section: Mutex<BTreeMap<String, u64>>,
}

impl MockState {
    fn stats(&self) -> MockStats {
        MockStats {
            total: self.total.load(Ordering::SeqCst),
            by_section: self.by_section.lock().map(|m| m.clone()).unwrap_or_default(),
        }
    }
}

async fn labdata(
    State(state): State<Arc<MockState>>,
    headers: HeaderMap,
    query: Result<Query<LabQuery>, axum::extract::rejection::QueryRejection>,
) -> Response {
    state.total.fetch_add(1, Ordering::SeqCst);
    let Ok(Query(query)) = query else {
        return (StatusCode::BAD_REQUEST, "patient_id, section, start and end are required").into_response();
    };
    if let Ok(mut counts) = state.by_section.lock() {
        *counts.entry(query.section.clone()).or_default() += 1;
    }
    let presented = headers.get(AUTH_HEADER).and_then(|v| v.to_str().ok());
    let (status, body, latency) = {
        let fixtures = state.fixtures.read().unwrap_or_else(|p| p.into_inner());
        let (status, body) = serve_labdata(&fixtures, &state.auth_code, presented, &query);
        (status, body, fixtures.latency_for(&query.section))
    };
    if status != StatusCode::UNAUTHORIZED && !latency.is_zero() {
        tokio::time::sleep(latency).await;
    }
    (status, [(axum::http::header::CONTENT_TYPE, "application/xml")], body).into_response()
}

async fn stats(State(state): State<Arc<MockState>>) -> Json<MockStats> {
    Json(state.stats())
}

pub fn router(fixtures: FixtureSet, auth_code: impl Into<String>) -> (Router, MockEhrControl) {
    let state = Arc::new(MockState {
        fixtures: RwLock::new(fixtures),
        auth_code: auth_code.into(),
        total: AtomicU64::new(0),
        by_section: Mutex::default(),
    });
    let router = Router::new()
        .route("/labdata", get(labdata))
        .route("/__stats", get(stats))
        .with_state(Arc::clone(&state));
    (router, MockEhrControl { state })
}

/// Test-side handle for counters, faults and latency of a running mock.
#[derive(Debug, Clone)]
pub struct MockEhrControl {
    state: Arc<MockState>,
}

impl MockEhrControl {
    pub fn stats(&self) -> MockStats {
        self.state.stats()
    }

    pub fn total_hits(&self) -> u64 {
        self.state.total.load(Ordering::SeqCst)
    }

    pub fn set_fault(&self, section: &str, fault: Option<Fault>) {
        let mut fixtures = self.state.fixtures.write().unwrap_or_else(|p| p.into_inner());
        match fault {
            Some(f) => fixtures.faults.insert(section.to_string(), f),
            None => fixtures.faults.remove(section),
        };
    }

    pub fn set_latency(&self, section: &str, latency: Duration) {
        let mut fixtures = self.state.fixtures.write().unwrap_or_else(|p| p.into_inner());
        fixtures.latency.insert(section.to_string(), latency);
    }

    pub fn set_default_latency(&self, latency: Duration) {
        self.state.fixtures.write().unwrap_or_else(|p| p.into_inner()).default_latency = latency;
    }

    pub fn records(&self) -> Vec<LabRecord> {
        self.state.fixtures.read().unwrap_or_else(|p| p.into_inner()).records.clone()
    }
}

/// A mock EHR bound to a local port.
#[derive(Debug)]
pub struct MockEhr {
    server: ServerHandle,
    control: MockEhrControl,
}

impl MockEhr {
    pub async fn start(fixtures: FixtureSet, auth_code: &str, addr: SocketAddr) -> std::io::Result<Self> {
        let (router, control) = router(fixtures, auth_code);
        let server = ServerHandle::spawn(addr, router).await?;
        Ok(Self { server, control })
    }

    pub fn addr(&self) -> SocketAddr {
        self.server.addr()
    }

    pub fn base_url(&self) -> String {
        self.server.base_url()
    }

    pub fn control(&self) -> &MockEhrControl {
        &self.control
    }

    pub async fn stop(self) {
        self.server.stop().await;
    }

    pub async fn wait(self) {
        self.server.wait().await;
    }
}
