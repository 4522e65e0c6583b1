//! HTTP ingress and the per-request pipeline:
//! security gate, fetch, preprocess, dispatch, respond, audit.
//!
//! Transport and security problems are HTTP statuses (400, 403, 404, 503).
//! Everything that goes wrong inside the clinical pipeline becomes an in-band
//! `"-1"` result carrying an [`ErrorCode`].

mod security;
mod session;

use std::collections::BTreeMap;
use std::net::{IpAddr, SocketAddr};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{ConnectInfo, Path, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use chrono::NaiveDate;
use rand::rngs::StdRng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

pub use security::{effective_client_ip, is_loopback_origin, security_gate, GateDecision, FORWARDED_FOR};
pub use session::{format_session_id, new_session, Session, SessionEvent, SessionLog};

use crate::audit::{format_timestamp, AuditClock, AuditError, AuditKey, AuditRecord, AuditStore, JsonlAuditStore};
use crate::dispatch::{dispatch, DispatchFailure, HttpTransport, SidecarTransport};
use crate::ehr_client::{compute_fetch_window, DateRange, EhrClient, FetchError, DATE_FORMAT};
use crate::preprocess::{prepare_rows, PreprocessError, UnitTable};
use crate::registry::{ClassifierSpec, GatewayConfig, Registry};
use crate::server::ServerHandle;

pub const ERROR_PREDICTION: &str = "-1";

/// Closed set of codes attached to `"-1"` results and session logs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ErrorCode {
    InsufficientData,
    ClassifierFailure,
    ClassifierTimeout,
    EhrFetchFailure,
    CombinationCapExceeded,
}

impl ErrorCode {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCode::InsufficientData => "INSUFFICIENT_DATA",
            ErrorCode::ClassifierFailure => "CLASSIFIER_FAILURE",
            ErrorCode::ClassifierTimeout => "CLASSIFIER_TIMEOUT",
            ErrorCode::EhrFetchFailure => "EHR_FETCH_FAILURE",
            ErrorCode::CombinationCapExceeded => "COMBINATION_CAP_EXCEEDED",
        }
    }
}

/// Why a pipeline stage gave up.
#[derive(Debug, thiserror::Error)]
pub enum StageFailure {
    #[error("species not eligible for this classifier")]
    SpeciesMismatch,
    #[error(transparent)]
    Fetch(#[from] FetchError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Dispatch(#[from] DispatchFailure),
    #[error(transparent)]
    Audit(#[from] AuditError),
}

pub fn classify_error(failure: &StageFailure) -> ErrorCode {
    match failure {
        StageFailure::SpeciesMismatch => ErrorCode::InsufficientData,
        StageFailure::Fetch(_) => ErrorCode::EhrFetchFailure,
        StageFailure::Preprocess(PreprocessError::Insufficient { .. }) => ErrorCode::InsufficientData,
        StageFailure::Preprocess(PreprocessError::CapExceeded(_)) => ErrorCode::CombinationCapExceeded,
        StageFailure::Dispatch(DispatchFailure::Timeout(_)) => ErrorCode::ClassifierTimeout,
        StageFailure::Dispatch(DispatchFailure::Failure(_)) => ErrorCode::ClassifierFailure,
        StageFailure::Audit(_) => ErrorCode::ClassifierFailure,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRequest {
    pub patient_id: String,
    pub query_date: NaiveDate,
    pub species: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPredictionRequest {
    patient_id: String,
    query_date: String,
    species: String,
}

impl PredictionRequest {
    pub fn from_json(body: &[u8]) -> Result<Self, String> {
        let raw: RawPredictionRequest = serde_json::from_slice(body).map_err(|e| e.to_string())?;
        if raw.patient_id.trim().is_empty() {
            return Err("patient_id must be non-empty".into());
        }
        let query_date = NaiveDate::parse_from_str(&raw.query_date, DATE_FORMAT)
            .map_err(|_| "query_date must be a valid YYYY-MM-DD date".to_string())?;
        Ok(Self {
            patient_id: raw.patient_id,
            query_date,
            species: raw.species,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResultEntry {
    pub prediction: String,
    pub test_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first_run_timestamp: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_code: Option<ErrorCode>,
}

impl ResultEntry {
    pub fn error(code: ErrorCode, test_ids: Vec<String>) -> Self {
        Self {
            prediction: ERROR_PREDICTION.to_string(),
            test_ids,
            first_run_timestamp: None,
            error_code: Some(code),
        }
    }

    pub fn is_error(&self) -> bool {
        self.prediction == ERROR_PREDICTION
    }
}

/// Body returned to the EHR. Field order is part of the contract.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatewayResponse {
    pub classifier_id: String,
    pub session_id: String,
    pub eligible: bool,
    pub results: Vec<ResultEntry>,
}

impl GatewayResponse {
    fn new(classifier_id: &str, session_id: &str, results: Vec<ResultEntry>) -> Self {
        Self {
            classifier_id: classifier_id.to_string(),
            session_id: session_id.to_string(),
            eligible: results.iter().any(|r| !r.is_error()),
            results,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum HttpError {
    #[error("forbidden")]
    Forbidden,
    #[error("unknown route `{0}`")]
    NotFound(String),
    #[error("route `{0}` is disabled")]
    Unavailable(String),
    #[error("bad request: {0}")]
    BadRequest(String),
}

impl HttpError {
    pub fn status(&self) -> StatusCode {
        match self {
            HttpError::Forbidden => StatusCode::FORBIDDEN,
            HttpError::NotFound(_) => StatusCode::NOT_FOUND,
            HttpError::Unavailable(_) => StatusCode::SERVICE_UNAVAILABLE,
            HttpError::BadRequest(_) => StatusCode::BAD_REQUEST,
        }
    }
}

impl IntoResponse for HttpError {
    fn into_response(self) -> Response {
        (self.status(), Json(serde_json::json!({ "error": self.to_string() }))).into_response()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error(transparent)]
    Audit(#[from] AuditError),
    #[error("cannot open session log directory: {0}")]
    SessionLog(#[from] std::io::Error),
}

/// Everything a gateway needs; [`Gateway::from_config`] fills it from a
/// configuration file, tests and examples can assemble it directly.
pub struct GatewayParts {
    pub registry: Registry,
    pub allowed_ips: Vec<IpAddr>,
    pub ehr: EhrClient,
    pub units: UnitTable,
    pub transport: Arc<dyn SidecarTransport>,
    pub audit: Arc<dyn AuditStore>,
    pub sessions: SessionLog,
    pub rng_seed: Option<u64>,
}

struct Inner {
    registry: Registry,
    allowed_ips: Vec<IpAddr>,
    ehr: EhrClient,
    units: UnitTable,
    transport: Arc<dyn SidecarTransport>,
    audit: Arc<dyn AuditStore>,
    clock: AuditClock,
    sessions: SessionLog,
    rng: Mutex<StdRng>,
}

/// Cheap to clone; clones share all state.
#[derive(Clone)]
pub struct Gateway {
    inner: Arc<Inner>,
}

impl Gateway {
    pub fn new(parts: GatewayParts) -> Self {
        let rng = match parts.rng_seed {
            Some(seed) => StdRng::seed_from_u64(seed),
            None => StdRng::from_entropy(),
        };
        Self {
            inner: Arc::new(Inner {
                registry: parts.registry,
                allowed_ips: parts.allowed_ips,
                ehr: parts.ehr,
                units: parts.units,
                transport: parts.transport,
                audit: parts.audit,
                clock: AuditClock::default(),
                sessions: parts.sessions,
                rng: Mutex::new(rng),
            }),
        }
    }

    pub fn from_config(config: &GatewayConfig, rng_seed: Option<u64>) -> Result<Self, GatewayError> {
        Ok(Self::new(GatewayParts {
            registry: Registry::new(config.classifiers.iter().cloned()),
            allowed_ips: config.allowed_ips.clone(),
            ehr: EhrClient::from_config(&config.ehr),
            units: UnitTable::new(config.unit_conversions.iter().cloned()),
            transport: Arc::new(HttpTransport::new()),
            audit: Arc::new(JsonlAuditStore::open(&config.audit.path)?),
            sessions: SessionLog::open(&config.log_dir)?,
            rng_seed,
        }))
    }

    pub fn registry(&self) -> &Registry {
        &self.inner.registry
    }

    pub fn sessions(&self) -> &SessionLog {
        &self.inner.sessions
    }

    pub fn router(&self) -> Router {
        Router::new()
            .route("/ml_classifier_run/:route", post(run_classifier))
            .route("/admin/route/:classifier_id", post(admin_route))
            .with_state(self.clone())
    }

    pub async fn serve(&self, addr: SocketAddr) -> std::io::Result<ServerHandle> {
        ServerHandle::spawn(addr, self.router()).await
    }

    fn new_session(&self) -> Session {
        let mut rng = self.inner.rng.lock().unwrap_or_else(|p| p.into_inner());
        new_session(&mut *rng)
    }

    /// Runs the pipeline for one classifier route. The caller has already
    /// passed the security gate.
    pub async fn handle_prediction(
        &self,
        route: &str,
        request: &PredictionRequest,
    ) -> Result<GatewayResponse, HttpError> {
        let registry = &self.inner.registry;
        let spec = registry
            .by_route(route)
            .ok_or_else(|| HttpError::NotFound(route.to_string()))?;
        if registry.is_enabled(&spec.classifier_id) != Some(true) {
            return Err(HttpError::Unavailable(route.to_string()));
        }
        Ok(self.run_pipeline(spec, request).await)
    }

    async fn run_pipeline(&self, spec: &ClassifierSpec, request: &PredictionRequest) -> GatewayResponse {
        let sessions = &self.inner.sessions;
        let mut session = self.new_session();
        session.log(
            sessions,
            "start",
            format!("classifier={} query_date={}", spec.classifier_id, request.query_date.format(DATE_FORMAT)),
        );

        let results = match self.stages(spec, request, &mut session).await {
            Ok(results) => results,
            Err((failure, reached)) => {
                let code = classify_error(&failure);
                session.log(sessions, "error", format!("{}: {failure}", code.as_str()));
                for step in ["fetch", "preprocess", "dispatch"].iter().skip(reached) {
                    session.log(sessions, step, format!("not completed: {}", code.as_str()));
                }
                vec![ResultEntry::error(code, Vec::new())]
            }
        };

        let errors = results.iter().filter(|r| r.is_error()).count();
        session.log(
            sessions,
            "respond",
            format!("{} results, {} errors", results.len(), errors),
        );
        let response = GatewayResponse::new(&spec.classifier_id, &session.session_id, results);
        self.store_results(spec, request, &response, &mut session);
        session.log(sessions, "end", "");
        response
    }

    /// Fetch, preprocess and dispatch. On failure also returns how many of
    /// those three stages were logged, so the rest can be marked skipped.
    async fn stages(
        &self,
        spec: &ClassifierSpec,
        request: &PredictionRequest,
        session: &mut Session,
    ) -> Result<Vec<ResultEntry>, (StageFailure, usize)> {
        let sessions = &self.inner.sessions;
        if !spec.species.contains(&request.species) {
            return Err((StageFailure::SpeciesMismatch, 0));
        }

        let windows: BTreeMap<String, DateRange> = spec
            .windows
            .iter()
            .map(|(section, w)| (section.clone(), compute_fetch_window(request.query_date, *w)))
            .collect();
        let fetched = self
            .inner
            .ehr
            .fetch_sections(&request.patient_id, &windows)
            .await
            .map_err(|e| (e.into(), 0))?;
        let counts: Vec<String> = fetched
            .by_section
            .iter()
            .map(|(s, r)| format!("{s}={}", r.len()))
            .collect();
        session.log(
            sessions,
            "fetch",
            format!("sections [{}], {} dropped outside window", counts.join(" "), fetched.dropped),
        );

        let prepared = prepare_rows(fetched.into_records(), spec, &self.inner.units).map_err(|e| (e.into(), 1))?;
        let mut detail = format!("{} combinations, {} sufficient rows", prepared.combinations, prepared.rows.len());
        for warning in &prepared.warnings {
            detail.push_str("; ");
            detail.push_str(&warning.to_string());
        }
        session.log(sessions, "preprocess", detail);

        let outcomes = dispatch(spec, &prepared.rows, self.inner.transport.as_ref()).await;
        let failed = outcomes.iter().filter(|o| o.prediction.is_err()).count();
        session.log(
            sessions,
            "dispatch",
            format!("{} rows sent, {} failed", outcomes.len(), failed),
        );

        let mut results = Vec::with_capacity(outcomes.len());
        for (row, outcome) in prepared.rows.iter().zip(outcomes) {
            match outcome.prediction {
                Ok(label) => {
                    let key = AuditKey::new(&spec.classifier_id, &request.patient_id, row.test_ids.iter().cloned());
                    let first_run = match self.inner.audit.lookup_first_run(&key) {
                        Ok(Some(ts)) => ts,
                        Ok(None) => self.inner.clock.now(),
                        Err(e) => {
                            let failure = StageFailure::Audit(e);
                            session.log(
                                sessions,
                                "warning",
                                format!("{}: first-run lookup failed: {failure}", classify_error(&failure).as_str()),
                            );
                            self.inner.clock.now()
                        }
                    };
                    results.push(ResultEntry {
                        prediction: label,
                        test_ids: row.test_ids.clone(),
                        first_run_timestamp: Some(format_timestamp(&first_run)),
                        error_code: None,
                    });
                }
                Err(failure) => {
                    let failure = StageFailure::Dispatch(failure);
                    let code = classify_error(&failure);
                    session.log(
                        sessions,
                        "error",
                        format!("row {}: {}: {failure}", outcome.row_index, code.as_str()),
                    );
                    results.push(ResultEntry::error(code, row.test_ids.clone()));
                }
            }
        }
        Ok(results)
    }

    /// Stage 6. Error entries are not clinical results and are only logged.
    fn store_results(
        &self,
        spec: &ClassifierSpec,
        request: &PredictionRequest,
        response: &GatewayResponse,
        session: &mut Session,
    ) {
        let sessions = &self.inner.sessions;
        let mut stored = 0;
        for entry in response.results.iter().filter(|r| !r.is_error()) {
            let Some(first_run) = entry
                .first_run_timestamp
                .as_deref()
                .and_then(|t| chrono::DateTime::parse_from_rfc3339(t).ok())
            else {
                continue;
            };
            let first_run = first_run.with_timezone(&chrono::Utc);
            let record = AuditRecord {
                classifier_id: spec.classifier_id.clone(),
                patient_id: request.patient_id.clone(),
                test_ids: entry.test_ids.clone(),
                prediction: entry.prediction.clone(),
                first_run_timestamp: first_run,
                session_id: response.session_id.clone(),
                recorded_at: self.inner.clock.now().max(first_run),
            };
            match self.inner.audit.store_result(record) {
                Ok(_) => stored += 1,
                Err(e) => session.log(sessions, "warning", format!("audit write failed: {e}")),
            }
        }
        session.log(sessions, "audit", format!("{stored} results stored"));
    }
}

async fn run_classifier(
    State(gateway): State<Gateway>,
    ConnectInfo(peer): ConnectInfo<SocketAddr>,
    Path(route): Path<String>,
    headers: HeaderMap,
    body: Bytes,
) -> Result<Json<GatewayResponse>, HttpError> {
    if security_gate(peer.ip(), &headers, &gateway.inner.allowed_ips) == GateDecision::Deny403 {
        tracing::warn!(peer = %peer.ip(), "request denied by allowlist");
        return Err(HttpError::Forbidden);
    }
    let registry = gateway.registry();
    let spec = registry
        .by_route(&route)
        .ok_or_else(|| HttpError::NotFound(route.clone()))?;
    if registry.is_enabled(&spec.classifier_id) != Some(true) {
        return Err(HttpError::Unavailable(route));
    }
    let request = PredictionRequest::from_json(&body).map_err(HttpError::BadRequest)?;
    gateway.handle_prediction(&route, &request).await.map(Json)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RouteToggle {
    enabled: bool,
}

async fn admin_route(
    State(gateway): State<Gateway>,
    ConnectInfo(peer): ConnectInfo<SocketAddr>,
    Path(classifier_id): Path<String>,
    headers: HeaderMap,
    body: Bytes,
) -> Result<Json<serde_json::Value>, HttpError> {
    if !is_loopback_origin(peer.ip(), &headers) {
        return Err(HttpError::Forbidden);
    }
    let toggle: RouteToggle = serde_json::from_slice(&body).map_err(|e| HttpError::BadRequest(e.to_string()))?;
    let enabled = gateway
        .registry()
        .set_route_enabled(&classifier_id, toggle.enabled)
        .map_err(|_| HttpError::NotFound(classifier_id.clone()))?;
    tracing::info!(classifier_id, enabled, "route toggled");
    Ok(Json(serde_json::json!({ "classifier_id": classifier_id, "enabled": enabled })))
}
