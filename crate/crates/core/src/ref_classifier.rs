//! Deterministic rule-based classifier sidecar speaking the dispatch wire
//! protocol.
//!
//! A model is an ordered list of labelled threshold rules plus a fallback
//! label; the first rule that holds decides the row. A binary model is one
//! rule labelled `"1"` with fallback `"0"`.

use std::collections::BTreeSet;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use crate::dispatch::{SidecarRequest, SidecarResponse, WirePrediction, PROTOCOL_VERSION};
use crate::server::ServerHandle;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Comparator {
    #[serde(rename = ">")]
    Gt,
    #[serde(rename = ">=")]
    Ge,
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = "<=")]
    Le,
}

impl Comparator {
    pub fn holds(self, value: f64, bound: f64) -> bool {
        match self {
            Comparator::Gt => value > bound,
            Comparator::Ge => value >= bound,
            Comparator::Lt => value < bound,
            Comparator::Le => value <= bound,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Threshold {
    pub feature: String,
    pub comparator: Comparator,
    pub bound: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Combine {
    #[default]
    All,
    Any,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelRule {
    pub label: String,
    #[serde(default)]
    pub combine: Combine,
    pub thresholds: Vec<Threshold>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleModel {
    pub name: String,
    pub rules: Vec<LabelRule>,
    pub default_label: String,
}

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("cannot read model {0}: {1}")]
    Io(String, #[source] std::io::Error),
    #[error("model parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid model: {0}")]
    Invalid(String),
}

impl RuleModel {
    pub fn from_toml_str(text: &str) -> Result<Self, ModelError> {
        let model: RuleModel = toml::from_str(text)?;
        model.validate()?;
        Ok(model)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| ModelError::Io(path.display().to_string(), e))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let labels = self.labels();
        if self.rules.is_empty() {
            return Err(ModelError::Invalid("at least one rule is required".into()));
        }
        if labels.iter().any(|l| l.is_empty() || l == "-1") {
            return Err(ModelError::Invalid("labels must be non-empty and not \"-1\"".into()));
        }
        if self
            .rules
            .iter()
            .flat_map(|r| &r.thresholds)
            .any(|t| t.feature.is_empty() || !t.bound.is_finite())
        {
            return Err(ModelError::Invalid("thresholds need a feature and a finite bound".into()));
        }
        Ok(())
    }

    /// Every label the model can emit.
    pub fn labels(&self) -> BTreeSet<String> {
        self.rules
            .iter()
            .map(|r| r.label.clone())
            .chain(std::iter::once(self.default_label.clone()))
            .collect()
    }

    pub fn referenced_features(&self) -> BTreeSet<&str> {
        self.rules
            .iter()
            .flat_map(|r| &r.thresholds)
            .map(|t| t.feature.as_str())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PredictError {
    #[error("unsupported protocol_version `{0}`")]
    UnsupportedVersion(String),
    #[error("model feature `{0}` is not in the request feature list")]
    MissingFeature(String),
    #[error("row {row_index} has {got} values, expected {expected}")]
    RowWidth { row_index: usize, got: usize, expected: usize },
    #[error("malformed request: {0}")]
    Malformed(String),
}

/// Scores every row. Pure in `(request, model)`.
pub fn predict(request: &SidecarRequest, model: &RuleModel) -> Result<SidecarResponse, PredictError> {
    if request.protocol_version != PROTOCOL_VERSION {
        return Err(PredictError::UnsupportedVersion(request.protocol_version.clone()));
    }
    let position = |name: &str| request.features.iter().position(|f| f == name);
    for feature in model.referenced_features() {
        if position(feature).is_none() {
            return Err(PredictError::MissingFeature(feature.to_string()));
        }
    }
    let mut predictions = Vec::with_capacity(request.rows.len());
    for row in &request.rows {
        if row.values.len() != request.features.len() {
            return Err(PredictError::RowWidth {
                row_index: row.row_index,
                got: row.values.len(),
                expected: request.features.len(),
            });
        }
        let value = |name: &str| position(name).and_then(|i| row.values[i]);
        let null = model.referenced_features().into_iter().find(|f| value(f).is_none());
        let prediction = match null {
            Some(feature) => WirePrediction {
                row_index: row.row_index,
                prediction: None,
                error: Some(format!("null value for {feature}")),
            },
            None => {
                let holds = |t: &Threshold| value(&t.feature).is_some_and(|v| t.comparator.holds(v, t.bound));
                let label = model
                    .rules
                    .iter()
                    .find(|rule| match rule.combine {
                        Combine::All => rule.thresholds.iter().all(holds),
                        Combine::Any => rule.thresholds.iter().any(holds),
                    })
                    .map_or(&model.default_label, |rule| &rule.label);
                WirePrediction {
                    row_index: row.row_index,
                    prediction: Some(label.clone()),
                    error: None,
                }
            }
        };
        predictions.push(prediction);
    }
    Ok(SidecarResponse {
        protocol_version: PROTOCOL_VERSION.to_string(),
        predictions,
    })
}

async fn handle(State(model): State<Arc<RuleModel>>, body: Bytes) -> Response {
    let request: SidecarRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return bad_request(PredictError::Malformed(e.to_string())),
    };
    match predict(&request, &model) {
        Ok(response) => Json(response).into_response(),
        Err(e) => bad_request(e),
    }
}

fn bad_request(e: PredictError) -> Response {
    (StatusCode::BAD_REQUEST, Json(serde_json::json!({ "error": e.to_string() }))).into_response()
}

/// Router answering `POST /predict`.
pub fn router(model: RuleModel) -> Router {
    Router::new().route("/predict", post(handle)).with_state(Arc::new(model))
}

/// Starts the sidecar on `127.0.0.1:port` (0 picks a free port).
pub async fn serve(model: RuleModel, port: u16) -> std::io::Result<ServerHandle> {
    ServerHandle::spawn(SocketAddr::from(([127, 0, 0, 1], port)), router(model)).await
}
