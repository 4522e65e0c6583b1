//! Sidecar dispatch over loopback HTTP.
//!
//! Wire protocol, version "1":
//!
//! ```text
//! POST http://127.0.0.1:{port}{path}
//! {"protocol_version":"1","classifier_id":"..","features":["a","b"],
//!  "rows":[{"row_index":0,"values":[1.5,null],"test_ids":["T1","T2"]}]}
//!
//! 200 OK
//! {"protocol_version":"1","predictions":[{"row_index":0,"prediction":"1"}]}
//! ```
//!
//! A sidecar that cannot score a row answers `"prediction":null` for it and
//! may add an `"error"` string.
//!
//! All rows of one request go out in a single POST.

use std::collections::BTreeSet;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

use crate::preprocess::FeatureRow;
use crate::registry::ClassifierSpec;

pub const PROTOCOL_VERSION: &str = "1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireRow {
    pub row_index: usize,
    pub values: Vec<Option<f64>>,
    pub test_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SidecarRequest {
    pub protocol_version: String,
    pub classifier_id: String,
    pub features: Vec<String>,
    pub rows: Vec<WireRow>,
}

impl SidecarRequest {
    pub fn from_rows(spec: &ClassifierSpec, rows: &[FeatureRow]) -> Self {
        Self {
            protocol_version: PROTOCOL_VERSION.to_string(),
            classifier_id: spec.classifier_id.clone(),
            features: spec.features.iter().map(|f| f.name.clone()).collect(),
            rows: rows
                .iter()
                .enumerate()
                .map(|(row_index, row)| WireRow {
                    row_index,
                    values: row.values.iter().map(|(_, v)| *v).collect(),
                    test_ids: row.test_ids.clone(),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WirePrediction {
    pub row_index: usize,
    pub prediction: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SidecarResponse {
    pub protocol_version: String,
    pub predictions: Vec<WirePrediction>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DispatchFailure {
    /// Unreachable or slower than `timeout_ms`.
    #[error("sidecar timed out or unreachable: {0}")]
    Timeout(String),
    #[error("sidecar failure: {0}")]
    Failure(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredictionOutcome {
    pub row_index: usize,
    pub prediction: Result<String, DispatchFailure>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransportReply {
    pub status: u16,
    pub body: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TransportError {
    #[error("timed out")]
    Timeout,
    #[error("unreachable: {0}")]
    Unreachable(String),
}

/// HTTP POST seam; tests substitute a recording implementation.
#[async_trait]
pub trait SidecarTransport: Send + Sync {
    async fn post_json(&self, url: &str, body: Vec<u8>, timeout: Duration) -> Result<TransportReply, TransportError>;
}

#[derive(Debug, Clone, Default)]
pub struct HttpTransport {
    client: reqwest::Client,
}

impl HttpTransport {
    pub fn new() -> Self {
        Self::default()
    }
}

#[async_trait]
impl SidecarTransport for HttpTransport {
    async fn post_json(&self, url: &str, body: Vec<u8>, timeout: Duration) -> Result<TransportReply, TransportError> {
        let map = |e: reqwest::Error| {
            if e.is_timeout() {
                TransportError::Timeout
            } else {
                TransportError::Unreachable(e.to_string())
            }
        };
        let response = self
            .client
            .post(url)
            .header(reqwest::header::CONTENT_TYPE, "application/json")
            .body(body)
            .timeout(timeout)
            .send()
            .await
            .map_err(map)?;
        let status = response.status().as_u16();
        let body = response.bytes().await.map_err(map)?.to_vec();
        Ok(TransportReply { status, body })
    }
}

fn all_failed(n: usize, failure: DispatchFailure) -> Vec<PredictionOutcome> {
    (0..n)
        .map(|row_index| PredictionOutcome {
            row_index,
            prediction: Err(failure.clone()),
        })
        .collect()
}

/// Scores `rows` on the classifier's sidecar. Always returns one outcome per
/// row, in row order.
pub async fn dispatch(
    spec: &ClassifierSpec,
    rows: &[FeatureRow],
    transport: &dyn SidecarTransport,
) -> Vec<PredictionOutcome> {
    if rows.is_empty() {
        return Vec::new();
    }
    if spec.sidecar.loopback_ip().is_none() {
        return all_failed(
            rows.len(),
            DispatchFailure::Failure(format!("refusing non-loopback sidecar host {}", spec.sidecar.host)),
        );
    }
    let request = SidecarRequest::from_rows(spec, rows);
    let body = match serde_json::to_vec(&request) {
        Ok(body) => body,
        Err(e) => return all_failed(rows.len(), DispatchFailure::Failure(e.to_string())),
    };
    let timeout = Duration::from_millis(spec.timeout_ms);
    // The transport timeout covers the exchange; the outer one also bounds
    // transports that ignore it.
    let reply = tokio::time::timeout(
        timeout,
        transport.post_json(&spec.sidecar.url(), body, timeout),
    )
    .await;
    let reply = match reply {
        Err(_) | Ok(Err(TransportError::Timeout)) => {
            return all_failed(rows.len(), DispatchFailure::Timeout(format!("no answer within {} ms", spec.timeout_ms)))
        }
        Ok(Err(TransportError::Unreachable(e))) => return all_failed(rows.len(), DispatchFailure::Timeout(e)),
        Ok(Ok(reply)) => reply,
    };
    interpret_reply(spec, rows.len(), &reply)
}

fn interpret_reply(spec: &ClassifierSpec, n: usize, reply: &TransportReply) -> Vec<PredictionOutcome> {
    let fail = |reason: String| all_failed(n, DispatchFailure::Failure(reason));
    if reply.status != 200 {
        return fail(format!("sidecar answered HTTP {}", reply.status));
    }
    let response: SidecarResponse = match serde_json::from_slice(&reply.body) {
        Ok(r) => r,
        Err(e) => return fail(format!("malformed sidecar response: {e}")),
    };
    if response.protocol_version != PROTOCOL_VERSION {
        return fail(format!("protocol version mismatch: {}", response.protocol_version));
    }
    let indices: BTreeSet<usize> = response.predictions.iter().map(|p| p.row_index).collect();
    if indices.len() != response.predictions.len() || indices != (0..n).collect() {
        return fail("row_index set does not match request".to_string());
    }

    let mut predictions = response.predictions;
    predictions.sort_by_key(|p| p.row_index);
    predictions
        .into_iter()
        .map(|p| {
            let prediction = match p.prediction {
                None => Err(DispatchFailure::Failure(
                    p.error.unwrap_or_else(|| "sidecar could not score row".to_string()),
                )),
                Some(label) if spec.prediction_kind.accepts(&label) => Ok(label),
                Some(label) => Err(DispatchFailure::Failure(format!("label `{label}` outside declared set"))),
            };
            PredictionOutcome {
                row_index: p.row_index,
                prediction,
            }
        })
        .collect()
}
