//! Durable retention of classifier results.
//!
//! The file backend is an append-only JSON-lines log, one [`AuditRecord`] per
//! line with exactly these fields:
//!
//! ```text
//! {"classifier_id":"demo_lepto","patient_id":"P-FIG4","test_ids":["C-101","H-201"],
//!  "prediction":"1","first_run_timestamp":"2024-06-27T10:15:02.123456Z",
//!  "session_id":"042517","recorded_at":"2024-06-27T10:15:02.123456Z"}
//! ```
//!
//! No analyte, unit or species data is ever written. A key seen again keeps
//! its original `first_run_timestamp`; only a new line with a fresh
//! `recorded_at` is appended.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use chrono::{DateTime, Duration, NaiveDate, SubsecRound, Utc};
use serde::{Deserialize, Serialize};

pub fn format_timestamp(ts: &DateTime<Utc>) -> String {
    ts.to_rfc3339_opts(chrono::SecondsFormat::Micros, true)
}

pub mod timestamp_micros {
    use chrono::{DateTime, Utc};
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(ts: &DateTime<Utc>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&super::format_timestamp(ts))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DateTime<Utc>, D::Error> {
        let text = String::deserialize(d)?;
        DateTime::parse_from_rfc3339(&text)
            .map(|t| t.with_timezone(&Utc))
            .map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum AuditError {
    #[error("audit store I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("audit store line {line} is corrupt: {reason}")]
    Corrupt { line: usize, reason: String },
    #[error("invalid audit record: {0}")]
    Invalid(String),
    #[error("audit store unavailable: {0}")]
    Unavailable(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditRecord {
    pub classifier_id: String,
    pub patient_id: String,
    pub test_ids: Vec<String>,
    pub prediction: String,
    #[serde(with = "timestamp_micros")]
    pub first_run_timestamp: DateTime<Utc>,
    pub session_id: String,
    #[serde(with = "timestamp_micros")]
    pub recorded_at: DateTime<Utc>,
}

impl AuditRecord {
    /// Parses one stored line. Any field outside the closed set is rejected.
    pub fn from_json(line: &str) -> Result<Self, AuditError> {
        let record: AuditRecord =
            serde_json::from_str(line).map_err(|e| AuditError::Invalid(e.to_string()))?;
        record.validate()?;
        Ok(record)
    }

    pub fn key(&self) -> AuditKey {
        AuditKey::new(&self.classifier_id, &self.patient_id, self.test_ids.iter().cloned())
    }

    pub fn validate(&self) -> Result<(), AuditError> {
        let invalid = |m: &str| Err(AuditError::Invalid(m.to_string()));
        if self.classifier_id.is_empty() || self.patient_id.is_empty() || self.session_id.is_empty() {
            return invalid("classifier_id, patient_id and session_id must be non-empty");
        }
        if self.prediction.is_empty() || self.prediction == crate::gateway::ERROR_PREDICTION {
            return invalid("error predictions are not audit records");
        }
        if self.test_ids.is_empty() || !self.test_ids.windows(2).all(|w| w[0] < w[1]) {
            return invalid("test_ids must be non-empty, sorted and unique");
        }
        if self.recorded_at < self.first_run_timestamp {
            return invalid("recorded_at precedes first_run_timestamp");
        }
        Ok(())
    }
}

/// Canonical key: test ids sorted and deduplicated.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AuditKey {
    pub classifier_id: String,
    pub patient_id: String,
    pub test_ids: Vec<String>,
}

impl AuditKey {
    pub fn new(
        classifier_id: impl Into<String>,
        patient_id: impl Into<String>,
        test_ids: impl IntoIterator<Item = String>,
    ) -> Self {
        let mut test_ids: Vec<String> = test_ids.into_iter().collect();
        test_ids.sort();
        test_ids.dedup();
        Self {
            classifier_id: classifier_id.into(),
            patient_id: patient_id.into(),
            test_ids,
        }
    }
}

/// Wall clock that never repeats or goes backwards, at microsecond resolution.
#[derive(Debug, Default)]
pub struct AuditClock {
    last: Mutex<Option<DateTime<Utc>>>,
}

impl AuditClock {
    pub fn now(&self) -> DateTime<Utc> {
        let wall = Utc::now().trunc_subsecs(6);
        let mut last = self.last.lock().unwrap_or_else(|p| p.into_inner());
        let next = match *last {
            Some(prev) if wall <= prev => prev + Duration::microseconds(1),
            _ => wall,
        };
        *last = Some(next);
        next
    }
}

pub trait AuditStore: Send + Sync {
    /// Earliest first-run timestamp for the key, if it was ever stored.
    fn lookup_first_run(&self, key: &AuditKey) -> Result<Option<DateTime<Utc>>, AuditError>;

    /// Appends the record. If the key already exists its original first-run
    /// timestamp replaces the one on `record`. Returns what was written.
    fn store_result(&self, record: AuditRecord) -> Result<AuditRecord, AuditError>;
}

/// Append-only JSON-lines file with an in-memory first-run index.
#[derive(Debug)]
pub struct JsonlAuditStore {
    path: PathBuf,
    writer: Mutex<File>,
    index: RwLock<HashMap<AuditKey, DateTime<Utc>>>,
}

impl JsonlAuditStore {
    /// Opens or creates the log and rebuilds the index from it.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, AuditError> {
        let path = path.as_ref().to_path_buf();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        let file = OpenOptions::new().create(true).append(true).read(true).open(&path)?;
        let mut index: HashMap<AuditKey, DateTime<Utc>> = HashMap::new();
        for record in read_records(&path)? {
            let first = record.first_run_timestamp;
            index
                .entry(record.key())
                .and_modify(|t| *t = (*t).min(first))
                .or_insert(first);
        }
        Ok(Self {
            path,
            writer: Mutex::new(file),
            index: RwLock::new(index),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len_keys(&self) -> usize {
        self.index.read().map(|i| i.len()).unwrap_or(0)
    }
}

impl AuditStore for JsonlAuditStore {
    fn lookup_first_run(&self, key: &AuditKey) -> Result<Option<DateTime<Utc>>, AuditError> {
        let index = self
            .index
            .read()
            .map_err(|_| AuditError::Unavailable("index lock poisoned".into()))?;
        Ok(index.get(key).copied())
    }

    fn store_result(&self, mut record: AuditRecord) -> Result<AuditRecord, AuditError> {
        record.validate()?;
        let key = record.key();
        let mut writer = self
            .writer
            .lock()
            .map_err(|_| AuditError::Unavailable("writer lock poisoned".into()))?;
        if let Some(existing) = self.lookup_first_run(&key)? {
            record.first_run_timestamp = existing;
        }
        let mut line = serde_json::to_vec(&record).map_err(|e| AuditError::Invalid(e.to_string()))?;
        line.push(b'\n');
        writer.write_all(&line)?;
        writer.flush()?;
        writer.sync_data()?;
        self.index
            .write()
            .map_err(|_| AuditError::Unavailable("index lock poisoned".into()))?
            .entry(key)
            .or_insert(record.first_run_timestamp);
        Ok(record)
    }
}

/// Volatile store with the same semantics, for embedding and tests.
#[derive(Debug, Default)]
pub struct MemoryAuditStore {
    records: Mutex<Vec<AuditRecord>>,
}

impl MemoryAuditStore {
    pub fn records(&self) -> Vec<AuditRecord> {
        self.records.lock().map(|r| r.clone()).unwrap_or_default()
    }
}

impl AuditStore for MemoryAuditStore {
    fn lookup_first_run(&self, key: &AuditKey) -> Result<Option<DateTime<Utc>>, AuditError> {
        let records = self
            .records
            .lock()
            .map_err(|_| AuditError::Unavailable("lock poisoned".into()))?;
        Ok(records
            .iter()
            .filter(|r| &r.key() == key)
            .map(|r| r.first_run_timestamp)
            .min())
    }

    fn store_result(&self, mut record: AuditRecord) -> Result<AuditRecord, AuditError> {
        record.validate()?;
        let mut records = self
            .records
            .lock()
            .map_err(|_| AuditError::Unavailable("lock poisoned".into()))?;
        let key = record.key();
        if let Some(first) = records.iter().filter(|r| r.key() == key).map(|r| r.first_run_timestamp).min() {
            record.first_run_timestamp = first;
        }
        records.push(record.clone());
        Ok(record)
    }
}

/// Every record in a store file, in append order.
pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<AuditRecord>, AuditError> {
    let file = match File::open(path.as_ref()) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record = AuditRecord::from_json(&line).map_err(|e| AuditError::Corrupt {
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}

/// Records whose `recorded_at` falls on or after `since` (UTC).
pub fn export_since(path: impl AsRef<Path>, since: NaiveDate) -> Result<Vec<AuditRecord>, AuditError> {
    Ok(read_records(path)?
        .into_iter()
        .filter(|r| r.recorded_at.date_naive() >= since)
        .collect())
}
