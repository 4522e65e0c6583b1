//! Per-request sessions and the daily session log.
//!
//! Log files are `session-YYYY-MM-DD.jsonl` (UTC date) in the configured
//! directory, one JSON object per line:
//! `{"session_id":"042517","ts":"...Z","step":"fetch","detail":"..."}`.
//! Details name stages, counts and error codes; they never contain lab values.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{DateTime, NaiveDate, Utc};
use rand::Rng;
use serde::Serialize;

use crate::audit::format_timestamp;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SessionEvent {
    pub session_id: String,
    pub ts: String,
    pub step: String,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Session {
    pub session_id: String,
    pub started_at: DateTime<Utc>,
    pub events: Vec<SessionEvent>,
}

/// Six decimal digits, zero padded. Values above 999999 wrap.
pub fn format_session_id(n: u32) -> String {
    format!("{:06}", n % 1_000_000)
}

/// Fresh session with a random id. Ids only correlate log lines, so
/// collisions are acceptable.
pub fn new_session<R: Rng + ?Sized>(rng: &mut R) -> Session {
    Session {
        session_id: format_session_id(rng.gen_range(0..1_000_000)),
        started_at: Utc::now(),
        events: Vec::new(),
    }
}

impl Session {
    /// Records a step in the session and writes it to `log`.
    pub fn log(&mut self, sink: &SessionLog, step: &str, detail: impl Into<String>) {
        let event = SessionEvent {
            session_id: self.session_id.clone(),
            ts: format_timestamp(&Utc::now()),
            step: step.to_string(),
            detail: detail.into(),
        };
        sink.write(&event);
        self.events.push(event);
    }

    pub fn has_step(&self, step: &str) -> bool {
        self.events.iter().any(|e| e.step == step)
    }
}

/// Thread-safe append-only sink, rolling over to a new file per UTC day.
#[derive(Debug)]
pub struct SessionLog {
    dir: PathBuf,
    current: Mutex<Option<(NaiveDate, File)>>,
}

impl SessionLog {
    pub fn open(dir: impl Into<PathBuf>) -> std::io::Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(Self {
            dir,
            current: Mutex::new(None),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn file_for(&self, day: NaiveDate) -> PathBuf {
        self.dir.join(format!("session-{}.jsonl", day.format("%Y-%m-%d")))
    }

    /// Write failures are reported through `tracing` and otherwise ignored;
    /// a full disk must not fail clinical requests.
    pub fn write(&self, event: &SessionEvent) {
        let Ok(mut line) = serde_json::to_vec(event) else {
            return;
        };
        line.push(b'\n');
        let today = Utc::now().date_naive();
        let mut current = self.current.lock().unwrap_or_else(|p| p.into_inner());
        if current.as_ref().map(|(d, _)| *d) != Some(today) {
            match OpenOptions::new().create(true).append(true).open(self.file_for(today)) {
                Ok(f) => *current = Some((today, f)),
                Err(e) => {
                    tracing::error!(error = %e, "cannot open session log");
                    return;
                }
            }
        }
        if let Some((_, file)) = current.as_mut() {
            if let Err(e) = file.write_all(&line).and_then(|_| file.flush()) {
                tracing::error!(error = %e, "cannot write session log");
            }
        }
    }

    /// All events in the log directory with the given session id.
    pub fn read_session(&self, session_id: &str) -> std::io::Result<Vec<SessionEvent>> {
        let mut out = Vec::new();
        let mut paths: Vec<PathBuf> = std::fs::read_dir(&self.dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        paths.sort();
        for path in paths {
            for line in std::fs::read_to_string(path)?.lines() {
                let Ok(v) = serde_json::from_str::<serde_json::Value>(line) else {
                    continue;
                };
                if v["session_id"] == session_id {
                    out.push(SessionEvent {
                        session_id: session_id.to_string(),
                        ts: v["ts"].as_str().unwrap_or_default().to_string(),
                        step: v["step"].as_str().unwrap_or_default().to_string(),
                        detail: v["detail"].as_str().unwrap_or_default().to_string(),
                    });
                }
            }
        }
        Ok(out)
    }
}
