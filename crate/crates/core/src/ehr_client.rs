//! EHR lab-data client: fetch windows, concurrent section fetches and the
//! lab-result XML reader.
//!
//! Wire contract:
//!
//! ```text
//! GET {base}/labdata?patient_id=..&section=..&start=YYYY-MM-DD&end=YYYY-MM-DD
//! X-EHR-Auth: <code>
//!
//! <LabResults patient_id=".." species="..">
//!   <Test test_id=".." section=".." test_type=".." status="Finalized" datetime="2024-06-27T08:30:00">
//!     <Analyte name="WBC" unit="10^3/uL">12.4</Analyte>
//!   </Test>
//! </LabResults>
//! ```
//!
//! Fetched records live only as long as the request that fetched them.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use chrono::{Days, NaiveDate, NaiveDateTime};
use quick_xml::events::{BytesStart, Event};
use quick_xml::Reader;
use serde::{Deserialize, Serialize};

use crate::registry::FetchWindow;

pub const AUTH_HEADER: &str = "X-EHR-Auth";
pub const DATETIME_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";
pub const DATE_FORMAT: &str = "%Y-%m-%d";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ReportStatus {
    Finalized,
    Requested,
    Pending,
}

impl ReportStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            ReportStatus::Finalized => "Finalized",
            ReportStatus::Requested => "Requested",
            ReportStatus::Pending => "Pending",
        }
    }
}

impl FromStr for ReportStatus {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "finalized" | "final" => Ok(ReportStatus::Finalized),
            "requested" => Ok(ReportStatus::Requested),
            "pending" => Ok(ReportStatus::Pending),
            _ => Err(format!("unknown report status `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalyteValue {
    pub name: String,
    /// Exactly as sent by the EHR, comments and comparators included.
    pub raw_value: String,
    pub unit: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabRecord {
    pub test_id: String,
    pub patient_id: String,
    pub section: String,
    pub test_type: String,
    pub report_status: ReportStatus,
    pub result_datetime: NaiveDateTime,
    pub species: String,
    pub analytes: Vec<AnalyteValue>,
}

/// Inclusive calendar date range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DateRange {
    start: NaiveDate,
    end: NaiveDate,
}

impl DateRange {
    pub fn new(start: NaiveDate, end: NaiveDate) -> Option<Self> {
        (start <= end).then_some(Self { start, end })
    }

    pub fn start(&self) -> NaiveDate {
        self.start
    }

    pub fn end(&self) -> NaiveDate {
        self.end
    }

    pub fn contains(&self, date: NaiveDate) -> bool {
        self.start <= date && date <= self.end
    }

    /// Number of calendar days covered, both ends included.
    pub fn width_days(&self) -> i64 {
        (self.end - self.start).num_days() + 1
    }
}

impl fmt::Display for DateRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}..{}",
            self.start.format(DATE_FORMAT),
            self.end.format(DATE_FORMAT)
        )
    }
}

pub fn compute_fetch_window(query_date: NaiveDate, window: FetchWindow) -> DateRange {
    let start = query_date
        .checked_sub_days(Days::new(window.days_before.into()))
        .unwrap_or(NaiveDate::MIN);
    let end = query_date
        .checked_add_days(Days::new(window.days_after.into()))
        .unwrap_or(NaiveDate::MAX);
    DateRange { start, end }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("lab XML error at {path}: {message}")]
pub struct XmlError {
    pub path: String,
    pub message: String,
}

fn xml_err(stack: &[String], message: impl Into<String>) -> XmlError {
    XmlError {
        path: if stack.is_empty() {
            "/".to_string()
        } else {
            stack.iter().map(|s| format!("/{s}")).collect()
        },
        message: message.into(),
    }
}

fn attributes(
    element: &BytesStart<'_>,
    stack: &[String],
) -> Result<BTreeMap<String, String>, XmlError> {
    let mut out = BTreeMap::new();
    for attr in element.attributes() {
        let attr = attr.map_err(|e| xml_err(stack, e.to_string()))?;
        let key = String::from_utf8_lossy(attr.key.as_ref()).into_owned();
        let value = attr
            .unescape_value()
            .map_err(|e| xml_err(stack, e.to_string()))?
            .into_owned();
        out.insert(key, value);
    }
    Ok(out)
}

fn take_attr(
    attrs: &mut BTreeMap<String, String>,
    name: &str,
    stack: &[String],
) -> Result<String, XmlError> {
    attrs
        .remove(name)
        .ok_or_else(|| xml_err(stack, format!("missing mandatory attribute `{name}`")))
}

#[derive(Default)]
struct Root {
    patient_id: Option<String>,
    species: Option<String>,
}

struct OpenAnalyte {
    name: String,
    unit: String,
    text: String,
}

/// Parses one `<LabResults>` document. Unknown elements and attributes are
/// skipped; analyte text is kept verbatim.
pub fn parse_lab_xml(document: &[u8]) -> Result<Vec<LabRecord>, XmlError> {
    let text = std::str::from_utf8(document).map_err(|e| xml_err(&[], e.to_string()))?;
    let mut reader = Reader::from_str(text);

    let mut stack: Vec<String> = Vec::new();
    let mut root = Root::default();
    let mut seen_root = false;
    let mut records = Vec::new();
    let mut seen_ids = HashSet::new();
    let mut test: Option<LabRecord> = None;
    let mut analyte: Option<OpenAnalyte> = None;

    loop {
        let event = reader
            .read_event()
            .map_err(|e| xml_err(&stack, e.to_string()))?;
        match event {
            Event::Start(ref e) | Event::Empty(ref e) => {
                let is_empty = matches!(event, Event::Empty(_));
                let name = String::from_utf8_lossy(e.name().as_ref()).into_owned();
                stack.push(name.clone());
                let path: Vec<&str> = stack.iter().map(String::as_str).collect();
                match path.as_slice() {
                    ["LabResults"] => {
                        seen_root = true;
                        let mut attrs = attributes(e, &stack)?;
                        root.patient_id = attrs.remove("patient_id");
                        root.species = attrs.remove("species");
                    }
                    [other] => {
                        return Err(xml_err(
                            &stack,
                            format!("expected root element LabResults, found {other}"),
                        ))
                    }
                    ["LabResults", "Test"] => {
                        test = Some(open_test(e, &root, &stack)?);
                    }
                    ["LabResults", "Test", "Analyte"] => {
                        let mut attrs = attributes(e, &stack)?;
                        let name = take_attr(&mut attrs, "name", &stack)?;
                        if name.is_empty() {
                            return Err(xml_err(&stack, "analyte name is empty"));
                        }
                        analyte = Some(OpenAnalyte {
                            name,
                            unit: attrs.remove("unit").unwrap_or_default(),
                            text: String::new(),
                        });
                    }
                    _ => {}
                }
                if is_empty {
                    close_element(&mut stack, &mut test, &mut analyte, &mut records, &mut seen_ids)?;
                }
            }
            Event::End(_) => {
                close_element(&mut stack, &mut test, &mut analyte, &mut records, &mut seen_ids)?;
            }
            Event::Text(t) => {
                if stack.len() == 3 {
                    if let Some(open) = analyte.as_mut() {
                        let unescaped = t.unescape().map_err(|e| xml_err(&stack, e.to_string()))?;
                        open.text.push_str(&unescaped);
                    }
                }
            }
            Event::CData(c) => {
                if stack.len() == 3 {
                    if let Some(open) = analyte.as_mut() {
                        open.text.push_str(&String::from_utf8_lossy(&c.into_inner()));
                    }
                }
            }
            Event::Eof => break,
            _ => {}
        }
    }
    if !stack.is_empty() {
        return Err(xml_err(&stack, "unexpected end of document"));
    }
    if !seen_root {
        return Err(xml_err(&[], "missing LabResults root element"));
    }
    Ok(records)
}

fn open_test(e: &BytesStart<'_>, root: &Root, stack: &[String]) -> Result<LabRecord, XmlError> {
    let root_path = &stack[..1];
    let patient_id = root
        .patient_id
        .clone()
        .ok_or_else(|| xml_err(root_path, "missing mandatory attribute `patient_id`"))?;
    let species = root
        .species
        .clone()
        .ok_or_else(|| xml_err(root_path, "missing mandatory attribute `species`"))?;
    let mut attrs = attributes(e, stack)?;
    let test_id = take_attr(&mut attrs, "test_id", stack)?;
    if test_id.is_empty() {
        return Err(xml_err(stack, "test_id is empty"));
    }
    let section = take_attr(&mut attrs, "section", stack)?;
    let test_type = take_attr(&mut attrs, "test_type", stack)?;
    let report_status = take_attr(&mut attrs, "status", stack)?
        .parse::<ReportStatus>()
        .map_err(|m| xml_err(stack, m))?;
    let datetime = take_attr(&mut attrs, "datetime", stack)?;
    let result_datetime = NaiveDateTime::parse_from_str(&datetime, DATETIME_FORMAT)
        .map_err(|e| xml_err(stack, format!("bad datetime: {e}")))?;
    Ok(LabRecord {
        test_id,
        patient_id,
        section,
        test_type,
        report_status,
        result_datetime,
        species,
        analytes: Vec::new(),
    })
}

fn close_element(
    stack: &mut Vec<String>,
    test: &mut Option<LabRecord>,
    analyte: &mut Option<OpenAnalyte>,
    records: &mut Vec<LabRecord>,
    seen_ids: &mut HashSet<String>,
) -> Result<(), XmlError> {
    let path: Vec<&str> = stack.iter().map(String::as_str).collect();
    match path.as_slice() {
        ["LabResults", "Test", "Analyte"] => {
            if let (Some(open), Some(record)) = (analyte.take(), test.as_mut()) {
                record.analytes.push(AnalyteValue {
                    name: open.name,
                    raw_value: open.text,
                    unit: open.unit,
                });
            }
        }
        ["LabResults", "Test"] => {
            if let Some(record) = test.take() {
                if !seen_ids.insert(record.test_id.clone()) {
                    return Err(xml_err(
                        stack,
                        format!("duplicate test_id `{}`", record.test_id),
                    ));
                }
                records.push(record);
            }
        }
        _ => {}
    }
    stack.pop();
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FetchErrorKind {
    #[error("HTTP status {0}")]
    Status(u16),
    #[error("timed out")]
    Timeout,
    #[error("transport error: {0}")]
    Transport(String),
    #[error(transparent)]
    Parse(#[from] XmlError),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("fetch of section `{section}` failed: {kind}")]
pub struct FetchError {
    pub section: String,
    pub kind: FetchErrorKind,
}

/// Records grouped by section, plus how many the client discarded because
/// the EHR returned them outside the requested window or for another patient.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FetchedSections {
    pub by_section: BTreeMap<String, Vec<LabRecord>>,
    pub dropped: usize,
}

impl FetchedSections {
    pub fn into_records(self) -> Vec<LabRecord> {
        self.by_section.into_values().flatten().collect()
    }
}

#[derive(Debug, Clone)]
pub struct EhrClient {
    http: reqwest::Client,
    base_url: String,
    auth_code: String,
    timeout: Duration,
}

impl EhrClient {
    pub fn new(base_url: impl Into<String>, auth_code: impl Into<String>, timeout: Duration) -> Self {
        Self {
            http: reqwest::Client::new(),
            base_url: base_url.into().trim_end_matches('/').to_string(),
            auth_code: auth_code.into(),
            timeout,
        }
    }

    pub fn from_config(config: &crate::registry::EhrConfig) -> Self {
        Self::new(
            config.base_url.clone(),
            config.auth_code.clone(),
            Duration::from_millis(config.timeout_ms),
        )
    }

    /// Fetches every section concurrently. Any failing section fails the whole
    /// fetch; when several fail, the alphabetically first section is reported.
    pub async fn fetch_sections(
        &self,
        patient_id: &str,
        windows: &BTreeMap<String, DateRange>,
    ) -> Result<FetchedSections, FetchError> {
        let fetches = windows
            .iter()
            .map(|(section, range)| self.fetch_section(patient_id, section, *range));
        let results = futures::future::join_all(fetches).await;

        let mut out = FetchedSections::default();
        for (section, result) in windows.keys().zip(results) {
            let (records, dropped) = result?;
            out.dropped += dropped;
            out.by_section.insert(section.clone(), records);
        }
        Ok(out)
    }

    /// One section. Returns the accepted records and the number dropped by the
    /// client-side window/patient re-check.
    pub async fn fetch_section(
        &self,
        patient_id: &str,
        section: &str,
        range: DateRange,
    ) -> Result<(Vec<LabRecord>, usize), FetchError> {
        let fail = |kind| FetchError {
            section: section.to_string(),
            kind,
        };
        let start = range.start().format(DATE_FORMAT).to_string();
        let end = range.end().format(DATE_FORMAT).to_string();
        let response = self
            .http
            .get(format!("{}/labdata", self.base_url))
            .query(&[
                ("patient_id", patient_id),
                ("section", section),
                ("start", &start),
                ("end", &end),
            ])
            .header(AUTH_HEADER, &self.auth_code)
            .timeout(self.timeout)
            .send()
            .await
            .map_err(|e| fail(transport_kind(e)))?;
        let status = response.status();
        if !status.is_success() {
            return Err(fail(FetchErrorKind::Status(status.as_u16())));
        }
        let body = response.bytes().await.map_err(|e| fail(transport_kind(e)))?;
        let parsed = parse_lab_xml(&body).map_err(|e| fail(e.into()))?;

        let total = parsed.len();
        let records: Vec<LabRecord> = parsed
            .into_iter()
            .filter(|r| r.patient_id == patient_id && range.contains(r.result_datetime.date()))
            .collect();
        let dropped = total - records.len();
        if dropped > 0 {
            tracing::warn!(section, dropped, "EHR returned records outside the requested window");
        }
        Ok((records, dropped))
    }
}

// Error text never carries the URL: its query string holds the patient id.
fn transport_kind(e: reqwest::Error) -> FetchErrorKind {
    if e.is_timeout() {
        FetchErrorKind::Timeout
    } else {
        FetchErrorKind::Transport(e.without_url().to_string())
    }
}
