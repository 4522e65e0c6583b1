//! Lab records to classifier-ready feature rows.
//!
//! Order of stages: status filter, split by test type, pre-merge rule,
//! all-vs-all merge, then per combination: clean, convert units, encode and
//! reorder into the classifier's feature schema. Every function here is pure.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::ehr_client::{LabRecord, ReportStatus};
use crate::registry::{ClassifierSpec, Encoding, PreMergeRule, StatusRule};

/// Keeps records allowed by the per-test-type rule. Pending never passes;
/// test types without a rule are treated as `FinalizedOnly`.
pub fn filter_by_status(
    records: Vec<LabRecord>,
    rules: &BTreeMap<String, StatusRule>,
) -> Vec<LabRecord> {
    records
        .into_iter()
        .filter(|r| {
            let rule = rules.get(&r.test_type).copied().unwrap_or_default();
            match (r.report_status, rule) {
                (ReportStatus::Finalized, _) => true,
                (ReportStatus::Requested, StatusRule::FinalizedOrRequested) => true,
                _ => false,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TestTable {
    pub test_type: String,
    /// Sorted by `(result_datetime, test_id)`.
    pub records: Vec<LabRecord>,
}

impl TestTable {
    pub fn new(test_type: impl Into<String>, mut records: Vec<LabRecord>) -> Self {
        records.sort_by(|a, b| {
            (a.result_datetime, &a.test_id).cmp(&(b.result_datetime, &b.test_id))
        });
        Self {
            test_type: test_type.into(),
            records,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// One table per test type, tables ordered by test type name.
pub fn split_by_test_type(records: Vec<LabRecord>) -> Vec<TestTable> {
    let mut grouped: BTreeMap<String, Vec<LabRecord>> = BTreeMap::new();
    for record in records {
        grouped.entry(record.test_type.clone()).or_default().push(record);
    }
    grouped
        .into_iter()
        .map(|(test_type, records)| TestTable::new(test_type, records))
        .collect()
}

/// `FirstPerType` keeps the earliest record (ties broken by test id).
pub fn apply_pre_merge_rule(mut tables: Vec<TestTable>, rule: PreMergeRule) -> Vec<TestTable> {
    if rule == PreMergeRule::FirstPerType {
        for table in &mut tables {
            table.records.truncate(1);
        }
    }
    tables
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaseCombination {
    pub picks: BTreeMap<String, LabRecord>,
}

impl CaseCombination {
    pub fn test_ids(&self) -> Vec<String> {
        let ids: BTreeSet<String> = self.picks.values().map(|r| r.test_id.clone()).collect();
        ids.into_iter().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("{count} combinations exceed the cap of {cap}")]
pub struct CapExceeded {
    /// Saturates at `usize::MAX`.
    pub count: usize,
    pub cap: usize,
}

/// Number of combinations `merge_all_vs_all` would produce, saturating.
pub fn combination_count(tables: &[TestTable], required: &BTreeSet<String>) -> usize {
    required
        .iter()
        .map(|t| tables.iter().find(|x| &x.test_type == t).map_or(0, TestTable::len))
        .fold(1usize, |acc, n| acc.saturating_mul(n))
}

/// Cartesian product over the required test types. Combinations are ordered
/// lexicographically by per-type index, types taken in name order, so the
/// last type varies fastest.
pub fn merge_all_vs_all(
    tables: &[TestTable],
    required: &BTreeSet<String>,
    cap: usize,
) -> Result<Vec<CaseCombination>, CapExceeded> {
    let count = combination_count(tables, required);
    if count > cap {
        return Err(CapExceeded { count, cap });
    }
    if count == 0 {
        return Ok(Vec::new());
    }
    let columns: Vec<(&String, &[LabRecord])> = required
        .iter()
        .map(|t| {
            let records = tables
                .iter()
                .find(|x| &x.test_type == t)
                .map_or(&[][..], |x| x.records.as_slice());
            (t, records)
        })
        .collect();

    let mut out = Vec::with_capacity(count);
    let mut index = vec![0usize; columns.len()];
    loop {
        let picks = columns
            .iter()
            .zip(&index)
            .map(|((t, records), &i)| ((*t).clone(), records[i].clone()))
            .collect();
        out.push(CaseCombination { picks });

        // odometer increment, rightmost column first
        let mut col = columns.len();
        loop {
            if col == 0 {
                return Ok(out);
            }
            col -= 1;
            index[col] += 1;
            if index[col] < columns[col].1.len() {
                break;
            }
            index[col] = 0;
        }
    }
}

/// Drops every character outside `[0-9.+-eE]` and parses what remains.
///
/// Returns `None` when nothing numeric is left, when more than one decimal
/// point survives, or when a sign appears anywhere but the start or directly
/// after an exponent marker.
pub fn clean_numeric(raw: &str) -> Option<f64> {
    let kept: String = raw
        .chars()
        .filter(|c| c.is_ascii_digit() || matches!(c, '.' | '+' | '-' | 'e' | 'E'))
        .collect();
    if !kept.chars().any(|c| c.is_ascii_digit()) {
        return None;
    }
    if kept.matches('.').count() > 1 {
        return None;
    }
    let bytes = kept.as_bytes();
    for (i, &b) in bytes.iter().enumerate() {
        if (b == b'+' || b == b'-') && i != 0 && !matches!(bytes[i - 1], b'e' | b'E') {
            return None;
        }
    }
    kept.parse::<f64>().ok().filter(|v| v.is_finite())
}

/// True when the raw value carries a `<` or `>` comparator, i.e. the cleaned
/// number is a detection bound rather than a measurement.
pub fn is_censored(raw: &str) -> bool {
    raw.contains('<') || raw.contains('>')
}

/// Trimmed, case-insensitive category lookup.
pub fn encode_categorical(raw: &str, mapping: &BTreeMap<String, f64>) -> Option<f64> {
    let needle = raw.trim();
    mapping
        .iter()
        .find(|(k, _)| k.trim().eq_ignore_ascii_case(needle))
        .map(|(_, &v)| v)
}

/// One row of the conversion table: `value_in_to = value_in_from * factor`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnitConversion {
    pub from: String,
    pub to: String,
    pub factor: f64,
    /// Restricts the entry to one analyte, for molar conversions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub analyte: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("no conversion from `{from}` to `{to}`")]
pub struct UnitError {
    pub from: String,
    pub to: String,
}

/// Explicit conversion table. Each entry also serves the reverse direction
/// (divide by the factor). Analyte-scoped entries take precedence.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct UnitTable {
    entries: Vec<UnitConversion>,
}

/// Canonical form for unit comparison: trimmed, Greek mu folded to micro sign.
pub fn normalize_unit(unit: &str) -> String {
    unit.trim().replace('\u{03BC}', "\u{00B5}")
}

impl UnitTable {
    pub fn new(entries: impl IntoIterator<Item = UnitConversion>) -> Self {
        Self {
            entries: entries.into_iter().collect(),
        }
    }

    pub fn entries(&self) -> &[UnitConversion] {
        &self.entries
    }

    pub fn convert(
        &self,
        value: f64,
        from_unit: &str,
        to_unit: &str,
        analyte: Option<&str>,
    ) -> Result<f64, UnitError> {
        let from = normalize_unit(from_unit);
        let to = normalize_unit(to_unit);
        if from == to {
            return Ok(value);
        }
        let scoped = |e: &&UnitConversion| match (&e.analyte, analyte) {
            (Some(a), Some(b)) => a.eq_ignore_ascii_case(b),
            _ => false,
        };
        let generic = |e: &&UnitConversion| e.analyte.is_none();
        for matches_scope in [&scoped as &dyn Fn(&&UnitConversion) -> bool, &generic] {
            for entry in self.entries.iter().filter(matches_scope) {
                let (ef, et) = (normalize_unit(&entry.from), normalize_unit(&entry.to));
                if ef == from && et == to {
                    return Ok(value * entry.factor);
                }
                if ef == to && et == from {
                    return Ok(value / entry.factor);
                }
            }
        }
        Err(UnitError {
            from: from_unit.to_string(),
            to: to_unit.to_string(),
        })
    }
}

/// Convenience wrapper over [`UnitTable::convert`] without analyte scope.
pub fn convert_units(table: &UnitTable, value: f64, from_unit: &str, to_unit: &str) -> Result<f64, UnitError> {
    table.convert(value, from_unit, to_unit, None)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeatureRow {
    pub classifier_id: String,
    /// In `ClassifierSpec::features` order; `None` marks a missing optional value.
    pub values: Vec<(String, Option<f64>)>,
    pub test_ids: Vec<String>,
}

impl FeatureRow {
    pub fn value(&self, name: &str) -> Option<Option<f64>> {
        self.values.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }
}

/// Non-fatal observations made while building rows. They never carry
/// analyte values, only schema names.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PreprocessWarning {
    Censored { feature: String },
    DuplicateAnalyte { test_type: String, analyte: String },
    UnknownConversion { feature: String, from: String, to: String },
    UnmappedCategory { feature: String },
    Unparseable { feature: String },
}

impl fmt::Display for PreprocessWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PreprocessWarning::Censored { feature } => {
                write!(f, "censored value used as bound for {feature}")
            }
            PreprocessWarning::DuplicateAnalyte { test_type, analyte } => {
                write!(f, "duplicate analyte {analyte} in {test_type}, last kept")
            }
            PreprocessWarning::UnknownConversion { feature, from, to } => {
                write!(f, "no unit conversion {from} -> {to} for {feature}")
            }
            PreprocessWarning::UnmappedCategory { feature } => {
                write!(f, "unmapped category for {feature}")
            }
            PreprocessWarning::Unparseable { feature } => {
                write!(f, "non-numeric value for {feature}")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RowOutcome {
    Row(FeatureRow),
    /// Required features that resolved to missing.
    Insufficient { missing: Vec<String> },
}

/// Resolves every feature of `spec` against one combination.
pub fn build_feature_row(
    combination: &CaseCombination,
    spec: &ClassifierSpec,
    units: &UnitTable,
    warnings: &mut Vec<PreprocessWarning>,
) -> RowOutcome {
    let mut values = Vec::with_capacity(spec.features.len());
    let mut missing = Vec::new();

    for feature in &spec.features {
        let analyte = combination.picks.get(&feature.source_test_type).and_then(|record| {
            let mut hits = record
                .analytes
                .iter()
                .filter(|a| a.name.trim() == feature.source_analyte);
            let first = hits.next();
            let last = hits.last();
            if last.is_some() {
                warnings.push(PreprocessWarning::DuplicateAnalyte {
                    test_type: feature.source_test_type.clone(),
                    analyte: feature.source_analyte.clone(),
                });
            }
            last.or(first)
        });

        let value = analyte.and_then(|a| match &feature.encoding {
            Encoding::Categorical(map) => {
                let v = encode_categorical(&a.raw_value, map);
                if v.is_none() {
                    warnings.push(PreprocessWarning::UnmappedCategory {
                        feature: feature.name.clone(),
                    });
                }
                v
            }
            Encoding::Numeric => {
                let Some(cleaned) = clean_numeric(&a.raw_value) else {
                    warnings.push(PreprocessWarning::Unparseable {
                        feature: feature.name.clone(),
                    });
                    return None;
                };
                if is_censored(&a.raw_value) {
                    warnings.push(PreprocessWarning::Censored {
                        feature: feature.name.clone(),
                    });
                }
                if feature.target_unit.trim().is_empty() {
                    return Some(cleaned);
                }
                match units.convert(cleaned, &a.unit, &feature.target_unit, Some(&feature.source_analyte)) {
                    Ok(v) => Some(v),
                    Err(e) => {
                        warnings.push(PreprocessWarning::UnknownConversion {
                            feature: feature.name.clone(),
                            from: e.from,
                            to: e.to,
                        });
                        None
                    }
                }
            }
        });

        if value.is_none() && feature.required {
            missing.push(feature.name.clone());
        }
        values.push((feature.name.clone(), value));
    }

    if !missing.is_empty() {
        return RowOutcome::Insufficient { missing };
    }
    RowOutcome::Row(FeatureRow {
        classifier_id: spec.classifier_id.clone(),
        values,
        test_ids: combination.test_ids(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PreprocessError {
    #[error(transparent)]
    CapExceeded(#[from] CapExceeded),
    #[error("no sufficient combination ({combinations} built, missing: {})", missing.join(", "))]
    Insufficient {
        combinations: usize,
        missing: Vec<String>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub rows: Vec<FeatureRow>,
    pub combinations: usize,
    pub warnings: Vec<PreprocessWarning>,
}

/// Full preprocessing for one classifier. Output does not depend on the
/// order of `records`.
pub fn prepare_rows(
    records: Vec<LabRecord>,
    spec: &ClassifierSpec,
    units: &UnitTable,
) -> Result<Prepared, PreprocessError> {
    let filtered = filter_by_status(records, &spec.status_rule);
    let tables = apply_pre_merge_rule(split_by_test_type(filtered), spec.pre_merge_rule);
    let combinations = merge_all_vs_all(&tables, &spec.required_test_types, spec.combination_cap)?;

    let mut warnings = Vec::new();
    let mut rows = Vec::new();
    let mut missing = BTreeSet::new();
    for combination in &combinations {
        match build_feature_row(combination, spec, units, &mut warnings) {
            RowOutcome::Row(row) => rows.push(row),
            RowOutcome::Insufficient { missing: m } => missing.extend(m),
        }
    }
    if rows.is_empty() {
        return Err(PreprocessError::Insufficient {
            combinations: combinations.len(),
            missing: missing.into_iter().collect(),
        });
    }
    Ok(Prepared {
        rows,
        combinations: combinations.len(),
        warnings,
    })
}
