//! Classifier specifications, gateway configuration and the per-route
//! enable switch.
//!
//! The configuration is a TOML document (see `config/gateway.toml` for an
//! annotated example). Everything except the enable flags is immutable once
//! [`load_config`] returns.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::preprocess::UnitConversion;

pub const DEFAULT_MAX_WINDOW_DAYS: u32 = 30;
pub const DEFAULT_COMBINATION_CAP: usize = 64;
pub const DEFAULT_SIDECAR_TIMEOUT_MS: u64 = 2_000;
pub const DEFAULT_EHR_TIMEOUT_MS: u64 = 5_000;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config field `{field}`: {reason}")]
    Invalid { field: String, reason: String },
    #[error("duplicate route_path `{0}`")]
    DuplicateRoute(String),
}

impl ConfigError {
    fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        ConfigError::Invalid {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RegistryError {
    #[error("unknown classifier `{0}`")]
    UnknownClassifier(String),
}

/// Days fetched on each side of the query date.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FetchWindow {
    pub days_before: u32,
    pub days_after: u32,
}

impl FetchWindow {
    pub const fn new(days_before: u32, days_after: u32) -> Self {
        Self {
            days_before,
            days_after,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PredictionKind {
    #[default]
    Binary,
    MultiClass(BTreeSet<String>),
}

impl PredictionKind {
    pub fn accepts(&self, label: &str) -> bool {
        match self {
            PredictionKind::Binary => label == "0" || label == "1",
            PredictionKind::MultiClass(labels) => labels.contains(label),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StatusRule {
    #[default]
    FinalizedOnly,
    FinalizedOrRequested,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PreMergeRule {
    #[default]
    AllCombinations,
    FirstPerType,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Encoding {
    Numeric,
    /// Category string to numeric code. Keys are matched case-insensitively.
    Categorical(BTreeMap<String, f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSpec {
    pub name: String,
    pub source_test_type: String,
    pub source_analyte: String,
    /// Empty means unitless; no conversion is attempted.
    #[serde(default)]
    pub target_unit: String,
    #[serde(default = "default_encoding")]
    pub encoding: Encoding,
    #[serde(default = "default_true")]
    pub required: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SidecarEndpoint {
    pub host: String,
    pub port: u16,
    #[serde(default = "default_sidecar_path")]
    pub path: String,
}

impl SidecarEndpoint {
    /// Parsed host, `None` unless it is a loopback IP literal.
    pub fn loopback_ip(&self) -> Option<IpAddr> {
        self.host.parse::<IpAddr>().ok().filter(IpAddr::is_loopback)
    }

    pub fn url(&self) -> String {
        match self.host.parse::<IpAddr>() {
            Ok(IpAddr::V6(v6)) => format!("http://[{v6}]:{}{}", self.port, self.path),
            _ => format!("http://{}:{}{}", self.host, self.port, self.path),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierSpec {
    pub classifier_id: String,
    pub route_path: String,
    pub species: BTreeSet<String>,
    #[serde(default)]
    pub prediction_kind: PredictionKind,
    pub sections: BTreeSet<String>,
    pub windows: BTreeMap<String, FetchWindow>,
    /// Test types without an entry use [`StatusRule::FinalizedOnly`].
    #[serde(default)]
    pub status_rule: BTreeMap<String, StatusRule>,
    pub required_test_types: BTreeSet<String>,
    #[serde(default)]
    pub pre_merge_rule: PreMergeRule,
    #[serde(default = "default_cap")]
    pub combination_cap: usize,
    pub features: Vec<FeatureSpec>,
    pub sidecar: SidecarEndpoint,
    #[serde(default = "default_true")]
    pub enabled: bool,
    #[serde(default = "default_sidecar_timeout")]
    pub timeout_ms: u64,
}

impl ClassifierSpec {
    pub fn status_rule_for(&self, test_type: &str) -> StatusRule {
        self.status_rule.get(test_type).copied().unwrap_or_default()
    }

    fn validate(&self, max_window_days: u32) -> Result<(), ConfigError> {
        let field = |name: &str| format!("classifiers[{}].{name}", self.classifier_id);

        if self.classifier_id.trim().is_empty() {
            return Err(ConfigError::invalid("classifiers[].classifier_id", "must be non-empty"));
        }
        if self.route_path.is_empty()
            || !self
                .route_path
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
        {
            return Err(ConfigError::invalid(
                field("route_path"),
                "must be a non-empty path segment of [A-Za-z0-9_-]",
            ));
        }
        if self.species.is_empty() {
            return Err(ConfigError::invalid(field("species"), "must be non-empty"));
        }
        if let PredictionKind::MultiClass(labels) = &self.prediction_kind {
            if labels.is_empty() {
                return Err(ConfigError::invalid(field("prediction_kind"), "label set is empty"));
            }
            if labels.contains(crate::gateway::ERROR_PREDICTION) {
                return Err(ConfigError::invalid(
                    field("prediction_kind"),
                    "\"-1\" is reserved for errors",
                ));
            }
        }
        let window_sections: BTreeSet<&String> = self.windows.keys().collect();
        let sections: BTreeSet<&String> = self.sections.iter().collect();
        if sections.is_empty() {
            return Err(ConfigError::invalid(field("sections"), "must be non-empty"));
        }
        if window_sections != sections {
            return Err(ConfigError::invalid(
                field("windows"),
                "window sections must equal `sections`",
            ));
        }
        for (section, window) in &self.windows {
            if window.days_before > max_window_days || window.days_after > max_window_days {
                return Err(ConfigError::invalid(
                    field(&format!("windows.{section}")),
                    format!("window exceeds maximum of {max_window_days} days"),
                ));
            }
        }
        if self.required_test_types.is_empty() {
            return Err(ConfigError::invalid(field("required_test_types"), "must be non-empty"));
        }
        if self.combination_cap == 0 {
            return Err(ConfigError::invalid(field("combination_cap"), "must be positive"));
        }
        if self.timeout_ms == 0 {
            return Err(ConfigError::invalid(field("timeout_ms"), "must be positive"));
        }
        if self.features.is_empty() {
            return Err(ConfigError::invalid(field("features"), "must be non-empty"));
        }
        let mut names = HashSet::new();
        for feature in &self.features {
            if feature.name.is_empty() || !names.insert(feature.name.as_str()) {
                return Err(ConfigError::invalid(
                    field("features"),
                    format!("feature name `{}` is empty or duplicated", feature.name),
                ));
            }
            if feature.required && !self.required_test_types.contains(&feature.source_test_type) {
                return Err(ConfigError::invalid(
                    field(&format!("features.{}", feature.name)),
                    format!(
                        "required feature sources test type `{}` which is not in required_test_types",
                        feature.source_test_type
                    ),
                ));
            }
            if let Encoding::Categorical(map) = &feature.encoding {
                if map.is_empty() || map.values().any(|v| !v.is_finite()) {
                    return Err(ConfigError::invalid(
                        field(&format!("features.{}.encoding", feature.name)),
                        "categorical map must be non-empty with finite codes",
                    ));
                }
            }
        }
        if self.sidecar.loopback_ip().is_none() {
            return Err(ConfigError::invalid(
                field("sidecar.host"),
                format!("`{}` is not a loopback address", self.sidecar.host),
            ));
        }
        if !self.sidecar.path.starts_with('/') {
            return Err(ConfigError::invalid(field("sidecar.path"), "must start with '/'"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EhrConfig {
    pub base_url: String,
    pub auth_code: String,
    #[serde(default = "default_ehr_timeout")]
    pub timeout_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditConfig {
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GatewayConfig {
    pub listen: SocketAddr,
    pub allowed_ips: Vec<IpAddr>,
    pub ehr: EhrConfig,
    pub audit: AuditConfig,
    pub log_dir: PathBuf,
    #[serde(default = "default_max_window")]
    pub max_window_days: u32,
    #[serde(default)]
    pub unit_conversions: Vec<UnitConversion>,
    pub classifiers: Vec<ClassifierSpec>,
}

impl GatewayConfig {
    /// Parses and validates a TOML document. Relative paths are left as-is.
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let config: GatewayConfig = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.allowed_ips.is_empty() {
            return Err(ConfigError::invalid("allowed_ips", "must be non-empty"));
        }
        if self.ehr.auth_code.trim().is_empty() {
            return Err(ConfigError::invalid("ehr.auth_code", "must be non-empty"));
        }
        if self.ehr.timeout_ms == 0 {
            return Err(ConfigError::invalid("ehr.timeout_ms", "must be positive"));
        }
        for (i, conversion) in self.unit_conversions.iter().enumerate() {
            if !conversion.factor.is_finite() || conversion.factor == 0.0 {
                return Err(ConfigError::invalid(
                    format!("unit_conversions[{i}].factor"),
                    "must be finite and non-zero",
                ));
            }
        }
        let mut routes = HashSet::new();
        let mut ids = HashSet::new();
        for spec in &self.classifiers {
            spec.validate(self.max_window_days)?;
            if !routes.insert(spec.route_path.as_str()) {
                return Err(ConfigError::DuplicateRoute(spec.route_path.clone()));
            }
            if !ids.insert(spec.classifier_id.as_str()) {
                return Err(ConfigError::invalid(
                    "classifiers[].classifier_id",
                    format!("duplicate classifier_id `{}`", spec.classifier_id),
                ));
            }
        }
        Ok(())
    }

    fn resolve_paths(&mut self, base: &Path) {
        if self.audit.path.is_relative() {
            self.audit.path = base.join(&self.audit.path);
        }
        if self.log_dir.is_relative() {
            self.log_dir = base.join(&self.log_dir);
        }
    }
}

/// Reads, parses and validates a configuration file. Relative `audit.path`
/// and `log_dir` are resolved against the file's directory.
pub fn load_config(path: impl AsRef<Path>) -> Result<GatewayConfig, ConfigError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut config = GatewayConfig::from_toml_str(&text)?;
    config.resolve_paths(path.parent().unwrap_or_else(|| Path::new(".")));
    Ok(config)
}

/// Classifier lookup plus the runtime enable flags.
///
/// Flags are individual atomics, so a reader sees either the old or the new
/// value of a route and never anything in between.
#[derive(Debug)]
pub struct Registry {
    specs: Vec<Arc<ClassifierSpec>>,
    enabled: Vec<AtomicBool>,
    by_route: HashMap<String, usize>,
    by_id: HashMap<String, usize>,
}

impl Registry {
    pub fn new(specs: impl IntoIterator<Item = ClassifierSpec>) -> Self {
        let specs: Vec<Arc<ClassifierSpec>> = specs.into_iter().map(Arc::new).collect();
        let enabled = specs.iter().map(|s| AtomicBool::new(s.enabled)).collect();
        let by_route = specs
            .iter()
            .enumerate()
            .map(|(i, s)| (s.route_path.clone(), i))
            .collect();
        let by_id = specs
            .iter()
            .enumerate()
            .map(|(i, s)| (s.classifier_id.clone(), i))
            .collect();
        Self {
            specs,
            enabled,
            by_route,
            by_id,
        }
    }

    pub fn specs(&self) -> &[Arc<ClassifierSpec>] {
        &self.specs
    }

    pub fn by_route(&self, route_path: &str) -> Option<&Arc<ClassifierSpec>> {
        self.by_route.get(route_path).map(|&i| &self.specs[i])
    }

    pub fn by_id(&self, classifier_id: &str) -> Option<&Arc<ClassifierSpec>> {
        self.by_id.get(classifier_id).map(|&i| &self.specs[i])
    }

    pub fn is_enabled(&self, classifier_id: &str) -> Option<bool> {
        self.by_id
            .get(classifier_id)
            .map(|&i| self.enabled[i].load(Ordering::Acquire))
    }

    /// Runtime toggle. Not persisted; a restart restores the config file state.
    pub fn set_route_enabled(&self, classifier_id: &str, enabled: bool) -> Result<bool, RegistryError> {
        let &i = self
            .by_id
            .get(classifier_id)
            .ok_or_else(|| RegistryError::UnknownClassifier(classifier_id.to_string()))?;
        self.enabled[i].store(enabled, Ordering::Release);
        Ok(enabled)
    }

    /// Enabled specs for `species` that need `viewed_test_type`.
    pub fn match_eligible_classifiers(
        &self,
        species: &str,
        viewed_test_type: &str,
    ) -> Vec<Arc<ClassifierSpec>> {
        self.specs
            .iter()
            .zip(&self.enabled)
            .filter(|(spec, enabled)| {
                enabled.load(Ordering::Acquire)
                    && spec.species.contains(species)
                    && spec.required_test_types.contains(viewed_test_type)
            })
            .map(|(spec, _)| Arc::clone(spec))
            .collect()
    }
}

fn default_true() -> bool {
    true
}
fn default_encoding() -> Encoding {
    Encoding::Numeric
}
fn default_cap() -> usize {
    DEFAULT_COMBINATION_CAP
}
fn default_sidecar_timeout() -> u64 {
    DEFAULT_SIDECAR_TIMEOUT_MS
}
fn default_ehr_timeout() -> u64 {
    DEFAULT_EHR_TIMEOUT_MS
}
fn default_max_window() -> u32 {
    DEFAULT_MAX_WINDOW_DAYS
}
fn default_sidecar_path() -> String {
    "/predict".to_string()
}
