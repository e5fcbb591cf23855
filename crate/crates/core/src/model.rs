//! Shared domain vocabulary: observations, plugin descriptors, instance
//! configurations and adaptation commands, plus their validation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Nanoseconds since the Unix epoch.
pub type TimestampNs = u64;

/// One sampled indicator value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct Observation {
    pub indicator: String,
    pub target: String,
    pub timestamp: TimestampNs,
    pub value: f64,
    pub unit: String,
    #[serde(default)]
    pub labels: BTreeMap<String, String>,
    pub topic: String,
    pub source_instance: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ObservationError {
    #[error("timestamp must be positive")]
    ZeroTimestamp,
    #[error("indicator must not be empty")]
    EmptyIndicator,
    #[error("topic must not be empty")]
    EmptyTopic,
    #[error("value must be finite")]
    NonFiniteValue,
}

impl Observation {
    pub fn check(&self) -> Result<(), ObservationError> {
        if self.timestamp == 0 {
            return Err(ObservationError::ZeroTimestamp);
        }
        if self.indicator.is_empty() {
            return Err(ObservationError::EmptyIndicator);
        }
        if self.topic.is_empty() {
            return Err(ObservationError::EmptyTopic);
        }
        if !self.value.is_finite() {
            return Err(ObservationError::NonFiniteValue);
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("malformed observation line: {0}")]
    Json(#[from] serde_json::Error),
    #[error("observation violates invariants: {0}")]
    Invalid(#[from] ObservationError),
}

/// Encodes one observation as a canonical NDJSON line (LF-terminated).
///
/// Keys follow the declaration order of [`Observation`] and labels are
/// sorted by key, so equal observations always produce identical bytes.
///
/// Negative zero is written as `0.0`, since it compares equal to it.
pub fn canonical_encode(obs: &Observation) -> Vec<u8> {
    let mut line = if obs.value == 0.0 && obs.value.is_sign_negative() {
        serde_json::to_vec(&Observation { value: 0.0, ..obs.clone() })
    } else {
        serde_json::to_vec(obs)
    }
    .expect("observation serialization is infallible");
    line.push(b'\n');
    line
}

/// Encodes a batch as concatenated canonical lines.
pub fn encode_batch(batch: &[Observation]) -> Vec<u8> {
    let mut out = Vec::with_capacity(batch.len() * 160);
    for obs in batch {
        out.extend_from_slice(&canonical_encode(obs));
    }
    out
}

/// Decodes one line (trailing LF optional) and checks the observation
/// invariants.
pub fn decode_line(line: &[u8]) -> Result<Observation, CodecError> {
    let trimmed = line.strip_suffix(b"\n").unwrap_or(line);
    let obs: Observation = serde_json::from_slice(trimmed)?;
    obs.check()?;
    Ok(obs)
}

/// Decodes every non-empty line of an NDJSON document.
pub fn decode_ndjson(doc: &[u8]) -> Result<Vec<Observation>, CodecError> {
    doc.split(|b| *b == b'\n')
        .filter(|l| !l.is_empty())
        .map(decode_line)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PluginKind {
    Collector,
    Publisher,
}

impl fmt::Display for PluginKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PluginKind::Collector => "collector",
            PluginKind::Publisher => "publisher",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Builtin,
    External,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamType {
    String,
    Int,
    Real,
    Bool,
    Duration,
}

impl fmt::Display for ParamType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ParamType::String => "string",
            ParamType::Int => "int",
            ParamType::Real => "real",
            ParamType::Bool => "bool",
            ParamType::Duration => "duration",
        };
        f.write_str(s)
    }
}

/// A scalar parameter value. Duration parameters are normalized to
/// integer milliseconds once validated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Scalar {
    Bool(bool),
    Int(i64),
    Real(f64),
    Str(String),
}

impl Scalar {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Scalar::Int(v) => Some(*v as f64),
            Scalar::Real(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_i64(&self) -> Option<i64> {
        match self {
            Scalar::Int(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Scalar::Str(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_bool(&self) -> Option<bool> {
        match self {
            Scalar::Bool(b) => Some(*b),
            _ => None,
        }
    }

    /// Coerces a raw value to the declared type, or `None` on mismatch.
    pub fn coerce(&self, ty: ParamType) -> Option<Scalar> {
        match (ty, self) {
            (ParamType::String, Scalar::Str(_)) => Some(self.clone()),
            (ParamType::Bool, Scalar::Bool(_)) => Some(self.clone()),
            (ParamType::Int, Scalar::Int(_)) => Some(self.clone()),
            (ParamType::Real, Scalar::Real(v)) if v.is_finite() => Some(self.clone()),
            (ParamType::Real, Scalar::Int(v)) => Some(Scalar::Real(*v as f64)),
            (ParamType::Duration, Scalar::Int(v)) if *v >= 0 => Some(self.clone()),
            (ParamType::Duration, Scalar::Str(s)) => parse_duration_ms(s)
                .ok()
                .and_then(|ms| i64::try_from(ms).ok())
                .map(Scalar::Int),
            _ => None,
        }
    }
}

impl fmt::Display for Scalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scalar::Bool(v) => write!(f, "{v}"),
            Scalar::Int(v) => write!(f, "{v}"),
            Scalar::Real(v) => write!(f, "{v}"),
            Scalar::Str(v) => f.write_str(v),
        }
    }
}

/// Parses "500ms", "2s", "1m 30s" or a bare millisecond count.
pub fn parse_duration_ms(s: &str) -> Result<u64, String> {
    let s = s.trim();
    if let Ok(ms) = s.parse::<u64>() {
        return Ok(ms);
    }
    let d = humantime::parse_duration(s).map_err(|e| format!("invalid duration {s:?}: {e}"))?;
    if d.subsec_nanos() % 1_000_000 != 0 {
        return Err(format!("duration {s:?} has sub-millisecond precision"));
    }
    u64::try_from(d.as_millis()).map_err(|_| format!("duration {s:?} out of range"))
}

pub fn format_duration_ms(ms: u64) -> String {
    if ms > 0 && ms % 1000 == 0 {
        format!("{}s", ms / 1000)
    } else {
        format!("{ms}ms")
    }
}

/// A sampling period in whole milliseconds. Serialized as a duration
/// string ("500ms", "2s"); integers are read as milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Period(u64);

impl Period {
    pub const fn from_millis(ms: u64) -> Self {
        Period(ms)
    }

    pub const fn as_millis(self) -> u64 {
        self.0
    }

    pub fn as_duration(self) -> Duration {
        Duration::from_millis(self.0)
    }

    pub fn clamp(self, lo: Period, hi: Period) -> Period {
        Period(self.0.clamp(lo.0, hi.0.max(lo.0)))
    }
}

impl fmt::Display for Period {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&format_duration_ms(self.0))
    }
}

impl Serialize for Period {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Period {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Ms(u64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Ms(ms) => Ok(Period(ms)),
            Raw::Text(s) => parse_duration_ms(&s).map(Period).map_err(serde::de::Error::custom),
        }
    }
}

/// Global sampling period bounds enforced on every collector config.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeriodBounds {
    pub min: Period,
    pub max: Period,
}

impl Default for PeriodBounds {
    fn default() -> Self {
        PeriodBounds {
            min: Period::from_millis(10),
            max: Period::from_millis(3_600_000),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct ParamSpec {
    pub name: String,
    #[serde(rename = "type")]
    pub ty: ParamType,
    #[serde(default)]
    pub required: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<Scalar>,
}

impl ParamSpec {
    pub fn optional(name: &str, ty: ParamType, default: Scalar) -> Self {
        ParamSpec { name: name.to_string(), ty, required: false, default: Some(default) }
    }

    pub fn required(name: &str, ty: ParamType) -> Self {
        ParamSpec { name: name.to_string(), ty, required: true, default: None }
    }
}

/// Identity and parameter schema of a loadable behavior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PluginDescriptor {
    pub id: String,
    pub kind: PluginKind,
    pub provenance: Provenance,
    pub version: String,
    #[serde(default)]
    pub param_schema: Vec<ParamSpec>,
    /// Metric sampler ids offered by a collector plugin.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub samplers: Vec<String>,
    /// Data analyzer ids offered by a collector plugin.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub analyzers: Vec<String>,
    /// Closed indicator vocabulary; `None` accepts any indicator name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub indicators: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entry: Option<String>,
    /// sha256 of the uploaded bundle, hex.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub digest: Option<String>,
}

pub fn is_valid_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 128
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

impl PluginDescriptor {
    pub fn param(&self, name: &str) -> Option<&ParamSpec> {
        self.param_schema.iter().find(|p| p.name == name)
    }

    /// Structural checks on the descriptor itself; returns every problem found.
    pub fn check(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if !is_valid_id(&self.id) {
            problems.push(format!("invalid plugin id {:?}", self.id));
        }
        if self.version.trim().is_empty() {
            problems.push("version must not be empty".to_string());
        }
        if self.provenance == Provenance::External
            && self.entry.as_deref().map_or(true, |e| e.trim().is_empty())
        {
            problems.push("external plugins must declare an entry".to_string());
        }
        let mut seen = BTreeSet::new();
        for p in &self.param_schema {
            if !seen.insert(p.name.as_str()) {
                problems.push(format!("duplicate parameter {:?}", p.name));
            }
            if p.name.is_empty() {
                problems.push("parameter names must not be empty".to_string());
            }
            if let Some(default) = &p.default {
                if default.coerce(p.ty).is_none() {
                    problems.push(format!("default of {:?} is not a {}", p.name, p.ty));
                }
            }
        }
        if self.kind == PluginKind::Collector {
            if self.samplers.is_empty() {
                problems.push("collector plugins must offer at least one sampler".to_string());
            }
            if self.analyzers.is_empty() {
                problems.push("collector plugins must offer at least one analyzer".to_string());
            }
        }
        for (label, ids) in [("sampler", &self.samplers), ("analyzer", &self.analyzers)] {
            let unique: BTreeSet<_> = ids.iter().collect();
            if unique.len() != ids.len() {
                problems.push(format!("duplicate {label} ids"));
            }
        }
        problems
    }
}

/// Runtime configuration of one plugin instance.
///
/// Collectors use every field; publishers use `topics` as their topic
/// filter and `params` for sink settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct InstanceConfig {
    pub plugin_id: String,
    #[serde(default)]
    pub target_spec: BTreeMap<String, String>,
    #[serde(default)]
    pub indicators: BTreeSet<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampling_period: Option<Period>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub active_sampler: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub active_analyzer: Option<String>,
    #[serde(default, alias = "analyzerParams")]
    pub params: BTreeMap<String, Scalar>,
    #[serde(default)]
    pub topics: Vec<String>,
}

impl InstanceConfig {
    pub fn new(plugin_id: impl Into<String>) -> Self {
        InstanceConfig {
            plugin_id: plugin_id.into(),
            target_spec: BTreeMap::new(),
            indicators: BTreeSet::new(),
            sampling_period: None,
            active_sampler: None,
            active_analyzer: None,
            params: BTreeMap::new(),
            topics: Vec::new(),
        }
    }

    pub fn period(&self) -> Period {
        self.sampling_period.unwrap_or(DEFAULT_PERIOD)
    }

    /// Resource identifier stamped on emitted observations.
    pub fn target(&self) -> &str {
        self.target_spec
            .get("target")
            .or_else(|| self.target_spec.get("host"))
            .map(String::as_str)
            .unwrap_or("localhost")
    }

    /// Topic stamped on emitted observations (collectors).
    pub fn topic(&self) -> &str {
        self.topics.first().map(String::as_str).unwrap_or(&self.plugin_id)
    }

    pub fn sampler(&self) -> &str {
        self.active_sampler.as_deref().unwrap_or_default()
    }

    pub fn analyzer(&self) -> &str {
        self.active_analyzer.as_deref().unwrap_or_default()
    }

    pub fn param_f64(&self, key: &str) -> Option<f64> {
        self.params.get(key).and_then(Scalar::as_f64)
    }

    pub fn param_i64(&self, key: &str) -> Option<i64> {
        self.params.get(key).and_then(Scalar::as_i64)
    }

    pub fn param_str(&self, key: &str) -> Option<&str> {
        self.params.get(key).and_then(Scalar::as_str)
    }

    /// Period bounds declared through `minPeriod`/`maxPeriod` params,
    /// intersected with the global bounds.
    pub fn period_bounds(&self, global: PeriodBounds) -> PeriodBounds {
        let lo = self
            .param_i64("minPeriod")
            .map(|ms| Period::from_millis(ms.max(0) as u64))
            .unwrap_or(global.min)
            .max(global.min);
        let hi = self
            .param_i64("maxPeriod")
            .map(|ms| Period::from_millis(ms.max(0) as u64))
            .unwrap_or(global.max)
            .min(global.max);
        PeriodBounds { min: lo, max: hi.max(lo) }
    }

    /// Applies a partial update; absent fields are left unchanged.
    pub fn merged(&self, patch: &ConfigPatch) -> InstanceConfig {
        let mut out = self.clone();
        if let Some(id) = &patch.plugin_id {
            out.plugin_id = id.clone();
        }
        for (k, v) in &patch.target_spec {
            match v {
                Some(v) => out.target_spec.insert(k.clone(), v.clone()),
                None => out.target_spec.remove(k),
            };
        }
        if let Some(ind) = &patch.indicators {
            out.indicators = ind.clone();
        }
        if let Some(p) = patch.sampling_period {
            out.sampling_period = Some(p);
        }
        if let Some(s) = &patch.active_sampler {
            out.active_sampler = Some(s.clone());
        }
        if let Some(a) = &patch.active_analyzer {
            out.active_analyzer = Some(a.clone());
        }
        for (k, v) in &patch.params {
            match v {
                Some(v) => out.params.insert(k.clone(), v.clone()),
                None => out.params.remove(k),
            };
        }
        if let Some(t) = &patch.topics {
            out.topics = t.clone();
        }
        out
    }

    /// Validates against the descriptor's schema using the default global bounds.
    pub fn validate(&self, desc: &PluginDescriptor) -> Result<InstanceConfig, Vec<ConfigViolation>> {
        validate_instance_config(self, desc, PeriodBounds::default())
    }
}

pub const DEFAULT_PERIOD: Period = Period::from_millis(1000);

/// Partial [`InstanceConfig`]. Map entries set to `null` are removed.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct ConfigPatch {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plugin_id: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub target_spec: BTreeMap<String, Option<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub indicators: Option<BTreeSet<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampling_period: Option<Period>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub active_sampler: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub active_analyzer: Option<String>,
    #[serde(default, alias = "analyzerParams", skip_serializing_if = "BTreeMap::is_empty")]
    pub params: BTreeMap<String, Option<Scalar>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topics: Option<Vec<String>>,
}

impl ConfigPatch {
    pub fn is_empty(&self) -> bool {
        *self == ConfigPatch::default()
    }
}

#[derive(Debug, Clone, PartialEq, Error, Serialize, Deserialize)]
#[serde(tag = "violation", rename_all = "camelCase")]
pub enum ConfigViolation {
    #[error("unknown parameter {name:?}")]
    UnknownParam { name: String },
    #[error("missing required parameter {name:?}")]
    MissingRequiredParam { name: String },
    #[error("parameter {name:?} must be of type {expected}")]
    TypeMismatch { name: String, expected: ParamType },
    #[error("sampling period {ms} ms outside [{min}, {max}] ms")]
    PeriodOutOfRange { ms: u64, min: u64, max: u64 },
    #[error("indicator set must not be empty")]
    EmptyIndicators,
    #[error("indicator {name:?} is not supported by this plugin")]
    UnsupportedIndicator { name: String },
    #[error("unknown sampler {id:?}")]
    UnknownSampler { id: String },
    #[error("unknown analyzer {id:?}")]
    UnknownAnalyzer { id: String },
    #[error("invalid topic {topic:?}")]
    InvalidTopic { topic: String },
    #[error("field {field:?} does not apply to {kind} instances")]
    NotApplicable { field: String, kind: PluginKind },
    #[error("config names plugin {found:?}, expected {expected:?}")]
    PluginMismatch { expected: String, found: String },
    #[error("{message}")]
    Constraint { message: String },
}

fn valid_topic_name(t: &str) -> bool {
    !t.is_empty() && !t.contains('*') && !t.chars().any(char::is_whitespace)
}

/// A topic filter entry: an exact name or a prefix ending in `*`.
pub fn valid_topic_pattern(p: &str) -> bool {
    match p.strip_suffix('*') {
        Some(prefix) => !prefix.contains('*') && !prefix.chars().any(char::is_whitespace),
        None => valid_topic_name(p),
    }
}

/// Checks `cfg` against `desc` and fills defaults from the parameter schema.
///
/// All violations are collected; the result is either the normalized
/// config or the complete list. Validating a validated config returns it
/// unchanged.
pub fn validate_instance_config(
    cfg: &InstanceConfig,
    desc: &PluginDescriptor,
    bounds: PeriodBounds,
) -> Result<InstanceConfig, Vec<ConfigViolation>> {
    let mut errs = Vec::new();
    let mut out = cfg.clone();

    if cfg.plugin_id != desc.id {
        errs.push(ConfigViolation::PluginMismatch {
            expected: desc.id.clone(),
            found: cfg.plugin_id.clone(),
        });
    }

    for name in cfg.params.keys() {
        if desc.param(name).is_none() {
            errs.push(ConfigViolation::UnknownParam { name: name.clone() });
        }
    }
    for spec in &desc.param_schema {
        match cfg.params.get(&spec.name) {
            Some(raw) => match raw.coerce(spec.ty) {
                Some(v) => {
                    out.params.insert(spec.name.clone(), v);
                }
                None => errs.push(ConfigViolation::TypeMismatch {
                    name: spec.name.clone(),
                    expected: spec.ty,
                }),
            },
            None => match (&spec.default, spec.required) {
                (Some(d), _) => {
                    if let Some(v) = d.coerce(spec.ty) {
                        out.params.insert(spec.name.clone(), v);
                    }
                }
                (None, true) => {
                    errs.push(ConfigViolation::MissingRequiredParam { name: spec.name.clone() })
                }
                (None, false) => {}
            },
        }
    }

    match desc.kind {
        PluginKind::Collector => {
            let period = cfg.sampling_period.unwrap_or(DEFAULT_PERIOD);
            if period < bounds.min || period > bounds.max {
                errs.push(ConfigViolation::PeriodOutOfRange {
                    ms: period.as_millis(),
                    min: bounds.min.as_millis(),
                    max: bounds.max.as_millis(),
                });
            }
            out.sampling_period = Some(period);

            if cfg.indicators.is_empty() {
                errs.push(ConfigViolation::EmptyIndicators);
            }
            if let Some(vocab) = &desc.indicators {
                for ind in &cfg.indicators {
                    if !vocab.contains(ind) {
                        errs.push(ConfigViolation::UnsupportedIndicator { name: ind.clone() });
                    }
                }
            }
            for ind in &cfg.indicators {
                if ind.trim().is_empty() {
                    errs.push(ConfigViolation::Constraint {
                        message: "indicator names must not be blank".to_string(),
                    });
                }
            }

            match &cfg.active_sampler {
                Some(id) if !desc.samplers.contains(id) => {
                    errs.push(ConfigViolation::UnknownSampler { id: id.clone() })
                }
                Some(_) => {}
                None => out.active_sampler = desc.samplers.first().cloned(),
            }
            match &cfg.active_analyzer {
                Some(id) if !desc.analyzers.contains(id) => {
                    errs.push(ConfigViolation::UnknownAnalyzer { id: id.clone() })
                }
                Some(_) => {}
                None => out.active_analyzer = desc.analyzers.first().cloned(),
            }

            if cfg.topics.len() > 1 {
                errs.push(ConfigViolation::Constraint {
                    message: "collectors tag output with exactly one topic".to_string(),
                });
            }
            for t in &cfg.topics {
                if !valid_topic_name(t) {
                    errs.push(ConfigViolation::InvalidTopic { topic: t.clone() });
                }
            }
            if cfg.topics.is_empty() {
                out.topics = vec![desc.id.clone()];
            }
        }
        PluginKind::Publisher => {
            let kind = PluginKind::Publisher;
            if cfg.sampling_period.is_some() {
                errs.push(ConfigViolation::NotApplicable { field: "samplingPeriod".into(), kind });
            }
            if cfg.active_sampler.is_some() {
                errs.push(ConfigViolation::NotApplicable { field: "activeSampler".into(), kind });
            }
            if cfg.active_analyzer.is_some() {
                errs.push(ConfigViolation::NotApplicable { field: "activeAnalyzer".into(), kind });
            }
            if !cfg.indicators.is_empty() {
                errs.push(ConfigViolation::NotApplicable { field: "indicators".into(), kind });
            }
            if cfg.topics.is_empty() {
                errs.push(ConfigViolation::Constraint {
                    message: "publishers need a nonempty topic filter".to_string(),
                });
            }
            for t in &cfg.topics {
                if !valid_topic_pattern(t) {
                    errs.push(ConfigViolation::InvalidTopic { topic: t.clone() });
                }
            }
        }
    }

    if errs.is_empty() {
        Ok(out)
    } else {
        Err(errs)
    }
}

/// A request from an analyzer (or the API) to change the running config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "camelCase")]
pub enum CommandKind {
    SetSamplingPeriod { period: Period },
    SwitchSampler { id: String },
    SwitchAnalyzer { id: String },
    SetParam { key: String, value: Scalar },
}

impl fmt::Display for CommandKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CommandKind::SetSamplingPeriod { period } => write!(f, "setSamplingPeriod({period})"),
            CommandKind::SwitchSampler { id } => write!(f, "switchSampler({id})"),
            CommandKind::SwitchAnalyzer { id } => write!(f, "switchAnalyzer({id})"),
            CommandKind::SetParam { key, value } => write!(f, "setParam({key}={value})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AdaptationCommand {
    #[serde(flatten)]
    pub kind: CommandKind,
    #[serde(default)]
    pub issued_by: String,
    #[serde(default)]
    pub reason: String,
}

impl AdaptationCommand {
    pub fn new(kind: CommandKind, issued_by: impl Into<String>, reason: impl Into<String>) -> Self {
        AdaptationCommand { kind, issued_by: issued_by.into(), reason: reason.into() }
    }
}
