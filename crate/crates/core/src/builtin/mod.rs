//! Compiled-in plugins.

pub mod analyzers;
pub mod samplers;
pub mod signal;
pub mod sinks;

use std::sync::Arc;
use std::time::Duration;

use crate::collector::BehaviorSet;
use crate::model::{
    ConfigViolation, InstanceConfig, ParamSpec, ParamType, PluginDescriptor, PluginKind, Provenance, Scalar,
};
use crate::publisher::Sink;

use analyzers::{
    AdaptiveRateAnalyzer, AdaptiveRateParams, AggregatorAnalyzer, PassthroughAnalyzer, ADAPTIVE_ID, AGGREGATOR_ID,
    PASSTHROUGH_ID,
};
use samplers::{signal_from_target, ProcfsSampler, SyntheticMode, SyntheticSampler, SYSTEM_INDICATORS};
use sinks::{CaptureRegistry, CaptureSink, FileSink, HttpSink, RetryPolicy};

pub const SYNTHETIC_COLLECTOR: &str = "synthetic-sampler";
pub const SYSTEM_COLLECTOR: &str = "system-sampler";
pub const FILE_SINK: &str = "file-sink";
pub const HTTP_SINK: &str = "http-sink";
pub const CAPTURE_SINK: &str = "capture-sink";

const BUILTIN_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Source of compiled-in collector behaviors.
pub trait CollectorFactory: Send + Sync {
    fn descriptor(&self) -> PluginDescriptor;

    /// Constraints beyond the parameter schema.
    fn check(&self, _cfg: &InstanceConfig) -> Vec<ConfigViolation> {
        Vec::new()
    }

    fn build(&self, instance_id: &str, cfg: &InstanceConfig) -> Result<BehaviorSet, String>;
}

/// Source of compiled-in publisher sinks.
pub trait PublisherFactory: Send + Sync {
    fn descriptor(&self) -> PluginDescriptor;

    fn check(&self, _cfg: &InstanceConfig) -> Vec<ConfigViolation> {
        Vec::new()
    }

    fn build(&self, instance_id: &str, cfg: &InstanceConfig) -> Result<Box<dyn Sink>, String>;
}

fn analyzer_params() -> Vec<ParamSpec> {
    vec![
        ParamSpec::optional("windowSize", ParamType::Int, Scalar::Int(8)),
        ParamSpec::optional("lowThreshold", ParamType::Real, Scalar::Real(0.05)),
        ParamSpec::optional("highThreshold", ParamType::Real, Scalar::Real(0.25)),
        ParamSpec::optional("factor", ParamType::Real, Scalar::Real(2.0)),
        ParamSpec::optional("minPeriod", ParamType::Duration, Scalar::Int(50)),
        ParamSpec::optional("maxPeriod", ParamType::Duration, Scalar::Int(1600)),
        ParamSpec::optional("epsilon", ParamType::Real, Scalar::Real(1e-9)),
    ]
}

fn analyzer_ids() -> Vec<String> {
    vec![PASSTHROUGH_ID.into(), AGGREGATOR_ID.into(), ADAPTIVE_ID.into()]
}

fn check_analyzer_params(cfg: &InstanceConfig) -> Vec<ConfigViolation> {
    let params = AdaptiveRateParams::from_config(cfg);
    let mut problems = if cfg.analyzer() == ADAPTIVE_ID {
        params.problems()
    } else {
        let mut p = Vec::new();
        if params.window_size < 1 {
            p.push("windowSize must be at least 1".to_string());
        }
        if params.min_period >= params.max_period {
            p.push("minPeriod must be below maxPeriod".to_string());
        }
        p
    };
    problems.dedup();
    problems.into_iter().map(|message| ConfigViolation::Constraint { message }).collect()
}

fn with_analyzers(set: BehaviorSet) -> BehaviorSet {
    set.with_analyzer(PASSTHROUGH_ID, PassthroughAnalyzer)
        .with_analyzer(AGGREGATOR_ID, AggregatorAnalyzer::new())
        .with_analyzer(ADAPTIVE_ID, AdaptiveRateAnalyzer::new())
}

/// Deterministic test signal; the signal is read from `targetSpec.signal`.
#[derive(Debug, Default)]
pub struct SyntheticCollector;

impl CollectorFactory for SyntheticCollector {
    fn descriptor(&self) -> PluginDescriptor {
        PluginDescriptor {
            id: SYNTHETIC_COLLECTOR.into(),
            kind: PluginKind::Collector,
            provenance: Provenance::Builtin,
            version: BUILTIN_VERSION.into(),
            param_schema: analyzer_params(),
            samplers: vec!["direct".into(), "smoothed".into()],
            analyzers: analyzer_ids(),
            indicators: None,
            entry: None,
            digest: None,
        }
    }

    fn check(&self, cfg: &InstanceConfig) -> Vec<ConfigViolation> {
        let mut out = check_analyzer_params(cfg);
        if let Err(message) = signal_from_target(&cfg.target_spec) {
            out.push(ConfigViolation::Constraint { message });
        }
        out
    }

    fn build(&self, _instance_id: &str, _cfg: &InstanceConfig) -> Result<BehaviorSet, String> {
        Ok(with_analyzers(
            BehaviorSet::new()
                .with_sampler("direct", SyntheticSampler::new(SyntheticMode::Direct))
                .with_sampler("smoothed", SyntheticSampler::new(SyntheticMode::Smoothed)),
        ))
    }
}

/// Host CPU, memory and network indicators.
#[derive(Debug, Default)]
pub struct SystemCollector;

impl CollectorFactory for SystemCollector {
    fn descriptor(&self) -> PluginDescriptor {
        PluginDescriptor {
            id: SYSTEM_COLLECTOR.into(),
            kind: PluginKind::Collector,
            provenance: Provenance::Builtin,
            version: BUILTIN_VERSION.into(),
            param_schema: analyzer_params(),
            samplers: vec!["procfs".into()],
            analyzers: analyzer_ids(),
            indicators: Some(SYSTEM_INDICATORS.iter().map(|s| s.to_string()).collect()),
            entry: None,
            digest: None,
        }
    }

    fn check(&self, cfg: &InstanceConfig) -> Vec<ConfigViolation> {
        check_analyzer_params(cfg)
    }

    fn build(&self, _instance_id: &str, _cfg: &InstanceConfig) -> Result<BehaviorSet, String> {
        Ok(with_analyzers(BehaviorSet::new().with_sampler("procfs", ProcfsSampler::new())))
    }
}

fn queue_params() -> Vec<ParamSpec> {
    vec![
        ParamSpec::optional("capacity", ParamType::Int, Scalar::Int(1024)),
        ParamSpec::optional("batchSize", ParamType::Int, Scalar::Int(256)),
    ]
}

fn check_queue_params(cfg: &InstanceConfig) -> Vec<ConfigViolation> {
    let mut out = Vec::new();
    for key in ["capacity", "batchSize"] {
        if cfg.param_i64(key).is_some_and(|v| v < 1) {
            out.push(ConfigViolation::Constraint { message: format!("{key} must be at least 1") });
        }
    }
    out
}

fn publisher_descriptor(id: &str, mut extra: Vec<ParamSpec>) -> PluginDescriptor {
    let mut schema = queue_params();
    schema.append(&mut extra);
    PluginDescriptor {
        id: id.into(),
        kind: PluginKind::Publisher,
        provenance: Provenance::Builtin,
        version: BUILTIN_VERSION.into(),
        param_schema: schema,
        samplers: Vec::new(),
        analyzers: Vec::new(),
        indicators: None,
        entry: None,
        digest: None,
    }
}

#[derive(Debug, Default)]
pub struct FileSinkFactory;

impl PublisherFactory for FileSinkFactory {
    fn descriptor(&self) -> PluginDescriptor {
        publisher_descriptor(FILE_SINK, vec![ParamSpec::required("path", ParamType::String)])
    }

    fn check(&self, cfg: &InstanceConfig) -> Vec<ConfigViolation> {
        let mut out = check_queue_params(cfg);
        if cfg.param_str("path").is_some_and(|p| p.trim().is_empty()) {
            out.push(ConfigViolation::Constraint { message: "path must not be empty".into() });
        }
        out
    }

    fn build(&self, _instance_id: &str, cfg: &InstanceConfig) -> Result<Box<dyn Sink>, String> {
        let path = cfg.param_str("path").ok_or("missing path")?;
        Ok(Box::new(FileSink::open(path).map_err(|e| e.to_string())?))
    }
}

#[derive(Debug, Default)]
pub struct HttpSinkFactory;

fn retry_policy(cfg: &InstanceConfig) -> RetryPolicy {
    let d = RetryPolicy::default();
    let ms = |key: &str, fallback: Duration| {
        cfg.param_i64(key).map(|v| Duration::from_millis(v.max(0) as u64)).unwrap_or(fallback)
    };
    RetryPolicy {
        retries: cfg.param_i64("retries").map_or(d.retries, |v| v.clamp(0, 16) as u32),
        backoff: ms("backoff", d.backoff),
        timeout: ms("timeout", d.timeout),
    }
}

impl PublisherFactory for HttpSinkFactory {
    fn descriptor(&self) -> PluginDescriptor {
        publisher_descriptor(
            HTTP_SINK,
            vec![
                ParamSpec::required("url", ParamType::String),
                ParamSpec::optional("retries", ParamType::Int, Scalar::Int(2)),
                ParamSpec::optional("backoff", ParamType::Duration, Scalar::Int(250)),
                ParamSpec::optional("timeout", ParamType::Duration, Scalar::Int(5000)),
            ],
        )
    }

    fn check(&self, cfg: &InstanceConfig) -> Vec<ConfigViolation> {
        let mut out = check_queue_params(cfg);
        if let Some(url) = cfg.param_str("url") {
            if reqwest::Url::parse(url).is_err() {
                out.push(ConfigViolation::Constraint { message: format!("invalid url {url:?}") });
            }
        }
        if cfg.param_i64("retries").is_some_and(|r| !(0..=16).contains(&r)) {
            out.push(ConfigViolation::Constraint { message: "retries must be within 0..=16".into() });
        }
        out
    }

    fn build(&self, _instance_id: &str, cfg: &InstanceConfig) -> Result<Box<dyn Sink>, String> {
        let url = cfg.param_str("url").ok_or("missing url")?;
        Ok(Box::new(HttpSink::new(url, retry_policy(cfg)).map_err(|e| e.to_string())?))
    }
}

/// In-memory sink; records are readable through the shared registry.
#[derive(Debug, Default)]
pub struct CaptureSinkFactory {
    pub registry: Arc<CaptureRegistry>,
}

impl PublisherFactory for CaptureSinkFactory {
    fn descriptor(&self) -> PluginDescriptor {
        publisher_descriptor(CAPTURE_SINK, Vec::new())
    }

    fn check(&self, cfg: &InstanceConfig) -> Vec<ConfigViolation> {
        check_queue_params(cfg)
    }

    fn build(&self, instance_id: &str, _cfg: &InstanceConfig) -> Result<Box<dyn Sink>, String> {
        Ok(Box::new(CaptureSink::new(self.registry.buffer_for(instance_id))))
    }
}

/// Whether a publisher config change requires a new sink.
pub fn sink_settings_changed(old: &InstanceConfig, new: &InstanceConfig) -> bool {
    let strip = |c: &InstanceConfig| {
        let mut p = c.params.clone();
        p.remove("capacity");
        p.remove("batchSize");
        (p, c.target_spec.clone())
    };
    strip(old) != strip(new)
}
