//! The agent: registry, managers, Data Manager and clock wired together.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use tokio::time::Instant;
use tracing::info;

use crate::builtin::sinks::CaptureRegistry;
use crate::builtin::{CaptureSinkFactory, FileSinkFactory, HttpSinkFactory, SyntheticCollector, SystemCollector};
use crate::bus::{DataManager, SubscriptionStats};
use crate::clock::Clock;
use crate::lifecycle::{InstanceSpec, InstanceState, Lifecycle, ManagerEnv, PluginRegistry};
use crate::model::{Period, PeriodBounds, PluginKind, TimestampNs};

pub const AGENT_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const DEFAULT_BIND: &str = "127.0.0.1:7700";

fn default_bind() -> String {
    DEFAULT_BIND.to_string()
}

/// Period bounds as written in the config file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundsConfig {
    pub min: Period,
    pub max: Period,
}

/// One instance started when the agent boots.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct BootstrapEntry {
    pub kind: PluginKind,
    #[serde(flatten)]
    pub spec: InstanceSpec,
}

/// Agent config file.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct AgentConfig {
    #[serde(default = "default_bind")]
    pub bind: String,
    #[serde(default)]
    pub auth_token: Option<String>,
    #[serde(default)]
    pub period_bounds: Option<BoundsConfig>,
    #[serde(default)]
    pub bootstrap: Vec<BootstrapEntry>,
    /// Where uploaded bundles are unpacked.
    #[serde(default)]
    pub data_dir: Option<PathBuf>,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig { bind: default_bind(), auth_token: None, period_bounds: None, bootstrap: Vec::new(), data_dir: None }
    }
}

impl AgentConfig {
    pub fn from_json(text: &str) -> Result<Self, String> {
        serde_json::from_str(text).map_err(|e| e.to_string())
    }

    /// Static checks; returns every problem found.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.bind.parse::<SocketAddr>().is_err() {
            out.push(format!("bind {:?} is not a socket address", self.bind));
        }
        if let Some(token) = &self.auth_token {
            if token.trim().is_empty() {
                out.push("authToken must not be empty".to_string());
            }
        }
        if let Some(b) = self.period_bounds {
            let global = PeriodBounds::default();
            if b.min < global.min || b.max > global.max {
                out.push(format!("periodBounds must lie within [{}, {}]", global.min, global.max));
            }
            if b.min >= b.max {
                out.push("periodBounds.min must be below periodBounds.max".to_string());
            }
        }
        out
    }

    pub fn bounds(&self) -> PeriodBounds {
        self.period_bounds.map_or_else(PeriodBounds::default, |b| PeriodBounds { min: b.min, max: b.max })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct InstanceCounts {
    pub collectors: BTreeMap<InstanceState, usize>,
    pub publishers: BTreeMap<InstanceState, usize>,
}

/// Payload of `GET /api/v1/status`.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct AgentStatus {
    pub agent_version: String,
    pub started_at: TimestampNs,
    pub uptime_ms: u64,
    pub plugins: BTreeMap<String, usize>,
    pub instances: InstanceCounts,
    pub bus: BTreeMap<String, SubscriptionStats>,
}

pub struct Agent {
    pub lifecycle: Lifecycle,
    pub bus: Arc<DataManager>,
    pub clock: Arc<dyn Clock>,
    /// Buffers of `capture-sink` publishers, keyed by instance id.
    pub captures: Arc<CaptureRegistry>,
    pub auth_token: Option<String>,
    started_at: TimestampNs,
    started: Instant,
}

impl Agent {
    /// Creates an agent with the builtin plugins registered and no
    /// instances.
    pub fn new(config: &AgentConfig, clock: Arc<dyn Clock>) -> Self {
        let data_dir = config
            .data_dir
            .clone()
            .unwrap_or_else(|| std::env::temp_dir().join(format!("reprobe-{}", std::process::id())));
        let registry = Arc::new(PluginRegistry::new(data_dir.join("plugins")));
        let captures = Arc::new(CaptureRegistry::default());
        let builtins = [
            registry.register_builtin_collector(Arc::new(SyntheticCollector)),
            registry.register_builtin_collector(Arc::new(SystemCollector)),
            registry.register_builtin_publisher(Arc::new(FileSinkFactory)),
            registry.register_builtin_publisher(Arc::new(HttpSinkFactory)),
            registry.register_builtin_publisher(Arc::new(CaptureSinkFactory { registry: captures.clone() })),
        ];
        for r in builtins {
            r.expect("builtin plugins have distinct ids and valid descriptors");
        }
        let bus = Arc::new(DataManager::new());
        let env = ManagerEnv { registry, bus: bus.clone(), clock: clock.clone(), bounds: config.bounds() };
        Agent {
            lifecycle: Lifecycle::new(env),
            bus,
            started_at: clock.now_ns(),
            clock,
            captures,
            auth_token: config.auth_token.clone(),
            started: Instant::now(),
        }
    }

    /// Starts the bootstrap instances in order; publishers first so no
    /// early collector output is lost. Returns every failure.
    pub async fn bootstrap(&self, entries: &[BootstrapEntry]) -> Result<(), Vec<String>> {
        let mut errors = Vec::new();
        let ordered = entries
            .iter()
            .filter(|e| e.kind == PluginKind::Publisher)
            .chain(entries.iter().filter(|e| e.kind == PluginKind::Collector));
        for entry in ordered {
            let manager = self.lifecycle.manager(entry.kind);
            match manager.instantiate(entry.spec.clone()).await {
                Ok(rec) => info!(instance = %rec.instance_id, plugin = %rec.plugin_id, "bootstrap instance started"),
                Err(e) => errors.push(format!("bootstrap {} {:?}: {e}", entry.kind, entry.spec.config.plugin_id)),
            }
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(errors)
        }
    }

    pub fn uptime_ms(&self) -> u64 {
        self.started.elapsed().as_millis() as u64
    }

    pub fn status(&self) -> AgentStatus {
        AgentStatus {
            agent_version: AGENT_VERSION.to_string(),
            started_at: self.started_at,
            uptime_ms: self.uptime_ms(),
            plugins: self.lifecycle.registry.counts(),
            instances: InstanceCounts {
                collectors: self.lifecycle.collectors.counts_by_state(),
                publishers: self.lifecycle.publishers.counts_by_state(),
            },
            bus: self.bus.stats(),
        }
    }

    pub async fn shutdown(&self) {
        self.lifecycle.shutdown().await;
    }
}
