//! Plugin registry and the collector/publisher lifecycle managers.
//!
//! Both managers are the same type parameterized by [`PluginKind`]. Each
//! serializes its own mutations (instantiate, destroy, reconfigure); reads
//! and the data path never wait on them.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{info, warn};

use crate::builtin::{CollectorFactory, PublisherFactory};
use crate::bundle::{parse_bundle, unpack_bundle, BundleError};
use crate::bus::{DataManager, SubscriptionStats};
use crate::clock::Clock;
use crate::collector::{
    join_violations, AuditEntry, CollectorEngine, CollectorHandle, CollectorRuntime, CollectorStats, ConfigCheck,
    ControlError, Controller,
};
use crate::external::{ExternalCollector, ExternalSink, PluginProcess};
use crate::model::{
    is_valid_id, validate_instance_config, ConfigPatch, ConfigViolation, InstanceConfig, PeriodBounds,
    PluginDescriptor, PluginKind, Provenance, TimestampNs,
};
use crate::publisher::{
    capacity_of, PublisherHandle, PublisherRuntime, PublisherStats, Sink, DRAIN_DEADLINE,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum InstanceState {
    Created,
    Running,
    Reconfiguring,
    Stopped,
    Failed,
}

impl InstanceState {
    pub const ALL: [InstanceState; 5] = [
        InstanceState::Created,
        InstanceState::Running,
        InstanceState::Reconfiguring,
        InstanceState::Stopped,
        InstanceState::Failed,
    ];

    pub fn is_terminal(self) -> bool {
        matches!(self, InstanceState::Stopped | InstanceState::Failed)
    }

    /// Created, Running or Reconfiguring.
    pub fn is_live(self) -> bool {
        !self.is_terminal()
    }
}

impl fmt::Display for InstanceState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// The transition table.
pub fn legal_transition(from: InstanceState, to: InstanceState) -> bool {
    use InstanceState::*;
    matches!(
        (from, to),
        (Created, Running) | (Running, Reconfiguring) | (Reconfiguring, Running) | (Running, Stopped)
    ) || (to == Failed && !from.is_terminal())
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LifecycleError {
    #[error("malformed bundle: {0}")]
    MalformedBundle(String),
    #[error("plugin {0:?} is already registered with different contents")]
    RegisterConflict(String),
    #[error("invalid plugin schema: {}", .0.join("; "))]
    SchemaInvalid(Vec<String>),
    #[error("unknown plugin {0:?}")]
    UnknownPlugin(String),
    #[error("plugin {plugin:?} has live instances: {}", .instances.join(", "))]
    PluginInUse { plugin: String, instances: Vec<String> },
    #[error("builtin plugin {0:?} cannot be removed")]
    BuiltinImmutable(String),
    #[error("invalid config: {}", join_violations(.0))]
    InvalidConfig(Vec<ConfigViolation>),
    #[error("instance {instance_id} failed to start: {message}")]
    SpawnFailed { instance_id: String, message: String },
    #[error("unknown instance {0:?}")]
    UnknownInstance(String),
    #[error("instance id {0:?} is already taken")]
    InstanceExists(String),
    #[error("instance {0} is already {1}")]
    AlreadyTerminal(String, InstanceState),
    #[error("instance {0} is {1}")]
    IllegalState(String, InstanceState),
}

impl LifecycleError {
    /// Stable machine-readable code.
    pub fn code(&self) -> &'static str {
        match self {
            LifecycleError::MalformedBundle(_) => "malformed_bundle",
            LifecycleError::RegisterConflict(_) => "register_conflict",
            LifecycleError::SchemaInvalid(_) => "schema_invalid",
            LifecycleError::UnknownPlugin(_) => "unknown_plugin",
            LifecycleError::PluginInUse { .. } => "plugin_in_use",
            LifecycleError::BuiltinImmutable(_) => "builtin_immutable",
            LifecycleError::InvalidConfig(_) => "invalid_config",
            LifecycleError::SpawnFailed { .. } => "spawn_failed",
            LifecycleError::UnknownInstance(_) => "unknown_instance",
            LifecycleError::InstanceExists(_) => "instance_exists",
            LifecycleError::AlreadyTerminal(..) => "already_terminal",
            LifecycleError::IllegalState(..) => "illegal_state",
        }
    }
}

impl From<BundleError> for LifecycleError {
    fn from(e: BundleError) -> Self {
        match e {
            BundleError::Malformed(m) => LifecycleError::MalformedBundle(m),
            BundleError::SchemaInvalid(p) => LifecycleError::SchemaInvalid(p),
        }
    }
}

#[derive(Clone)]
enum PluginImpl {
    Collector(Arc<dyn CollectorFactory>),
    Publisher(Arc<dyn PublisherFactory>),
    External { entry: PathBuf, dir: PathBuf },
}

#[derive(Clone)]
struct RegisteredPlugin {
    descriptor: Arc<PluginDescriptor>,
    imp: PluginImpl,
}

/// All plugins known to the agent, one id namespace across kinds.
pub struct PluginRegistry {
    plugins: RwLock<BTreeMap<String, RegisteredPlugin>>,
    plugin_dir: PathBuf,
    uploads: tokio::sync::Mutex<()>,
}

impl PluginRegistry {
    /// `plugin_dir` receives unpacked external bundles.
    pub fn new(plugin_dir: impl Into<PathBuf>) -> Self {
        PluginRegistry {
            plugins: RwLock::new(BTreeMap::new()),
            plugin_dir: plugin_dir.into(),
            uploads: tokio::sync::Mutex::new(()),
        }
    }

    fn insert_builtin(&self, descriptor: PluginDescriptor, imp: PluginImpl) -> Result<(), LifecycleError> {
        let problems = descriptor.check();
        if !problems.is_empty() {
            return Err(LifecycleError::SchemaInvalid(problems));
        }
        let mut plugins = self.plugins.write();
        if plugins.contains_key(&descriptor.id) {
            return Err(LifecycleError::RegisterConflict(descriptor.id));
        }
        plugins.insert(descriptor.id.clone(), RegisteredPlugin { descriptor: Arc::new(descriptor), imp });
        Ok(())
    }

    pub fn register_builtin_collector(&self, factory: Arc<dyn CollectorFactory>) -> Result<(), LifecycleError> {
        let descriptor = factory.descriptor();
        self.insert_builtin(descriptor, PluginImpl::Collector(factory))
    }

    pub fn register_builtin_publisher(&self, factory: Arc<dyn PublisherFactory>) -> Result<(), LifecycleError> {
        let descriptor = factory.descriptor();
        self.insert_builtin(descriptor, PluginImpl::Publisher(factory))
    }

    /// Registers an uploaded bundle. Re-uploading identical bytes returns
    /// the existing descriptor.
    pub async fn upload(&self, bytes: &[u8]) -> Result<PluginDescriptor, LifecycleError> {
        let parsed = parse_bundle(bytes)?;
        let _guard = self.uploads.lock().await;
        if let Some(existing) = self.plugins.read().get(&parsed.descriptor.id) {
            return if existing.descriptor.digest.as_deref() == Some(parsed.digest.as_str()) {
                Ok((*existing.descriptor).clone())
            } else {
                Err(LifecycleError::RegisterConflict(parsed.descriptor.id))
            };
        }
        let dir = self.plugin_dir.join(format!("{}-{}", parsed.descriptor.id, &parsed.digest[..12]));
        let entry = unpack_bundle(bytes, &parsed.manifest, &dir)?;
        info!(plugin = %parsed.descriptor.id, version = %parsed.descriptor.version, "plugin uploaded");
        let descriptor = parsed.descriptor;
        self.plugins.write().insert(
            descriptor.id.clone(),
            RegisteredPlugin { descriptor: Arc::new(descriptor.clone()), imp: PluginImpl::External { entry, dir } },
        );
        Ok(descriptor)
    }

    fn get(&self, id: &str) -> Option<RegisteredPlugin> {
        self.plugins.read().get(id).cloned()
    }

    pub fn descriptor(&self, id: &str) -> Option<PluginDescriptor> {
        self.get(id).map(|p| (*p.descriptor).clone())
    }

    pub fn list(&self) -> Vec<PluginDescriptor> {
        self.plugins.read().values().map(|p| (*p.descriptor).clone()).collect()
    }

    pub fn counts(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for p in self.plugins.read().values() {
            *out.entry(p.descriptor.kind.to_string()).or_default() += 1;
        }
        out
    }

    fn remove(&self, id: &str) {
        if let Some(RegisteredPlugin { imp: PluginImpl::External { dir, .. }, .. }) = self.plugins.write().remove(id) {
            if let Err(e) = std::fs::remove_dir_all(&dir) {
                warn!(plugin = id, error = %e, "could not delete unpacked bundle");
            }
        }
    }
}

/// Externally visible state of one instance.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct InstanceRecord {
    pub instance_id: String,
    pub plugin_id: String,
    pub kind: PluginKind,
    pub state: InstanceState,
    pub config: InstanceConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub started_at: Option<TimestampNs>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub last_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum InstanceStats {
    Collector(CollectorStats),
    Publisher(PublisherStats),
}

/// A record plus runtime details.
#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct InstanceDetail {
    #[serde(flatten)]
    pub record: InstanceRecord,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stats: Option<InstanceStats>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub audit: Option<Vec<AuditEntry>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub subscription: Option<SubscriptionStats>,
}

#[derive(Clone)]
enum Runtime {
    Collector(CollectorHandle),
    Publisher(PublisherHandle),
}

struct InstanceInner {
    state: InstanceState,
    config: InstanceConfig,
    started_at: Option<TimestampNs>,
    last_error: Option<String>,
    history: Vec<(InstanceState, InstanceState)>,
    runtime: Option<Runtime>,
}

struct Instance {
    id: String,
    kind: PluginKind,
    inner: Mutex<InstanceInner>,
}

impl Instance {
    fn transition_locked(id: &str, inner: &mut InstanceInner, to: InstanceState) {
        let from = inner.state;
        if !legal_transition(from, to) {
            warn!(instance = id, %from, %to, "illegal state transition");
        }
        inner.history.push((from, to));
        inner.state = to;
    }

    fn fail(&self, message: String) {
        let mut inner = self.inner.lock();
        if inner.state.is_terminal() {
            return;
        }
        warn!(instance = %self.id, error = %message, "instance failed");
        Self::transition_locked(&self.id, &mut inner, InstanceState::Failed);
        inner.last_error = Some(message);
        inner.runtime = None;
    }

    fn record(&self) -> InstanceRecord {
        let inner = self.inner.lock();
        let config = match &inner.runtime {
            Some(Runtime::Collector(h)) => (*h.shared().config()).clone(),
            Some(Runtime::Publisher(h)) => (*h.shared().config()).clone(),
            None => inner.config.clone(),
        };
        InstanceRecord {
            instance_id: self.id.clone(),
            plugin_id: config.plugin_id.clone(),
            kind: self.kind,
            state: inner.state,
            config,
            started_at: inner.started_at,
            last_error: inner.last_error.clone(),
        }
    }
}

/// Dependencies shared by both managers.
#[derive(Clone)]
pub struct ManagerEnv {
    pub registry: Arc<PluginRegistry>,
    pub bus: Arc<DataManager>,
    pub clock: Arc<dyn Clock>,
    pub bounds: PeriodBounds,
}

/// Request to create an instance.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct InstanceSpec {
    #[serde(default)]
    pub instance_id: Option<String>,
    #[serde(flatten)]
    pub config: InstanceConfig,
}

/// Collectors Manager or Publishers Manager.
pub struct LifecycleManager {
    kind: PluginKind,
    env: ManagerEnv,
    instances: RwLock<BTreeMap<String, Arc<Instance>>>,
    mutations: tokio::sync::Mutex<()>,
    next_id: AtomicU64,
}

impl LifecycleManager {
    pub fn new(kind: PluginKind, env: ManagerEnv) -> Self {
        LifecycleManager {
            kind,
            env,
            instances: RwLock::new(BTreeMap::new()),
            mutations: tokio::sync::Mutex::new(()),
            next_id: AtomicU64::new(1),
        }
    }

    pub fn kind(&self) -> PluginKind {
        self.kind
    }

    fn prefix(&self) -> &'static str {
        match self.kind {
            PluginKind::Collector => "col",
            PluginKind::Publisher => "pub",
        }
    }

    fn get(&self, id: &str) -> Result<Arc<Instance>, LifecycleError> {
        self.instances.read().get(id).cloned().ok_or_else(|| LifecycleError::UnknownInstance(id.to_string()))
    }

    fn allocate_id(&self, requested: Option<String>) -> Result<String, LifecycleError> {
        let instances = self.instances.read();
        match requested {
            Some(id) if !is_valid_id(&id) => Err(LifecycleError::InvalidConfig(vec![ConfigViolation::Constraint {
                message: format!("invalid instance id {id:?}"),
            }])),
            Some(id) if instances.contains_key(&id) => Err(LifecycleError::InstanceExists(id)),
            Some(id) => Ok(id),
            None => loop {
                let id = format!("{}-{}", self.prefix(), self.next_id.fetch_add(1, Ordering::Relaxed));
                if !instances.contains_key(&id) {
                    break Ok(id);
                }
            },
        }
    }

    /// Validates, creates and starts an instance. If startup fails the
    /// record is kept in state Failed.
    pub async fn instantiate(&self, spec: InstanceSpec) -> Result<InstanceRecord, LifecycleError> {
        let _guard = self.mutations.lock().await;
        let plugin_id = spec.config.plugin_id.clone();
        let plugin = self.env.registry.get(&plugin_id).ok_or_else(|| LifecycleError::UnknownPlugin(plugin_id.clone()))?;
        if plugin.descriptor.kind != self.kind {
            return Err(LifecycleError::InvalidConfig(vec![ConfigViolation::Constraint {
                message: format!("plugin {plugin_id:?} is a {} plugin, not a {}", plugin.descriptor.kind, self.kind),
            }]));
        }
        let config = self.validate(&plugin, &spec.config)?;
        let id = self.allocate_id(spec.instance_id)?;
        let instance = Arc::new(Instance {
            id: id.clone(),
            kind: self.kind,
            inner: Mutex::new(InstanceInner {
                state: InstanceState::Created,
                config: config.clone(),
                started_at: None,
                last_error: None,
                history: Vec::new(),
                runtime: None,
            }),
        });
        self.instances.write().insert(id.clone(), instance.clone());

        let started = match self.kind {
            PluginKind::Collector => self.start_collector(&instance, &plugin, config).await.map(Runtime::Collector),
            PluginKind::Publisher => self.start_publisher(&id, &plugin, config).await.map(Runtime::Publisher),
        };
        match started {
            Ok(runtime) => {
                let mut inner = instance.inner.lock();
                // A collector can fail between start and here.
                if inner.state == InstanceState::Created {
                    Instance::transition_locked(&id, &mut inner, InstanceState::Running);
                    inner.started_at = Some(self.env.clock.now_ns());
                    inner.runtime = Some(runtime);
                }
                drop(inner);
                info!(instance = %id, plugin = %plugin_id, "instance started");
                Ok(instance.record())
            }
            Err(message) => {
                instance.fail(message.clone());
                Err(LifecycleError::SpawnFailed { instance_id: id, message })
            }
        }
    }

    fn validate(&self, plugin: &RegisteredPlugin, cfg: &InstanceConfig) -> Result<InstanceConfig, LifecycleError> {
        let validated = validate_instance_config(cfg, &plugin.descriptor, self.env.bounds)
            .map_err(LifecycleError::InvalidConfig)?;
        let extra = match &plugin.imp {
            PluginImpl::Collector(f) => f.check(&validated),
            PluginImpl::Publisher(f) => f.check(&validated),
            PluginImpl::External { .. } => Vec::new(),
        };
        if extra.is_empty() {
            Ok(validated)
        } else {
            Err(LifecycleError::InvalidConfig(extra))
        }
    }

    async fn start_collector(
        &self,
        instance: &Arc<Instance>,
        plugin: &RegisteredPlugin,
        config: InstanceConfig,
    ) -> Result<CollectorHandle, String> {
        let id = &instance.id;
        let (engine, check): (Box<dyn CollectorEngine>, Option<ConfigCheck>) = match &plugin.imp {
            PluginImpl::Collector(factory) => {
                let set = factory.build(id, &config)?;
                let f = factory.clone();
                (Box::new(set), Some(Arc::new(move |c: &InstanceConfig| f.check(c))))
            }
            PluginImpl::External { entry, .. } => {
                let process = PluginProcess::spawn(entry, id).await?;
                (Box::new(ExternalCollector::new(process)), None)
            }
            PluginImpl::Publisher(_) => return Err("not a collector plugin".into()),
        };
        let failed = instance.clone();
        let runtime = CollectorRuntime {
            instance_id: id.clone(),
            controller: Controller::new(plugin.descriptor.clone(), self.env.bounds, check, config),
            engine,
            bus: self.env.bus.clone(),
            clock: self.env.clock.clone(),
            on_failed: Some(Box::new(move |msg| failed.fail(msg))),
        };
        runtime.start().await
    }

    async fn build_sink(&self, id: &str, plugin: &RegisteredPlugin, config: &InstanceConfig) -> Result<Box<dyn Sink>, String> {
        match &plugin.imp {
            PluginImpl::Publisher(factory) => factory.build(id, config),
            PluginImpl::External { entry, .. } => {
                let process = PluginProcess::spawn(entry, id).await?;
                Ok(Box::new(ExternalSink::new(process, config).await?))
            }
            PluginImpl::Collector(_) => Err("not a publisher plugin".into()),
        }
    }

    async fn start_publisher(
        &self,
        id: &str,
        plugin: &RegisteredPlugin,
        config: InstanceConfig,
    ) -> Result<PublisherHandle, String> {
        let sink = self.build_sink(id, plugin, &config).await?;
        let subscription =
            self.env.bus.subscribe(id, &config.topics, capacity_of(&config)).map_err(|e| e.to_string())?;
        Ok(PublisherRuntime {
            instance_id: id.to_string(),
            config,
            sink,
            bus: self.env.bus.clone(),
            subscription,
        }
        .start())
    }

    /// Stops an instance. Collectors stop ticking; publishers flush their
    /// queue for up to [`DRAIN_DEADLINE`] and close the sink.
    pub async fn destroy(&self, id: &str) -> Result<(), LifecycleError> {
        let _guard = self.mutations.lock().await;
        let instance = self.get(id)?;
        let runtime = {
            let inner = instance.inner.lock();
            match inner.state {
                s if s.is_terminal() => return Err(LifecycleError::AlreadyTerminal(id.to_string(), s)),
                InstanceState::Running => inner.runtime.clone(),
                s => return Err(LifecycleError::IllegalState(id.to_string(), s)),
            }
        };
        match runtime {
            Some(Runtime::Collector(h)) => {
                h.stop().await;
            }
            Some(Runtime::Publisher(h)) => {
                h.stop(DRAIN_DEADLINE).await;
            }
            None => {}
        }
        let mut inner = instance.inner.lock();
        if inner.state.is_terminal() {
            return Err(LifecycleError::AlreadyTerminal(id.to_string(), inner.state));
        }
        inner.config = instance_config_of(&inner);
        Instance::transition_locked(id, &mut inner, InstanceState::Stopped);
        inner.runtime = None;
        info!(instance = id, "instance destroyed");
        Ok(())
    }

    /// Applies a partial config atomically and returns the effective config.
    pub async fn reconfigure(&self, id: &str, patch: ConfigPatch) -> Result<InstanceConfig, LifecycleError> {
        let _guard = self.mutations.lock().await;
        let instance = self.get(id)?;
        let runtime = {
            let mut inner = instance.inner.lock();
            if inner.state != InstanceState::Running {
                return Err(LifecycleError::IllegalState(id.to_string(), inner.state));
            }
            Instance::transition_locked(id, &mut inner, InstanceState::Reconfiguring);
            inner.runtime.clone()
        };
        let result = match runtime {
            Some(Runtime::Collector(h)) => h.apply(patch).await.map_err(|e| match e {
                ControlError::Invalid(v) => LifecycleError::InvalidConfig(v),
                ControlError::Vetoed(message) => {
                    LifecycleError::InvalidConfig(vec![ConfigViolation::Constraint { message }])
                }
                ControlError::Stopped => LifecycleError::IllegalState(id.to_string(), InstanceState::Failed),
            }),
            Some(Runtime::Publisher(h)) => self.reconfigure_publisher(id, &h, &patch).await,
            None => Err(LifecycleError::IllegalState(id.to_string(), InstanceState::Reconfiguring)),
        };
        let mut inner = instance.inner.lock();
        if inner.state == InstanceState::Reconfiguring {
            Instance::transition_locked(id, &mut inner, InstanceState::Running);
        }
        match result {
            Ok(cfg) => {
                inner.config = cfg.clone();
                Ok(cfg)
            }
            Err(_) if inner.state == InstanceState::Failed => {
                Err(LifecycleError::IllegalState(id.to_string(), InstanceState::Failed))
            }
            Err(e) => Err(e),
        }
    }

    async fn reconfigure_publisher(
        &self,
        id: &str,
        handle: &PublisherHandle,
        patch: &ConfigPatch,
    ) -> Result<InstanceConfig, LifecycleError> {
        let current = handle.shared().config();
        let merged = current.merged(patch);
        if merged.plugin_id != current.plugin_id {
            return Err(LifecycleError::InvalidConfig(vec![ConfigViolation::PluginMismatch {
                expected: current.plugin_id.clone(),
                found: merged.plugin_id,
            }]));
        }
        let plugin = self
            .env
            .registry
            .get(&current.plugin_id)
            .ok_or_else(|| LifecycleError::UnknownPlugin(current.plugin_id.clone()))?;
        let next = self.validate(&plugin, &merged)?;
        // Build a replacement sink before touching anything, so a failure
        // leaves the old config fully in force.
        let sink = if crate::builtin::sink_settings_changed(&current, &next) {
            let built = self.build_sink(id, &plugin, &next).await.map_err(|message| {
                LifecycleError::InvalidConfig(vec![ConfigViolation::Constraint {
                    message: format!("sink could not be created: {message}"),
                }])
            })?;
            Some(built)
        } else {
            None
        };
        let bus_err = |e: crate::bus::BusError| {
            LifecycleError::InvalidConfig(vec![ConfigViolation::Constraint { message: e.to_string() }])
        };
        if next.topics != current.topics {
            self.env.bus.set_filter(id, &next.topics).map_err(bus_err)?;
        }
        let capacity = capacity_of(&next);
        if capacity != capacity_of(&current) {
            self.env.bus.set_capacity(id, capacity).map_err(bus_err)?;
        }
        if !handle.reconfigure(next.clone(), sink).await {
            return Err(LifecycleError::IllegalState(id.to_string(), InstanceState::Failed));
        }
        Ok(next)
    }

    pub fn record(&self, id: &str) -> Result<InstanceRecord, LifecycleError> {
        Ok(self.get(id)?.record())
    }

    pub fn detail(&self, id: &str) -> Result<InstanceDetail, LifecycleError> {
        let instance = self.get(id)?;
        let record = instance.record();
        let runtime = instance.inner.lock().runtime.clone();
        let (stats, audit) = match runtime {
            Some(Runtime::Collector(h)) => (Some(InstanceStats::Collector(h.shared().stats())), Some(h.shared().audit())),
            Some(Runtime::Publisher(h)) => (Some(InstanceStats::Publisher(h.shared().stats())), None),
            None => (None, None),
        };
        let subscription = match self.kind {
            PluginKind::Publisher => self.env.bus.stats().remove(id),
            PluginKind::Collector => None,
        };
        Ok(InstanceDetail { record, stats, audit, subscription })
    }

    /// Records in id order; Stopped instances only if `include_stopped`.
    pub fn list(&self, include_stopped: bool) -> Vec<InstanceRecord> {
        let instances: Vec<_> = self.instances.read().values().cloned().collect();
        instances
            .iter()
            .map(|i| i.record())
            .filter(|r| include_stopped || r.state != InstanceState::Stopped)
            .collect()
    }

    pub fn counts_by_state(&self) -> BTreeMap<InstanceState, usize> {
        let mut out = BTreeMap::new();
        for r in self.list(true) {
            *out.entry(r.state).or_default() += 1;
        }
        out
    }

    /// Every state transition this instance went through, in order.
    pub fn history(&self, id: &str) -> Result<Vec<(InstanceState, InstanceState)>, LifecycleError> {
        Ok(self.get(id)?.inner.lock().history.clone())
    }

    fn live_instances_of(&self, plugin_id: &str) -> Vec<String> {
        self.list(false)
            .into_iter()
            .filter(|r| r.plugin_id == plugin_id && r.state.is_live())
            .map(|r| r.instance_id)
            .collect()
    }

    /// Stops every live instance; used at agent shutdown.
    pub async fn shutdown(&self) {
        let ids: Vec<String> = self.list(false).into_iter().filter(|r| r.state == InstanceState::Running).map(|r| r.instance_id).collect();
        for id in ids {
            if let Err(e) = self.destroy(&id).await {
                warn!(instance = %id, error = %e, "shutdown of instance failed");
            }
        }
    }
}

fn instance_config_of(inner: &InstanceInner) -> InstanceConfig {
    match &inner.runtime {
        Some(Runtime::Collector(h)) => (*h.shared().config()).clone(),
        Some(Runtime::Publisher(h)) => (*h.shared().config()).clone(),
        None => inner.config.clone(),
    }
}

/// Registry plus both managers.
pub struct Lifecycle {
    pub registry: Arc<PluginRegistry>,
    pub collectors: LifecycleManager,
    pub publishers: LifecycleManager,
}

impl Lifecycle {
    pub fn new(env: ManagerEnv) -> Self {
        Lifecycle {
            registry: env.registry.clone(),
            collectors: LifecycleManager::new(PluginKind::Collector, env.clone()),
            publishers: LifecycleManager::new(PluginKind::Publisher, env),
        }
    }

    pub fn manager(&self, kind: PluginKind) -> &LifecycleManager {
        match kind {
            PluginKind::Collector => &self.collectors,
            PluginKind::Publisher => &self.publishers,
        }
    }

    pub async fn upload_plugin(&self, bytes: &[u8]) -> Result<PluginDescriptor, LifecycleError> {
        self.registry.upload(bytes).await
    }

    /// Removes an uploaded plugin that has no live instances.
    pub async fn remove_plugin(&self, id: &str) -> Result<(), LifecycleError> {
        let plugin = self.registry.get(id).ok_or_else(|| LifecycleError::UnknownPlugin(id.to_string()))?;
        if plugin.descriptor.provenance == Provenance::Builtin {
            return Err(LifecycleError::BuiltinImmutable(id.to_string()));
        }
        let manager = self.manager(plugin.descriptor.kind);
        // Holding the manager's mutation lock keeps new instances out.
        let _guard = manager.mutations.lock().await;
        let live = manager.live_instances_of(id);
        if !live.is_empty() {
            return Err(LifecycleError::PluginInUse { plugin: id.to_string(), instances: live });
        }
        self.registry.remove(id);
        info!(plugin = id, "plugin removed");
        Ok(())
    }

    pub async fn shutdown(&self) {
        self.collectors.shutdown().await;
        self.publishers.shutdown().await;
    }
}
