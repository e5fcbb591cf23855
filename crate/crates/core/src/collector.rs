//! Collector runtime: the sampling tick loop and the controller through
//! which every configuration change passes.
//!
//! A collector runs two flows. Data flows from the active sampler through
//! the active analyzer to the [`DataManager`]. Control flows from the API
//! (reactive) and from analyzer-issued [`AdaptationCommand`]s (proactive)
//! into the [`Controller`], which applies them between ticks.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

use async_trait::async_trait;
use parking_lot::{Mutex, RwLock};
use serde::Serialize;
use thiserror::Error;
use tokio::sync::{mpsc, oneshot};
use tokio::time::Instant;
use tracing::{debug, warn};

use crate::bus::DataManager;
use crate::clock::Clock;
use crate::model::{
    validate_instance_config, AdaptationCommand, CommandKind, ConfigPatch, ConfigViolation,
    InstanceConfig, Observation, Period, PeriodBounds, PluginDescriptor, TimestampNs,
};

/// Consecutive sampler failures after which an instance is marked Failed.
pub const FAILURE_THRESHOLD: u32 = 5;

const AUDIT_CAPACITY: usize = 1024;

/// What a sampler or analyzer sees during one tick. The config reference is
/// the snapshot taken at the start of the tick.
#[derive(Debug, Clone, Copy)]
pub struct TickContext<'a> {
    pub instance_id: &'a str,
    pub tick: u64,
    pub now_ns: TimestampNs,
    pub config: &'a InstanceConfig,
}

impl TickContext<'_> {
    pub fn observation(&self, reading: Reading) -> Observation {
        Observation {
            indicator: reading.indicator,
            target: self.config.target().to_string(),
            timestamp: self.now_ns,
            value: reading.value,
            unit: reading.unit,
            labels: reading.labels,
            topic: self.config.topic().to_string(),
            source_instance: self.instance_id.to_string(),
        }
    }
}

/// A raw value produced by a sampler.
#[derive(Debug, Clone, PartialEq)]
pub struct Reading {
    pub indicator: String,
    pub value: f64,
    pub unit: String,
    pub labels: BTreeMap<String, String>,
}

impl Reading {
    pub fn new(indicator: impl Into<String>, value: f64, unit: impl Into<String>) -> Self {
        Reading { indicator: indicator.into(), value, unit: unit.into(), labels: BTreeMap::new() }
    }
}

/// Metric sampler: reads the configured indicators from the target.
pub trait Sampler: Send {
    fn sample(&mut self, ctx: &TickContext<'_>) -> Result<Vec<Reading>, String>;

    fn reset(&mut self) {}
}

/// Output of an analyzer (or of an external collector) for one tick.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Analysis {
    pub observations: Vec<Observation>,
    pub commands: Vec<AdaptationCommand>,
}

/// Data analyzer: transforms sampled observations and may ask the
/// controller for a reconfiguration.
pub trait Analyzer: Send {
    fn analyze(&mut self, batch: Vec<Observation>, ctx: &TickContext<'_>) -> Result<Analysis, String>;

    /// Discards any windowed state.
    fn reset(&mut self) {}
}

/// The behavior behind a collector instance, compiled in or hosted in a
/// subprocess.
#[async_trait]
pub trait CollectorEngine: Send {
    /// Called with the initial config (`previous == None`) and after every
    /// accepted change. An error vetoes the change.
    async fn apply_config(
        &mut self,
        previous: Option<&InstanceConfig>,
        next: &InstanceConfig,
    ) -> Result<(), String>;

    async fn tick(&mut self, ctx: &TickContext<'_>) -> Result<Analysis, String>;

    async fn shutdown(&mut self) {}
}

/// Compiled-in samplers and analyzers keyed by id. Exactly one of each is
/// consulted per tick, chosen by the tick's config snapshot.
#[derive(Default)]
pub struct BehaviorSet {
    samplers: BTreeMap<String, Box<dyn Sampler>>,
    analyzers: BTreeMap<String, Box<dyn Analyzer>>,
}

impl BehaviorSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_sampler(mut self, id: &str, s: impl Sampler + 'static) -> Self {
        self.samplers.insert(id.to_string(), Box::new(s));
        self
    }

    pub fn with_analyzer(mut self, id: &str, a: impl Analyzer + 'static) -> Self {
        self.analyzers.insert(id.to_string(), Box::new(a));
        self
    }

    fn reset_all(&mut self) {
        self.samplers.values_mut().for_each(|s| s.reset());
        self.analyzers.values_mut().for_each(|a| a.reset());
    }
}

#[async_trait]
impl CollectorEngine for BehaviorSet {
    async fn apply_config(
        &mut self,
        previous: Option<&InstanceConfig>,
        next: &InstanceConfig,
    ) -> Result<(), String> {
        if !self.samplers.contains_key(next.sampler()) {
            return Err(format!("sampler {:?} is not available", next.sampler()));
        }
        if !self.analyzers.contains_key(next.analyzer()) {
            return Err(format!("analyzer {:?} is not available", next.analyzer()));
        }
        // Windows never mix data across behaviors or indicator sets.
        let reset = previous.map_or(true, |p| {
            p.active_sampler != next.active_sampler
                || p.active_analyzer != next.active_analyzer
                || p.indicators != next.indicators
        });
        if reset {
            self.reset_all();
        }
        Ok(())
    }

    async fn tick(&mut self, ctx: &TickContext<'_>) -> Result<Analysis, String> {
        let sampler = self
            .samplers
            .get_mut(ctx.config.sampler())
            .ok_or_else(|| format!("sampler {:?} is not available", ctx.config.sampler()))?;
        let readings = sampler.sample(ctx)?;
        let batch: Vec<Observation> = readings.into_iter().map(|r| ctx.observation(r)).collect();
        let analyzer = self
            .analyzers
            .get_mut(ctx.config.analyzer())
            .ok_or_else(|| format!("analyzer {:?} is not available", ctx.config.analyzer()))?;
        analyzer.analyze(batch, ctx)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ChangeSource {
    Api,
    Analyzer,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Change {
    Patch(ConfigPatch),
    Command(AdaptationCommand),
}

impl Change {
    fn describe(&self) -> String {
        match self {
            Change::Patch(p) => format!(
                "patch {}",
                serde_json::to_string(p).unwrap_or_else(|_| "<unprintable>".to_string())
            ),
            Change::Command(c) => c.kind.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "camelCase")]
pub enum AuditOutcome {
    Applied,
    /// The requested period was clamped into the allowed bounds.
    Clamped,
    Rejected { message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct AuditEntry {
    pub seq: u64,
    pub tick: u64,
    pub at_ns: TimestampNs,
    pub source: ChangeSource,
    pub change: String,
    pub outcome: AuditOutcome,
    pub period_ms: u64,
    pub reason: String,
    /// An analyzer asked to replace the active analyzer.
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    pub self_replacement: bool,
}

/// Bounded change history of one collector.
#[derive(Debug, Default)]
pub struct AuditLog {
    entries: VecDeque<AuditEntry>,
    next_seq: u64,
}

impl AuditLog {
    fn push(&mut self, mut entry: AuditEntry) {
        entry.seq = self.next_seq;
        self.next_seq += 1;
        if self.entries.len() == AUDIT_CAPACITY {
            self.entries.pop_front();
        }
        self.entries.push_back(entry);
    }

    pub fn entries(&self) -> Vec<AuditEntry> {
        self.entries.iter().cloned().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ControlError {
    #[error("invalid change: {}", join_violations(.0))]
    Invalid(Vec<ConfigViolation>),
    #[error("change vetoed by plugin: {0}")]
    Vetoed(String),
    #[error("collector is not running")]
    Stopped,
}

pub(crate) fn join_violations(v: &[ConfigViolation]) -> String {
    v.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("; ")
}

/// Plugin-specific config constraints beyond the parameter schema.
pub type ConfigCheck = Arc<dyn Fn(&InstanceConfig) -> Vec<ConfigViolation> + Send + Sync>;

/// A validated candidate config, not yet committed.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub config: InstanceConfig,
    pub clamped: bool,
}

/// Single serialization point for configuration changes of one collector.
pub struct Controller {
    descriptor: Arc<PluginDescriptor>,
    bounds: PeriodBounds,
    check: Option<ConfigCheck>,
    config: Arc<InstanceConfig>,
    audit: Arc<Mutex<AuditLog>>,
}

impl Controller {
    /// `initial` must already be validated; its period is clamped into the
    /// param-declared bounds.
    pub fn new(
        descriptor: Arc<PluginDescriptor>,
        bounds: PeriodBounds,
        check: Option<ConfigCheck>,
        initial: InstanceConfig,
    ) -> Self {
        let mut initial = initial;
        let pb = initial.period_bounds(bounds);
        initial.sampling_period = Some(initial.period().clamp(pb.min, pb.max));
        Controller {
            descriptor,
            bounds,
            check,
            config: Arc::new(initial),
            audit: Arc::new(Mutex::new(AuditLog::default())),
        }
    }

    pub fn config(&self) -> Arc<InstanceConfig> {
        self.config.clone()
    }

    pub fn audit(&self) -> Arc<Mutex<AuditLog>> {
        self.audit.clone()
    }

    /// Configured period, clamped to the `minPeriod`/`maxPeriod` params
    /// (or the global bounds when those are absent).
    pub fn effective_period(&self) -> Period {
        let pb = self.config.period_bounds(self.bounds);
        self.config.period().clamp(pb.min, pb.max)
    }

    /// Merges and validates a change against the current config.
    pub fn prepare(&self, change: &Change) -> Result<Prepared, ControlError> {
        let current = &*self.config;
        let mut candidate = match change {
            Change::Patch(patch) => current.merged(patch),
            Change::Command(cmd) => {
                let mut next = current.clone();
                match &cmd.kind {
                    CommandKind::SetSamplingPeriod { period } => next.sampling_period = Some(*period),
                    CommandKind::SwitchSampler { id } => next.active_sampler = Some(id.clone()),
                    CommandKind::SwitchAnalyzer { id } => next.active_analyzer = Some(id.clone()),
                    CommandKind::SetParam { key, value } => {
                        next.params.insert(key.clone(), value.clone());
                    }
                }
                next
            }
        };
        if candidate.plugin_id != current.plugin_id {
            return Err(ControlError::Invalid(vec![ConfigViolation::PluginMismatch {
                expected: current.plugin_id.clone(),
                found: candidate.plugin_id,
            }]));
        }
        // Clamp before validation so an out-of-range request degrades to the
        // nearest bound instead of being rejected.
        let mut clamped = false;
        if let Some(requested) = candidate.sampling_period {
            let pb = candidate.period_bounds(self.bounds);
            let bounded = requested.clamp(pb.min, pb.max);
            if bounded != requested {
                clamped = true;
                candidate.sampling_period = Some(bounded);
            }
        }
        let mut validated = validate_instance_config(&candidate, &self.descriptor, self.bounds)
            .map_err(ControlError::Invalid)?;
        if let Some(check) = &self.check {
            let extra = check(&validated);
            if !extra.is_empty() {
                return Err(ControlError::Invalid(extra));
            }
        }
        // Param bounds may have changed with the same change.
        let pb = validated.period_bounds(self.bounds);
        let period = validated.period();
        let bounded = period.clamp(pb.min, pb.max);
        if bounded != period {
            clamped = true;
            validated.sampling_period = Some(bounded);
        }
        Ok(Prepared { config: validated, clamped })
    }

    /// Installs a prepared config and records the audit entry.
    pub fn commit(
        &mut self,
        prepared: Prepared,
        source: ChangeSource,
        change: &Change,
        tick: u64,
        now_ns: TimestampNs,
    ) -> Arc<InstanceConfig> {
        let previous = std::mem::replace(&mut self.config, Arc::new(prepared.config));
        let outcome = if prepared.clamped { AuditOutcome::Clamped } else { AuditOutcome::Applied };
        self.record(source, change, outcome, tick, now_ns);
        previous
    }

    pub fn record_rejection(
        &self,
        source: ChangeSource,
        change: &Change,
        err: &ControlError,
        tick: u64,
        now_ns: TimestampNs,
    ) {
        let outcome = AuditOutcome::Rejected { message: err.to_string() };
        self.record(source, change, outcome, tick, now_ns);
    }

    fn record(
        &self,
        source: ChangeSource,
        change: &Change,
        outcome: AuditOutcome,
        tick: u64,
        now_ns: TimestampNs,
    ) {
        let (reason, self_replacement) = match change {
            Change::Command(cmd) => (
                cmd.reason.clone(),
                source == ChangeSource::Analyzer
                    && matches!(cmd.kind, CommandKind::SwitchAnalyzer { .. }),
            ),
            Change::Patch(_) => (String::new(), false),
        };
        self.audit.lock().push(AuditEntry {
            seq: 0,
            tick,
            at_ns: now_ns,
            source,
            change: change.describe(),
            outcome,
            period_ms: self.effective_period().as_millis(),
            reason,
            self_replacement,
        });
    }

    /// Prepare and commit in one step, without consulting an engine.
    pub fn apply(
        &mut self,
        source: ChangeSource,
        change: Change,
        tick: u64,
        now_ns: TimestampNs,
    ) -> Result<Arc<InstanceConfig>, ControlError> {
        match self.prepare(&change) {
            Ok(prepared) => {
                self.commit(prepared, source, &change, tick, now_ns);
                Ok(self.config())
            }
            Err(e) => {
                self.record_rejection(source, &change, &e, tick, now_ns);
                Err(e)
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct CollectorStats {
    pub ticks: u64,
    pub emitted: u64,
    /// Observations dropped for naming an indicator outside the config or
    /// carrying a non-finite value.
    pub discarded: u64,
    pub failures: u64,
    pub consecutive_failures: u32,
    pub last_tick_ns: TimestampNs,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub last_error: Option<String>,
}

/// State shared between a running collector task and its readers.
#[derive(Debug)]
pub struct CollectorShared {
    config: RwLock<Arc<InstanceConfig>>,
    audit: Arc<Mutex<AuditLog>>,
    stats: Mutex<CollectorStats>,
}

impl CollectorShared {
    pub fn config(&self) -> Arc<InstanceConfig> {
        self.config.read().clone()
    }

    pub fn audit(&self) -> Vec<AuditEntry> {
        self.audit.lock().entries()
    }

    pub fn stats(&self) -> CollectorStats {
        self.stats.lock().clone()
    }
}

pub enum ControlMsg {
    Apply {
        patch: ConfigPatch,
        reply: oneshot::Sender<Result<InstanceConfig, ControlError>>,
    },
    Stop {
        reply: oneshot::Sender<()>,
    },
}

/// Called once when the instance gives up after repeated failures.
pub type FailureHook = Box<dyn FnOnce(String) + Send>;

pub struct CollectorRuntime {
    pub instance_id: String,
    pub controller: Controller,
    pub engine: Box<dyn CollectorEngine>,
    pub bus: Arc<DataManager>,
    pub clock: Arc<dyn Clock>,
    pub on_failed: Option<FailureHook>,
}

/// Control endpoint of a spawned collector task.
#[derive(Clone)]
pub struct CollectorHandle {
    tx: mpsc::Sender<ControlMsg>,
    shared: Arc<CollectorShared>,
}

impl CollectorHandle {
    pub fn shared(&self) -> &Arc<CollectorShared> {
        &self.shared
    }

    /// Queues a patch onto the collector's serialization point and waits
    /// until it has been applied (or rejected).
    pub async fn apply(&self, patch: ConfigPatch) -> Result<InstanceConfig, ControlError> {
        let (reply, rx) = oneshot::channel();
        self.tx
            .send(ControlMsg::Apply { patch, reply })
            .await
            .map_err(|_| ControlError::Stopped)?;
        rx.await.map_err(|_| ControlError::Stopped)?
    }

    /// Stops ticking and waits for the engine to shut down. Returns false
    /// if the task had already exited.
    pub async fn stop(&self) -> bool {
        let (reply, rx) = oneshot::channel();
        if self.tx.send(ControlMsg::Stop { reply }).await.is_err() {
            return false;
        }
        rx.await.is_ok()
    }
}

impl CollectorRuntime {
    /// Applies the initial config to the engine and spawns the tick loop.
    pub async fn start(mut self) -> Result<CollectorHandle, String> {
        let initial = self.controller.config();
        self.engine.apply_config(None, &initial).await?;
        let shared = Arc::new(CollectorShared {
            config: RwLock::new(initial),
            audit: self.controller.audit(),
            stats: Mutex::new(CollectorStats::default()),
        });
        let (tx, rx) = mpsc::channel(64);
        tokio::spawn(self.run(shared.clone(), rx));
        Ok(CollectorHandle { tx, shared })
    }

    async fn apply_change(
        &mut self,
        shared: &CollectorShared,
        source: ChangeSource,
        change: Change,
        tick: u64,
    ) -> Result<InstanceConfig, ControlError> {
        let now = self.clock.now_ns();
        let prepared = match self.controller.prepare(&change) {
            Ok(p) => p,
            Err(e) => {
                self.controller.record_rejection(source, &change, &e, tick, now);
                return Err(e);
            }
        };
        let current = self.controller.config();
        if let Err(msg) = self.engine.apply_config(Some(&current), &prepared.config).await {
            let err = ControlError::Vetoed(msg);
            self.controller.record_rejection(source, &change, &err, tick, now);
            return Err(err);
        }
        self.controller.commit(prepared, source, &change, tick, now);
        let next = self.controller.config();
        *shared.config.write() = next.clone();
        Ok((*next).clone())
    }

    fn emit(&self, shared: &CollectorShared, config: &InstanceConfig, observations: Vec<Observation>, now: TimestampNs) {
        let mut discarded = 0u64;
        let batch: Vec<Observation> = observations
            .into_iter()
            .filter_map(|mut obs| {
                if !config.indicators.contains(&obs.indicator) {
                    discarded += 1;
                    return None;
                }
                obs.topic = config.topic().to_string();
                obs.source_instance = self.instance_id.clone();
                if obs.timestamp == 0 {
                    obs.timestamp = now;
                }
                if obs.check().is_err() {
                    discarded += 1;
                    return None;
                }
                Some(obs)
            })
            .collect();
        let emitted = batch.len() as u64;
        self.bus.publish(&batch);
        let mut stats = shared.stats.lock();
        stats.emitted += emitted;
        stats.discarded += discarded;
    }

    async fn run(mut self, shared: Arc<CollectorShared>, mut rx: mpsc::Receiver<ControlMsg>) {
        let mut tick: u64 = 0;
        loop {
            let config = self.controller.config();
            let now = self.clock.now_ns();
            let ctx = TickContext { instance_id: &self.instance_id, tick, now_ns: now, config: &config };
            let outcome = self.engine.tick(&ctx).await;
            let completed = Instant::now();
            tick += 1;
            match outcome {
                Ok(analysis) => {
                    {
                        let mut stats = shared.stats.lock();
                        stats.ticks = tick;
                        stats.consecutive_failures = 0;
                        stats.last_tick_ns = now;
                    }
                    self.emit(&shared, &config, analysis.observations, now);
                    for cmd in analysis.commands {
                        let change = Change::Command(cmd);
                        if let Err(e) = self.apply_change(&shared, ChangeSource::Analyzer, change, tick - 1).await {
                            debug!(instance = %self.instance_id, error = %e, "analyzer command rejected");
                        }
                    }
                }
                Err(msg) => {
                    let give_up = {
                        let mut stats = shared.stats.lock();
                        stats.ticks = tick;
                        stats.failures += 1;
                        stats.consecutive_failures += 1;
                        stats.last_error = Some(msg.clone());
                        stats.consecutive_failures >= FAILURE_THRESHOLD
                    };
                    warn!(instance = %self.instance_id, error = %msg, "sampling tick failed");
                    if give_up {
                        self.engine.shutdown().await;
                        if let Some(hook) = self.on_failed.take() {
                            hook(format!(
                                "{FAILURE_THRESHOLD} consecutive sampling failures; last: {msg}"
                            ));
                        }
                        // Drain control requests so callers are not left hanging.
                        rx.close();
                        while let Some(msg) = rx.recv().await {
                            match msg {
                                ControlMsg::Apply { reply, .. } => {
                                    let _ = reply.send(Err(ControlError::Stopped));
                                }
                                ControlMsg::Stop { reply } => {
                                    let _ = reply.send(());
                                }
                            }
                        }
                        return;
                    }
                }
            }

            // Fixed-delay scheduling: the next tick is due one effective
            // period after this one completed.
            loop {
                let deadline = completed + self.controller.effective_period().as_duration();
                tokio::select! {
                    biased;
                    msg = rx.recv() => match msg {
                        Some(ControlMsg::Apply { patch, reply }) => {
                            let res = self.apply_change(&shared, ChangeSource::Api, Change::Patch(patch), tick).await;
                            let _ = reply.send(res);
                        }
                        Some(ControlMsg::Stop { reply }) => {
                            self.engine.shutdown().await;
                            let _ = reply.send(());
                            return;
                        }
                        None => {
                            self.engine.shutdown().await;
                            return;
                        }
                    },
                    _ = tokio::time::sleep_until(deadline) => break,
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::VirtualClock;
    use crate::model::{ParamSpec, ParamType, PluginKind, Provenance, Scalar};
    use std::sync::atomic::{AtomicU64, Ordering};
    use std::time::Duration;

    fn descriptor() -> Arc<PluginDescriptor> {
        Arc::new(PluginDescriptor {
            id: "test".into(),
            kind: PluginKind::Collector,
            provenance: Provenance::Builtin,
            version: "1".into(),
            param_schema: vec![
                ParamSpec::optional("minPeriod", ParamType::Duration, Scalar::Int(50)),
                ParamSpec::optional("maxPeriod", ParamType::Duration, Scalar::Int(1600)),
                ParamSpec::optional("gain", ParamType::Real, Scalar::Real(1.0)),
            ],
            samplers: vec!["const".into(), "failing".into()],
            analyzers: vec!["pass".into(), "halver".into()],
            indicators: None,
            entry: None,
            digest: None,
        })
    }

    fn config(period_ms: u64) -> InstanceConfig {
        let mut cfg = InstanceConfig::new("test");
        cfg.indicators.insert("a".into());
        cfg.sampling_period = Some(Period::from_millis(period_ms));
        cfg.validate(&descriptor()).unwrap()
    }

    fn set_period(ms: u64) -> Change {
        Change::Command(AdaptationCommand::new(
            CommandKind::SetSamplingPeriod { period: Period::from_millis(ms) },
            "halver",
            "test",
        ))
    }

    #[test]
    fn clamp_at_upper_bound_is_still_audited() {
        let mut c = Controller::new(descriptor(), PeriodBounds::default(), None, config(1600));
        c.apply(ChangeSource::Analyzer, set_period(3200), 7, 1).unwrap();
        assert_eq!(c.effective_period(), Period::from_millis(1600));
        let entries = c.audit().lock().entries();
        assert_eq!(entries.len(), 1);
        assert_eq!(entries[0].outcome, AuditOutcome::Clamped);
        assert_eq!(entries[0].tick, 7);
        assert_eq!(entries[0].period_ms, 1600);
    }

    #[test]
    fn doubling_twice_from_100() {
        let mut c = Controller::new(descriptor(), PeriodBounds::default(), None, config(100));
        assert_eq!(c.effective_period(), Period::from_millis(100));
        for _ in 0..2 {
            let next = c.effective_period().as_millis() * 2;
            c.apply(ChangeSource::Analyzer, set_period(next), 0, 1).unwrap();
        }
        assert_eq!(c.effective_period(), Period::from_millis(400));
    }

    #[test]
    fn driving_below_min_clamps_to_min() {
        let mut c = Controller::new(descriptor(), PeriodBounds::default(), None, config(100));
        c.apply(ChangeSource::Analyzer, set_period(25), 0, 1).unwrap();
        c.apply(ChangeSource::Analyzer, set_period(12), 0, 1).unwrap();
        assert_eq!(c.effective_period(), Period::from_millis(50));
    }

    #[test]
    fn unknown_switch_target_is_rejected_and_config_kept() {
        let mut c = Controller::new(descriptor(), PeriodBounds::default(), None, config(100));
        let before = c.config();
        let change = Change::Command(AdaptationCommand::new(
            CommandKind::SwitchSampler { id: "nonexistent".into() },
            "pass",
            "",
        ));
        assert!(matches!(c.apply(ChangeSource::Analyzer, change, 0, 1), Err(ControlError::Invalid(_))));
        assert_eq!(c.config(), before);
        assert!(matches!(c.audit().lock().entries()[0].outcome, AuditOutcome::Rejected { .. }));
    }

    #[test]
    fn api_and_analyzer_changes_merge_last_writer_wins() {
        let mut c = Controller::new(descriptor(), PeriodBounds::default(), None, config(100));
        let patch: ConfigPatch =
            serde_json::from_str(r#"{"samplingPeriod":"300ms","params":{"gain":2.5}}"#).unwrap();
        c.apply(ChangeSource::Api, Change::Patch(patch), 3, 1).unwrap();
        c.apply(ChangeSource::Analyzer, set_period(200), 3, 2).unwrap();
        let cfg = c.config();
        assert_eq!(cfg.period(), Period::from_millis(200));
        assert_eq!(cfg.params["gain"], Scalar::Real(2.5));
        let sources: Vec<_> = c.audit().lock().entries().iter().map(|e| e.source).collect();
        assert_eq!(sources, vec![ChangeSource::Api, ChangeSource::Analyzer]);
    }

    #[test]
    fn self_replacement_is_flagged() {
        let mut c = Controller::new(descriptor(), PeriodBounds::default(), None, config(100));
        let change = Change::Command(AdaptationCommand::new(
            CommandKind::SwitchAnalyzer { id: "halver".into() },
            "pass",
            "",
        ));
        c.apply(ChangeSource::Analyzer, change, 0, 1).unwrap();
        assert!(c.audit().lock().entries()[0].self_replacement);
        assert_eq!(c.config().analyzer(), "halver");
    }

    #[test]
    fn plugin_rebinding_is_forbidden() {
        let mut c = Controller::new(descriptor(), PeriodBounds::default(), None, config(100));
        let patch = ConfigPatch { plugin_id: Some("other".into()), ..Default::default() };
        assert!(c.apply(ChangeSource::Api, Change::Patch(patch), 0, 1).is_err());
    }

    struct Const(Arc<AtomicU64>);
    impl Sampler for Const {
        fn sample(&mut self, ctx: &TickContext<'_>) -> Result<Vec<Reading>, String> {
            self.0.fetch_add(1, Ordering::SeqCst);
            Ok(ctx.config.indicators.iter().map(|i| Reading::new(i.clone(), 1.0, "")).collect())
        }
    }

    struct Failing;
    impl Sampler for Failing {
        fn sample(&mut self, _: &TickContext<'_>) -> Result<Vec<Reading>, String> {
            Err("boom".into())
        }
    }

    struct Pass;
    impl Analyzer for Pass {
        fn analyze(&mut self, batch: Vec<Observation>, _: &TickContext<'_>) -> Result<Analysis, String> {
            Ok(Analysis { observations: batch, commands: vec![] })
        }
    }

    /// Halves the period on every tick.
    struct Halver;
    impl Analyzer for Halver {
        fn analyze(&mut self, batch: Vec<Observation>, ctx: &TickContext<'_>) -> Result<Analysis, String> {
            let next = Period::from_millis(ctx.config.period().as_millis() / 2);
            Ok(Analysis {
                observations: batch,
                commands: vec![AdaptationCommand::new(
                    CommandKind::SetSamplingPeriod { period: next },
                    "halver",
                    "",
                )],
            })
        }
    }

    fn runtime(cfg: InstanceConfig, bus: Arc<DataManager>, hook: Option<FailureHook>) -> (CollectorRuntime, Arc<AtomicU64>) {
        let count = Arc::new(AtomicU64::new(0));
        let engine = BehaviorSet::new()
            .with_sampler("const", Const(count.clone()))
            .with_sampler("failing", Failing)
            .with_analyzer("pass", Pass)
            .with_analyzer("halver", Halver);
        let rt = CollectorRuntime {
            instance_id: "col-1".into(),
            controller: Controller::new(descriptor(), PeriodBounds::default(), None, cfg),
            engine: Box::new(engine),
            bus,
            clock: Arc::new(VirtualClock::default()),
            on_failed: hook,
        };
        (rt, count)
    }

    #[tokio::test(start_paused = true)]
    async fn ticks_at_configured_period() {
        let bus = Arc::new(DataManager::new());
        let sub = bus.subscribe("s", &["*"], 1000).unwrap();
        let (rt, count) = runtime(config(100), bus.clone(), None);
        let handle = rt.start().await.unwrap();
        tokio::time::sleep(Duration::from_millis(1050)).await;
        assert_eq!(count.load(Ordering::SeqCst), 11);
        let got = sub.drain(1000).unwrap();
        assert_eq!(got.len(), 11);
        for w in got.windows(2) {
            assert_eq!(w[1].timestamp - w[0].timestamp, 100_000_000);
        }
        assert_eq!(got[0].topic, "test");
        assert_eq!(got[0].source_instance, "col-1");
        assert!(handle.stop().await);
    }

    #[tokio::test(start_paused = true)]
    async fn analyzer_command_takes_effect_next_interval() {
        let bus = Arc::new(DataManager::new());
        let sub = bus.subscribe("s", &["*"], 1000).unwrap();
        let mut cfg = config(800);
        cfg.active_analyzer = Some("halver".into());
        let (rt, _) = runtime(cfg, bus.clone(), None);
        let handle = rt.start().await.unwrap();
        tokio::time::sleep(Duration::from_millis(1500)).await;
        let ts: Vec<u64> = sub.drain(100).unwrap().iter().map(|o| o.timestamp / 1_000_000).collect();
        let gaps: Vec<u64> = ts.windows(2).map(|w| w[1] - w[0]).collect();
        assert_eq!(&gaps[..4], &[400, 200, 100, 50]);
        assert!(gaps[4..].iter().all(|g| *g == 50));
        handle.stop().await;
    }

    #[tokio::test(start_paused = true)]
    async fn five_consecutive_failures_fail_the_instance() {
        let bus = Arc::new(DataManager::new());
        let mut cfg = config(100);
        cfg.active_sampler = Some("failing".into());
        let failed = Arc::new(Mutex::new(None));
        let hook_slot = failed.clone();
        let hook: FailureHook = Box::new(move |msg| *hook_slot.lock() = Some(msg));
        let (rt, _) = runtime(cfg, bus, Some(hook));
        let handle = rt.start().await.unwrap();
        tokio::time::sleep(Duration::from_millis(350)).await;
        assert!(failed.lock().is_none(), "only 4 failures so far");
        tokio::time::sleep(Duration::from_millis(200)).await;
        let msg = failed.lock().clone().expect("failure hook fired");
        assert!(msg.contains("boom"));
        assert_eq!(handle.shared().stats().failures, 5);
        assert!(matches!(handle.apply(ConfigPatch::default()).await, Err(ControlError::Stopped)));
    }

    #[tokio::test(start_paused = true)]
    async fn api_patch_changes_period_without_restart() {
        let bus = Arc::new(DataManager::new());
        let sub = bus.subscribe("s", &["*"], 1000).unwrap();
        let (rt, _) = runtime(config(100), bus.clone(), None);
        let handle = rt.start().await.unwrap();
        tokio::time::sleep(Duration::from_millis(250)).await;
        let patch = ConfigPatch { sampling_period: Some(Period::from_millis(500)), ..Default::default() };
        let eff = handle.apply(patch).await.unwrap();
        assert_eq!(eff.period(), Period::from_millis(500));
        tokio::time::sleep(Duration::from_millis(2000)).await;
        let ts: Vec<u64> = sub.drain(100).unwrap().iter().map(|o| o.timestamp / 1_000_000).collect();
        assert_eq!(ts.iter().map(|t| t - ts[0]).collect::<Vec<_>>(), vec![0, 100, 200, 700, 1200, 1700, 2200]);
        assert_eq!(handle.shared().config().period(), Period::from_millis(500));
        handle.stop().await;
    }
}
