//! Host side of the external plugin protocol.
//!
//! External plugins are subprocesses exchanging newline-delimited JSON over
//! stdin/stdout, one request and one reply at a time:
//!
//! ```text
//! agent  -> {"op":"hello","schemaVersion":1}
//! plugin <- {"ok":true,"result":...}
//! agent  -> {"op":"configure","config":{...}}
//! agent  -> {"op":"sample","deadlineMs":N}        collectors
//! plugin <- {"ok":true,"observations":[...],"commands":[...]}
//! agent  -> {"op":"publish","batch":[...]}        publishers
//! agent  -> {"op":"shutdown"}
//! ```
//!
//! Failures are reported as `{"ok":false,"error":"..."}`. Anything the
//! plugin writes to stderr is forwarded to the agent log.

use std::collections::{BTreeMap, VecDeque};
use std::path::Path;
use std::process::Stdio;
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use parking_lot::Mutex;
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader, Lines};
use tokio::process::{Child, ChildStdin, ChildStdout, Command};
use tracing::{debug, info, warn};

use crate::collector::{Analysis, CollectorEngine, TickContext};
use crate::model::{AdaptationCommand, InstanceConfig, Observation};
use crate::publisher::{Sink, SinkError, SinkReceipt};

pub const SCHEMA_VERSION: u32 = 1;
pub const HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(5);
/// Extra time granted beyond a sample deadline for the reply to arrive.
const REPLY_GRACE: Duration = Duration::from_secs(1);
const MAX_SAMPLE_DEADLINE: Duration = Duration::from_secs(5);
const PUBLISH_TIMEOUT: Duration = Duration::from_secs(10);
const SHUTDOWN_TIMEOUT: Duration = Duration::from_secs(2);
const STDERR_TAIL: usize = 64;

/// Last lines a plugin wrote to stderr.
#[derive(Debug, Clone, Default)]
pub struct StderrTail(Arc<Mutex<VecDeque<String>>>);

impl StderrTail {
    fn push(&self, line: String) {
        let mut q = self.0.lock();
        if q.len() == STDERR_TAIL {
            q.pop_front();
        }
        q.push_back(line);
    }

    pub fn lines(&self) -> Vec<String> {
        self.0.lock().iter().cloned().collect()
    }
}

/// One running plugin subprocess.
pub struct PluginProcess {
    label: String,
    child: Child,
    stdin: ChildStdin,
    stdout: Lines<BufReader<ChildStdout>>,
    stderr: StderrTail,
    /// Set once a request timed out or the pipe broke; replies can no
    /// longer be matched to requests.
    poisoned: Option<String>,
}

impl std::fmt::Debug for PluginProcess {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PluginProcess").field("label", &self.label).field("poisoned", &self.poisoned).finish()
    }
}

impl PluginProcess {
    /// Starts `entry` and completes the hello handshake within
    /// [`HANDSHAKE_TIMEOUT`].
    pub async fn spawn(entry: &Path, label: &str) -> Result<Self, String> {
        let mut child = Command::new(entry)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .kill_on_drop(true)
            .spawn()
            .map_err(|e| format!("cannot start {}: {e}", entry.display()))?;
        let stdin = child.stdin.take().ok_or("plugin stdin unavailable")?;
        let stdout = child.stdout.take().ok_or("plugin stdout unavailable")?;
        let stderr = StderrTail::default();
        if let Some(err) = child.stderr.take() {
            let tail = stderr.clone();
            let label = label.to_string();
            tokio::spawn(async move {
                let mut lines = BufReader::new(err).lines();
                while let Ok(Some(line)) = lines.next_line().await {
                    info!(plugin = %label, "{line}");
                    tail.push(line);
                }
            });
        }
        let mut proc = PluginProcess {
            label: label.to_string(),
            child,
            stdin,
            stdout: BufReader::new(stdout).lines(),
            stderr,
            poisoned: None,
        };
        let hello = json!({"op": "hello", "schemaVersion": SCHEMA_VERSION});
        match proc.request(&hello, HANDSHAKE_TIMEOUT).await {
            Ok(_) => Ok(proc),
            Err(e) => {
                proc.kill().await;
                let tail = proc.stderr.lines().join(" | ");
                Err(if tail.is_empty() { format!("handshake failed: {e}") } else { format!("handshake failed: {e}; stderr: {tail}") })
            }
        }
    }

    pub fn stderr(&self) -> &StderrTail {
        &self.stderr
    }

    /// Sends one request and waits for its reply. Returns the whole reply
    /// object when `ok` is true.
    pub async fn request(&mut self, msg: &Value, timeout: Duration) -> Result<Value, String> {
        if let Some(reason) = &self.poisoned {
            return Err(format!("plugin unusable: {reason}"));
        }
        match tokio::time::timeout(timeout, self.roundtrip(msg)).await {
            Ok(Ok(reply)) => reply,
            Ok(Err(io)) => {
                self.poisoned = Some(io.clone());
                Err(io)
            }
            Err(_) => {
                let reason = format!("no reply within {} ms", timeout.as_millis());
                self.poisoned = Some(reason.clone());
                Err(reason)
            }
        }
    }

    /// Outer error: transport failure. Inner error: plugin-reported failure.
    async fn roundtrip(&mut self, msg: &Value) -> Result<Result<Value, String>, String> {
        let mut line = serde_json::to_vec(msg).map_err(|e| e.to_string())?;
        line.push(b'\n');
        self.stdin.write_all(&line).await.map_err(|e| format!("write to plugin failed: {e}"))?;
        self.stdin.flush().await.map_err(|e| format!("write to plugin failed: {e}"))?;
        let reply = self
            .stdout
            .next_line()
            .await
            .map_err(|e| format!("read from plugin failed: {e}"))?
            .ok_or_else(|| "plugin closed its stdout".to_string())?;
        let value: Value =
            serde_json::from_str(&reply).map_err(|e| format!("unparseable reply {reply:?}: {e}"))?;
        match value.get("ok").and_then(Value::as_bool) {
            Some(true) => Ok(Ok(value)),
            Some(false) => Ok(Err(value
                .get("error")
                .and_then(Value::as_str)
                .unwrap_or("unspecified plugin error")
                .to_string())),
            None => Err(format!("reply lacks \"ok\": {reply:?}")),
        }
    }

    pub async fn configure(&mut self, config: &InstanceConfig) -> Result<(), String> {
        self.request(&json!({"op": "configure", "config": config}), HANDSHAKE_TIMEOUT).await.map(drop)
    }

    /// Asks the plugin to exit, then kills it if it lingers.
    pub async fn shutdown(&mut self) {
        if self.poisoned.is_none() {
            if let Err(e) = self.request(&json!({"op": "shutdown"}), SHUTDOWN_TIMEOUT).await {
                debug!(plugin = %self.label, error = %e, "shutdown request failed");
            }
        }
        match tokio::time::timeout(SHUTDOWN_TIMEOUT, self.child.wait()).await {
            Ok(_) => {}
            Err(_) => self.kill().await,
        }
    }

    async fn kill(&mut self) {
        let _ = self.child.kill().await;
    }
}

/// Observation record as sent by a plugin. Fields the plugin omits are
/// filled from the tick context.
#[derive(Debug, Deserialize)]
#[serde(rename_all = "camelCase")]
struct PluginObservation {
    indicator: String,
    value: f64,
    #[serde(default)]
    unit: String,
    #[serde(default)]
    labels: BTreeMap<String, String>,
    #[serde(default)]
    timestamp: Option<u64>,
    #[serde(default)]
    target: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
struct SampleReply {
    #[serde(default)]
    observations: Vec<Value>,
    #[serde(default)]
    commands: Vec<Value>,
}

/// Parses a collector's sample reply. Malformed records are skipped, not
/// fatal; the number skipped is returned alongside.
pub fn parse_sample_reply(reply: Value, ctx: &TickContext<'_>) -> Result<(Analysis, usize), String> {
    let parsed: SampleReply = serde_json::from_value(reply).map_err(|e| format!("bad sample reply: {e}"))?;
    let mut skipped = 0;
    let mut analysis = Analysis::default();
    for raw in parsed.observations {
        match serde_json::from_value::<PluginObservation>(raw) {
            Ok(p) => analysis.observations.push(Observation {
                indicator: p.indicator,
                target: p.target.unwrap_or_else(|| ctx.config.target().to_string()),
                timestamp: p.timestamp.filter(|t| *t > 0).unwrap_or(ctx.now_ns),
                value: p.value,
                unit: p.unit,
                labels: p.labels,
                topic: ctx.config.topic().to_string(),
                source_instance: ctx.instance_id.to_string(),
            }),
            Err(_) => skipped += 1,
        }
    }
    for raw in parsed.commands {
        match serde_json::from_value::<AdaptationCommand>(raw) {
            Ok(cmd) => analysis.commands.push(cmd),
            Err(_) => skipped += 1,
        }
    }
    Ok((analysis, skipped))
}

/// Collector behavior hosted in a plugin subprocess.
pub struct ExternalCollector {
    process: PluginProcess,
}

impl ExternalCollector {
    pub fn new(process: PluginProcess) -> Self {
        ExternalCollector { process }
    }
}

#[async_trait]
impl CollectorEngine for ExternalCollector {
    async fn apply_config(&mut self, _previous: Option<&InstanceConfig>, next: &InstanceConfig) -> Result<(), String> {
        self.process.configure(next).await
    }

    async fn tick(&mut self, ctx: &TickContext<'_>) -> Result<Analysis, String> {
        let deadline = ctx.config.period().as_duration().min(MAX_SAMPLE_DEADLINE);
        let msg = json!({"op": "sample", "deadlineMs": deadline.as_millis() as u64});
        let reply = self.process.request(&msg, deadline + REPLY_GRACE).await?;
        let (analysis, skipped) = parse_sample_reply(reply, ctx)?;
        if skipped > 0 {
            warn!(instance = %ctx.instance_id, skipped, "plugin sent malformed records");
        }
        Ok(analysis)
    }

    async fn shutdown(&mut self) {
        self.process.shutdown().await;
    }
}

/// Publisher sink hosted in a plugin subprocess.
pub struct ExternalSink {
    process: PluginProcess,
}

impl ExternalSink {
    /// Wraps a handshaken process and sends it the initial config.
    pub async fn new(mut process: PluginProcess, config: &InstanceConfig) -> Result<Self, String> {
        process.configure(config).await?;
        Ok(ExternalSink { process })
    }
}

#[async_trait]
impl Sink for ExternalSink {
    async fn publish(&mut self, batch: &[Observation]) -> Result<SinkReceipt, SinkError> {
        let msg = json!({"op": "publish", "batch": batch});
        match self.process.request(&msg, PUBLISH_TIMEOUT).await {
            Ok(_) => Ok(SinkReceipt::default()),
            Err(e) if self.process.poisoned.is_some() => Err(SinkError::Unavailable { attempts: 1, message: e }),
            Err(e) => Err(SinkError::Rejected(e)),
        }
    }

    async fn close(&mut self) -> Result<(), SinkError> {
        self.process.shutdown().await;
        Ok(())
    }
}
