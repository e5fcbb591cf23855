//! Scenario harness: scripted reproductions of the two operator scenarios
//! plus gap and trajectory measurement.
//!
//! Scenarios talk to the agent only through the management API and read
//! results only from sink output, so the same code drives an in-process
//! agent (optionally in virtual time) or a remote daemon.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use axum::body::Body;
use axum::http::{Method, Request};
use parking_lot::Mutex;
use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;
use tower::ServiceExt;

use crate::agent::{Agent, AgentConfig};
use crate::api::{body_bytes, router};
use crate::builtin::analyzers::{adaptive_analyze, AdaptiveRateParams, ADAPTIVE_ID, PASSTHROUGH_ID};
use crate::builtin::signal::{Segment, SyntheticSignalSpec};
use crate::builtin::{FILE_SINK, SYNTHETIC_COLLECTOR};
use crate::clock::Clock;
use crate::model::{decode_ndjson, CommandKind, Observation, Period};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("stream has no observations")]
    EmptyStream,
    #[error("{method} {path} returned {status}: {body}")]
    Api { method: String, path: String, status: u16, body: Value },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("{0}")]
    Unsupported(String),
}

#[derive(Debug, Clone)]
pub enum RequestBody {
    Json(Value),
    Raw(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApiResponse {
    pub status: u16,
    pub body: Value,
}

impl ApiResponse {
    pub fn is_success(&self) -> bool {
        (200..300).contains(&self.status)
    }
}

/// Minimal management API client.
#[async_trait]
pub trait ApiClient: Send + Sync {
    async fn request(&self, method: Method, path: &str, body: Option<RequestBody>) -> Result<ApiResponse, HarnessError>;
}

fn parse_body(bytes: &[u8]) -> Value {
    if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(bytes).into_owned()))
    }
}

/// Calls the router directly, without a socket.
pub struct InProcessClient {
    router: axum::Router,
    token: Option<String>,
}

impl InProcessClient {
    pub fn new(agent: Arc<Agent>) -> Self {
        let token = agent.auth_token.clone();
        InProcessClient { router: router(agent), token }
    }
}

#[async_trait]
impl ApiClient for InProcessClient {
    async fn request(&self, method: Method, path: &str, body: Option<RequestBody>) -> Result<ApiResponse, HarnessError> {
        let mut req = Request::builder().method(method).uri(path);
        if let Some(t) = &self.token {
            req = req.header("authorization", format!("Bearer {t}"));
        }
        let body = match body {
            Some(RequestBody::Json(v)) => {
                req = req.header("content-type", "application/json");
                Body::from(v.to_string())
            }
            Some(RequestBody::Raw(b)) => Body::from(b),
            None => Body::empty(),
        };
        let req = req.body(body).map_err(|e| HarnessError::Transport(e.to_string()))?;
        let resp = self.router.clone().oneshot(req).await.map_err(|e| HarnessError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let bytes = body_bytes(resp.into_body()).await.map_err(|e| HarnessError::Transport(e.to_string()))?;
        Ok(ApiResponse { status, body: parse_body(&bytes) })
    }
}

/// Talks to a running daemon over HTTP.
pub struct HttpClient {
    base: String,
    token: Option<String>,
    client: reqwest::Client,
}

impl HttpClient {
    /// `endpoint` is `host:port` or a full `http://` URL.
    pub fn new(endpoint: &str, token: Option<String>) -> Self {
        let base = if endpoint.starts_with("http://") || endpoint.starts_with("https://") {
            endpoint.trim_end_matches('/').to_string()
        } else {
            format!("http://{endpoint}")
        };
        HttpClient { base, token, client: reqwest::Client::new() }
    }
}

#[async_trait]
impl ApiClient for HttpClient {
    async fn request(&self, method: Method, path: &str, body: Option<RequestBody>) -> Result<ApiResponse, HarnessError> {
        let method = reqwest::Method::from_bytes(method.as_str().as_bytes())
            .map_err(|e| HarnessError::Transport(e.to_string()))?;
        let mut req = self.client.request(method, format!("{}{path}", self.base));
        if let Some(t) = &self.token {
            req = req.bearer_auth(t);
        }
        req = match body {
            Some(RequestBody::Json(v)) => req.header("content-type", "application/json").body(v.to_string()),
            Some(RequestBody::Raw(b)) => req.header("content-type", "application/x-tar").body(b),
            None => req,
        };
        let resp = req.send().await.map_err(|e| HarnessError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let bytes = resp.bytes().await.map_err(|e| HarnessError::Transport(e.to_string()))?;
        Ok(ApiResponse { status, body: parse_body(&bytes) })
    }
}

/// Wraps a client and counts the calls that mutate agent state.
struct Tracked {
    inner: Arc<dyn ApiClient>,
    mutations: Mutex<usize>,
}

impl Tracked {
    fn new(inner: Arc<dyn ApiClient>) -> Self {
        Tracked { inner, mutations: Mutex::new(0) }
    }

    fn mutations(&self) -> usize {
        *self.mutations.lock()
    }

    async fn call(&self, method: Method, path: &str, body: Option<Value>) -> Result<Value, HarnessError> {
        if method != Method::GET {
            *self.mutations.lock() += 1;
        }
        let resp = self.inner.request(method.clone(), path, body.map(RequestBody::Json)).await?;
        if resp.is_success() {
            Ok(resp.body)
        } else {
            Err(HarnessError::Api { method: method.to_string(), path: path.to_string(), status: resp.status, body: resp.body })
        }
    }
}

/// What a scenario runs against.
#[async_trait]
pub trait ScenarioHost: Send {
    fn client(&self) -> Arc<dyn ApiClient>;

    /// Directory for sink output the harness reads back.
    fn scratch_dir(&self) -> PathBuf;

    /// Restarts the agent with empty state. Only used by negative controls.
    async fn restart(&mut self) -> Result<(), HarnessError>;
}

/// An agent running inside this process.
pub struct InProcessHost {
    agent: Arc<Agent>,
    config: AgentConfig,
    clock: Arc<dyn Clock>,
    scratch: PathBuf,
}

impl InProcessHost {
    pub fn new(config: AgentConfig, clock: Arc<dyn Clock>, scratch: impl Into<PathBuf>) -> Self {
        let agent = Arc::new(Agent::new(&config, clock.clone()));
        InProcessHost { agent, config, clock, scratch: scratch.into() }
    }

    pub fn agent(&self) -> &Arc<Agent> {
        &self.agent
    }
}

#[async_trait]
impl ScenarioHost for InProcessHost {
    fn client(&self) -> Arc<dyn ApiClient> {
        Arc::new(InProcessClient::new(self.agent.clone()))
    }

    fn scratch_dir(&self) -> PathBuf {
        self.scratch.clone()
    }

    async fn restart(&mut self) -> Result<(), HarnessError> {
        self.agent.shutdown().await;
        self.agent = Arc::new(Agent::new(&self.config, self.clock.clone()));
        Ok(())
    }
}

/// A daemon reached over HTTP; it must share `scratch` with this process.
pub struct RemoteHost {
    client: Arc<HttpClient>,
    scratch: PathBuf,
}

impl RemoteHost {
    pub fn new(endpoint: &str, token: Option<String>, scratch: impl Into<PathBuf>) -> Self {
        RemoteHost { client: Arc::new(HttpClient::new(endpoint, token)), scratch: scratch.into() }
    }
}

#[async_trait]
impl ScenarioHost for RemoteHost {
    fn client(&self) -> Arc<dyn ApiClient> {
        self.client.clone()
    }

    fn scratch_dir(&self) -> PathBuf {
        self.scratch.clone()
    }

    async fn restart(&mut self) -> Result<(), HarnessError> {
        Err(HarnessError::Unsupported("a remote agent cannot be restarted by the harness".into()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Verdict {
    #[serde(rename = "self-adaptive")]
    SelfAdaptive,
    #[serde(rename = "API-driven")]
    ApiDriven,
    #[serde(rename = "partially")]
    Partially,
    #[serde(rename = "manual")]
    Manual,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct ScenarioStep {
    pub description: String,
    pub api_calls_issued: usize,
    pub manual_steps_required: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct TrajectoryPoint {
    pub tick: u64,
    pub period_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct ScenarioReport {
    pub scenario_id: String,
    pub steps: Vec<ScenarioStep>,
    pub max_gap_ms: BTreeMap<String, f64>,
    pub adaptation_trajectory: Vec<TrajectoryPoint>,
    pub verdict: Verdict,
    pub checks: Vec<Check>,
}

impl ScenarioReport {
    pub fn passed(&self, name: &str) -> Option<bool> {
        self.checks.iter().find(|c| c.name == name).map(|c| c.passed)
    }

    fn manual_steps(&self) -> usize {
        self.steps.iter().map(|s| s.manual_steps_required).sum()
    }
}

fn check(checks: &mut Vec<Check>, name: &str, passed: bool, detail: impl Into<String>) {
    checks.push(Check { name: name.to_string(), passed, detail: detail.into() });
}

/// Gap statistics of one (instance, indicator) stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct GapStats {
    pub count: usize,
    pub max_gap_ms: f64,
    pub median_gap_ms: f64,
    pub first_ns: u64,
    pub last_ns: u64,
}

/// Inter-observation gaps per (sourceInstance, indicator), computed from
/// sorted timestamps. A single-record stream has zero gaps.
pub fn measure_gaps(records: &[Observation]) -> Result<BTreeMap<(String, String), GapStats>, HarnessError> {
    if records.is_empty() {
        return Err(HarnessError::EmptyStream);
    }
    let mut streams: BTreeMap<(String, String), Vec<u64>> = BTreeMap::new();
    for r in records {
        streams.entry((r.source_instance.clone(), r.indicator.clone())).or_default().push(r.timestamp);
    }
    Ok(streams
        .into_iter()
        .map(|(key, mut ts)| {
            ts.sort_unstable();
            let mut gaps: Vec<u64> = ts.windows(2).map(|w| w[1] - w[0]).collect();
            gaps.sort_unstable();
            let median = match gaps.len() {
                0 => 0.0,
                n if n % 2 == 1 => gaps[n / 2] as f64,
                n => (gaps[n / 2 - 1] as f64 + gaps[n / 2] as f64) / 2.0,
            };
            let stats = GapStats {
                count: ts.len(),
                max_gap_ms: gaps.last().copied().unwrap_or(0) as f64 / 1e6,
                median_gap_ms: median / 1e6,
                first_ns: ts[0],
                last_ns: ts[ts.len() - 1],
            };
            (key, stats)
        })
        .collect())
}

/// Largest gap of any stream of `instance`, in ms.
pub fn max_gap_of(gaps: &BTreeMap<(String, String), GapStats>, instance: &str) -> Option<f64> {
    gaps.iter().filter(|((i, _), _)| i == instance).map(|(_, g)| g.max_gap_ms).reduce(f64::max)
}

pub fn read_sink_file(path: &Path) -> Result<Vec<Observation>, HarnessError> {
    match std::fs::read(path) {
        Ok(bytes) => decode_ndjson(&bytes).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display()))),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Vec::new()),
        Err(e) => Err(HarnessError::Io(format!("{}: {e}", path.display()))),
    }
}

/// Replays the adaptive analyzer offline over one indicator's value
/// sequence: tumbling windows, one decision per full window, period
/// clamped as the controller would.
pub fn replay_adaptive(values: &[f64], params: &AdaptiveRateParams, initial: Period) -> Vec<TrajectoryPoint> {
    let mut period = initial.clamp(params.min_period, params.max_period);
    let mut out = Vec::new();
    let size = params.window_size.max(1);
    for (w, chunk) in values.chunks_exact(size).enumerate() {
        let windows = BTreeMap::from([("signal".to_string(), chunk.to_vec())]);
        let Ok(Some(decision)) = adaptive_analyze(&windows, params, period) else { continue };
        if let Some(CommandKind::SetSamplingPeriod { period: next }) = decision.command {
            period = next.clamp(params.min_period, params.max_period);
            out.push(TrajectoryPoint { tick: ((w + 1) * size - 1) as u64, period_ms: period.as_millis() });
        }
    }
    out
}

async fn status(api: &Tracked) -> Result<(u64, u64), HarnessError> {
    let s = api.call(Method::GET, "/api/v1/status", None).await?;
    Ok((s["startedAt"].as_u64().unwrap_or(0), s["uptimeMs"].as_u64().unwrap_or(0)))
}

#[derive(Debug, Clone)]
pub struct DatacenterOptions {
    pub baseline_period_ms: u64,
    pub patched_period_ms: u64,
    /// Time spent in each phase.
    pub phase: Duration,
    /// Negative control: restart the agent mid-scenario.
    pub restart_mid_scenario: bool,
}

impl Default for DatacenterOptions {
    fn default() -> Self {
        DatacenterOptions {
            baseline_period_ms: 100,
            patched_period_ms: 50,
            phase: Duration::from_secs(2),
            restart_mid_scenario: false,
        }
    }
}

const BASELINE: [(&str, &str); 2] = [("dc-east", "dc.east"), ("dc-west", "dc.west")];

async fn create_baseline(api: &Tracked, sink: &Path, period_ms: u64) -> Result<(), HarnessError> {
    api.call(
        Method::POST,
        "/api/v1/publishers",
        Some(json!({
            "instanceId": "dc-sink",
            "pluginId": FILE_SINK,
            "topics": ["dc.*"],
            "params": {"path": sink.to_string_lossy()},
        })),
    )
    .await?;
    for (id, topic) in BASELINE {
        api.call(
            Method::POST,
            "/api/v1/collectors",
            Some(json!({
                "instanceId": id,
                "pluginId": SYNTHETIC_COLLECTOR,
                "targetSpec": {"target": id},
                "indicators": ["latency_ms", "requests_per_s"],
                "samplingPeriod": format!("{period_ms}ms"),
                "topics": [topic],
            })),
        )
        .await?;
    }
    Ok(())
}

/// A new data center comes online: add a collector for it and raise the
/// sampling rate of the existing ones, all through the API.
pub async fn run_scenario_datacenter<H: ScenarioHost>(
    host: &mut H,
    opts: &DatacenterOptions,
) -> Result<ScenarioReport, HarnessError> {
    let sink = host.scratch_dir().join("datacenter.ndjson");
    let _ = std::fs::remove_file(&sink);
    let mut steps = Vec::new();
    let mut checks = Vec::new();

    let api = Tracked::new(host.client());
    create_baseline(&api, &sink, opts.baseline_period_ms).await?;
    steps.push(ScenarioStep {
        description: "baseline: two existing data-center collectors and one publisher".into(),
        api_calls_issued: api.mutations(),
        manual_steps_required: 0,
    });
    let (started0, uptime0) = status(&api).await?;
    let clock0 = tokio::time::Instant::now();
    tokio::time::sleep(opts.phase).await;

    let mut api = api;
    if opts.restart_mid_scenario {
        host.restart().await?;
        api = Tracked::new(host.client());
        create_baseline(&api, &sink, opts.baseline_period_ms).await?;
        steps.push(ScenarioStep {
            description: "agent restarted and baseline re-created by hand".into(),
            api_calls_issued: api.mutations(),
            manual_steps_required: 1,
        });
    }

    let before = api.mutations();
    api.call(
        Method::POST,
        "/api/v1/collectors",
        Some(json!({
            "instanceId": "dc-new",
            "pluginId": SYNTHETIC_COLLECTOR,
            "targetSpec": {"target": "dc-new"},
            "indicators": ["slo.latency_p99_ms", "slo.availability_pct"],
            "samplingPeriod": format!("{}ms", opts.baseline_period_ms),
            "topics": ["dc.new"],
        })),
    )
    .await?;
    steps.push(ScenarioStep {
        description: "collect new SLO indicators for the new data center".into(),
        api_calls_issued: api.mutations() - before,
        manual_steps_required: 0,
    });
    tokio::time::sleep(opts.phase).await;

    let before = api.mutations();
    for (id, _) in BASELINE {
        let patch = json!({"samplingPeriod": format!("{}ms", opts.patched_period_ms)});
        api.call(Method::PATCH, &format!("/api/v1/collectors/{id}/config"), Some(patch)).await?;
    }
    steps.push(ScenarioStep {
        description: "raise the sampling rate of the already collected indicators".into(),
        api_calls_issued: api.mutations() - before,
        manual_steps_required: 0,
    });
    tokio::time::sleep(opts.phase).await;

    let (started1, uptime1) = status(&api).await?;
    let elapsed = clock0.elapsed().as_millis() as u64;
    let uninterrupted = started1 == started0 && uptime1 >= uptime0 + elapsed.saturating_sub(100);
    check(
        &mut checks,
        "uptime_uninterrupted",
        uninterrupted,
        format!("startedAt {started0} -> {started1}, uptime {uptime0} -> {uptime1} ms over {elapsed} ms"),
    );

    let listed = api.call(Method::GET, "/api/v1/collectors", None).await?;
    let period_of = |id: &str| {
        listed
            .as_array()
            .and_then(|a| a.iter().find(|r| r["instanceId"] == id))
            .map(|r| (r["state"].clone(), r["config"]["samplingPeriod"].clone()))
    };
    let new_running = period_of("dc-new").is_some_and(|(s, _)| s == "Running");
    check(&mut checks, "new_collector_running", new_running, format!("{:?}", period_of("dc-new")));
    let want = json!(Period::from_millis(opts.patched_period_ms));
    let patched = BASELINE.iter().all(|(id, _)| period_of(id).is_some_and(|(s, p)| s == "Running" && p == want));
    check(&mut checks, "baseline_period_updated", patched, format!("expected {want} on the baseline collectors"));

    // Destroying the publisher flushes everything it still holds.
    let before = api.mutations();
    api.call(Method::DELETE, "/api/v1/publishers/dc-sink", None).await?;
    steps.push(ScenarioStep {
        description: "teardown: flush the publisher".into(),
        api_calls_issued: api.mutations() - before,
        manual_steps_required: 0,
    });

    let records = read_sink_file(&sink)?;
    let gaps = measure_gaps(&records)?;
    let budget = 3.0 * opts.baseline_period_ms.max(opts.patched_period_ms) as f64;
    let mut max_gap_ms = BTreeMap::new();
    for (id, _) in BASELINE {
        let g = max_gap_of(&gaps, id).unwrap_or(f64::INFINITY);
        max_gap_ms.insert(id.to_string(), g);
    }
    let within = max_gap_ms.values().all(|g| *g <= budget);
    check(&mut checks, "baseline_max_gap", within, format!("max gaps {max_gap_ms:?}, budget {budget} ms"));
    let new_seen = gaps.keys().any(|(i, ind)| i == "dc-new" && ind.starts_with("slo."));
    check(&mut checks, "new_indicators_published", new_seen, "dc-new observations in the sink");

    let mut report = ScenarioReport {
        scenario_id: "datacenter".into(),
        steps,
        max_gap_ms,
        adaptation_trajectory: Vec::new(),
        verdict: Verdict::Manual,
        checks,
    };
    report.verdict = if report.manual_steps() > 0 {
        Verdict::Manual
    } else if report.checks.iter().all(|c| c.passed) {
        Verdict::ApiDriven
    } else {
        Verdict::Partially
    };
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct AdaptiveOptions {
    pub stable_ticks: u64,
    pub unstable_ticks: u64,
    pub seed: u64,
    pub initial_period_ms: u64,
    /// Analyzer to run; the adaptive one unless testing the negative control.
    pub analyzer: String,
}

impl Default for AdaptiveOptions {
    fn default() -> Self {
        AdaptiveOptions {
            stable_ticks: 96,
            unstable_ticks: 96,
            seed: 7,
            initial_period_ms: 100,
            analyzer: ADAPTIVE_ID.to_string(),
        }
    }
}

impl AdaptiveOptions {
    pub fn negative_control() -> Self {
        AdaptiveOptions { analyzer: PASSTHROUGH_ID.to_string(), ..Self::default() }
    }

    /// Constant segment followed by a wide random walk.
    pub fn signal(&self) -> SyntheticSignalSpec {
        SyntheticSignalSpec {
            segments: vec![
                Segment::constant(self.stable_ticks, 50.0),
                Segment::random_walk(self.unstable_ticks, 10.0, 25.0),
            ],
            seed: self.seed,
        }
    }
}

const ADAPTIVE_INSTANCE: &str = "adaptive-1";

/// Trajectory entries recorded by the analyzer in a collector's audit log.
pub fn trajectory_from_detail(detail: &Value) -> Vec<TrajectoryPoint> {
    detail["audit"]
        .as_array()
        .map(|entries| {
            entries
                .iter()
                .filter(|e| e["source"] == "analyzer" && e["outcome"]["status"] != "rejected")
                .filter_map(|e| Some(TrajectoryPoint { tick: e["tick"].as_u64()?, period_ms: e["periodMs"].as_u64()? }))
                .collect()
        })
        .unwrap_or_default()
}

/// A collector watches a signal that is first stable and then unstable;
/// its analyzer must tune the sampling period with no operator input.
pub async fn run_scenario_adaptive<H: ScenarioHost>(
    host: &mut H,
    opts: &AdaptiveOptions,
) -> Result<ScenarioReport, HarnessError> {
    let sink = host.scratch_dir().join("adaptive.ndjson");
    let _ = std::fs::remove_file(&sink);
    let params = AdaptiveRateParams::default();
    let total = opts.stable_ticks + opts.unstable_ticks;
    let signal = serde_json::to_string(&opts.signal()).map_err(|e| HarnessError::Io(e.to_string()))?;

    let api = Tracked::new(host.client());
    api.call(
        Method::POST,
        "/api/v1/publishers",
        Some(json!({
            "instanceId": "adaptive-sink",
            "pluginId": FILE_SINK,
            "topics": ["adaptive.*"],
            "params": {"path": sink.to_string_lossy()},
        })),
    )
    .await?;
    api.call(
        Method::POST,
        "/api/v1/collectors",
        Some(json!({
            "instanceId": ADAPTIVE_INSTANCE,
            "pluginId": SYNTHETIC_COLLECTOR,
            "targetSpec": {"target": "synthetic-host", "signal": signal},
            "indicators": ["signal"],
            "samplingPeriod": format!("{}ms", opts.initial_period_ms),
            "activeAnalyzer": opts.analyzer,
            "topics": ["adaptive.signal"],
        })),
    )
    .await?;
    let setup_calls = api.mutations();
    let mut steps = vec![ScenarioStep {
        description: "setup: one synthetic collector and one publisher".into(),
        api_calls_issued: setup_calls,
        manual_steps_required: 0,
    }];

    // Wait on sink output only; the agent is left alone.
    let limit = Duration::from_millis(total * params.max_period.as_millis() * 2);
    let waited = tokio::time::Instant::now();
    let mut records = Vec::new();
    while (records.len() as u64) < total {
        if waited.elapsed() > limit {
            return Err(HarnessError::Io(format!("only {} of {total} observations after {limit:?}", records.len())));
        }
        tokio::time::sleep(Duration::from_secs(1)).await;
        records = read_sink_file(&sink)?;
    }
    steps.push(ScenarioStep {
        description: "observe the stable then the unstable segment".into(),
        api_calls_issued: api.mutations() - setup_calls,
        manual_steps_required: 0,
    });
    let hands_off = api.mutations() == setup_calls;

    let detail = api.call(Method::GET, &format!("/api/v1/collectors/{ADAPTIVE_INSTANCE}"), None).await?;
    let trajectory: Vec<TrajectoryPoint> =
        trajectory_from_detail(&detail).into_iter().filter(|p| p.tick < total).collect();

    let before = api.mutations();
    api.call(Method::DELETE, &format!("/api/v1/collectors/{ADAPTIVE_INSTANCE}"), None).await?;
    api.call(Method::DELETE, "/api/v1/publishers/adaptive-sink", None).await?;
    steps.push(ScenarioStep {
        description: "teardown".into(),
        api_calls_issued: api.mutations() - before,
        manual_steps_required: 0,
    });

    let values: Vec<f64> = read_sink_file(&sink)?
        .into_iter()
        .filter(|o| o.source_instance == ADAPTIVE_INSTANCE && o.indicator == "signal")
        .take(total as usize)
        .map(|o| o.value)
        .collect();
    if values.is_empty() {
        return Err(HarnessError::EmptyStream);
    }

    let mut checks = Vec::new();
    check(&mut checks, "zero_api_calls_after_setup", hands_off, format!("{} mutating calls", api.mutations() - setup_calls));
    let max = params.max_period.as_millis();
    let min = params.min_period.as_millis();
    let reached_max = trajectory.iter().any(|p| p.tick < opts.stable_ticks && p.period_ms == max);
    check(&mut checks, "reaches_max_on_stable_segment", reached_max, format!("{max} ms within {} ticks", opts.stable_ticks));
    let reached_min = trajectory.iter().any(|p| p.tick >= opts.stable_ticks && p.tick < total && p.period_ms == min);
    check(&mut checks, "reaches_min_on_unstable_segment", reached_min, format!("{min} ms within {} ticks", opts.unstable_ticks));
    let oracle = if opts.analyzer == ADAPTIVE_ID {
        replay_adaptive(&values, &params, Period::from_millis(opts.initial_period_ms))
    } else {
        Vec::new()
    };
    let matches = oracle == trajectory && values.len() as u64 == total;
    check(&mut checks, "oracle_trajectory_match", matches, format!("{} observed vs {} replayed points", trajectory.len(), oracle.len()));

    let all = checks.iter().all(|c| c.passed);
    Ok(ScenarioReport {
        scenario_id: "adaptive".into(),
        steps,
        max_gap_ms: BTreeMap::new(),
        adaptation_trajectory: trajectory,
        verdict: if all { Verdict::SelfAdaptive } else { Verdict::Manual },
        checks,
    })
}
