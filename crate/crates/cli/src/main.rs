use std::io::IsTerminal;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use reprobe_core::agent::{Agent, AgentConfig, DEFAULT_BIND};
use reprobe_core::api;
use reprobe_core::bundle::{pack_bundle, Manifest};
use reprobe_core::clock::{Clock, SystemClock, VirtualClock};
use reprobe_core::harness::{
    run_scenario_adaptive, run_scenario_datacenter, AdaptiveOptions, ApiClient, ApiResponse, DatacenterOptions,
    HarnessError, HttpClient, InProcessHost, RemoteHost, RequestBody, ScenarioHost, ScenarioReport, Verdict,
};
use reqwest::Method;
use serde_json::{json, Map, Value};
use tracing::{error, info};

#[derive(Parser)]
#[command(name = "reprobe", version, about = "Plugin-based monitoring agent and its control client")]
struct Cli {
    /// Agent address for control commands (host:port or URL).
    #[arg(long, global = true, env = "REPROBE_ENDPOINT", default_value = DEFAULT_BIND)]
    endpoint: String,
    /// Bearer token for the management API.
    #[arg(long, global = true, env = "REPROBE_TOKEN", hide_env_values = true)]
    token: Option<String>,
    /// Print raw response bodies.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the agent daemon.
    Serve {
        #[arg(long, short)]
        config: PathBuf,
    },
    /// Show agent status.
    Status,
    /// Manage plugin bundles.
    #[command(subcommand)]
    Plugin(PluginCmd),
    /// Manage collector instances.
    #[command(subcommand)]
    Col(InstanceCmd),
    /// Manage publisher instances.
    #[command(subcommand)]
    Pub(InstanceCmd),
    /// Follow a collector's sampling period and adaptation log.
    Watch(WatchArgs),
    /// Run the reproduction scenarios and print their reports.
    Scenario(ScenarioArgs),
}

#[derive(Subcommand)]
enum PluginCmd {
    Ls,
    Upload { bundle: PathBuf },
    Rm { id: String },
    /// Build a bundle from a manifest and its entry executable (local only).
    Pack {
        manifest: PathBuf,
        entry: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum InstanceCmd {
    Ls,
    Get { id: String },
    Create {
        /// JSON instance spec.
        #[arg(long, short = 'f')]
        file: PathBuf,
    },
    /// Patch the config: `samplingPeriod=500ms`, `target.host=x`,
    /// `indicators=a,b`, any other key is a param; `key=null` removes it.
    Set {
        id: String,
        #[arg(required = true)]
        assignments: Vec<String>,
    },
    Rm { id: String },
}

#[derive(Args)]
struct WatchArgs {
    id: String,
    /// How long to watch, e.g. "30s".
    #[arg(long, default_value = "30s")]
    duration: String,
    #[arg(long, default_value = "1s")]
    interval: String,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum ScenarioName {
    Datacenter,
    Adaptive,
    All,
}

#[derive(Args)]
struct ScenarioArgs {
    #[arg(value_enum, default_value = "all")]
    which: ScenarioName,
    /// Drive the agent at --endpoint instead of an in-process one. The
    /// agent must be able to write to --scratch.
    #[arg(long)]
    remote: bool,
    #[arg(long)]
    scratch: Option<PathBuf>,
    /// Also run the negative controls, which must not reach their verdicts.
    #[arg(long)]
    negative_controls: bool,
}

/// Failure classes mapped onto exit codes.
enum Failure {
    /// The API answered with an error status.
    Api(ApiResponse),
    /// Could not talk to the agent or read local input.
    Transport(anyhow::Error),
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        Failure::Transport(e.into())
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Transport(e)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let default_level = if matches!(cli.command, Command::Serve { .. }) { "info" } else { "warn" };
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| default_level.into()),
        )
        .with_ansi(std::io::stderr().is_terminal())
        .with_writer(std::io::stderr)
        .init();
    match cli.command {
        Command::Serve { ref config } => serve(config, cli.token.clone()),
        Command::Scenario(ref args) => scenario(&cli, args),
        _ => control(cli),
    }
}

fn runtime(paused: bool) -> tokio::runtime::Runtime {
    let mut b = if paused {
        tokio::runtime::Builder::new_current_thread()
    } else {
        tokio::runtime::Builder::new_multi_thread()
    };
    b.enable_all().start_paused(paused).build().expect("tokio runtime")
}

fn load_config(path: &Path, token: Option<String>) -> Result<AgentConfig, Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| vec![format!("cannot read {}: {e}", path.display())])?;
    let mut cfg = AgentConfig::from_json(&text).map_err(|e| vec![format!("{}: {e}", path.display())])?;
    if token.is_some() {
        cfg.auth_token = token;
    }
    let problems = cfg.problems();
    if problems.is_empty() {
        Ok(cfg)
    } else {
        Err(problems)
    }
}

fn serve(path: &Path, token: Option<String>) -> ExitCode {
    let cfg = match load_config(path, token) {
        Ok(c) => c,
        Err(problems) => {
            for p in problems {
                eprintln!("config error: {p}");
            }
            return ExitCode::from(1);
        }
    };
    runtime(false).block_on(async move {
        let listener = match tokio::net::TcpListener::bind(&cfg.bind).await {
            Ok(l) => l,
            Err(e) => {
                eprintln!("BindFailure: cannot bind {}: {e}", cfg.bind);
                return ExitCode::from(1);
            }
        };
        let agent = Arc::new(Agent::new(&cfg, Arc::new(SystemClock)));
        if let Err(errors) = agent.bootstrap(&cfg.bootstrap).await {
            for e in errors {
                eprintln!("config error: {e}");
            }
            agent.shutdown().await;
            return ExitCode::from(1);
        }
        let addr = listener.local_addr().map(|a| a.to_string()).unwrap_or_else(|_| cfg.bind.clone());
        info!(%addr, auth = cfg.auth_token.is_some(), "management API listening");
        let result = api::serve(agent.clone(), listener, shutdown_signal()).await;
        agent.shutdown().await;
        match result {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                error!(error = %e, "server error");
                ExitCode::from(1)
            }
        }
    })
}

async fn shutdown_signal() {
    #[cfg(unix)]
    {
        use tokio::signal::unix::{signal, SignalKind};
        let mut term = signal(SignalKind::terminate()).expect("SIGTERM handler");
        tokio::select! {
            _ = tokio::signal::ctrl_c() => {}
            _ = term.recv() => {}
        }
    }
    #[cfg(not(unix))]
    let _ = tokio::signal::ctrl_c().await;
    info!("shutting down");
}

fn control(cli: Cli) -> ExitCode {
    let client = HttpClient::new(&cli.endpoint, cli.token.clone());
    let json_out = cli.json;
    let outcome = runtime(false).block_on(run_control(&client, cli.command, json_out));
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Api(resp)) => {
            if json_out {
                println!("{}", resp.body);
            }
            render_error(&resp);
            ExitCode::from(1)
        }
        Err(Failure::Transport(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn render_error(resp: &ApiResponse) {
    let code = resp.body["code"].as_str().unwrap_or("error");
    let message = resp.body["message"].as_str().map(str::to_string).unwrap_or_else(|| resp.body.to_string());
    eprintln!("error ({}): {code}: {message}", resp.status);
    if let Some(details) = resp.body["details"].as_array() {
        for d in details {
            eprintln!("  - {d}");
        }
    }
}

async fn call(client: &dyn ApiClient, method: Method, path: &str, body: Option<RequestBody>) -> Result<Value, Failure> {
    let resp = client.request(method, path, body).await?;
    if resp.is_success() {
        Ok(resp.body)
    } else {
        Err(Failure::Api(resp))
    }
}

fn print_json(v: &Value) {
    println!("{}", serde_json::to_string_pretty(v).unwrap_or_else(|_| v.to_string()));
}

async fn run_control(client: &dyn ApiClient, command: Command, json_out: bool) -> Result<(), Failure> {
    match command {
        Command::Status => {
            let s = call(client, Method::GET, "/api/v1/status", None).await?;
            if json_out {
                println!("{s}");
            } else {
                render_status(&s);
            }
        }
        Command::Plugin(cmd) => plugin(client, cmd, json_out).await?,
        Command::Col(cmd) => instance(client, "collectors", cmd, json_out).await?,
        Command::Pub(cmd) => instance(client, "publishers", cmd, json_out).await?,
        Command::Watch(args) => watch(client, &args, json_out).await?,
        Command::Serve { .. } | Command::Scenario(_) => unreachable!("handled in main"),
    }
    Ok(())
}

fn render_status(s: &Value) {
    println!("agent {}  up {} ms  startedAt {}", s["agentVersion"].as_str().unwrap_or("?"), s["uptimeMs"], s["startedAt"]);
    println!("plugins: {}", kv(&s["plugins"]));
    println!("collectors: {}", kv(&s["instances"]["collectors"]));
    println!("publishers: {}", kv(&s["instances"]["publishers"]));
    if let Some(bus) = s["bus"].as_object() {
        for (id, st) in bus {
            println!(
                "  bus {id}: depth {}/{} enqueued {} drained {} dropped {}",
                st["depth"], st["capacity"], st["enqueued"], st["drained"], st["dropped"]
            );
        }
    }
}

fn kv(v: &Value) -> String {
    match v.as_object() {
        Some(m) if !m.is_empty() => m.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(" "),
        _ => "none".to_string(),
    }
}

async fn plugin(client: &dyn ApiClient, cmd: PluginCmd, json_out: bool) -> Result<(), Failure> {
    match cmd {
        PluginCmd::Ls => {
            let list = call(client, Method::GET, "/api/v1/plugins", None).await?;
            if json_out {
                println!("{list}");
                return Ok(());
            }
            println!("{:<24} {:<10} {:<9} {}", "ID", "KIND", "SOURCE", "VERSION");
            for p in list.as_array().into_iter().flatten() {
                println!(
                    "{:<24} {:<10} {:<9} {}",
                    str_of(&p["id"]),
                    str_of(&p["kind"]),
                    str_of(&p["provenance"]),
                    str_of(&p["version"])
                );
            }
        }
        PluginCmd::Upload { bundle } => {
            let bytes = std::fs::read(&bundle).with_context(|| format!("cannot read {}", bundle.display()))?;
            let d = call(client, Method::POST, "/api/v1/plugins", Some(RequestBody::Raw(bytes))).await?;
            if json_out {
                println!("{d}");
            } else {
                println!("registered {} {} {}", str_of(&d["kind"]), str_of(&d["id"]), str_of(&d["version"]));
            }
        }
        PluginCmd::Rm { id } => {
            call(client, Method::DELETE, &format!("/api/v1/plugins/{id}"), None).await?;
            if !json_out {
                println!("removed plugin {id}");
            }
        }
        PluginCmd::Pack { manifest, entry, out } => {
            let text = std::fs::read_to_string(&manifest).with_context(|| format!("cannot read {}", manifest.display()))?;
            let m: Manifest = serde_json::from_str(&text).with_context(|| format!("invalid manifest {}", manifest.display()))?;
            let bytes = std::fs::read(&entry).with_context(|| format!("cannot read {}", entry.display()))?;
            let tar = pack_bundle(&m, &[(&m.entry, &bytes, 0o755)]).context("cannot build bundle")?;
            std::fs::write(&out, tar).with_context(|| format!("cannot write {}", out.display()))?;
            if !json_out {
                println!("wrote {}", out.display());
            }
        }
    }
    Ok(())
}

fn str_of(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Null => "-".to_string(),
        other => other.to_string(),
    }
}

async fn instance(client: &dyn ApiClient, kind: &str, cmd: InstanceCmd, json_out: bool) -> Result<(), Failure> {
    let base = format!("/api/v1/{kind}");
    match cmd {
        InstanceCmd::Ls => {
            let list = call(client, Method::GET, &base, None).await?;
            if json_out {
                println!("{list}");
                return Ok(());
            }
            println!("{:<16} {:<20} {:<13} {:<8} {}", "ID", "PLUGIN", "STATE", "PERIOD", "TOPICS");
            for r in list.as_array().into_iter().flatten() {
                let c = &r["config"];
                println!(
                    "{:<16} {:<20} {:<13} {:<8} {}",
                    str_of(&r["instanceId"]),
                    str_of(&r["pluginId"]),
                    str_of(&r["state"]),
                    str_of(&c["samplingPeriod"]),
                    c["topics"].as_array().map(|t| t.iter().map(str_of).collect::<Vec<_>>().join(",")).unwrap_or_default()
                );
            }
        }
        InstanceCmd::Get { id } => {
            let d = call(client, Method::GET, &format!("{base}/{id}"), None).await?;
            if json_out {
                println!("{d}");
            } else {
                print_json(&d);
            }
        }
        InstanceCmd::Create { file } => {
            let text = std::fs::read_to_string(&file).with_context(|| format!("cannot read {}", file.display()))?;
            let spec: Value = serde_json::from_str(&text).with_context(|| format!("{} is not JSON", file.display()))?;
            let r = call(client, Method::POST, &base, Some(RequestBody::Json(spec))).await?;
            if json_out {
                println!("{r}");
            } else {
                println!("created {} ({})", str_of(&r["instanceId"]), str_of(&r["state"]));
            }
        }
        InstanceCmd::Set { id, assignments } => {
            let patch = parse_assignments(&assignments)?;
            let cfg = call(client, Method::PATCH, &format!("{base}/{id}/config"), Some(RequestBody::Json(patch))).await?;
            if json_out {
                println!("{cfg}");
            } else {
                print_json(&cfg);
            }
        }
        InstanceCmd::Rm { id } => {
            call(client, Method::DELETE, &format!("{base}/{id}"), None).await?;
            if !json_out {
                println!("removed {id}");
            }
        }
    }
    Ok(())
}

/// Infers a JSON scalar from a command-line value.
fn scalar(raw: &str) -> Value {
    if raw == "null" {
        return Value::Null;
    }
    if let Ok(b) = raw.parse::<bool>() {
        return Value::Bool(b);
    }
    if let Ok(i) = raw.parse::<i64>() {
        return json!(i);
    }
    match raw.parse::<f64>() {
        Ok(f) if f.is_finite() => json!(f),
        _ => Value::String(raw.to_string()),
    }
}

fn list(raw: &str) -> Value {
    Value::Array(raw.split(',').filter(|s| !s.is_empty()).map(|s| Value::String(s.to_string())).collect())
}

/// Turns `k=v` arguments into one config patch.
fn parse_assignments(args: &[String]) -> anyhow::Result<Value> {
    let mut patch = Map::new();
    let mut target = Map::new();
    let mut params = Map::new();
    for arg in args {
        let Some((key, value)) = arg.split_once('=') else { bail!("expected key=value, got {arg:?}") };
        match key {
            "samplingPeriod" | "activeSampler" | "activeAnalyzer" | "pluginId" => {
                patch.insert(key.to_string(), Value::String(value.to_string()));
            }
            "indicators" | "topics" => {
                patch.insert(key.to_string(), list(value));
            }
            _ => {
                if let Some(t) = key.strip_prefix("target.") {
                    let v = if value == "null" { Value::Null } else { Value::String(value.to_string()) };
                    target.insert(t.to_string(), v);
                } else {
                    let name = key.strip_prefix("param.").unwrap_or(key);
                    if name.is_empty() {
                        bail!("empty key in {arg:?}");
                    }
                    params.insert(name.to_string(), scalar(value));
                }
            }
        }
    }
    if !target.is_empty() {
        patch.insert("targetSpec".into(), Value::Object(target));
    }
    if !params.is_empty() {
        patch.insert("params".into(), Value::Object(params));
    }
    Ok(Value::Object(patch))
}

fn parse_ms(s: &str) -> anyhow::Result<Duration> {
    reprobe_core::model::parse_duration_ms(s).map(Duration::from_millis).map_err(|e| anyhow::anyhow!(e))
}

async fn watch(client: &dyn ApiClient, args: &WatchArgs, json_out: bool) -> Result<(), Failure> {
    let duration = parse_ms(&args.duration)?;
    let interval = parse_ms(&args.interval)?.max(Duration::from_millis(10));
    let path = format!("/api/v1/collectors/{}", args.id);
    let start = tokio::time::Instant::now();
    if !json_out {
        println!("{:>8}  {:>8}  {:<28} {}", "TIME_S", "PERIOD", "LAST_CHANGE", "REASON");
    }
    loop {
        let d = call(client, Method::GET, &path, None).await?;
        let elapsed = start.elapsed().as_secs_f64();
        let last = d["audit"].as_array().and_then(|a| a.last()).cloned().unwrap_or(Value::Null);
        let period = str_of(&d["config"]["samplingPeriod"]);
        if json_out {
            println!("{}", json!({"timeS": elapsed, "period": period, "state": d["state"], "last": last}));
        } else {
            let change = if last.is_null() {
                "-".to_string()
            } else {
                format!("{} {}", str_of(&last["source"]), str_of(&last["change"]))
            };
            println!("{:>8.1}  {:>8}  {:<28} {}", elapsed, period, change, str_of(&last["reason"]));
        }
        if d["state"] != "Running" || start.elapsed() + interval > duration {
            break;
        }
        tokio::time::sleep(interval).await;
    }
    Ok(())
}

struct Planned {
    name: &'static str,
    expected: Verdict,
    /// Negative controls pass when the verdict differs from `expected`.
    negative: bool,
}

fn scenario(cli: &Cli, args: &ScenarioArgs) -> ExitCode {
    let mut plan = Vec::new();
    if matches!(args.which, ScenarioName::Datacenter | ScenarioName::All) {
        plan.push(Planned { name: "datacenter", expected: Verdict::ApiDriven, negative: false });
        if args.negative_controls && !args.remote {
            plan.push(Planned { name: "datacenter-restart", expected: Verdict::ApiDriven, negative: true });
        }
    }
    if matches!(args.which, ScenarioName::Adaptive | ScenarioName::All) {
        plan.push(Planned { name: "adaptive", expected: Verdict::SelfAdaptive, negative: false });
        if args.negative_controls {
            plan.push(Planned { name: "adaptive-passthrough", expected: Verdict::SelfAdaptive, negative: true });
        }
    }
    let owned_scratch = args.scratch.is_none();
    let scratch = match &args.scratch {
        Some(p) => p.clone(),
        None => std::env::temp_dir().join(format!("reprobe-scenarios-{}", std::process::id())),
    };
    if let Err(e) = std::fs::create_dir_all(&scratch) {
        eprintln!("error: cannot create {}: {e}", scratch.display());
        return ExitCode::from(2);
    }

    let mut all_ok = true;
    let mut out = Vec::new();
    for p in plan {
        let result = if args.remote {
            let mut host = RemoteHost::new(&cli.endpoint, cli.token.clone(), &scratch);
            runtime(false).block_on(run_one(&mut host, p.name))
        } else {
            let rt = runtime(true);
            rt.block_on(async {
                let clock: Arc<dyn Clock> = Arc::new(VirtualClock::default());
                let cfg = AgentConfig { data_dir: Some(scratch.join("agent")), ..AgentConfig::default() };
                let mut host = InProcessHost::new(cfg, clock, &scratch);
                let r = run_one(&mut host, p.name).await;
                host.agent().shutdown().await;
                r
            })
        };
        match result {
            Ok(report) => {
                let ok = (report.verdict == p.expected) != p.negative;
                all_ok &= ok;
                out.push(json!({"run": p.name, "negativeControl": p.negative, "ok": ok, "report": report}));
            }
            Err(e) => {
                all_ok = false;
                out.push(json!({"run": p.name, "negativeControl": p.negative, "ok": false, "error": e.to_string()}));
            }
        }
    }
    if owned_scratch {
        let _ = std::fs::remove_dir_all(&scratch);
    }
    if cli.json {
        println!("{}", Value::Array(out));
    } else {
        for r in &out {
            print_json(r);
        }
    }
    if all_ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

async fn run_one<H: ScenarioHost>(host: &mut H, name: &str) -> Result<ScenarioReport, HarnessError> {
    match name {
        "datacenter" => run_scenario_datacenter(host, &DatacenterOptions::default()).await,
        "datacenter-restart" => {
            let opts = DatacenterOptions { restart_mid_scenario: true, ..DatacenterOptions::default() };
            run_scenario_datacenter(host, &opts).await
        }
        "adaptive" => run_scenario_adaptive(host, &AdaptiveOptions::default()).await,
        "adaptive-passthrough" => run_scenario_adaptive(host, &AdaptiveOptions::negative_control()).await,
        other => Err(HarnessError::Unsupported(format!("unknown scenario {other}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn assignments_become_one_patch() {
        let args: Vec<String> = ["samplingPeriod=500ms", "indicators=a,b", "target.host=h1", "factor=3", "gen=null", "flag=true", "name=x"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let p = parse_assignments(&args).unwrap();
        assert_eq!(
            p,
            json!({
                "samplingPeriod": "500ms",
                "indicators": ["a", "b"],
                "targetSpec": {"host": "h1"},
                "params": {"factor": 3, "gen": null, "flag": true, "name": "x"},
            })
        );
        assert!(parse_assignments(&["novalue".to_string()]).is_err());
    }

    #[test]
    fn scalars() {
        assert_eq!(scalar("1.5"), json!(1.5));
        assert_eq!(scalar("inf"), json!("inf"));
        assert_eq!(scalar("500ms"), json!("500ms"));
    }
}
