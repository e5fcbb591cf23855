//! End-to-end tests of the `reprobe` binary against a real daemon.

use std::io::Write;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde_json::{json, Value};

const BIN: &str = env!("CARGO_BIN_EXE_reprobe");

fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

struct Daemon {
    child: Child,
    endpoint: String,
    dir: tempfile::TempDir,
}

impl Drop for Daemon {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn write_config(dir: &Path, cfg: &Value) -> PathBuf {
    let path = dir.join("agent.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    path
}

fn start_daemon(extra: Value) -> Daemon {
    let dir = tempfile::tempdir().unwrap();
    let port = free_port();
    let mut cfg = json!({"bind": format!("127.0.0.1:{port}"), "dataDir": dir.path().join("data")});
    for (k, v) in extra.as_object().unwrap() {
        cfg[k] = v.clone();
    }
    let path = write_config(dir.path(), &cfg);
    let child = Command::new(BIN)
        .args(["serve", "--config"])
        .arg(&path)
        .env_remove("REPROBE_TOKEN")
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let endpoint = format!("127.0.0.1:{port}");
    let deadline = Instant::now() + Duration::from_secs(10);
    while std::net::TcpStream::connect(&endpoint).is_err() {
        assert!(Instant::now() < deadline, "daemon did not start");
        std::thread::sleep(Duration::from_millis(20));
    }
    Daemon { child, endpoint, dir }
}

fn ctl(endpoint: &str, args: &[&str]) -> Output {
    Command::new(BIN).arg("--endpoint").arg(endpoint).args(args).env_remove("REPROBE_TOKEN").output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn spec_file(dir: &Path, name: &str, spec: Value) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, spec.to_string()).unwrap();
    p
}

#[test]
fn empty_bootstrap_starts_with_no_instances() {
    let d = start_daemon(json!({}));
    let out = ctl(&d.endpoint, &["status", "--json"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let s: Value = serde_json::from_str(&stdout(&out)).unwrap();
    for key in ["agentVersion", "startedAt", "uptimeMs", "plugins", "instances", "bus"] {
        assert!(s.get(key).is_some(), "status lacks {key}: {s}");
    }
    assert_eq!(s["instances"], json!({"collectors": {}, "publishers": {}}));
    assert_eq!(s["plugins"]["collector"], 2);
}

#[test]
fn bootstrap_topology_writes_lines_within_three_periods() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out.ndjson");
    let d = start_daemon(json!({"bootstrap": [
        {"kind": "collector", "instanceId": "c1", "pluginId": "synthetic-sampler", "indicators": ["x"], "samplingPeriod": "100ms", "topics": ["t"]},
        {"kind": "publisher", "instanceId": "p1", "pluginId": "file-sink", "topics": ["t"], "params": {"path": out.to_string_lossy()}},
    ]}));
    // Bootstrap completes before the listener accepts, so the collector
    // has been running since at most now.
    std::thread::sleep(Duration::from_millis(300));
    let text = std::fs::read_to_string(&out).unwrap_or_default();
    assert!(text.lines().count() >= 1, "no lines after 3 periods");
    let s: Value = serde_json::from_str(&stdout(&ctl(&d.endpoint, &["status", "--json"]))).unwrap();
    assert_eq!(s["instances"]["collectors"]["Running"], 1);
    assert_eq!(s["instances"]["publishers"]["Running"], 1);
}

#[test]
fn invalid_config_lists_every_problem() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), &json!({"bind": "nowhere", "authToken": " ", "periodBounds": {"min": "2s", "max": "1s"}}));
    let out = Command::new(BIN).args(["serve", "--config"]).arg(&path).env_remove("REPROBE_TOKEN").output().unwrap();
    assert_ne!(out.status.code(), Some(0));
    assert_eq!(stderr(&out).matches("config error").count(), 3, "{}", stderr(&out));

    let path = write_config(dir.path(), &json!({"bogus": true}));
    let out = Command::new(BIN).args(["serve", "--config"]).arg(&path).output().unwrap();
    assert_ne!(out.status.code(), Some(0));
    assert!(stderr(&out).contains("bogus"));
}

#[test]
fn occupied_port_is_a_bind_failure() {
    let holder = TcpListener::bind("127.0.0.1:0").unwrap();
    let port = holder.local_addr().unwrap().port();
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), &json!({"bind": format!("127.0.0.1:{port}")}));
    let out = Command::new(BIN).args(["serve", "--config"]).arg(&path).output().unwrap();
    assert_ne!(out.status.code(), Some(0));
    assert!(stderr(&out).contains("BindFailure"), "{}", stderr(&out));
}

#[test]
fn token_from_environment_overrides_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let port = free_port();
    let path = write_config(dir.path(), &json!({"bind": format!("127.0.0.1:{port}"), "authToken": "from-file"}));
    let child = Command::new(BIN)
        .args(["serve", "--config"])
        .arg(&path)
        .env("REPROBE_TOKEN", "from-env")
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut d = Daemon { child, endpoint: format!("127.0.0.1:{port}"), dir };
    while std::net::TcpStream::connect(&d.endpoint).is_err() {
        std::thread::sleep(Duration::from_millis(20));
    }
    let run = |token: &str| {
        Command::new(BIN).args(["--endpoint", &d.endpoint, "status"]).env("REPROBE_TOKEN", token).output().unwrap()
    };
    assert_eq!(run("from-file").status.code(), Some(1));
    assert_eq!(run("from-env").status.code(), Some(0));
    let _ = d.child.kill();
}

#[test]
fn control_commands_and_exit_codes() {
    let d = start_daemon(json!({}));
    let dir = d.dir.path();
    let col = spec_file(dir, "c1.json", json!({"instanceId": "c1", "pluginId": "synthetic-sampler", "indicators": ["x"], "samplingPeriod": "100ms"}));
    let out = ctl(&d.endpoint, &["col", "create", "-f", col.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(stdout(&out).contains("created c1 (Running)"));

    let out = ctl(&d.endpoint, &["col", "set", "c1", "samplingPeriod=500ms"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let effective: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(effective["samplingPeriod"], "500ms");

    let out = ctl(&d.endpoint, &["col", "set", "c1", "bogusParam=1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("invalid_config"), "{}", stderr(&out));

    let out = ctl(&d.endpoint, &["col", "ls"]);
    assert!(stdout(&out).contains("c1") && stdout(&out).contains("500ms"), "{}", stdout(&out));

    // Upload the demo collector and make it busy.
    let bundle = dir.join("demo.tar");
    let manifest = spec_file(dir, "manifest.json", json!({
        "id": "demo-collector", "kind": "collector", "version": "0.1.0",
        "samplers": ["default"], "analyzers": ["none"],
        "indicators": ["demo.counter", "demo.sine"], "entry": "bin/demo-collector",
    }));
    let out = ctl(
        &d.endpoint,
        &["plugin", "pack", manifest.to_str().unwrap(), env!("CARGO_BIN_EXE_reprobe-demo-collector"), "-o", bundle.to_str().unwrap()],
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let out = ctl(&d.endpoint, &["plugin", "upload", bundle.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let busy = spec_file(dir, "busy.json", json!({"instanceId": "busy", "pluginId": "demo-collector", "indicators": ["demo.counter"], "samplingPeriod": "200ms"}));
    assert_eq!(ctl(&d.endpoint, &["col", "create", "-f", busy.to_str().unwrap()]).status.code(), Some(0));
    let out = ctl(&d.endpoint, &["plugin", "rm", "demo-collector"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("plugin_in_use"), "{}", stderr(&out));
    let out = ctl(&d.endpoint, &["plugin", "ls"]);
    assert!(stdout(&out).contains("demo-collector") && stdout(&out).contains("external"));

    assert_eq!(ctl(&d.endpoint, &["col", "rm", "busy"]).status.code(), Some(0));
    assert_eq!(ctl(&d.endpoint, &["plugin", "rm", "demo-collector"]).status.code(), Some(0));
    assert_eq!(ctl(&d.endpoint, &["col", "rm", "busy"]).status.code(), Some(1));
    assert_eq!(ctl(&d.endpoint, &["col", "get", "busy"]).status.code(), Some(1));

    // Transport failure.
    let closed = format!("127.0.0.1:{}", free_port());
    let out = ctl(&closed, &["status"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

fn watch_periods(endpoint: &str, id: &str, duration: &str) -> (Output, Vec<u64>) {
    let out = ctl(endpoint, &["--json", "watch", id, "--duration", duration, "--interval", "100ms"]);
    let periods = stdout(&out)
        .lines()
        .map(|l| {
            let v: Value = serde_json::from_str(l).unwrap();
            reprobe_core::model::parse_duration_ms(v["period"].as_str().unwrap()).unwrap()
        })
        .collect();
    (out, periods)
}

#[test]
fn watch_follows_adaptation() {
    let d = start_daemon(json!({}));
    let dir = d.dir.path();
    let adaptive = spec_file(dir, "a.json", json!({
        "instanceId": "a", "pluginId": "synthetic-sampler", "indicators": ["v"], "samplingPeriod": "100ms",
        "activeAnalyzer": "adaptive-rate",
        "params": {"windowSize": 2, "maxPeriod": "800ms"},
        "targetSpec": {"signal": json!({"segments": [{"durationTicks": 1000, "waveform": "constant", "base": 5.0}], "seed": 1}).to_string()},
    }));
    let out = ctl(&d.endpoint, &["col", "create", "-f", adaptive.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let flat = spec_file(dir, "p.json", json!({"instanceId": "p", "pluginId": "synthetic-sampler", "indicators": ["v"], "samplingPeriod": "100ms"}));
    assert_eq!(ctl(&d.endpoint, &["col", "create", "-f", flat.to_str().unwrap()]).status.code(), Some(0));

    let (out, periods) = watch_periods(&d.endpoint, "a", "3s");
    assert_eq!(out.status.code(), Some(0));
    assert!(periods.windows(2).all(|w| w[0] <= w[1]), "{periods:?}");
    assert_eq!(*periods.last().unwrap(), 800, "{periods:?}");

    let (out, periods) = watch_periods(&d.endpoint, "p", "1s");
    assert_eq!(out.status.code(), Some(0));
    assert!(periods.len() >= 5 && periods.iter().all(|p| *p == 100), "{periods:?}");

    let human = ctl(&d.endpoint, &["watch", "a", "--duration", "100ms"]);
    assert!(stdout(&human).contains("PERIOD") && stdout(&human).contains("analyzer"), "{}", stdout(&human));
    assert_eq!(ctl(&d.endpoint, &["watch", "ghost", "--duration", "1s"]).status.code(), Some(1));
}

/// Records every request and answers 200 `{}`.
fn recorder() -> (String, Arc<Mutex<Vec<(String, String, String)>>>) {
    let log = Arc::new(Mutex::new(Vec::new()));
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    let sink = log.clone();
    std::thread::spawn(move || {
        use std::io::{BufRead, BufReader, Read};
        for stream in listener.incoming() {
            let Ok(stream) = stream else { continue };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut request_line = String::new();
            if reader.read_line(&mut request_line).is_err() {
                continue;
            }
            let mut length = 0usize;
            loop {
                let mut h = String::new();
                reader.read_line(&mut h).unwrap();
                if h.trim().is_empty() {
                    break;
                }
                if let Some(v) = h.to_ascii_lowercase().strip_prefix("content-length:") {
                    length = v.trim().parse().unwrap();
                }
            }
            let mut body = vec![0; length];
            reader.read_exact(&mut body).unwrap();
            let mut parts = request_line.split_whitespace();
            let (m, p) = (parts.next().unwrap_or("").to_string(), parts.next().unwrap_or("").to_string());
            sink.lock().unwrap().push((m, p, String::from_utf8_lossy(&body).into_owned()));
            let mut s = stream;
            let _ = s.write_all(b"HTTP/1.1 200 OK\r\ncontent-type: application/json\r\ncontent-length: 2\r\nconnection: close\r\n\r\n{}");
        }
    });
    (addr, log)
}

#[test]
fn each_mutation_is_exactly_one_api_call() {
    let (rec, log) = recorder();
    let dir = tempfile::tempdir().unwrap();
    let spec = json!({"instanceId": "c9", "pluginId": "synthetic-sampler", "indicators": ["x"], "samplingPeriod": "100ms"});
    let spec_path = spec_file(dir.path(), "c9.json", spec.clone());
    let commands: Vec<Vec<&str>> = vec![
        vec!["col", "create", "-f", spec_path.to_str().unwrap()],
        vec!["col", "set", "c9", "samplingPeriod=250ms", "target.host=h", "factor=3"],
        vec!["col", "rm", "c9"],
    ];
    for args in &commands {
        let before = log.lock().unwrap().len();
        let out = ctl(&rec, args);
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
        assert_eq!(log.lock().unwrap().len() - before, 1, "{args:?}");
    }
    let recorded = log.lock().unwrap().clone();
    assert_eq!(recorded[0].0, "POST");
    assert_eq!(recorded[1], ("PATCH".into(), "/api/v1/collectors/c9/config".into(),
        json!({"samplingPeriod": "250ms", "targetSpec": {"host": "h"}, "params": {"factor": 3}}).to_string()));

    // Replaying the recorded requests on a real agent gives the same state
    // as running the CLI against it.
    let direct = start_daemon(json!({}));
    let replayed = start_daemon(json!({}));
    for args in &commands[..2] {
        ctl(&direct.endpoint, args);
    }
    let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().unwrap();
    rt.block_on(async {
        let client = reqwest::Client::new();
        for (m, p, body) in &recorded[..2] {
            let r = client
                .request(m.parse().unwrap(), format!("http://{}{p}", replayed.endpoint))
                .header("content-type", "application/json")
                .body(body.clone())
                .send()
                .await
                .unwrap();
            assert!(r.status().is_success());
        }
    });
    let get = |ep: &str| -> Value {
        let mut v: Value = serde_json::from_str(&stdout(&ctl(ep, &["--json", "col", "get", "c9"]))).unwrap();
        v.as_object_mut().unwrap().retain(|k, _| k == "config" || k == "state" || k == "pluginId");
        v
    };
    assert_eq!(get(&direct.endpoint), get(&replayed.endpoint));
}
