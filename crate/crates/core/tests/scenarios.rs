use std::sync::Arc;

use reprobe_core::agent::AgentConfig;
use reprobe_core::clock::VirtualClock;
use reprobe_core::harness::{
    run_scenario_adaptive, run_scenario_datacenter, AdaptiveOptions, DatacenterOptions, InProcessHost, Verdict,
};

use reprobe_core::harness::ScenarioHost;

fn host(dir: &tempfile::TempDir) -> InProcessHost {
    let cfg = AgentConfig { data_dir: Some(dir.path().join("data")), ..AgentConfig::default() };
    InProcessHost::new(cfg, Arc::new(VirtualClock::default()), dir.path())
}

#[tokio::test(start_paused = true)]
async fn datacenter_is_api_driven() {
    let dir = tempfile::tempdir().unwrap();
    let mut h = host(&dir);
    let report = run_scenario_datacenter(&mut h, &DatacenterOptions::default()).await.unwrap();
    assert_eq!(report.verdict, Verdict::ApiDriven, "{:#?}", report.checks);
    assert!(report.max_gap_ms.values().all(|g| *g <= 300.0));
}

#[tokio::test(start_paused = true)]
async fn datacenter_restart_is_manual() {
    let dir = tempfile::tempdir().unwrap();
    let mut h = host(&dir);
    let opts = DatacenterOptions { restart_mid_scenario: true, ..DatacenterOptions::default() };
    let report = run_scenario_datacenter(&mut h, &opts).await.unwrap();
    assert_eq!(report.verdict, Verdict::Manual);
    assert_eq!(report.passed("uptime_uninterrupted"), Some(false));
}

#[tokio::test(start_paused = true)]
async fn adaptive_is_self_adaptive() {
    let dir = tempfile::tempdir().unwrap();
    let mut h = host(&dir);
    let report = run_scenario_adaptive(&mut h, &AdaptiveOptions::default()).await.unwrap();
    assert_eq!(report.verdict, Verdict::SelfAdaptive, "{:#?}\n{:?}", report.checks, report.adaptation_trajectory);
}

#[tokio::test(start_paused = true)]
async fn passthrough_control_is_manual() {
    let dir = tempfile::tempdir().unwrap();
    let mut h = host(&dir);
    let report = run_scenario_adaptive(&mut h, &AdaptiveOptions::negative_control()).await.unwrap();
    assert_eq!(report.verdict, Verdict::Manual);
    assert!(report.adaptation_trajectory.is_empty());
}

#[tokio::test(start_paused = true)]
async fn adaptive_runs_are_deterministic() {
    let mut trajectories = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        let mut h = host(&dir);
        let report = run_scenario_adaptive(&mut h, &AdaptiveOptions::default()).await.unwrap();
        trajectories.push(report.adaptation_trajectory);
    }
    assert!(!trajectories[0].is_empty());
    assert_eq!(trajectories[0], trajectories[1]);
}

/// Every period the analyzer sets is visible through GET before the next
/// tick.
#[tokio::test(start_paused = true)]
async fn adaptation_is_visible_through_the_api() {
    use axum::http::Method;
    use reprobe_core::harness::RequestBody;
    use serde_json::json;

    let dir = tempfile::tempdir().unwrap();
    let h = host(&dir);
    let client = h.client();
    let spec = json!({
        "instanceId": "a", "pluginId": "synthetic-sampler", "indicators": ["signal"],
        "samplingPeriod": "100ms", "activeAnalyzer": "adaptive-rate",
        "targetSpec": {"signal": serde_json::to_string(&AdaptiveOptions::default().signal()).unwrap()},
    });
    let r = client.request(Method::POST, "/api/v1/collectors", Some(RequestBody::Json(spec))).await.unwrap();
    assert_eq!(r.status, 201);
    let mut changes = 0;
    for _ in 0..3000 {
        tokio::time::sleep(std::time::Duration::from_millis(10)).await;
        let d = client.request(Method::GET, "/api/v1/collectors/a", None).await.unwrap().body;
        if let Some(last) = d["audit"].as_array().and_then(|a| a.last()) {
            let shown = reprobe_core::model::parse_duration_ms(d["config"]["samplingPeriod"].as_str().unwrap()).unwrap();
            assert_eq!(last["periodMs"].as_u64().unwrap(), shown, "{d}");
            changes = d["audit"].as_array().unwrap().len();
        }
    }
    assert!(changes >= 4, "{changes}");
}
