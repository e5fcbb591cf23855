//! Concurrent PATCHes racing the tick loop: every tick must see either the
//! old or the new config in full.

use std::sync::Arc;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reprobe_core::builtin::analyzers::PassthroughAnalyzer;
use reprobe_core::bus::DataManager;
use reprobe_core::clock::VirtualClock;
use reprobe_core::collector::{BehaviorSet, CollectorRuntime, Controller, Reading, Sampler, TickContext};
use reprobe_core::model::{
    ConfigPatch, InstanceConfig, ParamSpec, ParamType, Period, PeriodBounds, PluginDescriptor, PluginKind, Provenance,
    Scalar,
};

/// Reports the config it was handed as labels.
struct Echo(&'static str);

impl Sampler for Echo {
    fn sample(&mut self, ctx: &TickContext<'_>) -> Result<Vec<Reading>, String> {
        let mut r = Reading::new("echo", 0.0, "");
        r.labels.insert("sampler".into(), self.0.into());
        r.labels.insert("configSampler".into(), ctx.config.sampler().into());
        r.labels.insert("period".into(), ctx.config.period().as_millis().to_string());
        r.labels.insert("gen".into(), ctx.config.param_i64("gen").unwrap_or(-1).to_string());
        r.labels.insert("tag".into(), ctx.config.target().to_string());
        Ok(vec![r])
    }
}

fn descriptor() -> PluginDescriptor {
    PluginDescriptor {
        id: "echo".into(),
        kind: PluginKind::Collector,
        provenance: Provenance::Builtin,
        version: "1".into(),
        param_schema: vec![ParamSpec::optional("gen", ParamType::Int, Scalar::Int(0))],
        samplers: vec!["s0".into(), "s1".into()],
        analyzers: vec!["passthrough".into()],
        indicators: None,
        entry: None,
        digest: None,
    }
}

/// Generation k: period 20+k%10 ms, gen k, sampler s(k%2), target "t{k}".
fn patch(k: i64, valid: bool) -> ConfigPatch {
    let mut p = ConfigPatch::default();
    p.sampling_period = Some(Period::from_millis(20 + (k % 10) as u64));
    p.active_sampler = Some(format!("s{}", k % 2));
    p.target_spec.insert("target".into(), Some(format!("t{k}")));
    p.params.insert("gen".into(), Some(if valid { Scalar::Int(k) } else { Scalar::Str("bad".into()) }));
    p
}

#[tokio::test(start_paused = true)]
async fn ticks_see_whole_configs_only() {
    let bus = Arc::new(DataManager::new());
    let sub = bus.subscribe("probe", &["*"], 1 << 20).unwrap();
    let mut cfg = InstanceConfig::new("echo");
    cfg.indicators.insert("echo".into());
    cfg.sampling_period = Some(Period::from_millis(20));
    cfg.active_sampler = Some("s0".into());
    cfg.active_analyzer = Some("passthrough".into());
    cfg.target_spec.insert("target".into(), "t0".into());
    cfg.params.insert("gen".into(), Scalar::Int(0));
    let engine = BehaviorSet::new()
        .with_sampler("s0", Echo("s0"))
        .with_sampler("s1", Echo("s1"))
        .with_analyzer("passthrough", PassthroughAnalyzer);
    let handle = CollectorRuntime {
        instance_id: "echo-1".into(),
        controller: Controller::new(Arc::new(descriptor()), PeriodBounds::default(), None, cfg),
        engine: Box::new(engine),
        bus: bus.clone(),
        clock: Arc::new(VirtualClock::default()),
        on_failed: None,
    }
    .start()
    .await
    .unwrap();

    // 10 racers x 100 patches, a quarter of them invalid.
    let mut tasks = Vec::new();
    for racer in 0..10i64 {
        let h = handle.clone();
        tasks.push(tokio::spawn(async move {
            let mut rng = ChaCha8Rng::seed_from_u64(racer as u64);
            let mut accepted = Vec::new();
            for i in 0..100i64 {
                tokio::time::sleep(Duration::from_micros(rng.gen_range(0..30_000))).await;
                let k = 1 + racer * 100 + i;
                let valid = rng.gen_bool(0.75);
                let res = h.apply(patch(k, valid)).await;
                assert_eq!(res.is_ok(), valid, "{res:?}");
                if valid {
                    accepted.push(k);
                }
            }
            accepted
        }));
    }
    let mut accepted = vec![0i64];
    for t in tasks {
        accepted.extend(t.await.unwrap());
    }
    handle.stop().await;

    let seen = sub.drain(usize::MAX).unwrap();
    assert!(seen.len() > 50, "only {} ticks", seen.len());
    for o in &seen {
        let l = &o.labels;
        let k: i64 = l["gen"].parse().unwrap();
        assert!(accepted.contains(&k), "gen {k} was never accepted");
        assert_eq!(l["period"], (20 + k % 10).to_string());
        assert_eq!(l["sampler"], format!("s{}", k % 2));
        assert_eq!(l["configSampler"], l["sampler"]);
        assert_eq!(l["tag"], format!("t{k}"));
        assert_eq!(o.target, format!("t{k}"));
    }
    // The audit log carries one entry per patch in application order.
    let audit = handle.shared().audit();
    assert_eq!(audit.len(), 1000);
}
