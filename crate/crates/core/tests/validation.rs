use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use reprobe_core::builtin::{CaptureSinkFactory, CollectorFactory, PublisherFactory, SyntheticCollector};
use reprobe_core::model::{validate_instance_config, InstanceConfig, Period, PeriodBounds, Scalar};

fn scalar() -> impl Strategy<Value = Scalar> {
    prop_oneof![
        any::<bool>().prop_map(Scalar::Bool),
        (-10i64..5000).prop_map(Scalar::Int),
        (-1.0f64..3.0).prop_map(Scalar::Real),
        "[0-9a-z]{0,4}(ms|s)?".prop_map(Scalar::Str),
    ]
}

fn collector_config() -> impl Strategy<Value = InstanceConfig> {
    let keys = prop_oneof![
        Just("windowSize"), Just("lowThreshold"), Just("highThreshold"), Just("factor"),
        Just("minPeriod"), Just("maxPeriod"), Just("epsilon"), Just("bogus")
    ];
    (
        proptest::collection::btree_set("[a-z.]{0,6}", 0..3),
        proptest::option::of(0u64..5_000_000),
        proptest::option::of(prop_oneof![Just("direct".to_string()), Just("smoothed".to_string()), Just("nope".to_string())]),
        proptest::option::of(prop_oneof![Just("adaptive-rate".to_string()), Just("passthrough".to_string()), Just("x".to_string())]),
        proptest::collection::btree_map(keys.prop_map(String::from), scalar(), 0..4),
        proptest::collection::vec("[a-z.*]{0,5}", 0..2),
    )
        .prop_map(|(indicators, period, sampler, analyzer, params, topics)| InstanceConfig {
            plugin_id: "synthetic-sampler".into(),
            target_spec: BTreeMap::new(),
            indicators: indicators.into_iter().collect::<BTreeSet<_>>(),
            sampling_period: period.map(Period::from_millis),
            active_sampler: sampler,
            active_analyzer: analyzer,
            params,
            topics,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(3000))]

    #[test]
    fn collector_validation_is_idempotent(cfg in collector_config()) {
        let desc = SyntheticCollector.descriptor();
        let bounds = PeriodBounds::default();
        match validate_instance_config(&cfg, &desc, bounds) {
            Ok(once) => {
                let twice = validate_instance_config(&once, &desc, bounds).unwrap();
                prop_assert_eq!(&twice, &once);
                prop_assert!(once.sampling_period.is_some());
                prop_assert!(once.active_analyzer.is_some());
                let p = once.period();
                prop_assert!(p >= bounds.min && p <= bounds.max);
            }
            Err(errs) => {
                prop_assert!(!errs.is_empty());
                // Errors are a pure function of the input.
                prop_assert_eq!(validate_instance_config(&cfg, &desc, bounds).unwrap_err(), errs);
            }
        }
    }

    #[test]
    fn publisher_validation_is_idempotent(topics in proptest::collection::vec("[a-z.]{1,5}\\*?", 0..3)) {
        let desc = CaptureSinkFactory { registry: Default::default() }.descriptor();
        let mut cfg = InstanceConfig::new(desc.id.clone());
        cfg.topics = topics;
        if let Ok(once) = validate_instance_config(&cfg, &desc, PeriodBounds::default()) {
            prop_assert_eq!(validate_instance_config(&once, &desc, PeriodBounds::default()).unwrap(), once);
        } else {
            prop_assert!(cfg.topics.is_empty());
        }
    }
}

#[test]
fn every_violation_is_reported() {
    let desc = SyntheticCollector.descriptor();
    let mut cfg = InstanceConfig::new("synthetic-sampler");
    cfg.sampling_period = Some(Period::from_millis(1));
    cfg.active_sampler = Some("nope".into());
    cfg.params.insert("bogus".into(), Scalar::Int(1));
    cfg.params.insert("factor".into(), Scalar::Str("x".into()));
    let errs = validate_instance_config(&cfg, &desc, PeriodBounds::default()).unwrap_err();
    assert_eq!(errs.len(), 5, "{errs:?}");
}
