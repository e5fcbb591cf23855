//! Built-in data analyzers: passthrough, windowed aggregation and the
//! stability-driven adaptive sampling rate.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::collector::{Analysis, Analyzer, TickContext};
use crate::model::{AdaptationCommand, CommandKind, InstanceConfig, Observation, Period};

pub const ADAPTIVE_ID: &str = "adaptive-rate";
pub const AGGREGATOR_ID: &str = "aggregator";
pub const PASSTHROUGH_ID: &str = "passthrough";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AnalysisError {
    #[error("stability window needs at least 2 values, got {0}")]
    WindowTooShort(usize),
    #[error("window contains a non-finite value")]
    NonFiniteValue,
}

/// Coefficient of variation with a floor on the mean magnitude:
/// population standard deviation divided by `max(|mean|, epsilon)`.
pub fn stability_score(window: &[f64], epsilon: f64) -> Result<f64, AnalysisError> {
    if window.len() < 2 {
        return Err(AnalysisError::WindowTooShort(window.len()));
    }
    // Welford's single-pass update.
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for (i, &x) in window.iter().enumerate() {
        if !x.is_finite() {
            return Err(AnalysisError::NonFiniteValue);
        }
        let delta = x - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (x - mean);
    }
    let sigma = (m2.max(0.0) / window.len() as f64).sqrt();
    if sigma == 0.0 {
        return Ok(0.0);
    }
    Ok(sigma / mean.abs().max(epsilon))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptiveRateParams {
    pub window_size: usize,
    pub low_threshold: f64,
    pub high_threshold: f64,
    pub factor: f64,
    pub min_period: Period,
    pub max_period: Period,
    pub epsilon: f64,
}

impl Default for AdaptiveRateParams {
    fn default() -> Self {
        AdaptiveRateParams {
            window_size: 8,
            low_threshold: 0.05,
            high_threshold: 0.25,
            factor: 2.0,
            min_period: Period::from_millis(50),
            max_period: Period::from_millis(1600),
            epsilon: 1e-9,
        }
    }
}

impl AdaptiveRateParams {
    /// Reads validated params, using defaults for anything absent.
    pub fn from_config(cfg: &InstanceConfig) -> Self {
        let d = AdaptiveRateParams::default();
        let ms = |key: &str, fallback: Period| {
            cfg.param_i64(key).map(|v| Period::from_millis(v.max(0) as u64)).unwrap_or(fallback)
        };
        AdaptiveRateParams {
            window_size: cfg.param_i64("windowSize").map_or(d.window_size, |v| v.max(0) as usize),
            low_threshold: cfg.param_f64("lowThreshold").unwrap_or(d.low_threshold),
            high_threshold: cfg.param_f64("highThreshold").unwrap_or(d.high_threshold),
            factor: cfg.param_f64("factor").unwrap_or(d.factor),
            min_period: ms("minPeriod", d.min_period),
            max_period: ms("maxPeriod", d.max_period),
            epsilon: cfg.param_f64("epsilon").unwrap_or(d.epsilon),
        }
    }

    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.window_size < 2 {
            out.push("windowSize must be at least 2".to_string());
        }
        if !(self.low_threshold > 0.0) {
            out.push("lowThreshold must be positive".to_string());
        }
        if !(self.high_threshold > self.low_threshold) {
            out.push("highThreshold must exceed lowThreshold".to_string());
        }
        if !(self.factor > 1.0) || !self.factor.is_finite() {
            out.push("factor must be greater than 1".to_string());
        }
        if self.min_period >= self.max_period {
            out.push("minPeriod must be below maxPeriod".to_string());
        }
        if !(self.epsilon > 0.0) {
            out.push("epsilon must be positive".to_string());
        }
        out
    }

    fn scale(&self, current: Period, up: bool) -> Period {
        let ms = current.as_millis() as f64;
        let next = if up { ms * self.factor } else { ms / self.factor };
        Period::from_millis(next.round().max(0.0) as u64).clamp(self.min_period, self.max_period)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveDecision {
    /// Highest score across indicators and the indicator that produced it.
    pub score: f64,
    pub indicator: String,
    pub command: Option<CommandKind>,
    pub reason: String,
}

/// Decides on a period change from one full window per indicator. The
/// most unstable indicator decides.
pub fn adaptive_analyze(
    windows: &BTreeMap<String, Vec<f64>>,
    params: &AdaptiveRateParams,
    current: Period,
) -> Result<Option<AdaptiveDecision>, AnalysisError> {
    let mut worst: Option<(f64, &str)> = None;
    for (indicator, values) in windows {
        let score = stability_score(values, params.epsilon)?;
        if worst.map_or(true, |(s, _)| score > s) {
            worst = Some((score, indicator));
        }
    }
    let Some((score, indicator)) = worst else { return Ok(None) };
    let (command, reason) = if score < params.low_threshold {
        let next = params.scale(current, true);
        (
            Some(CommandKind::SetSamplingPeriod { period: next }),
            format!("stable: score {score:.6} on {indicator} < low {}", params.low_threshold),
        )
    } else if score > params.high_threshold {
        let next = params.scale(current, false);
        (
            Some(CommandKind::SetSamplingPeriod { period: next }),
            format!("unstable: score {score:.6} on {indicator} > high {}", params.high_threshold),
        )
    } else {
        (None, format!("steady: score {score:.6} on {indicator} within dead band"))
    };
    Ok(Some(AdaptiveDecision { score, indicator: indicator.to_string(), command, reason }))
}

/// Tumbling-window adaptive analyzer. Data passes through unmodified; when
/// every configured indicator has a full window a decision is made and the
/// windows restart.
#[derive(Debug, Default)]
pub struct AdaptiveRateAnalyzer {
    windows: BTreeMap<String, Vec<f64>>,
    last_decision: Option<AdaptiveDecision>,
}

impl AdaptiveRateAnalyzer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn last_decision(&self) -> Option<&AdaptiveDecision> {
        self.last_decision.as_ref()
    }
}

impl Analyzer for AdaptiveRateAnalyzer {
    fn analyze(&mut self, batch: Vec<Observation>, ctx: &TickContext<'_>) -> Result<Analysis, String> {
        let params = AdaptiveRateParams::from_config(ctx.config);
        for obs in &batch {
            if ctx.config.indicators.contains(&obs.indicator) {
                self.windows.entry(obs.indicator.clone()).or_default().push(obs.value);
            }
        }
        let full = !ctx.config.indicators.is_empty()
            && ctx
                .config
                .indicators
                .iter()
                .all(|i| self.windows.get(i).map_or(false, |w| w.len() >= params.window_size));
        let mut commands = Vec::new();
        if full {
            let windows: BTreeMap<String, Vec<f64>> = std::mem::take(&mut self.windows)
                .into_iter()
                .filter(|(k, _)| ctx.config.indicators.contains(k))
                .map(|(k, v)| {
                    let tail = v[v.len() - params.window_size..].to_vec();
                    (k, tail)
                })
                .collect();
            let decision = adaptive_analyze(&windows, &params, ctx.config.period()).map_err(|e| e.to_string())?;
            if let Some(d) = decision {
                if let Some(kind) = d.command.clone() {
                    commands.push(AdaptationCommand::new(kind, ADAPTIVE_ID, d.reason.clone()));
                }
                self.last_decision = Some(d);
            }
        }
        Ok(Analysis { observations: batch, commands })
    }

    fn reset(&mut self) {
        self.windows.clear();
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggregate {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

/// One aggregate per complete window of `n` values; a trailing partial
/// window produces nothing.
pub fn aggregate_values(values: &[f64], n: usize) -> Vec<Aggregate> {
    if n == 0 {
        return Vec::new();
    }
    values.chunks_exact(n).map(summarize).collect()
}

fn summarize(window: &[f64]) -> Aggregate {
    let mut mean = 0.0;
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for (i, &v) in window.iter().enumerate() {
        mean += (v - mean) / (i + 1) as f64;
        min = min.min(v);
        max = max.max(v);
    }
    Aggregate { mean, min, max, count: window.len() }
}

/// Emits one record per `windowSize` inputs per indicator, carrying the
/// window mean as value and min/max/count as labels.
#[derive(Debug, Default)]
pub struct AggregatorAnalyzer {
    windows: BTreeMap<String, Vec<Observation>>,
}

impl AggregatorAnalyzer {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Analyzer for AggregatorAnalyzer {
    fn analyze(&mut self, batch: Vec<Observation>, ctx: &TickContext<'_>) -> Result<Analysis, String> {
        let n = ctx.config.param_i64("windowSize").unwrap_or(5).max(1) as usize;
        let mut out = Vec::new();
        for obs in batch {
            let window = self.windows.entry(obs.indicator.clone()).or_default();
            window.push(obs);
            if window.len() >= n {
                let values: Vec<f64> = window.iter().map(|o| o.value).collect();
                let agg = summarize(&values);
                let mut record = window.pop().expect("non-empty window");
                window.clear();
                record.value = agg.mean;
                record.labels.insert("agg".into(), "mean".into());
                record.labels.insert("agg.min".into(), agg.min.to_string());
                record.labels.insert("agg.max".into(), agg.max.to_string());
                record.labels.insert("agg.count".into(), agg.count.to_string());
                out.push(record);
            }
        }
        Ok(Analysis { observations: out, commands: Vec::new() })
    }

    fn reset(&mut self) {
        self.windows.clear();
    }
}

#[derive(Debug, Default, Clone, Copy)]
pub struct PassthroughAnalyzer;

impl Analyzer for PassthroughAnalyzer {
    fn analyze(&mut self, batch: Vec<Observation>, _: &TickContext<'_>) -> Result<Analysis, String> {
        Ok(Analysis { observations: batch, commands: Vec::new() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Scalar;

    fn naive_score(w: &[f64], eps: f64) -> f64 {
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        let var = w.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        if var == 0.0 {
            0.0
        } else {
            var.sqrt() / mean.abs().max(eps)
        }
    }

    #[test]
    fn score_examples() {
        assert_eq!(stability_score(&[5.0, 5.0, 5.0, 5.0], 1e-9).unwrap(), 0.0);
        let s = stability_score(&[10.0, 20.0, 10.0, 20.0], 1e-9).unwrap();
        assert!((s - 1.0 / 3.0).abs() < 1e-9, "{s}");
        assert_eq!(stability_score(&[0.0; 4], 1e-9).unwrap(), 0.0);
        assert_eq!(stability_score(&[1.0], 1e-9).unwrap_err(), AnalysisError::WindowTooShort(1));
        assert_eq!(stability_score(&[1.0, f64::NAN], 1e-9).unwrap_err(), AnalysisError::NonFiniteValue);
    }

    #[test]
    fn score_uses_epsilon_floor_for_zero_mean() {
        let s = stability_score(&[-1.0, 1.0], 1e-3).unwrap();
        assert!((s - 1000.0).abs() < 1e-6);
    }

    #[test]
    fn score_matches_two_pass() {
        let w = [3.5, 9.25, -2.0, 7.0, 7.0, 100.0, 0.125, 55.5];
        assert!((stability_score(&w, 1e-9).unwrap() - naive_score(&w, 1e-9)).abs() < 1e-12);
    }

    fn windows(vals: &[f64]) -> BTreeMap<String, Vec<f64>> {
        BTreeMap::from([("a".to_string(), vals.to_vec())])
    }

    fn period_of(d: &AdaptiveDecision) -> Option<u64> {
        match d.command {
            Some(CommandKind::SetSamplingPeriod { period }) => Some(period.as_millis()),
            _ => None,
        }
    }

    #[test]
    fn constant_signal_doubles_period() {
        let p = AdaptiveRateParams::default();
        let d = adaptive_analyze(&windows(&[7.0; 8]), &p, Period::from_millis(100)).unwrap().unwrap();
        assert_eq!(period_of(&d), Some(200));
    }

    #[test]
    fn unstable_signal_halves_period() {
        let p = AdaptiveRateParams::default();
        let d = adaptive_analyze(&windows(&[10.0, 20.0, 10.0, 20.0]), &p, Period::from_millis(200))
            .unwrap()
            .unwrap();
        assert_eq!(period_of(&d), Some(100));
    }

    #[test]
    fn dead_band_issues_nothing() {
        let p = AdaptiveRateParams::default();
        // [10,11,...] scores ~0.0476, below the low threshold.
        let low = [10.0, 11.0, 10.0, 11.0, 10.0, 11.0, 10.0, 11.0];
        assert!((naive_score(&low, 1e-9) - 0.5 / 10.5).abs() < 1e-12);
        // mean 11, sigma 1.
        let band = [10.0, 12.0, 10.0, 12.0, 10.0, 12.0, 10.0, 12.0];
        let d = adaptive_analyze(&windows(&band), &p, Period::from_millis(200)).unwrap().unwrap();
        assert!((d.score - 1.0 / 11.0).abs() < 1e-9);
        assert_eq!(d.command, None);
    }

    #[test]
    fn most_unstable_indicator_decides() {
        let p = AdaptiveRateParams::default();
        let mut w = windows(&[5.0; 8]);
        w.insert("b".into(), vec![10.0, 20.0, 10.0, 20.0, 10.0, 20.0, 10.0, 20.0]);
        let d = adaptive_analyze(&w, &p, Period::from_millis(400)).unwrap().unwrap();
        assert_eq!(d.indicator, "b");
        assert_eq!(period_of(&d), Some(200));
    }

    #[test]
    fn param_constraints() {
        let mut cfg = InstanceConfig::new("x");
        cfg.params.insert("windowSize".into(), Scalar::Int(1));
        cfg.params.insert("factor".into(), Scalar::Real(1.0));
        cfg.params.insert("minPeriod".into(), Scalar::Int(100));
        cfg.params.insert("maxPeriod".into(), Scalar::Int(100));
        assert_eq!(AdaptiveRateParams::from_config(&cfg).problems().len(), 3);
        assert!(AdaptiveRateParams::default().problems().is_empty());
    }

    fn obs(ind: &str, v: f64) -> Observation {
        Observation {
            indicator: ind.into(),
            target: "t".into(),
            timestamp: 1,
            value: v,
            unit: String::new(),
            labels: BTreeMap::new(),
            topic: "t".into(),
            source_instance: "c".into(),
        }
    }

    #[test]
    fn aggregator_window_five() {
        let mut cfg = InstanceConfig::new("x");
        cfg.indicators.insert("a".into());
        cfg.params.insert("windowSize".into(), Scalar::Int(5));
        let mut agg = AggregatorAnalyzer::new();
        for tick in 0..5u64 {
            let ctx = TickContext { instance_id: "c", tick, now_ns: 1, config: &cfg };
            let out = agg.analyze(vec![obs("a", (tick + 1) as f64)], &ctx).unwrap();
            if tick < 4 {
                assert!(out.observations.is_empty());
            } else {
                let rec = &out.observations[0];
                assert_eq!(rec.value, 3.0);
                assert_eq!(rec.labels["agg.min"], "1");
                assert_eq!(rec.labels["agg.max"], "5");
                assert_eq!(rec.labels["agg.count"], "5");
            }
        }
    }

    #[test]
    fn aggregator_window_one_is_identity_on_values() {
        let mut cfg = InstanceConfig::new("x");
        cfg.params.insert("windowSize".into(), Scalar::Int(1));
        let mut agg = AggregatorAnalyzer::new();
        let ctx = TickContext { instance_id: "c", tick: 0, now_ns: 1, config: &cfg };
        let out = agg.analyze(vec![obs("a", 4.5), obs("b", -1.0)], &ctx).unwrap();
        let vals: Vec<f64> = out.observations.iter().map(|o| o.value).collect();
        assert_eq!(vals, vec![4.5, -1.0]);
        assert_eq!(out.observations[0].labels["agg.count"], "1");
    }

    #[test]
    fn aggregate_values_drops_partial_window() {
        let a = aggregate_values(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0], 3);
        assert_eq!(a.len(), 2);
        assert_eq!(a[1], Aggregate { mean: 5.0, min: 4.0, max: 6.0, count: 3 });
    }

    #[test]
    fn adaptive_analyzer_decides_once_per_window() {
        let mut cfg = InstanceConfig::new("x");
        cfg.indicators.insert("a".into());
        cfg.sampling_period = Some(Period::from_millis(100));
        cfg.params.insert("windowSize".into(), Scalar::Int(4));
        let mut an = AdaptiveRateAnalyzer::new();
        let mut issued = Vec::new();
        for tick in 0..8u64 {
            let ctx = TickContext { instance_id: "c", tick, now_ns: 1, config: &cfg };
            let out = an.analyze(vec![obs("a", 3.0)], &ctx).unwrap();
            assert_eq!(out.observations.len(), 1);
            if !out.commands.is_empty() {
                issued.push(tick);
            }
        }
        assert_eq!(issued, vec![3, 7]);
    }
}
