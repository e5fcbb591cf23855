//! Deterministic synthetic signals standing in for a monitored resource.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Waveform {
    Constant,
    Sine,
    RandomWalk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct Segment {
    pub duration_ticks: u64,
    pub waveform: Waveform,
    #[serde(default)]
    pub base: f64,
    #[serde(default)]
    pub amplitude: f64,
    #[serde(default)]
    pub noise_sigma: f64,
    /// Sine period in ticks; defaults to the segment length.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub period_ticks: Option<u64>,
}

impl Segment {
    pub fn constant(duration_ticks: u64, base: f64) -> Self {
        Segment {
            duration_ticks,
            waveform: Waveform::Constant,
            base,
            amplitude: 0.0,
            noise_sigma: 0.0,
            period_ticks: None,
        }
    }

    pub fn random_walk(duration_ticks: u64, base: f64, noise_sigma: f64) -> Self {
        Segment {
            duration_ticks,
            waveform: Waveform::RandomWalk,
            base,
            amplitude: 0.0,
            noise_sigma,
            period_ticks: None,
        }
    }
}

/// Piecewise signal; after the last segment the sequence starts over.
///
/// Constant and sine segments add independent gaussian noise to their
/// shape. Random-walk segments start at `base` and accumulate one gaussian
/// step per tick.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct SyntheticSignalSpec {
    pub segments: Vec<Segment>,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SyntheticSignalSpec {
    fn default() -> Self {
        SyntheticSignalSpec {
            segments: vec![Segment {
                duration_ticks: 60,
                waveform: Waveform::Sine,
                base: 50.0,
                amplitude: 10.0,
                noise_sigma: 1.0,
                period_ticks: None,
            }],
            seed: 0,
        }
    }
}

impl SyntheticSignalSpec {
    pub fn check(&self) -> Result<(), String> {
        if self.segments.is_empty() {
            return Err("signal needs at least one segment".into());
        }
        for (i, s) in self.segments.iter().enumerate() {
            if s.duration_ticks == 0 {
                return Err(format!("segment {i} has zero length"));
            }
            if !(s.noise_sigma >= 0.0 && s.noise_sigma.is_finite()) {
                return Err(format!("segment {i} noiseSigma must be finite and >= 0"));
            }
            if !s.base.is_finite() || !s.amplitude.is_finite() {
                return Err(format!("segment {i} has non-finite shape parameters"));
            }
            if s.period_ticks == Some(0) {
                return Err(format!("segment {i} periodTicks must be positive"));
            }
        }
        Ok(())
    }

    fn cycle_len(&self) -> u64 {
        self.segments.iter().map(|s| s.duration_ticks).sum()
    }

    /// Segment index and offset within that segment for a tick.
    pub fn locate(&self, tick: u64) -> (usize, u64) {
        let mut t = tick % self.cycle_len().max(1);
        for (i, s) in self.segments.iter().enumerate() {
            if t < s.duration_ticks {
                return (i, t);
            }
            t -= s.duration_ticks;
        }
        (self.segments.len() - 1, 0)
    }

    /// Gaussian draw identified by (seed, stream, tick).
    fn noise(&self, stream: u64, tick: u64, sigma: f64) -> f64 {
        if sigma == 0.0 {
            return 0.0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.seed, stream, tick));
        Normal::new(0.0, sigma).map(|n| n.sample(&mut rng)).unwrap_or(0.0)
    }

    /// Value of the stream at `tick`, computed from scratch.
    pub fn value_at(&self, stream: u64, tick: u64) -> f64 {
        let (idx, offset) = self.locate(tick);
        let seg = &self.segments[idx];
        let start = tick - offset;
        match seg.waveform {
            Waveform::Constant => seg.base + self.noise(stream, tick, seg.noise_sigma),
            Waveform::Sine => {
                let period = seg.period_ticks.unwrap_or(seg.duration_ticks) as f64;
                let phase = std::f64::consts::TAU * offset as f64 / period;
                seg.base + seg.amplitude * phase.sin() + self.noise(stream, tick, seg.noise_sigma)
            }
            Waveform::RandomWalk => {
                let mut v = seg.base;
                for t in (start + 1)..=tick {
                    v += self.noise(stream, t, seg.noise_sigma);
                }
                v
            }
        }
    }
}

/// Incremental evaluator; consecutive ticks of a random walk cost O(1).
#[derive(Debug, Clone)]
pub struct SignalCursor {
    spec: SyntheticSignalSpec,
    stream: u64,
    last: Option<(u64, f64)>,
}

impl SignalCursor {
    pub fn new(spec: SyntheticSignalSpec, stream: u64) -> Self {
        SignalCursor { spec, stream, last: None }
    }

    pub fn value_at(&mut self, tick: u64) -> f64 {
        let (idx, offset) = self.spec.locate(tick);
        let seg = &self.spec.segments[idx];
        let v = match (seg.waveform, self.last) {
            (Waveform::RandomWalk, Some((prev_tick, prev))) if offset > 0 && prev_tick + 1 == tick => {
                prev + self.spec.noise(self.stream, tick, seg.noise_sigma)
            }
            _ => self.spec.value_at(self.stream, tick),
        };
        self.last = Some((tick, v));
        v
    }
}

/// FNV-1a, used to derive a stable per-indicator noise stream.
pub fn stream_id(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

fn mix(seed: u64, stream: u64, tick: u64) -> u64 {
    let mut z = seed ^ stream.rotate_left(17) ^ tick.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
