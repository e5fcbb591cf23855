//! Built-in metric samplers: synthetic signals and host readings from procfs.

use std::collections::BTreeMap;
use std::fs;

use thiserror::Error;

use super::signal::{stream_id, SignalCursor, SyntheticSignalSpec};
use crate::collector::{Reading, Sampler, TickContext};

/// Indicators the system sampler knows how to read.
pub const SYSTEM_INDICATORS: &[&str] = &[
    "cpu.idle_pct",
    "cpu.iowait_pct",
    "cpu.user_pct",
    "cpu.system_pct",
    "cpu.total_pct",
    "mem.used_bytes",
    "net.io_rx_packets",
    "net.io_dropped_packets",
    "net.io_bytes",
];

/// Parses the `signal` entry of a target spec, falling back to the default signal.
pub fn signal_from_target(target: &BTreeMap<String, String>) -> Result<SyntheticSignalSpec, String> {
    let spec = match target.get("signal") {
        Some(raw) => serde_json::from_str::<SyntheticSignalSpec>(raw)
            .map_err(|e| format!("invalid signal spec: {e}"))?,
        None => SyntheticSignalSpec::default(),
    };
    spec.check()?;
    Ok(spec)
}

/// Values of every indicator at `tick`. Each indicator follows the same
/// shape with its own noise stream.
pub fn synthetic_sample<'a>(
    spec: &SyntheticSignalSpec,
    indicators: impl IntoIterator<Item = &'a String>,
    tick: u64,
) -> Vec<(String, f64)> {
    indicators.into_iter().map(|i| (i.clone(), spec.value_at(stream_id(i), tick))).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticMode {
    /// The signal value at the tick.
    Direct,
    /// Mean of the values at this tick and the previous one.
    Smoothed,
}

#[derive(Debug)]
pub struct SyntheticSampler {
    mode: SyntheticMode,
    raw_signal: Option<String>,
    spec: Option<SyntheticSignalSpec>,
    cursors: BTreeMap<String, SignalCursor>,
}

impl SyntheticSampler {
    pub fn new(mode: SyntheticMode) -> Self {
        SyntheticSampler { mode, raw_signal: None, spec: None, cursors: BTreeMap::new() }
    }

    fn refresh(&mut self, target: &BTreeMap<String, String>) -> Result<(), String> {
        let raw = target.get("signal");
        if self.spec.is_none() || raw != self.raw_signal.as_ref() {
            self.spec = Some(signal_from_target(target)?);
            self.raw_signal = raw.cloned();
            self.cursors.clear();
        }
        Ok(())
    }
}

impl Sampler for SyntheticSampler {
    fn sample(&mut self, ctx: &TickContext<'_>) -> Result<Vec<Reading>, String> {
        self.refresh(&ctx.config.target_spec)?;
        let spec = self.spec.as_ref().expect("refreshed");
        let unit = ctx.config.target_spec.get("unit").cloned().unwrap_or_default();
        let mut out = Vec::with_capacity(ctx.config.indicators.len());
        for ind in &ctx.config.indicators {
            let cursor = self
                .cursors
                .entry(ind.clone())
                .or_insert_with(|| SignalCursor::new(spec.clone(), stream_id(ind)));
            let value = match self.mode {
                SyntheticMode::Direct => cursor.value_at(ctx.tick),
                SyntheticMode::Smoothed if ctx.tick == 0 => cursor.value_at(0),
                SyntheticMode::Smoothed => {
                    let prev = spec.value_at(stream_id(ind), ctx.tick - 1);
                    (prev + cursor.value_at(ctx.tick)) / 2.0
                }
            };
            out.push(Reading::new(ind.clone(), value, unit.clone()));
        }
        Ok(out)
    }

    fn reset(&mut self) {
        self.cursors.clear();
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SystemSampleError {
    #[error("unsupported indicator {0:?}")]
    UnsupportedIndicator(String),
    #[error("reading {path}: {message}")]
    Io { path: String, message: String },
    #[error("unexpected format in {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct CpuTimes {
    user: u64,
    nice: u64,
    system: u64,
    idle: u64,
    iowait: u64,
    irq: u64,
    softirq: u64,
    steal: u64,
}

impl CpuTimes {
    fn total(&self) -> u64 {
        self.user + self.nice + self.system + self.idle + self.iowait + self.irq + self.softirq + self.steal
    }

    fn delta(&self, earlier: &CpuTimes) -> CpuTimes {
        CpuTimes {
            user: self.user.saturating_sub(earlier.user),
            nice: self.nice.saturating_sub(earlier.nice),
            system: self.system.saturating_sub(earlier.system),
            idle: self.idle.saturating_sub(earlier.idle),
            iowait: self.iowait.saturating_sub(earlier.iowait),
            irq: self.irq.saturating_sub(earlier.irq),
            softirq: self.softirq.saturating_sub(earlier.softirq),
            steal: self.steal.saturating_sub(earlier.steal),
        }
    }
}

fn read(path: &str) -> Result<String, SystemSampleError> {
    fs::read_to_string(path).map_err(|e| SystemSampleError::Io { path: path.to_string(), message: e.to_string() })
}

fn parse_cpu(stat: &str) -> Result<CpuTimes, SystemSampleError> {
    let line = stat
        .lines()
        .find(|l| l.starts_with("cpu "))
        .ok_or_else(|| SystemSampleError::Format("/proc/stat".into()))?;
    let f: Vec<u64> = line.split_whitespace().skip(1).filter_map(|v| v.parse().ok()).collect();
    if f.len() < 4 {
        return Err(SystemSampleError::Format("/proc/stat".into()));
    }
    let at = |i: usize| f.get(i).copied().unwrap_or(0);
    Ok(CpuTimes {
        user: at(0),
        nice: at(1),
        system: at(2),
        idle: at(3),
        iowait: at(4),
        irq: at(5),
        softirq: at(6),
        steal: at(7),
    })
}

fn parse_mem_used(meminfo: &str) -> Result<f64, SystemSampleError> {
    let field = |name: &str| {
        meminfo
            .lines()
            .find(|l| l.starts_with(name))
            .and_then(|l| l.split_whitespace().nth(1))
            .and_then(|v| v.parse::<u64>().ok())
    };
    let total = field("MemTotal:").ok_or_else(|| SystemSampleError::Format("/proc/meminfo".into()))?;
    let available = field("MemAvailable:")
        .or_else(|| field("MemFree:"))
        .ok_or_else(|| SystemSampleError::Format("/proc/meminfo".into()))?;
    Ok(total.saturating_sub(available) as f64 * 1024.0)
}

#[derive(Debug, Default, Clone, Copy, PartialEq)]
struct NetTotals {
    rx_packets: u64,
    dropped: u64,
    bytes: u64,
}

/// Sums every non-loopback interface in /proc/net/dev.
fn parse_net(dev: &str) -> Result<NetTotals, SystemSampleError> {
    let mut totals = NetTotals::default();
    for line in dev.lines().skip(2) {
        let Some((iface, rest)) = line.split_once(':') else { continue };
        if iface.trim() == "lo" {
            continue;
        }
        let f: Vec<u64> = rest.split_whitespace().filter_map(|v| v.parse().ok()).collect();
        if f.len() < 12 {
            return Err(SystemSampleError::Format("/proc/net/dev".into()));
        }
        totals.bytes += f[0] + f[8];
        totals.rx_packets += f[1];
        totals.dropped += f[3] + f[11];
    }
    Ok(totals)
}

fn pct(part: u64, whole: u64) -> f64 {
    if whole == 0 {
        0.0
    } else {
        (part as f64 * 100.0 / whole as f64).clamp(0.0, 100.0)
    }
}

/// Reads host indicators. CPU percentages cover the interval since the
/// previous reading of the same sampler (since boot for the first one).
#[derive(Debug, Default)]
pub struct ProcfsSampler {
    prev_cpu: Option<CpuTimes>,
}

impl ProcfsSampler {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn read<'a>(
        &mut self,
        indicators: impl IntoIterator<Item = &'a str>,
    ) -> Result<Vec<Reading>, SystemSampleError> {
        let wanted: Vec<&str> = indicators.into_iter().collect();
        if let Some(bad) = wanted.iter().find(|i| !SYSTEM_INDICATORS.contains(i)) {
            return Err(SystemSampleError::UnsupportedIndicator(bad.to_string()));
        }
        let cpu = if wanted.iter().any(|i| i.starts_with("cpu.")) {
            let now = parse_cpu(&read("/proc/stat")?)?;
            let window = match self.prev_cpu {
                Some(prev) if now.total() > prev.total() => now.delta(&prev),
                _ => now,
            };
            self.prev_cpu = Some(now);
            Some(window)
        } else {
            None
        };
        let mem = if wanted.contains(&"mem.used_bytes") {
            Some(parse_mem_used(&read("/proc/meminfo")?)?)
        } else {
            None
        };
        let net = if wanted.iter().any(|i| i.starts_with("net.")) {
            Some(parse_net(&read("/proc/net/dev")?)?)
        } else {
            None
        };

        let mut out = Vec::with_capacity(wanted.len());
        for ind in wanted {
            let reading = match ind {
                "mem.used_bytes" => Reading::new(ind, mem.unwrap_or_default(), "bytes"),
                "net.io_rx_packets" => Reading::new(ind, net.unwrap_or_default().rx_packets as f64, "packets"),
                "net.io_dropped_packets" => Reading::new(ind, net.unwrap_or_default().dropped as f64, "packets"),
                "net.io_bytes" => Reading::new(ind, net.unwrap_or_default().bytes as f64, "bytes"),
                cpu_ind => {
                    let c = cpu.unwrap_or_default();
                    let total = c.total();
                    let v = match cpu_ind {
                        "cpu.idle_pct" => pct(c.idle, total),
                        "cpu.iowait_pct" => pct(c.iowait, total),
                        "cpu.user_pct" => pct(c.user + c.nice, total),
                        "cpu.system_pct" => pct(c.system + c.irq + c.softirq, total),
                        _ => pct(total - c.idle - c.iowait, total),
                    };
                    Reading::new(cpu_ind, v, "percent")
                }
            };
            out.push(reading);
        }
        Ok(out)
    }
}

impl Sampler for ProcfsSampler {
    fn sample(&mut self, ctx: &TickContext<'_>) -> Result<Vec<Reading>, String> {
        self.read(ctx.config.indicators.iter().map(String::as_str)).map_err(|e| e.to_string())
    }
}

/// One-shot host reading.
pub fn system_sample<'a>(indicators: impl IntoIterator<Item = &'a str>) -> Result<Vec<Reading>, SystemSampleError> {
    ProcfsSampler::new().read(indicators)
}
