//! Time sources for timestamps and uptime.
//!
//! Sleeping always goes through `tokio::time`, so running the agent on a
//! runtime with paused time turns every scheduler into a virtual-time
//! scheduler. [`VirtualClock`] maps that paused tokio time onto a fixed
//! epoch so timestamps are reproducible too.

use std::fmt;
use std::time::{SystemTime, UNIX_EPOCH};

use crate::model::TimestampNs;

pub trait Clock: Send + Sync + fmt::Debug {
    fn now_ns(&self) -> TimestampNs;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ns(&self) -> TimestampNs {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_nanos() as u64)
            .unwrap_or(1)
    }
}

/// Fixed epoch plus elapsed tokio time since construction.
#[derive(Debug, Clone)]
pub struct VirtualClock {
    epoch_ns: TimestampNs,
    origin: tokio::time::Instant,
}

/// 2024-01-01T00:00:00Z
pub const DEFAULT_VIRTUAL_EPOCH_NS: TimestampNs = 1_704_067_200_000_000_000;

impl VirtualClock {
    pub fn new(epoch_ns: TimestampNs) -> Self {
        VirtualClock { epoch_ns: epoch_ns.max(1), origin: tokio::time::Instant::now() }
    }
}

impl Default for VirtualClock {
    fn default() -> Self {
        VirtualClock::new(DEFAULT_VIRTUAL_EPOCH_NS)
    }
}

impl Clock for VirtualClock {
    fn now_ns(&self) -> TimestampNs {
        self.epoch_ns + self.origin.elapsed().as_nanos() as u64
    }
}
