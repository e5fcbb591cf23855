//! Publisher runtime: drains a Data Manager subscription into a sink.

use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use parking_lot::{Mutex, RwLock};
use serde::Serialize;
use thiserror::Error;
use tokio::sync::{mpsc, oneshot};
use tokio::time::Instant;
use tracing::warn;

use crate::bus::{DataManager, Subscription};
use crate::model::{InstanceConfig, Observation};

/// How long a destroyed publisher keeps flushing its queue.
pub const DRAIN_DEADLINE: Duration = Duration::from_secs(2);

pub const DEFAULT_CAPACITY: usize = 1024;
pub const DEFAULT_BATCH_SIZE: usize = 256;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SinkError {
    #[error("sink unavailable after {attempts} attempt(s): {message}")]
    Unavailable { attempts: u32, message: String },
    #[error("sink rejected batch: {0}")]
    Rejected(String),
    #[error("sink i/o error: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SinkReceipt {
    pub retries: u32,
}

/// Destination of published observations.
#[async_trait]
pub trait Sink: Send {
    async fn publish(&mut self, batch: &[Observation]) -> Result<SinkReceipt, SinkError>;

    /// Flushes and releases resources; called once when the publisher stops
    /// or its sink is replaced.
    async fn close(&mut self) -> Result<(), SinkError> {
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct PublisherStats {
    pub batches: u64,
    pub delivered: u64,
    pub retries: u64,
    /// Drained observations that never reached the sink.
    pub lost: u64,
    pub sink_errors: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub last_error: Option<String>,
}

#[derive(Debug)]
pub struct PublisherShared {
    config: RwLock<Arc<InstanceConfig>>,
    stats: Mutex<PublisherStats>,
}

impl PublisherShared {
    pub fn config(&self) -> Arc<InstanceConfig> {
        self.config.read().clone()
    }

    pub fn stats(&self) -> PublisherStats {
        self.stats.lock().clone()
    }
}

pub fn capacity_of(cfg: &InstanceConfig) -> usize {
    cfg.param_i64("capacity").filter(|c| *c > 0).map_or(DEFAULT_CAPACITY, |c| c as usize)
}

pub fn batch_size_of(cfg: &InstanceConfig) -> usize {
    cfg.param_i64("batchSize").filter(|c| *c > 0).map_or(DEFAULT_BATCH_SIZE, |c| c as usize)
}

enum PubMsg {
    Reconfigure {
        config: InstanceConfig,
        sink: Option<Box<dyn Sink>>,
        reply: oneshot::Sender<()>,
    },
    Stop {
        deadline: Duration,
        reply: oneshot::Sender<()>,
    },
}

#[derive(Clone)]
pub struct PublisherHandle {
    tx: mpsc::Sender<PubMsg>,
    shared: Arc<PublisherShared>,
}

impl PublisherHandle {
    pub fn shared(&self) -> &Arc<PublisherShared> {
        &self.shared
    }

    /// Installs a new config, and a replacement sink if the sink settings
    /// changed. Filter and capacity must already be updated on the bus.
    pub async fn reconfigure(&self, config: InstanceConfig, sink: Option<Box<dyn Sink>>) -> bool {
        let (reply, rx) = oneshot::channel();
        if self.tx.send(PubMsg::Reconfigure { config, sink, reply }).await.is_err() {
            return false;
        }
        rx.await.is_ok()
    }

    /// Detaches from the bus, flushes what is queued (bounded by
    /// `deadline`) and closes the sink.
    pub async fn stop(&self, deadline: Duration) -> bool {
        let (reply, rx) = oneshot::channel();
        if self.tx.send(PubMsg::Stop { deadline, reply }).await.is_err() {
            return false;
        }
        rx.await.is_ok()
    }
}

pub struct PublisherRuntime {
    pub instance_id: String,
    pub config: InstanceConfig,
    pub sink: Box<dyn Sink>,
    pub bus: Arc<DataManager>,
    pub subscription: Subscription,
}

impl PublisherRuntime {
    pub fn start(self) -> PublisherHandle {
        let shared = Arc::new(PublisherShared {
            config: RwLock::new(Arc::new(self.config.clone())),
            stats: Mutex::new(PublisherStats::default()),
        });
        let (tx, rx) = mpsc::channel(16);
        tokio::spawn(self.run(shared.clone(), rx));
        PublisherHandle { tx, shared }
    }

    async fn deliver(&mut self, shared: &PublisherShared, batch: Vec<Observation>) {
        if batch.is_empty() {
            return;
        }
        let n = batch.len() as u64;
        let result = self.sink.publish(&batch).await;
        let mut stats = shared.stats.lock();
        stats.batches += 1;
        match result {
            Ok(receipt) => {
                stats.delivered += n;
                stats.retries += u64::from(receipt.retries);
            }
            Err(e) => {
                if let SinkError::Unavailable { attempts, .. } = &e {
                    stats.retries += u64::from(attempts.saturating_sub(1));
                }
                warn!(instance = %self.instance_id, error = %e, lost = n, "sink publish failed");
                stats.lost += n;
                stats.sink_errors += 1;
                stats.last_error = Some(e.to_string());
            }
        }
    }

    async fn run(mut self, shared: Arc<PublisherShared>, mut rx: mpsc::Receiver<PubMsg>) {
        loop {
            loop {
                let batch = match self.subscription.drain(batch_size_of(&self.config)) {
                    Ok(b) => b,
                    Err(_) => break,
                };
                if batch.is_empty() {
                    break;
                }
                self.deliver(&shared, batch).await;
                if !rx.is_empty() {
                    break;
                }
            }
            tokio::select! {
                biased;
                msg = rx.recv() => match msg {
                    Some(PubMsg::Reconfigure { config, sink, reply }) => {
                        if let Some(new_sink) = sink {
                            let mut old = std::mem::replace(&mut self.sink, new_sink);
                            if let Err(e) = old.close().await {
                                warn!(instance = %self.instance_id, error = %e, "closing replaced sink failed");
                            }
                        }
                        *shared.config.write() = Arc::new(config.clone());
                        self.config = config;
                        let _ = reply.send(());
                    }
                    Some(PubMsg::Stop { deadline, reply }) => {
                        self.shutdown(&shared, deadline).await;
                        let _ = reply.send(());
                        return;
                    }
                    None => {
                        self.shutdown(&shared, Duration::ZERO).await;
                        return;
                    }
                },
                _ = self.subscription.notified() => {}
            }
        }
    }

    async fn shutdown(&mut self, shared: &PublisherShared, deadline: Duration) {
        let _ = self.bus.unsubscribe(self.subscription.id());
        let until = Instant::now() + deadline;
        loop {
            let batch = self.subscription.take_remaining(batch_size_of(&self.config));
            if batch.is_empty() {
                break;
            }
            if Instant::now() >= until {
                shared.stats.lock().lost += batch.len() as u64;
                continue;
            }
            match tokio::time::timeout_at(until, self.sink.publish(&batch)).await {
                Ok(Ok(receipt)) => {
                    let mut stats = shared.stats.lock();
                    stats.batches += 1;
                    stats.delivered += batch.len() as u64;
                    stats.retries += u64::from(receipt.retries);
                }
                Ok(Err(e)) => {
                    let mut stats = shared.stats.lock();
                    stats.lost += batch.len() as u64;
                    stats.sink_errors += 1;
                    stats.last_error = Some(e.to_string());
                }
                Err(_) => {
                    shared.stats.lock().lost += batch.len() as u64;
                }
            }
        }
        if let Err(e) = self.sink.close().await {
            warn!(instance = %self.instance_id, error = %e, "closing sink failed");
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    #[derive(Clone, Default)]
    struct Recording(Arc<Mutex<Vec<Observation>>>);

    #[async_trait]
    impl Sink for Recording {
        async fn publish(&mut self, batch: &[Observation]) -> Result<SinkReceipt, SinkError> {
            self.0.lock().extend_from_slice(batch);
            Ok(SinkReceipt::default())
        }
    }

    fn obs(n: u64) -> Observation {
        Observation {
            indicator: "x".into(),
            target: "t".into(),
            timestamp: n + 1,
            value: n as f64,
            unit: String::new(),
            labels: BTreeMap::new(),
            topic: "t".into(),
            source_instance: "c".into(),
        }
    }

    fn config() -> InstanceConfig {
        let mut cfg = InstanceConfig::new("capture-sink");
        cfg.topics = vec!["t".into()];
        cfg
    }

    #[tokio::test]
    async fn forwards_published_observations() {
        let bus = Arc::new(DataManager::new());
        let sub = bus.subscribe("p", &["t"], 16).unwrap();
        let sink = Recording::default();
        let handle = PublisherRuntime {
            instance_id: "p".into(),
            config: config(),
            sink: Box::new(sink.clone()),
            bus: bus.clone(),
            subscription: sub,
        }
        .start();
        bus.publish(&[obs(0), obs(1)]);
        for _ in 0..100 {
            if sink.0.lock().len() == 2 {
                break;
            }
            tokio::time::sleep(Duration::from_millis(5)).await;
        }
        assert_eq!(sink.0.lock().len(), 2);
        assert!(handle.stop(DRAIN_DEADLINE).await);
        assert!(bus.stats().is_empty());
        assert_eq!(handle.shared().stats().delivered, 2);
    }

    #[tokio::test]
    async fn stop_flushes_queued_items() {
        let bus = Arc::new(DataManager::new());
        let sub = bus.subscribe("p", &["t"], 16).unwrap();
        bus.publish(&(0..5).map(obs).collect::<Vec<_>>());
        let sink = Recording::default();
        let runtime = PublisherRuntime {
            instance_id: "p".into(),
            config: config(),
            sink: Box::new(sink.clone()),
            bus: bus.clone(),
            subscription: sub,
        };
        let handle = runtime.start();
        handle.stop(DRAIN_DEADLINE).await;
        assert_eq!(sink.0.lock().len(), 5);
    }
}
