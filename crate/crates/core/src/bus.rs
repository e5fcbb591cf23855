//! In-process fan-out bus between collectors and publishers.
//!
//! Every subscriber owns a bounded FIFO. Publishing never blocks on a
//! slow drainer: when a queue is full its oldest entry is evicted and the
//! subscriber's drop counter is bumped.

use std::collections::{BTreeMap, VecDeque};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::Serialize;
use thiserror::Error;
use tokio::sync::Notify;

use crate::model::{valid_topic_pattern, Observation};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BusError {
    #[error("subscriber {0:?} is already subscribed")]
    DuplicateSubscriber(String),
    #[error("capacity must be at least 1")]
    InvalidCapacity,
    #[error("unknown subscription {0:?}")]
    UnknownSubscription(String),
    #[error("invalid topic filter entry {0:?}")]
    InvalidFilter(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Pattern {
    Exact(String),
    Prefix(String),
}

/// Exact topic names and trailing-`*` prefixes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TopicFilter {
    patterns: Vec<Pattern>,
}

impl TopicFilter {
    pub fn parse<S: AsRef<str>>(entries: &[S]) -> Result<Self, BusError> {
        let mut patterns = Vec::with_capacity(entries.len());
        for e in entries {
            let e = e.as_ref();
            if !valid_topic_pattern(e) {
                return Err(BusError::InvalidFilter(e.to_string()));
            }
            patterns.push(match e.strip_suffix('*') {
                Some(prefix) => Pattern::Prefix(prefix.to_string()),
                None => Pattern::Exact(e.to_string()),
            });
        }
        Ok(TopicFilter { patterns })
    }

    pub fn matches(&self, topic: &str) -> bool {
        self.patterns.iter().any(|p| match p {
            Pattern::Exact(name) => name == topic,
            Pattern::Prefix(prefix) => topic.starts_with(prefix.as_str()),
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct SubscriptionStats {
    pub depth: usize,
    pub capacity: usize,
    pub enqueued: u64,
    pub drained: u64,
    pub dropped: u64,
}

#[derive(Debug)]
struct Queue {
    items: VecDeque<Observation>,
    capacity: usize,
    enqueued: u64,
    drained: u64,
    dropped: u64,
}

impl Queue {
    fn push(&mut self, obs: Observation) -> bool {
        let mut evicted = false;
        if self.items.len() >= self.capacity {
            self.items.pop_front();
            self.dropped += 1;
            evicted = true;
        }
        self.items.push_back(obs);
        self.enqueued += 1;
        evicted
    }

    fn take(&mut self, max: usize) -> Vec<Observation> {
        let n = max.min(self.items.len());
        let out: Vec<_> = self.items.drain(..n).collect();
        self.drained += out.len() as u64;
        out
    }

    fn stats(&self) -> SubscriptionStats {
        SubscriptionStats {
            depth: self.items.len(),
            capacity: self.capacity,
            enqueued: self.enqueued,
            drained: self.drained,
            dropped: self.dropped,
        }
    }
}

#[derive(Debug)]
struct Slot {
    id: String,
    filter: RwLock<TopicFilter>,
    queue: Mutex<Queue>,
    notify: Notify,
    closed: AtomicBool,
}

/// Handle onto one subscriber queue.
#[derive(Debug, Clone)]
pub struct Subscription {
    slot: Arc<Slot>,
}

impl Subscription {
    pub fn id(&self) -> &str {
        &self.slot.id
    }

    /// Removes up to `max` items in FIFO order. Fails once unsubscribed.
    pub fn drain(&self, max: usize) -> Result<Vec<Observation>, BusError> {
        if self.is_closed() {
            return Err(BusError::UnknownSubscription(self.slot.id.clone()));
        }
        Ok(self.slot.queue.lock().take(max))
    }

    /// Takes whatever is still queued, including after unsubscribe.
    pub fn take_remaining(&self, max: usize) -> Vec<Observation> {
        self.slot.queue.lock().take(max)
    }

    pub fn is_closed(&self) -> bool {
        self.slot.closed.load(Ordering::Acquire)
    }

    pub fn stats(&self) -> SubscriptionStats {
        self.slot.queue.lock().stats()
    }

    /// Completes once something was published to this subscription since
    /// the last wake-up (or immediately if a wake-up is pending).
    pub async fn notified(&self) {
        self.slot.notify.notified().await
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Delivery {
    pub delivered: usize,
    pub dropped: usize,
}

/// Per-subscriber outcome of one publish call; only matching subscribers appear.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct DeliveryReport {
    pub per_subscriber: BTreeMap<String, Delivery>,
}

impl DeliveryReport {
    pub fn total_delivered(&self) -> usize {
        self.per_subscriber.values().map(|d| d.delivered).sum()
    }

    pub fn delivered_to(&self, id: &str) -> usize {
        self.per_subscriber.get(id).map_or(0, |d| d.delivered)
    }
}

#[derive(Debug, Default)]
pub struct DataManager {
    slots: RwLock<BTreeMap<String, Arc<Slot>>>,
}

impl DataManager {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn subscribe<S: AsRef<str>>(
        &self,
        subscriber_id: &str,
        filter: &[S],
        capacity: usize,
    ) -> Result<Subscription, BusError> {
        if capacity == 0 {
            return Err(BusError::InvalidCapacity);
        }
        let filter = TopicFilter::parse(filter)?;
        let mut slots = self.slots.write();
        if slots.contains_key(subscriber_id) {
            return Err(BusError::DuplicateSubscriber(subscriber_id.to_string()));
        }
        let slot = Arc::new(Slot {
            id: subscriber_id.to_string(),
            filter: RwLock::new(filter),
            queue: Mutex::new(Queue {
                items: VecDeque::new(),
                capacity,
                enqueued: 0,
                drained: 0,
                dropped: 0,
            }),
            notify: Notify::new(),
            closed: AtomicBool::new(false),
        });
        slots.insert(subscriber_id.to_string(), slot.clone());
        Ok(Subscription { slot })
    }

    /// Appends each observation to every subscription whose filter matches
    /// its topic.
    pub fn publish(&self, batch: &[Observation]) -> DeliveryReport {
        let mut report = DeliveryReport::default();
        if batch.is_empty() {
            return report;
        }
        let slots = self.slots.read();
        for slot in slots.values() {
            let filter = slot.filter.read();
            let mut delivery = Delivery::default();
            {
                let mut queue = slot.queue.lock();
                for obs in batch.iter().filter(|o| filter.matches(&o.topic)) {
                    if queue.push(obs.clone()) {
                        delivery.dropped += 1;
                    }
                    delivery.delivered += 1;
                }
            }
            if delivery.delivered > 0 {
                slot.notify.notify_one();
                report.per_subscriber.insert(slot.id.clone(), delivery);
            }
        }
        report
    }

    pub fn drain(&self, subscriber_id: &str, max: usize) -> Result<Vec<Observation>, BusError> {
        self.handle(subscriber_id)?.drain(max)
    }

    pub fn handle(&self, subscriber_id: &str) -> Result<Subscription, BusError> {
        self.slots
            .read()
            .get(subscriber_id)
            .cloned()
            .map(|slot| Subscription { slot })
            .ok_or_else(|| BusError::UnknownSubscription(subscriber_id.to_string()))
    }

    /// Stops deliveries immediately. Items still queued stay reachable
    /// through [`Subscription::take_remaining`].
    pub fn unsubscribe(&self, subscriber_id: &str) -> Result<SubscriptionStats, BusError> {
        let slot = self
            .slots
            .write()
            .remove(subscriber_id)
            .ok_or_else(|| BusError::UnknownSubscription(subscriber_id.to_string()))?;
        slot.closed.store(true, Ordering::Release);
        slot.notify.notify_one();
        let stats = slot.queue.lock().stats();
        Ok(stats)
    }

    /// Replaces the topic filter of a live subscription.
    pub fn set_filter<S: AsRef<str>>(&self, subscriber_id: &str, filter: &[S]) -> Result<(), BusError> {
        let parsed = TopicFilter::parse(filter)?;
        let slot = self.handle(subscriber_id)?.slot;
        *slot.filter.write() = parsed;
        Ok(())
    }

    /// Resizes a queue, evicting the oldest entries if it shrinks.
    pub fn set_capacity(&self, subscriber_id: &str, capacity: usize) -> Result<(), BusError> {
        if capacity == 0 {
            return Err(BusError::InvalidCapacity);
        }
        let slot = self.handle(subscriber_id)?.slot;
        let mut q = slot.queue.lock();
        q.capacity = capacity;
        while q.items.len() > capacity {
            q.items.pop_front();
            q.dropped += 1;
        }
        Ok(())
    }

    /// Point-in-time snapshot of every subscription.
    pub fn stats(&self) -> BTreeMap<String, SubscriptionStats> {
        let slots = self.slots.read();
        slots.iter().map(|(id, slot)| (id.clone(), slot.queue.lock().stats())).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obs(topic: &str, n: u64) -> Observation {
        Observation {
            indicator: "x".into(),
            target: "t".into(),
            timestamp: n + 1,
            value: n as f64,
            unit: String::new(),
            labels: BTreeMap::new(),
            topic: topic.into(),
            source_instance: "c".into(),
        }
    }

    #[test]
    fn prefix_and_exact_matching() {
        let bus = DataManager::new();
        let sys = bus.subscribe("pubA", &["sys.*"], 1024).unwrap();
        let app = bus.subscribe("pubB", &["app.haproxy"], 1024).unwrap();
        let report = bus.publish(&[obs("sys.cpu", 0), obs("app.haproxy", 1)]);
        assert_eq!(report.delivered_to("pubA"), 1);
        assert_eq!(report.delivered_to("pubB"), 1);
        assert_eq!(sys.drain(10).unwrap()[0].topic, "sys.cpu");
        assert_eq!(app.drain(10).unwrap()[0].topic, "app.haproxy");
    }

    #[test]
    fn duplicate_and_bad_capacity() {
        let bus = DataManager::new();
        bus.subscribe("pubA", &["*"], 1).unwrap();
        assert_eq!(
            bus.subscribe("pubA", &["*"], 1).unwrap_err(),
            BusError::DuplicateSubscriber("pubA".into())
        );
        assert_eq!(bus.subscribe("pubB", &["*"], 0).unwrap_err(), BusError::InvalidCapacity);
        assert!(matches!(bus.subscribe("pubC", &["a*b"], 1), Err(BusError::InvalidFilter(_))));
    }

    #[test]
    fn fan_out_duplicates() {
        let bus = DataManager::new();
        let a = bus.subscribe("a", &["t"], 4).unwrap();
        let b = bus.subscribe("b", &["t"], 4).unwrap();
        assert_eq!(bus.publish(&[obs("t", 7)]).total_delivered(), 2);
        assert_eq!(a.drain(4).unwrap(), b.drain(4).unwrap());
    }

    #[test]
    fn drop_oldest_at_capacity() {
        let bus = DataManager::new();
        let s = bus.subscribe("s", &["t"], 2).unwrap();
        let report = bus.publish(&[obs("t", 0), obs("t", 1), obs("t", 2)]);
        assert_eq!(report.per_subscriber["s"], Delivery { delivered: 3, dropped: 1 });
        let st = bus.stats();
        assert_eq!(st["s"].depth, 2);
        assert_eq!(st["s"].dropped, 1);
        let vals: Vec<f64> = s.drain(10).unwrap().iter().map(|o| o.value).collect();
        assert_eq!(vals, vec![1.0, 2.0]);
    }

    #[test]
    fn no_subscribers_means_no_deliveries() {
        let bus = DataManager::new();
        assert_eq!(bus.publish(&[obs("t", 0)]).total_delivered(), 0);
        assert!(bus.stats().is_empty());
    }

    #[test]
    fn fifo_drain() {
        let bus = DataManager::new();
        bus.subscribe("s", &["t"], 8).unwrap();
        bus.publish(&[obs("t", 0), obs("t", 1), obs("t", 2)]);
        let first: Vec<f64> = bus.drain("s", 2).unwrap().iter().map(|o| o.value).collect();
        let second: Vec<f64> = bus.drain("s", 2).unwrap().iter().map(|o| o.value).collect();
        assert_eq!(first, vec![0.0, 1.0]);
        assert_eq!(second, vec![2.0]);
        assert!(bus.drain("s", 2).unwrap().is_empty());
    }

    #[test]
    fn unsubscribe_stops_delivery() {
        let bus = DataManager::new();
        let s = bus.subscribe("s", &["t"], 8).unwrap();
        bus.publish(&[obs("t", 0)]);
        bus.unsubscribe("s").unwrap();
        assert_eq!(bus.publish(&[obs("t", 1)]).delivered_to("s"), 0);
        assert!(matches!(s.drain(1), Err(BusError::UnknownSubscription(_))));
        assert_eq!(s.take_remaining(8).len(), 1);
        assert!(matches!(bus.unsubscribe("s"), Err(BusError::UnknownSubscription(_))));
        assert!(matches!(bus.drain("s", 1), Err(BusError::UnknownSubscription(_))));
    }

    #[test]
    fn shrinking_capacity_evicts_oldest() {
        let bus = DataManager::new();
        let s = bus.subscribe("s", &["t"], 8).unwrap();
        bus.publish(&[obs("t", 0), obs("t", 1), obs("t", 2)]);
        bus.set_capacity("s", 1).unwrap();
        assert_eq!(s.stats().dropped, 2);
        assert_eq!(s.drain(8).unwrap()[0].value, 2.0);
        bus.set_filter("s", &["u"]).unwrap();
        assert_eq!(bus.publish(&[obs("t", 3)]).total_delivered(), 0);
    }

    #[tokio::test]
    async fn publish_wakes_waiter() {
        let bus = Arc::new(DataManager::new());
        let s = bus.subscribe("s", &["t"], 8).unwrap();
        let waiter = tokio::spawn({
            let s = s.clone();
            async move {
                s.notified().await;
                s.drain(8).unwrap().len()
            }
        });
        tokio::task::yield_now().await;
        bus.publish(&[obs("t", 0)]);
        assert_eq!(waiter.await.unwrap(), 1);
    }
}
