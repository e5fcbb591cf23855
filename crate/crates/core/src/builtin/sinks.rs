//! Built-in sinks: append-only NDJSON file, HTTP batch POST and an
//! in-memory capture buffer.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use parking_lot::Mutex;

use crate::model::{encode_batch, Observation};
use crate::publisher::{Sink, SinkError, SinkReceipt};

pub const NDJSON_CONTENT_TYPE: &str = "application/x-ndjson";

#[derive(Debug)]
pub struct FileSink {
    path: PathBuf,
    file: Option<File>,
}

impl FileSink {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, SinkError> {
        let path = path.as_ref().to_path_buf();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| SinkError::Io(e.to_string()))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| SinkError::Io(format!("{}: {e}", path.display())))?;
        Ok(FileSink { path, file: Some(file) })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

/// Appends canonical lines to `path`.
pub fn file_sink_publish(batch: &[Observation], path: impl AsRef<Path>) -> Result<SinkReceipt, SinkError> {
    let mut sink = FileSink::open(path)?;
    sink.write(batch)
}

impl FileSink {
    fn write(&mut self, batch: &[Observation]) -> Result<SinkReceipt, SinkError> {
        let file = self.file.as_mut().ok_or_else(|| SinkError::Io("sink closed".into()))?;
        file.write_all(&encode_batch(batch)).map_err(|e| SinkError::Io(e.to_string()))?;
        Ok(SinkReceipt::default())
    }
}

#[async_trait]
impl Sink for FileSink {
    async fn publish(&mut self, batch: &[Observation]) -> Result<SinkReceipt, SinkError> {
        self.write(batch)
    }

    async fn close(&mut self) -> Result<(), SinkError> {
        if let Some(file) = self.file.take() {
            file.sync_all().map_err(|e| SinkError::Io(e.to_string()))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    pub retries: u32,
    pub backoff: Duration,
    pub timeout: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { retries: 2, backoff: Duration::from_millis(250), timeout: Duration::from_secs(5) }
    }
}

/// POSTs each batch as an NDJSON body; 5xx responses and connection
/// errors are retried with a fixed backoff.
#[derive(Debug, Clone)]
pub struct HttpSink {
    client: reqwest::Client,
    url: String,
    policy: RetryPolicy,
}

impl HttpSink {
    pub fn new(url: impl Into<String>, policy: RetryPolicy) -> Result<Self, SinkError> {
        let url = url.into();
        reqwest::Url::parse(&url).map_err(|e| SinkError::Rejected(format!("invalid url {url:?}: {e}")))?;
        let client = reqwest::Client::builder()
            .timeout(policy.timeout)
            .build()
            .map_err(|e| SinkError::Io(e.to_string()))?;
        Ok(HttpSink { client, url, policy })
    }
}

/// One-shot HTTP delivery with the given retry policy.
pub async fn http_sink_publish(
    batch: &[Observation],
    url: &str,
    policy: RetryPolicy,
) -> Result<SinkReceipt, SinkError> {
    HttpSink::new(url, policy)?.publish(batch).await
}

#[async_trait]
impl Sink for HttpSink {
    async fn publish(&mut self, batch: &[Observation]) -> Result<SinkReceipt, SinkError> {
        let body = encode_batch(batch);
        let mut attempt = 0u32;
        loop {
            attempt += 1;
            let result = self
                .client
                .post(&self.url)
                .header(reqwest::header::CONTENT_TYPE, NDJSON_CONTENT_TYPE)
                .body(body.clone())
                .send()
                .await;
            let message = match result {
                Ok(resp) if resp.status().is_success() => {
                    return Ok(SinkReceipt { retries: attempt - 1 });
                }
                Ok(resp) if resp.status().is_server_error() => format!("HTTP {}", resp.status()),
                Ok(resp) => return Err(SinkError::Rejected(format!("HTTP {}", resp.status()))),
                Err(e) => e.to_string(),
            };
            if attempt > self.policy.retries {
                return Err(SinkError::Unavailable { attempts: attempt, message });
            }
            tokio::time::sleep(self.policy.backoff).await;
        }
    }
}

/// Shared in-memory record buffer.
#[derive(Debug, Clone, Default)]
pub struct CaptureBuffer(Arc<Mutex<Vec<Observation>>>);

impl CaptureBuffer {
    pub fn snapshot(&self) -> Vec<Observation> {
        self.0.lock().clone()
    }

    pub fn len(&self) -> usize {
        self.0.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Default)]
pub struct CaptureSink {
    buffer: CaptureBuffer,
}

impl CaptureSink {
    pub fn new(buffer: CaptureBuffer) -> Self {
        CaptureSink { buffer }
    }
}

/// Appends a batch to a capture buffer.
pub fn capture_sink_publish(batch: &[Observation], buffer: &CaptureBuffer) -> SinkReceipt {
    buffer.0.lock().extend_from_slice(batch);
    SinkReceipt::default()
}

#[async_trait]
impl Sink for CaptureSink {
    async fn publish(&mut self, batch: &[Observation]) -> Result<SinkReceipt, SinkError> {
        Ok(capture_sink_publish(batch, &self.buffer))
    }
}

/// Capture buffers keyed by publisher instance id.
#[derive(Debug, Default)]
pub struct CaptureRegistry {
    buffers: Mutex<BTreeMap<String, CaptureBuffer>>,
}

impl CaptureRegistry {
    pub fn buffer_for(&self, instance_id: &str) -> CaptureBuffer {
        self.buffers.lock().entry(instance_id.to_string()).or_default().clone()
    }

    pub fn get(&self, instance_id: &str) -> Option<CaptureBuffer> {
        self.buffers.lock().get(instance_id).cloned()
    }
}
