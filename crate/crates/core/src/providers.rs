//! Request/response plumbing shared by the external model providers:
//! JSON transports over HTTP or a subprocess, per-provider in-flight
//! limits and call counting.

use std::io::{Read, Write};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde_json::Value;
use thiserror::Error;

use crate::image::RgbImage;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ProviderError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("provider timed out after {0:?}")]
    Timeout(Duration),
    #[error("provider reported failure: {0}")]
    Remote(String),
    #[error("malformed provider response: {0}")]
    Protocol(String),
}

impl ProviderError {
    /// Transport failures and timeouts are worth retrying; a provider that
    /// answered with an error or garbage is not.
    pub fn is_retryable(&self) -> bool {
        matches!(self, ProviderError::Transport(_) | ProviderError::Timeout(_))
    }
}

/// Sends one JSON request and returns the JSON response.
pub trait Transport: Send + Sync {
    fn call(&self, request: &Value) -> Result<Value, ProviderError>;
}

/// POSTs the request body as JSON.
pub struct HttpTransport {
    url: String,
    agent: ureq::Agent,
}

impl HttpTransport {
    pub fn new(url: impl Into<String>, timeout: Duration) -> Self {
        let config = ureq::Agent::config_builder().timeout_global(Some(timeout)).build();
        Self { url: url.into(), agent: config.into() }
    }
}

impl Transport for HttpTransport {
    fn call(&self, request: &Value) -> Result<Value, ProviderError> {
        let mut response = self.agent.post(&self.url).send_json(request).map_err(|e| match e {
            ureq::Error::Timeout(_) => ProviderError::Timeout(Duration::ZERO),
            ureq::Error::StatusCode(code) if code < 500 => ProviderError::Remote(format!("HTTP {code}")),
            other => ProviderError::Transport(other.to_string()),
        })?;
        response.body_mut().read_json::<Value>().map_err(|e| ProviderError::Protocol(e.to_string()))
    }
}

/// Runs a program per request, writing the request as one JSON line to its
/// stdin and parsing its stdout as JSON.
pub struct SubprocessTransport {
    program: String,
    args: Vec<String>,
    timeout: Duration,
}

impl SubprocessTransport {
    pub fn new(program: impl Into<String>, args: Vec<String>, timeout: Duration) -> Self {
        Self { program: program.into(), args, timeout }
    }
}

impl Transport for SubprocessTransport {
    fn call(&self, request: &Value) -> Result<Value, ProviderError> {
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| ProviderError::Transport(format!("cannot start {}: {e}", self.program)))?;
        let mut stdin = child.stdin.take().expect("piped stdin");
        let mut stdout = child.stdout.take().expect("piped stdout");
        let mut stderr = child.stderr.take().expect("piped stderr");
        let mut line = serde_json::to_vec(request).map_err(|e| ProviderError::Protocol(e.to_string()))?;
        line.push(b'\n');
        let writer = thread::spawn(move || {
            let _ = stdin.write_all(&line);
        });
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            let mut out = Vec::new();
            let mut err = String::new();
            let read = stdout.read_to_end(&mut out);
            let _ = stderr.read_to_string(&mut err);
            let _ = tx.send((read.map(|_| out), err));
        });
        let received = rx.recv_timeout(self.timeout);
        let _ = writer.join();
        let (out, err) = match received {
            Ok(v) => v,
            Err(_) => {
                let _ = child.kill();
                let _ = child.wait();
                return Err(ProviderError::Timeout(self.timeout));
            }
        };
        let status = child.wait().map_err(|e| ProviderError::Transport(e.to_string()))?;
        let out = out.map_err(|e| ProviderError::Transport(e.to_string()))?;
        if !status.success() {
            return Err(ProviderError::Remote(format!("{} exited with {status}: {}", self.program, err.trim())));
        }
        serde_json::from_slice(&out).map_err(|e| ProviderError::Protocol(format!("stdout is not JSON: {e}")))
    }
}

/// Bounds concurrent calls into one provider.
pub struct InflightLimiter {
    limit: usize,
    active: Mutex<usize>,
    freed: Condvar,
}

pub struct InflightPermit<'a> {
    limiter: &'a InflightLimiter,
}

impl InflightLimiter {
    pub fn new(limit: usize) -> Self {
        Self { limit: limit.max(1), active: Mutex::new(0), freed: Condvar::new() }
    }

    pub fn limit(&self) -> usize {
        self.limit
    }

    pub fn acquire(&self) -> InflightPermit<'_> {
        let mut active = self.active.lock().unwrap_or_else(|p| p.into_inner());
        while *active >= self.limit {
            active = self.freed.wait(active).unwrap_or_else(|p| p.into_inner());
        }
        *active += 1;
        InflightPermit { limiter: self }
    }

    pub fn in_flight(&self) -> usize {
        *self.active.lock().unwrap_or_else(|p| p.into_inner())
    }
}

impl Drop for InflightPermit<'_> {
    fn drop(&mut self) {
        let mut active = self.limiter.active.lock().unwrap_or_else(|p| p.into_inner());
        *active -= 1;
        self.limiter.freed.notify_one();
    }
}

/// Shared call counter; clones observe the same count.
#[derive(Debug, Clone, Default)]
pub struct CallCounter(Arc<AtomicUsize>);

impl CallCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bump(&self) {
        self.0.fetch_add(1, Ordering::SeqCst);
    }

    pub fn get(&self) -> usize {
        self.0.load(Ordering::SeqCst)
    }

    pub fn reset(&self) {
        self.0.store(0, Ordering::SeqCst);
    }
}

pub const PPM_MIME: &str = "image/x-portable-pixmap";

/// `{"mime": ..., "data": base64}` payload for an image.
pub fn image_payload(image: &RgbImage) -> Value {
    serde_json::json!({ "mime": PPM_MIME, "data": B64.encode(image.to_ppm_bytes()) })
}

pub fn decode_image_payload(value: &Value) -> Result<RgbImage, ProviderError> {
    let data = value
        .get("data")
        .and_then(Value::as_str)
        .or_else(|| value.as_str())
        .ok_or_else(|| ProviderError::Protocol("image payload has no base64 data".into()))?;
    let bytes = B64.decode(data).map_err(|e| ProviderError::Protocol(format!("bad base64: {e}")))?;
    RgbImage::from_ppm_bytes(&bytes).map_err(|e| ProviderError::Protocol(e.to_string()))
}

pub fn decode_bytes_field(value: &Value, field: &str) -> Result<Vec<u8>, ProviderError> {
    let data = value
        .get(field)
        .and_then(Value::as_str)
        .ok_or_else(|| ProviderError::Protocol(format!("response has no \"{field}\" field")))?;
    B64.decode(data).map_err(|e| ProviderError::Protocol(format!("bad base64 in \"{field}\": {e}")))
}

pub fn text_field(value: &Value, field: &str) -> Result<String, ProviderError> {
    if let Some(err) = value.get("error").and_then(Value::as_str) {
        return Err(ProviderError::Remote(err.to_string()));
    }
    value
        .get(field)
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| ProviderError::Protocol(format!("response has no \"{field}\" field")))
}
