//! Blocking JSON-over-HTTP with bounded exponential-backoff retries.

use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    /// Total attempts including the first one.
    pub max_attempts: u32,
    pub initial_backoff_ms: u64,
    pub multiplier: f64,
    pub max_backoff_ms: u64,
    pub timeout_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            initial_backoff_ms: 250,
            multiplier: 2.0,
            max_backoff_ms: 8_000,
            timeout_ms: 120_000,
        }
    }
}

impl RetryPolicy {
    pub fn backoff(&self, attempt: u32) -> Duration {
        let ms = self.initial_backoff_ms as f64 * self.multiplier.powi(attempt as i32);
        Duration::from_millis(ms.min(self.max_backoff_ms as f64) as u64)
    }
}

#[derive(Debug, Error)]
pub enum HttpError {
    #[error("authentication rejected (HTTP {0})")]
    Auth(u16),
    #[error("HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("invalid JSON response: {0}")]
    Decode(String),
    #[error("gave up after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: Box<HttpError> },
}

impl HttpError {
    fn retryable(&self) -> bool {
        match self {
            HttpError::Transport(_) => true,
            HttpError::Status { status, .. } => *status >= 500 || *status == 429,
            _ => false,
        }
    }
}

fn attempt(agent: &ureq::Agent, url: &str, token: Option<&str>, body: &Value) -> Result<Value, HttpError> {
    let mut req = agent.post(url).set("Content-Type", "application/json");
    if let Some(t) = token {
        req = req.set("Authorization", &format!("Bearer {t}"));
    }
    match req.send_json(body) {
        Ok(resp) => resp.into_json::<Value>().map_err(|e| HttpError::Decode(e.to_string())),
        Err(ureq::Error::Status(status, resp)) => {
            if status == 401 || status == 403 {
                return Err(HttpError::Auth(status));
            }
            let body = resp.into_string().unwrap_or_default();
            Err(HttpError::Status { status, body })
        }
        Err(ureq::Error::Transport(t)) => Err(HttpError::Transport(t.to_string())),
    }
}

/// POSTs `body` and decodes a JSON reply, retrying transport errors, 5xx and 429.
pub fn post_json(
    url: &str,
    token: Option<&str>,
    body: &Value,
    policy: &RetryPolicy,
) -> Result<Value, HttpError> {
    let agent = ureq::AgentBuilder::new()
        .timeout(Duration::from_millis(policy.timeout_ms))
        .build();
    let attempts = policy.max_attempts.max(1);
    let mut n = 0;
    loop {
        let err = match attempt(&agent, url, token, body) {
            Ok(v) => return Ok(v),
            Err(e) => e,
        };
        n += 1;
        if !err.retryable() {
            return Err(err);
        }
        if n >= attempts {
            return Err(HttpError::RetriesExhausted { attempts: n, last: Box::new(err) });
        }
        log::warn!("request to {url} failed ({err}), retry {n}/{}", attempts - 1);
        thread::sleep(policy.backoff(n - 1));
    }
}

/// Minimal single-threaded HTTP server replaying canned responses, for tests.
#[cfg(test)]
pub(crate) mod test_server {
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;
    use std::thread;

    pub struct Server {
        pub url: String,
        pub hits: Arc<AtomicUsize>,
        pub bodies: Arc<std::sync::Mutex<Vec<String>>>,
    }

    /// Serves `(status, body)` pairs in order; the last one repeats.
    pub fn serve(responses: Vec<(u16, String)>) -> Server {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let hits = Arc::new(AtomicUsize::new(0));
        let bodies = Arc::new(std::sync::Mutex::new(Vec::new()));
        let (h, b) = (hits.clone(), bodies.clone());
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { break };
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0usize;
                loop {
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap_or(0);
                    }
                }
                let mut body = vec![0u8; len];
                let _ = reader.read_exact(&mut body);
                b.lock().unwrap().push(String::from_utf8_lossy(&body).into_owned());
                let i = h.fetch_add(1, Ordering::SeqCst).min(responses.len() - 1);
                let (status, text) = &responses[i];
                let _ = write!(
                    stream,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{text}",
                    text.len()
                );
            }
        });
        Server { url, hits, bodies }
    }
}
