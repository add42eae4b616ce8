use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{CallOutcome, CallRecord, ChatRequest, Completion, LlmBackend, LlmError};
use crate::http::{post_json, RetryPolicy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteLlmConfig {
    /// Full chat-completions URL.
    pub url: String,
    /// Environment variable holding the bearer token.
    #[serde(default = "default_token_env")]
    pub token_env: String,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default)]
    pub retry: RetryPolicy,
}

fn default_token_env() -> String {
    "RECRITIC_LLM_TOKEN".into()
}

fn default_in_flight() -> usize {
    4
}

impl RemoteLlmConfig {
    /// Defaults for everything but the endpoint.
    pub fn new(url: impl Into<String>) -> Self {
        Self { url: url.into(), token_env: default_token_env(), max_in_flight: default_in_flight(), retry: RetryPolicy::default() }
    }
}

/// Chat-completions client over HTTP.
pub struct RemoteBackend {
    config: RemoteLlmConfig,
    token: Option<String>,
}

impl RemoteBackend {
    pub fn new(config: RemoteLlmConfig) -> Self {
        let token = std::env::var(&config.token_env).ok().filter(|t| !t.is_empty());
        Self { config, token }
    }

    fn call(&self, req: &ChatRequest) -> Result<(String, Option<u64>, Option<u64>), LlmError> {
        req.validate()?;
        let body = json!({
            "model": req.model,
            "messages": [
                {"role": "system", "content": req.system},
                {"role": "user", "content": req.user},
            ],
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        });
        let resp = post_json(&self.config.url, self.token.as_deref(), &body, &self.config.retry)?;
        let content = resp
            .pointer("/choices/0/message/content")
            .ok_or_else(|| LlmError::Malformed("missing choices[0].message.content".into()))?;
        let text = match content {
            Value::String(s) => s.clone(),
            Value::Null => String::new(),
            other => return Err(LlmError::Malformed(format!("content is not a string: {other}"))),
        };
        if text.trim().is_empty() {
            return Err(LlmError::EmptyResponse);
        }
        let usage = |k: &str| resp.pointer(&format!("/usage/{k}")).and_then(Value::as_u64);
        Ok((text, usage("prompt_tokens"), usage("completion_tokens")))
    }
}

impl LlmBackend for RemoteBackend {
    fn complete(&self, req: &ChatRequest) -> Completion {
        let start = Instant::now();
        let result = self.call(req);
        let latency_ms = start.elapsed().as_secs_f64() * 1000.0;
        let (result, prompt_tokens, completion_tokens, outcome) = match result {
            Ok((text, p, c)) => (Ok(text), p, c, CallOutcome::Ok),
            Err(e) => (Err(e), None, None, CallOutcome::Error),
        };
        let record = CallRecord { request_id: req.request_id.clone(), latency_ms, prompt_tokens, completion_tokens, outcome };
        Completion { result, record }
    }

    fn max_in_flight(&self) -> usize {
        self.config.max_in_flight.max(1)
    }
}
