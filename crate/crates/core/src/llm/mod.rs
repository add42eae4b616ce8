//! Prompt construction, chat-completion backends (HTTP and a deterministic
//! mock) and parsing of ranked recommendation lists from model output.

mod mock;
mod parse;
mod prompt;
mod remote;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::http::HttpError;

pub use mock::{MockBackend, MockConfig};
pub use parse::{parse_ranked_list, render_ranked_list, ParsedList};
pub use prompt::{render_feedback_line, render_history_record, LlmSettings, PromptBuilder, PromptTemplates};
pub use remote::{RemoteBackend, RemoteLlmConfig};

#[derive(Debug, Error)]
pub enum LlmError {
    #[error(transparent)]
    Http(#[from] HttpError),
    #[error("response has no message content")]
    EmptyResponse,
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("no ranked items could be parsed from the response")]
    Parse,
    #[error("feedback does not cover the previous list: {0}")]
    FeedbackMismatch(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

impl LlmError {
    /// Errors that indicate the backend itself is unusable.
    pub fn is_backend_failure(&self) -> bool {
        matches!(self, LlmError::Http(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub request_id: String,
    pub system: String,
    pub user: String,
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl ChatRequest {
    pub fn validate(&self) -> Result<(), LlmError> {
        if self.user.trim().is_empty() {
            return Err(LlmError::InvalidRequest("user text is empty".into()));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(LlmError::InvalidRequest(format!("temperature {} outside [0, 2]", self.temperature)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CallOutcome {
    Ok,
    ParseDegraded,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    pub request_id: String,
    pub latency_ms: f64,
    pub prompt_tokens: Option<u64>,
    pub completion_tokens: Option<u64>,
    pub outcome: CallOutcome,
}

/// Result of one backend call; a record is produced even when the call fails.
#[derive(Debug)]
pub struct Completion {
    pub result: Result<String, LlmError>,
    pub record: CallRecord,
}

pub trait LlmBackend: Send + Sync {
    fn complete(&self, req: &ChatRequest) -> Completion;

    /// Maximum concurrent requests this backend should receive.
    fn max_in_flight(&self) -> usize {
        1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "loop")]
pub enum ListSource {
    Initial,
    Refined(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub rank: usize,
    pub raw_title: String,
}

/// Ordered recommendations; ranks run 1..=len.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankedList {
    pub entries: Vec<RankedEntry>,
    pub source: ListSource,
}

impl RankedList {
    pub fn from_titles<S: Into<String>>(titles: impl IntoIterator<Item = S>, source: ListSource) -> Self {
        let entries = titles
            .into_iter()
            .enumerate()
            .map(|(i, t)| RankedEntry { rank: i + 1, raw_title: t.into() })
            .collect();
        Self { entries, source }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn titles(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.raw_title.as_str())
    }
}
