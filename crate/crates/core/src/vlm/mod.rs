//! Generative-VLM backend interface: image region + prompt in, ranked
//! answers out. Ships a deterministic fixture-backed mock for tests and
//! offline runs, and a live HTTP implementation.

mod batch;
mod http;
mod mock;

pub use batch::{query_batch, BatchOptions, RetryPolicy};
pub use http::HttpVlm;
pub use mock::{fixture_key, FixtureRecord, MockVlm};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Upper bound on answers per request; backends are not expected to rank
/// deeper than this.
pub const MAX_ANSWERS: usize = 16;

#[derive(Debug, Error)]
pub enum VlmError {
    /// Connection, timeout, or other transport problem. Retryable.
    #[error("transport failure: {0}")]
    Transport(String),
    /// Backend returned a non-success status. 5xx is retryable, 4xx is not.
    #[error("backend returned status {status}: {body}")]
    Http { status: u16, body: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("malformed backend response: {0}")]
    BadResponse(String),
    #[error("fixture error: {0}")]
    Fixture(String),
}

impl VlmError {
    pub fn is_retryable(&self) -> bool {
        match self {
            VlmError::Transport(_) => true,
            VlmError::Http { status, .. } => *status >= 500,
            _ => false,
        }
    }
}

/// One request: an encoded crop of the object region, the prompt, and how
/// many ranked answers to return.
#[derive(Debug, Clone, PartialEq)]
pub struct VlmRequest {
    region: Vec<u8>,
    prompt: String,
    num_answers: usize,
}

impl VlmRequest {
    pub fn new(
        region: Vec<u8>,
        prompt: impl Into<String>,
        num_answers: usize,
    ) -> Result<Self, VlmError> {
        let prompt = prompt.into();
        if prompt.is_empty() {
            return Err(VlmError::InvalidRequest("prompt must be nonempty".into()));
        }
        if num_answers == 0 || num_answers > MAX_ANSWERS {
            return Err(VlmError::InvalidRequest(format!(
                "num_answers={num_answers} outside 1..={MAX_ANSWERS}"
            )));
        }
        Ok(Self {
            region,
            prompt,
            num_answers,
        })
    }

    pub fn region(&self) -> &[u8] {
        &self.region
    }

    pub fn prompt(&self) -> &str {
        &self.prompt
    }

    pub fn num_answers(&self) -> usize {
        self.num_answers
    }
}

/// One ranked answer; higher score means more confident. The score is an
/// opaque comparable value, no probabilistic semantics are assumed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VlmAnswer {
    pub text: String,
    pub score: f64,
}

impl VlmAnswer {
    pub fn new(text: impl Into<String>, score: f64) -> Result<Self, VlmError> {
        let text = text.into();
        if text.is_empty() {
            return Err(VlmError::BadResponse("answer text must be nonempty".into()));
        }
        Ok(Self { text, score })
    }
}

/// A generative-VLM backend. Implementations are shareable across workers.
pub trait VlmBackend: Send + Sync {
    /// Returns at most `request.num_answers()` answers sorted by score
    /// descending. An empty answer set is a valid response, not an error.
    fn query(&self, request: &VlmRequest) -> Result<Vec<VlmAnswer>, VlmError>;

    /// Stable identifier recorded in expression provenance.
    fn backend_id(&self) -> &str;
}

/// Sorts answers by score descending (stable, so equal scores keep backend
/// order) and truncates to the requested count.
pub(crate) fn finalize_answers(mut answers: Vec<VlmAnswer>, num_answers: usize) -> Vec<VlmAnswer> {
    answers.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(std::cmp::Ordering::Equal));
    answers.truncate(num_answers);
    answers
}
