//! Live HTTP backend speaking the `POST /v1/generate` wire protocol.

use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{finalize_answers, VlmAnswer, VlmBackend, VlmError, VlmRequest};

#[derive(Serialize)]
struct GenerateBody<'a> {
    image_b64: String,
    prompt: &'a str,
    num_answers: usize,
}

#[derive(Deserialize)]
struct GenerateResponse {
    answers: Vec<WireAnswer>,
}

#[derive(Deserialize)]
struct WireAnswer {
    text: String,
    score: f64,
}

/// Remote backend client. Single-request errors map to retryable
/// (transport, timeout, 5xx) or non-retryable (4xx) so the batch layer can
/// decide whether to back off and retry.
#[derive(Debug, Clone)]
pub struct HttpVlm {
    base_url: String,
    agent: ureq::Agent,
    id: String,
}

impl HttpVlm {
    pub fn new(base_url: impl Into<String>, timeout: Duration) -> Self {
        let base_url = base_url.into();
        let id = format!("http:{base_url}");
        let agent = ureq::AgentBuilder::new().timeout(timeout).build();
        Self {
            base_url,
            agent,
            id,
        }
    }

    fn endpoint(&self) -> String {
        format!("{}/v1/generate", self.base_url.trim_end_matches('/'))
    }
}

impl VlmBackend for HttpVlm {
    fn query(&self, request: &VlmRequest) -> Result<Vec<VlmAnswer>, VlmError> {
        let body = GenerateBody {
            image_b64: base64::engine::general_purpose::STANDARD.encode(request.region()),
            prompt: request.prompt(),
            num_answers: request.num_answers(),
        };
        let response = self.agent.post(&self.endpoint()).send_json(&body);
        match response {
            Ok(resp) => {
                let parsed: GenerateResponse = resp
                    .into_json()
                    .map_err(|e| VlmError::BadResponse(e.to_string()))?;
                let mut answers = Vec::with_capacity(parsed.answers.len());
                for wire in parsed.answers {
                    answers.push(VlmAnswer::new(wire.text, wire.score)?);
                }
                Ok(finalize_answers(answers, request.num_answers()))
            }
            Err(ureq::Error::Status(status, resp)) => {
                let body = resp.into_string().unwrap_or_default();
                Err(VlmError::Http { status, body })
            }
            Err(ureq::Error::Transport(t)) => Err(VlmError::Transport(t.to_string())),
        }
    }

    fn backend_id(&self) -> &str {
        &self.id
    }
}
