//! Optional client for an external rule-generation service.
//!
//! Request, sent as a single JSON POST to the configured endpoint:
//!
//! ```json
//! {"prompt": "<task prompt>", "max_candidates": 4}
//! ```
//!
//! Expected response:
//!
//! ```json
//! {"candidates": ["alert tcp any any -> any 8080 (content:\"jndi\"; sid:1;)"]}
//! ```
//!
//! Each candidate is one rule set in rule-file syntax. Candidates that do
//! not parse are dropped with a warning. Failures never abort a command;
//! callers record a fallback marker and carry on without candidates.

use std::time::Duration;

use refn_core::RuleSet;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: String,
    pub max_candidates: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationResponse {
    pub candidates: Vec<String>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GenerationError {
    #[error("generation request timed out")]
    Timeout,
    #[error("bad response from generation service: {0}")]
    BadResponse(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DroppedCandidate {
    pub text: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Candidates {
    pub accepted: Vec<RuleSet>,
    pub dropped: Vec<DroppedCandidate>,
}

/// Parse-checks a response. At most `max` candidates are considered.
pub fn check_candidates(response: GenerationResponse, max: usize) -> Candidates {
    let mut accepted = Vec::new();
    let mut dropped = Vec::new();
    for text in response.candidates.into_iter().take(max) {
        match RuleSet::parse(&text) {
            Ok(rs) if !rs.is_empty() => accepted.push(rs),
            Ok(_) => dropped.push(DroppedCandidate {
                text,
                error: "no rules".into(),
            }),
            Err(e) => {
                log::warn!("dropping generated candidate: {e}");
                dropped.push(DroppedCandidate {
                    text,
                    error: e.to_string(),
                });
            }
        }
    }
    Candidates { accepted, dropped }
}

pub fn fetch_candidates(
    endpoint: &str,
    timeout: Duration,
    request: &GenerationRequest,
) -> Result<Candidates, GenerationError> {
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(timeout))
        .build()
        .into();
    let classify = |e: ureq::Error| match e {
        ureq::Error::Timeout(_) => GenerationError::Timeout,
        ureq::Error::Io(io) if io.kind() == std::io::ErrorKind::TimedOut => GenerationError::Timeout,
        other => GenerationError::BadResponse(other.to_string()),
    };
    let mut response = agent.post(endpoint).send_json(request).map_err(classify)?;
    let body: GenerationResponse = response.body_mut().read_json().map_err(classify)?;
    Ok(check_candidates(body, request.max_candidates))
}
