//! Uniform completion interface.
//!
//! Everything that talks to a model goes through [`LlmClient`]. The HTTP
//! implementation lives in the gateway crate; [`mock::ScriptedLlm`] answers
//! from a script and is what the offline pipeline and the tests run against.

pub mod mock;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace::TokenRecord;

/// Header carrying the truncation length of a truncated-CoT request.
pub const TRUNCATION_HEADER: &str = "x-optexit-truncation-index";
/// Header carrying the request's [`RoleTag`].
pub const ROLE_HEADER: &str = "x-optexit-role";
/// Environment variable holding the bearer token.
pub const API_KEY_ENV: &str = "OPTEXIT_API_KEY";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoleTag {
    Generate,
    Extract,
    Identify,
    Verify,
    SolveAfterTruncation,
}

impl RoleTag {
    pub fn as_str(self) -> &'static str {
        match self {
            RoleTag::Generate => "generate",
            RoleTag::Extract => "extract",
            RoleTag::Identify => "identify",
            RoleTag::Verify => "verify",
            RoleTag::SolveAfterTruncation => "solve_after_truncation",
        }
    }
}

impl std::str::FromStr for RoleTag {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| format!("unknown role tag `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LlmRequest {
    pub role_tag: RoleTag,
    pub system_prompt: String,
    pub user_prompt: String,
    /// Pre-filled assistant turn the model continues from (partial CoT).
    pub assistant_prefix: Option<String>,
    pub max_tokens: usize,
    pub temperature: f64,
    pub want_logprobs: bool,
    pub top_logprobs: usize,
    /// Number of CoT tokens kept, for truncated-CoT continuations.
    pub truncation_index: Option<usize>,
}

impl LlmRequest {
    pub fn new(role_tag: RoleTag, user_prompt: impl Into<String>) -> Self {
        LlmRequest {
            role_tag,
            system_prompt: String::new(),
            user_prompt: user_prompt.into(),
            assistant_prefix: None,
            max_tokens: 4096,
            temperature: 0.0,
            want_logprobs: false,
            top_logprobs: 0,
            truncation_index: None,
        }
    }

    pub fn with_logprobs(mut self, k: usize) -> Self {
        self.want_logprobs = true;
        self.top_logprobs = k;
        self
    }

    pub fn with_prefix(mut self, prefix: impl Into<String>) -> Self {
        self.assistant_prefix = Some(prefix.into());
        self
    }

    pub fn with_truncation(mut self, index: usize) -> Self {
        self.truncation_index = Some(index);
        self
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if self.want_logprobs && self.top_logprobs == 0 {
            return Err(LlmError::InvalidRequest("top_logprobs must be >= 1".into()));
        }
        if !(self.temperature >= 0.0) {
            return Err(LlmError::InvalidRequest("temperature must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Stop,
    Length,
    Aborted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    /// Populated when the request asked for logprobs.
    pub tokens: Vec<TokenRecord>,
    pub finish_reason: FinishReason,
}

/// Returned by a stream consumer after each token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamControl {
    Continue,
    Abort,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LlmError {
    #[error("transport error (status {status:?}): {message}")]
    Transport { status: Option<u16>, message: String },
    #[error("request timed out")]
    Timeout,
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("no scripted response for {0}")]
    NoMatch(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

pub trait LlmClient: Send + Sync {
    fn complete(&self, request: &LlmRequest) -> Result<Completion, LlmError>;

    /// Delivers tokens in generation order. The consumer may abort, in which
    /// case the completion ends with [`FinishReason::Aborted`] and holds only
    /// the delivered tokens.
    fn stream(
        &self,
        request: &LlmRequest,
        on_token: &mut dyn FnMut(&TokenRecord) -> StreamControl,
    ) -> Result<Completion, LlmError>;
}

impl<T: LlmClient + ?Sized> LlmClient for &T {
    fn complete(&self, request: &LlmRequest) -> Result<Completion, LlmError> {
        (**self).complete(request)
    }
    fn stream(
        &self,
        request: &LlmRequest,
        on_token: &mut dyn FnMut(&TokenRecord) -> StreamControl,
    ) -> Result<Completion, LlmError> {
        (**self).stream(request, on_token)
    }
}

impl<T: LlmClient + ?Sized> LlmClient for Arc<T> {
    fn complete(&self, request: &LlmRequest) -> Result<Completion, LlmError> {
        (**self).complete(request)
    }
    fn stream(
        &self,
        request: &LlmRequest,
        on_token: &mut dyn FnMut(&TokenRecord) -> StreamControl,
    ) -> Result<Completion, LlmError> {
        (**self).stream(request, on_token)
    }
}

impl<T: LlmClient + ?Sized> LlmClient for Box<T> {
    fn complete(&self, request: &LlmRequest) -> Result<Completion, LlmError> {
        (**self).complete(request)
    }
    fn stream(
        &self,
        request: &LlmRequest,
        on_token: &mut dyn FnMut(&TokenRecord) -> StreamControl,
    ) -> Result<Completion, LlmError> {
        (**self).stream(request, on_token)
    }
}

/// Hex SHA-256 of a prompt, the key scripted responses are matched on.
pub fn prompt_sha256(prompt: &str) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn role_tags_parse() {
        assert_eq!("solve_after_truncation".parse::<RoleTag>(), Ok(RoleTag::SolveAfterTruncation));
        assert!("nope".parse::<RoleTag>().is_err());
        assert_eq!(RoleTag::Verify.as_str(), "verify");
    }

    #[test]
    fn request_validation() {
        let mut r = LlmRequest::new(RoleTag::Generate, "p");
        r.want_logprobs = true;
        assert!(r.validate().is_err());
        assert!(r.clone().with_logprobs(2).validate().is_ok());
        r.temperature = -1.0;
        r.top_logprobs = 1;
        assert!(r.validate().is_err());
    }

    #[test]
    fn sha_is_stable() {
        assert_eq!(
            prompt_sha256("abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
