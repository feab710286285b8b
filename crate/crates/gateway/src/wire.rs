//! The chat-completions subset spoken by both the client and the mock server.

use serde::{Deserialize, Serialize};

use optexit_core::llm::{prompt_sha256, FinishReason};
use optexit_core::{TokenRecord, TopKEntry};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub role: String,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<Message>,
    pub max_tokens: usize,
    pub temperature: f64,
    #[serde(default)]
    pub logprobs: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_logprobs: Option<usize>,
    #[serde(default)]
    pub stream: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopLogprob {
    pub token: String,
    pub logprob: f64,
    /// Token id extension; servers that omit it get ids from the token text.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogprobToken {
    pub token: String,
    pub logprob: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<u32>,
    #[serde(default)]
    pub top_logprobs: Vec<TopLogprob>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ChoiceLogprobs {
    #[serde(default)]
    pub content: Option<Vec<LogprobToken>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ResponseMessage {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<String>,
    #[serde(default)]
    pub content: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Choice {
    #[serde(default)]
    pub index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<ResponseMessage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<ResponseMessage>,
    #[serde(default)]
    pub logprobs: Option<ChoiceLogprobs>,
    #[serde(default)]
    pub finish_reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    #[serde(default)]
    pub id: String,
    #[serde(default)]
    pub object: String,
    #[serde(default)]
    pub created: u64,
    #[serde(default)]
    pub model: String,
    pub choices: Vec<Choice>,
}

pub fn finish_str(f: FinishReason) -> &'static str {
    match f {
        FinishReason::Stop => "stop",
        FinishReason::Length => "length",
        FinishReason::Aborted => "abort",
    }
}

pub fn parse_finish(s: &str) -> FinishReason {
    match s {
        "length" => FinishReason::Length,
        "abort" => FinishReason::Aborted,
        _ => FinishReason::Stop,
    }
}

/// Token id of a returned token: the `id` extension if present, then a
/// `token_id:N` token string, then a hash of the token text.
pub fn token_id_of(token: &str, id: Option<u32>) -> u32 {
    if let Some(id) = id {
        return id;
    }
    if let Some(n) = token.strip_prefix("token_id:").and_then(|n| n.parse().ok()) {
        return n;
    }
    u32::from_str_radix(&prompt_sha256(token)[..8], 16).expect("hex digest")
}

pub fn to_record(index: usize, lp: &LogprobToken) -> TokenRecord {
    let mut top_k: Vec<TopKEntry> = lp
        .top_logprobs
        .iter()
        .map(|t| TopKEntry { token_id: token_id_of(&t.token, t.id), logprob: t.logprob.min(0.0) })
        .collect();
    top_k.sort_by(|a, b| b.logprob.total_cmp(&a.logprob));
    TokenRecord {
        index,
        token_id: token_id_of(&lp.token, lp.id),
        token_text: lp.token.clone(),
        chosen_logprob: lp.logprob.min(0.0),
        top_k,
    }
}

pub fn from_record(r: &TokenRecord) -> LogprobToken {
    LogprobToken {
        token: r.token_text.clone(),
        logprob: r.chosen_logprob,
        id: Some(r.token_id),
        top_logprobs: r
            .top_k
            .iter()
            .map(|e| TopLogprob {
                token: if e.token_id == r.token_id {
                    r.token_text.clone()
                } else {
                    format!("token_id:{}", e.token_id)
                },
                logprob: e.logprob,
                id: Some(e.token_id),
            })
            .collect(),
    }
}

/// Record for a streamed token that arrived without logprobs.
pub fn bare_record(index: usize, text: &str) -> TokenRecord {
    TokenRecord {
        index,
        token_id: token_id_of(text, None),
        token_text: text.to_string(),
        chosen_logprob: 0.0,
        top_k: Vec::new(),
    }
}
