//! Deterministic scripted model.
//!
//! A script is a line-delimited list of entries. Each entry names a role tag,
//! a matcher and the response. Plain entries match on the SHA-256 of the user
//! prompt (or every prompt when the hash is omitted). Truncation entries carry
//! `answer_from_index` (and optionally an exclusive `answer_until_index`) and
//! only match truncated-CoT continuations whose truncation index falls in
//! that range; continuations matching no entry get [`NO_ANSWER_TEXT`].
//!
//! Overlapping entries are rejected at load time, so every request matches at
//! most one entry.

use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{
    prompt_sha256, Completion, FinishReason, LlmClient, LlmError, LlmRequest, RoleTag,
    StreamControl,
};
use crate::trace::{TokenRecord, TopKEntry};

/// Reply to a truncated continuation that no entry covers.
pub const NO_ANSWER_TEXT: &str = "I could not reach a conclusion.";

/// Token id assigned to the k-th non-chosen alternative.
const ALT_TOKEN_BASE: u32 = 1_000_000;

#[derive(Debug, Error, PartialEq)]
pub enum ScriptError {
    #[error("i/o error: {0}")]
    Io(String),
    #[error("script line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("script entries at lines {first} and {second} overlap")]
    ScriptAmbiguity { first: usize, second: usize },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Matcher {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_sha256: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_from_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_until_index: Option<usize>,
}

impl Matcher {
    pub fn prompt(prompt: &str) -> Self {
        Matcher {
            prompt_sha256: Some(prompt_sha256(prompt)),
            ..Matcher::default()
        }
    }

    pub fn any() -> Self {
        Matcher::default()
    }

    pub fn from_index(mut self, j: usize) -> Self {
        self.answer_from_index = Some(j);
        self
    }

    pub fn until_index(mut self, j: usize) -> Self {
        self.answer_until_index = Some(j);
        self
    }

    fn is_truncation(&self) -> bool {
        self.answer_from_index.is_some()
    }

    fn range(&self) -> (usize, usize) {
        (
            self.answer_from_index.unwrap_or(0),
            self.answer_until_index.unwrap_or(usize::MAX),
        )
    }

    fn scope_overlaps(&self, other: &Matcher) -> bool {
        match (&self.prompt_sha256, &other.prompt_sha256) {
            (Some(a), Some(b)) => a == b,
            _ => true,
        }
    }

    fn overlaps(&self, other: &Matcher) -> bool {
        if self.is_truncation() != other.is_truncation() || !self.scope_overlaps(other) {
            return false;
        }
        if !self.is_truncation() {
            return true;
        }
        let (a0, a1) = self.range();
        let (b0, b1) = other.range();
        a0 < b1 && b0 < a1
    }
}

/// One scripted token: its text and the descending top-K probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptToken {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<u32>,
    pub probs: Vec<f64>,
    /// Probability of the sampled token; defaults to `probs[0]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chosen_prob: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockEntry {
    pub role_tag: RoleTag,
    #[serde(rename = "match")]
    pub matcher: Matcher,
    pub response_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response_tokens: Option<Vec<ScriptToken>>,
}

impl MockEntry {
    pub fn text(role_tag: RoleTag, matcher: Matcher, text: impl Into<String>) -> Self {
        MockEntry {
            role_tag,
            matcher,
            response_text: text.into(),
            response_tokens: None,
        }
    }

    pub fn tokens(role_tag: RoleTag, matcher: Matcher, tokens: Vec<ScriptToken>) -> Self {
        MockEntry {
            role_tag,
            matcher,
            response_text: tokens.iter().map(|t| t.text.as_str()).collect(),
            response_tokens: Some(tokens),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MockScript {
    entries: Vec<MockEntry>,
}

impl MockScript {
    /// Validates entries and rejects overlapping matchers.
    pub fn new(entries: Vec<MockEntry>) -> Result<Self, ScriptError> {
        for (n, e) in entries.iter().enumerate() {
            validate_entry(e).map_err(|message| ScriptError::Parse { line: n + 1, message })?;
        }
        // Bucket by (role, hash) so large scripts avoid a full pairwise scan;
        // wildcard entries are checked against everything with the same role.
        let mut by_key: std::collections::HashMap<(RoleTag, Option<&str>), Vec<usize>> =
            std::collections::HashMap::new();
        for (n, e) in entries.iter().enumerate() {
            by_key
                .entry((e.role_tag, e.matcher.prompt_sha256.as_deref()))
                .or_default()
                .push(n);
        }
        for (n, e) in entries.iter().enumerate() {
            let candidates: Vec<usize> = match e.matcher.prompt_sha256.as_deref() {
                Some(h) => by_key
                    .get(&(e.role_tag, Some(h)))
                    .into_iter()
                    .chain(by_key.get(&(e.role_tag, None)))
                    .flatten()
                    .copied()
                    .collect(),
                None => (0..entries.len()).filter(|&m| entries[m].role_tag == e.role_tag).collect(),
            };
            for m in candidates {
                if m > n && e.matcher.overlaps(&entries[m].matcher) {
                    return Err(ScriptError::ScriptAmbiguity { first: n + 1, second: m + 1 });
                }
            }
        }
        Ok(MockScript { entries })
    }

    pub fn entries(&self) -> &[MockEntry] {
        &self.entries
    }

    pub fn parse(text: &str) -> Result<Self, ScriptError> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let e: MockEntry = serde_json::from_str(line).map_err(|err| ScriptError::Parse {
                line: n + 1,
                message: err.to_string(),
            })?;
            entries.push(e);
        }
        MockScript::new(entries)
    }

    pub fn load(path: &Path) -> Result<Self, ScriptError> {
        let text = fs::read_to_string(path).map_err(|e| ScriptError::Io(e.to_string()))?;
        MockScript::parse(&text)
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            s.push_str(&serde_json::to_string(e).expect("entry serializes"));
            s.push('\n');
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<(), ScriptError> {
        fs::write(path, self.to_jsonl()).map_err(|e| ScriptError::Io(e.to_string()))
    }

    /// Finds the entry answering `request`.
    pub fn find(&self, request: &LlmRequest) -> Option<&MockEntry> {
        let hash = prompt_sha256(&request.user_prompt);
        self.entries.iter().find(|e| {
            e.role_tag == request.role_tag
                && e.matcher.prompt_sha256.as_ref().is_none_or(|h| *h == hash)
                && match (request.truncation_index, e.matcher.is_truncation()) {
                    (Some(t), true) => {
                        let (lo, hi) = e.matcher.range();
                        lo <= t && t < hi
                    }
                    (None, false) => true,
                    _ => false,
                }
        })
    }

    /// The full scripted response (before any `max_tokens` cut) as token
    /// records with at most `top_logprobs` alternatives each.
    pub fn respond(&self, request: &LlmRequest) -> Result<Vec<TokenRecord>, LlmError> {
        request.validate()?;
        let k = request.top_logprobs.max(1);
        match self.find(request) {
            Some(entry) => Ok(match &entry.response_tokens {
                Some(tokens) => tokens
                    .iter()
                    .enumerate()
                    .map(|(i, t)| scripted_record(i, t, k))
                    .collect(),
                None => split_text(&entry.response_text),
            }),
            None if request.truncation_index.is_some() => Ok(split_text(NO_ANSWER_TEXT)),
            None => Err(LlmError::NoMatch(format!(
                "role `{}`, prompt sha256 {}",
                request.role_tag.as_str(),
                prompt_sha256(&request.user_prompt)
            ))),
        }
    }
}

fn validate_entry(e: &MockEntry) -> Result<(), String> {
    let m = &e.matcher;
    if m.answer_until_index.is_some() && m.answer_from_index.is_none() {
        return Err("answer_until_index requires answer_from_index".into());
    }
    if let (Some(lo), Some(hi)) = (m.answer_from_index, m.answer_until_index) {
        if hi <= lo {
            return Err("empty answer index range".into());
        }
    }
    if let Some(tokens) = &e.response_tokens {
        let joined: String = tokens.iter().map(|t| t.text.as_str()).collect();
        if joined != e.response_text {
            return Err("response_tokens do not concatenate to response_text".into());
        }
        for (i, t) in tokens.iter().enumerate() {
            let ok = !t.probs.is_empty()
                && t.probs.iter().all(|&p| p > 0.0 && p <= 1.0)
                && t.probs.windows(2).all(|w| w[0] >= w[1])
                && t.probs.iter().sum::<f64>() <= 1.0 + 1e-9
                && t.chosen_prob.is_none_or(|p| p > 0.0 && p <= 1.0);
            if !ok {
                return Err(format!("token {i}: invalid probabilities"));
            }
        }
    }
    Ok(())
}

fn scripted_record(i: usize, t: &ScriptToken, k: usize) -> TokenRecord {
    let id = t.id.unwrap_or(i as u32 + 1);
    TokenRecord {
        index: i,
        token_id: id,
        token_text: t.text.clone(),
        chosen_logprob: t.chosen_prob.unwrap_or(t.probs[0]).ln(),
        top_k: t
            .probs
            .iter()
            .take(k)
            .enumerate()
            .map(|(j, p)| TopKEntry {
                token_id: if j == 0 { id } else { ALT_TOKEN_BASE + j as u32 },
                logprob: p.ln(),
            })
            .collect(),
    }
}

/// Splits text into whitespace-led word pieces that concatenate back to it,
/// each with probability 1.
pub fn split_text(text: &str) -> Vec<TokenRecord> {
    let mut pieces: Vec<String> = Vec::new();
    let mut current = String::new();
    let mut seen_word = false;
    for c in text.chars() {
        if c.is_whitespace() && seen_word {
            pieces.push(std::mem::take(&mut current));
            seen_word = false;
        }
        if !c.is_whitespace() {
            seen_word = true;
        }
        current.push(c);
    }
    if !current.is_empty() {
        pieces.push(current);
    }
    pieces
        .into_iter()
        .enumerate()
        .map(|(i, text)| TokenRecord {
            index: i,
            token_id: i as u32 + 1,
            token_text: text,
            chosen_logprob: 0.0,
            top_k: vec![TopKEntry { token_id: i as u32 + 1, logprob: 0.0 }],
        })
        .collect()
}

/// In-process client answering from a [`MockScript`]. Records every request
/// so tests can assert on prompt content and call counts.
#[derive(Debug, Default)]
pub struct ScriptedLlm {
    script: MockScript,
    calls: AtomicUsize,
    log: Mutex<Vec<LlmRequest>>,
}

impl ScriptedLlm {
    pub fn new(script: MockScript) -> Self {
        ScriptedLlm {
            script,
            calls: AtomicUsize::new(0),
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn script(&self) -> &MockScript {
        &self.script
    }

    pub fn call_count(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn calls_for(&self, role: RoleTag) -> usize {
        self.log.lock().unwrap().iter().filter(|r| r.role_tag == role).count()
    }

    pub fn requests(&self) -> Vec<LlmRequest> {
        self.log.lock().unwrap().clone()
    }

    fn record(&self, request: &LlmRequest) {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.log.lock().unwrap().push(request.clone());
    }
}

/// Applies `max_tokens` to a scripted response.
pub fn cap_tokens(mut tokens: Vec<TokenRecord>, max_tokens: usize) -> (Vec<TokenRecord>, FinishReason) {
    if tokens.len() > max_tokens {
        tokens.truncate(max_tokens);
        (tokens, FinishReason::Length)
    } else {
        (tokens, FinishReason::Stop)
    }
}

impl LlmClient for ScriptedLlm {
    fn complete(&self, request: &LlmRequest) -> Result<Completion, LlmError> {
        self.record(request);
        let (tokens, finish_reason) = cap_tokens(self.script.respond(request)?, request.max_tokens);
        Ok(Completion {
            text: tokens.iter().map(|t| t.token_text.as_str()).collect(),
            tokens: if request.want_logprobs { tokens } else { Vec::new() },
            finish_reason,
        })
    }

    fn stream(
        &self,
        request: &LlmRequest,
        on_token: &mut dyn FnMut(&TokenRecord) -> StreamControl,
    ) -> Result<Completion, LlmError> {
        self.record(request);
        let (tokens, mut finish_reason) = cap_tokens(self.script.respond(request)?, request.max_tokens);
        let mut delivered = Vec::new();
        for t in tokens {
            let control = on_token(&t);
            delivered.push(t);
            if control == StreamControl::Abort {
                finish_reason = FinishReason::Aborted;
                break;
            }
        }
        Ok(Completion {
            text: delivered.iter().map(|t| t.token_text.as_str()).collect(),
            tokens: if request.want_logprobs { delivered } else { Vec::new() },
            finish_reason,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn tok(text: &str, probs: &[f64]) -> ScriptToken {
        ScriptToken { text: text.into(), id: None, probs: probs.to_vec(), chosen_prob: None }
    }

    #[test]
    fn scripted_echo() {
        let script = MockScript::new(vec![MockEntry::text(RoleTag::Extract, Matcher::prompt("P"), "42")]).unwrap();
        let llm = ScriptedLlm::new(script);
        let c = llm.complete(&LlmRequest::new(RoleTag::Extract, "P")).unwrap();
        assert_eq!(c.text, "42");
        assert_eq!(c.finish_reason, FinishReason::Stop);
        assert!(matches!(
            llm.complete(&LlmRequest::new(RoleTag::Extract, "Q")),
            Err(LlmError::NoMatch(_))
        ));
    }

    #[test]
    fn scripted_logprobs() {
        let tokens = vec![tok("a", &[0.9, 0.1]), tok(" b", &[0.9, 0.1])];
        let script = MockScript::new(vec![MockEntry::tokens(RoleTag::Generate, Matcher::any(), tokens)]).unwrap();
        let c = ScriptedLlm::new(script)
            .complete(&LlmRequest::new(RoleTag::Generate, "x").with_logprobs(2))
            .unwrap();
        assert_eq!(c.tokens.len(), 2);
        for t in &c.tokens {
            assert_abs_diff_eq!(t.top_k[0].logprob, -0.105_360_515_657_826_3, epsilon = 1e-9);
            assert_abs_diff_eq!(t.top_k[1].logprob, -std::f64::consts::LN_10, epsilon = 1e-9);
        }
    }

    fn five_tokens() -> ScriptedLlm {
        let tokens = (0..5).map(|i| tok(&format!("t{i} "), &[0.5])).collect();
        ScriptedLlm::new(MockScript::new(vec![MockEntry::tokens(RoleTag::Generate, Matcher::any(), tokens)]).unwrap())
    }

    #[test]
    fn stream_abort_semantics() {
        let llm = five_tokens();
        let req = LlmRequest::new(RoleTag::Generate, "x").with_logprobs(1);
        let mut n = 0;
        let c = llm.stream(&req, &mut |_| { n += 1; StreamControl::Continue }).unwrap();
        assert_eq!((n, c.finish_reason), (5, FinishReason::Stop));

        let mut n = 0;
        let c = llm
            .stream(&req, &mut |_| {
                n += 1;
                if n == 3 { StreamControl::Abort } else { StreamControl::Continue }
            })
            .unwrap();
        assert_eq!((n, c.finish_reason, c.tokens.len()), (3, FinishReason::Aborted, 3));

        let mut n = 0;
        let c = llm.stream(&req, &mut |_| { n += 1; StreamControl::Abort }).unwrap();
        assert_eq!((n, c.tokens.len()), (1, 1));
    }

    #[test]
    fn stream_matches_complete() {
        let llm = five_tokens();
        let req = LlmRequest::new(RoleTag::Generate, "x");
        let mut joined = String::new();
        llm.stream(&req, &mut |t| { joined.push_str(&t.token_text); StreamControl::Continue }).unwrap();
        assert_eq!(joined, llm.complete(&req).unwrap().text);
    }

    #[test]
    fn max_tokens_caps_output() {
        let llm = five_tokens();
        let mut req = LlmRequest::new(RoleTag::Generate, "x");
        req.max_tokens = 2;
        let c = llm.complete(&req).unwrap();
        assert_eq!((c.text.as_str(), c.finish_reason), ("t0 t1 ", FinishReason::Length));
    }

    #[test]
    fn truncation_rule_branches() {
        let script = MockScript::new(vec![MockEntry::text(
            RoleTag::SolveAfterTruncation,
            Matcher::prompt("P").from_index(7),
            "The answer is \\boxed{9}",
        )])
        .unwrap();
        let llm = ScriptedLlm::new(script);
        let at = |i| llm.complete(&LlmRequest::new(RoleTag::SolveAfterTruncation, "P").with_truncation(i)).unwrap().text;
        assert_eq!(at(6), NO_ANSWER_TEXT);
        assert!(at(7).contains("\\boxed{9}"));
        assert!(at(50).contains("\\boxed{9}"));
    }

    #[test]
    fn overlapping_matchers_are_ambiguous() {
        let a = MockEntry::text(RoleTag::Verify, Matcher::prompt("P"), "true");
        let b = MockEntry::text(RoleTag::Verify, Matcher::any(), "false");
        assert_eq!(
            MockScript::new(vec![a.clone(), b]),
            Err(ScriptError::ScriptAmbiguity { first: 1, second: 2 })
        );
        let r1 = MockEntry::text(RoleTag::SolveAfterTruncation, Matcher::prompt("P").from_index(3).until_index(4), "x");
        let r2 = MockEntry::text(RoleTag::SolveAfterTruncation, Matcher::prompt("P").from_index(10), "x");
        let r3 = MockEntry::text(RoleTag::SolveAfterTruncation, Matcher::prompt("P").from_index(12), "x");
        assert!(MockScript::new(vec![a.clone(), r1.clone(), r2.clone()]).is_ok());
        assert!(matches!(
            MockScript::new(vec![r1, r2, r3]),
            Err(ScriptError::ScriptAmbiguity { first: 2, second: 3 })
        ));
    }

    #[test]
    fn script_file_round_trip() {
        let script = MockScript::new(vec![
            MockEntry::text(RoleTag::Extract, Matcher::prompt("P"), "42"),
            MockEntry::tokens(RoleTag::Generate, Matcher::any(), vec![tok("a", &[0.7, 0.2])]),
        ])
        .unwrap();
        let text = script.to_jsonl();
        assert!(text.contains(r#""match":{"prompt_sha256":"#));
        assert_eq!(MockScript::parse(&text).unwrap(), script);
    }

    #[test]
    fn bad_token_scripts_are_rejected() {
        let mut e = MockEntry::tokens(RoleTag::Generate, Matcher::any(), vec![tok("a", &[0.2, 0.7])]);
        assert!(MockScript::new(vec![e.clone()]).is_err());
        e.response_tokens = Some(vec![tok("a", &[0.7])]);
        e.response_text = "b".into();
        assert!(MockScript::new(vec![e]).is_err());
    }

    #[test]
    fn split_text_round_trips() {
        let text = "  hello world\n\nagain ";
        let pieces = split_text(text);
        assert_eq!(pieces.iter().map(|t| t.token_text.as_str()).collect::<String>(), text);
        assert_eq!(pieces[0].token_text, "  hello");
    }
}
