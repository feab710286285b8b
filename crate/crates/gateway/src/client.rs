//! Blocking client for OpenAI-compatible chat-completion endpoints.

use std::io::{BufRead, BufReader};
use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

use rand::Rng;
use reqwest::blocking::{Client, Response};

use optexit_core::llm::{
    Completion, FinishReason, LlmClient, LlmError, LlmRequest, StreamControl, API_KEY_ENV, ROLE_HEADER,
    TRUNCATION_HEADER,
};
use optexit_core::TokenRecord;

use crate::wire::{bare_record, parse_finish, to_record, ChatRequest, ChatResponse, Message};

/// Exponential backoff with full jitter: before retry `n` the client sleeps a
/// uniform draw from `[0, base * factor^n]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    pub max_retries: usize,
    pub base: Duration,
    pub factor: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 3,
            base: Duration::from_millis(250),
            factor: 2.0,
        }
    }
}

impl RetryPolicy {
    pub fn cap(&self, attempt: usize) -> Duration {
        self.base.mul_f64(self.factor.powi(attempt as i32))
    }

    fn delay(&self, attempt: usize) -> Duration {
        let cap = self.cap(attempt).as_secs_f64();
        Duration::from_secs_f64(rand::thread_rng().gen_range(0.0..=cap))
    }
}

#[derive(Debug, Clone)]
pub struct HttpConfig {
    /// Base URL such as `http://127.0.0.1:8000`; `/v1/chat/completions` is
    /// appended unless already present.
    pub endpoint: String,
    pub model: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
    pub retry: RetryPolicy,
    pub max_inflight: usize,
}

impl HttpConfig {
    /// Config for `endpoint` with the API key taken from the environment.
    pub fn new(endpoint: impl Into<String>) -> Self {
        HttpConfig {
            endpoint: endpoint.into(),
            model: "default".into(),
            api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
            timeout: Duration::from_secs(600),
            retry: RetryPolicy::default(),
            max_inflight: 8,
        }
    }

    pub fn chat_url(&self) -> String {
        let base = self.endpoint.trim_end_matches('/');
        if base.ends_with("/chat/completions") {
            base.to_string()
        } else if base.ends_with("/v1") {
            format!("{base}/chat/completions")
        } else {
            format!("{base}/v1/chat/completions")
        }
    }
}

/// Counting semaphore bounding in-flight requests.
#[derive(Debug)]
pub(crate) struct Semaphore {
    free: Mutex<usize>,
    cv: Condvar,
}

pub(crate) struct Permit<'a>(&'a Semaphore);

impl Semaphore {
    pub(crate) fn new(n: usize) -> Self {
        Semaphore { free: Mutex::new(n.max(1)), cv: Condvar::new() }
    }

    pub(crate) fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().unwrap();
        while *free == 0 {
            free = self.cv.wait(free).unwrap();
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap() += 1;
        self.0.cv.notify_one();
    }
}

fn transient(e: &LlmError) -> bool {
    match e {
        LlmError::Timeout => true,
        LlmError::Transport { status: None, .. } => true,
        LlmError::Transport { status: Some(s), .. } => *s == 429 || *s >= 500,
        _ => false,
    }
}

fn transport(e: reqwest::Error) -> LlmError {
    if e.is_timeout() {
        LlmError::Timeout
    } else {
        LlmError::Transport { status: e.status().map(|s| s.as_u16()), message: e.to_string() }
    }
}

pub struct HttpLlm {
    config: HttpConfig,
    url: String,
    client: Client,
    inflight: Semaphore,
}

impl std::fmt::Debug for HttpLlm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpLlm").field("url", &self.url).finish()
    }
}

impl HttpLlm {
    pub fn new(config: HttpConfig) -> Result<Self, LlmError> {
        let client = Client::builder()
            .timeout(config.timeout)
            .connect_timeout(Duration::from_secs(10))
            .build()
            .map_err(transport)?;
        Ok(HttpLlm {
            url: config.chat_url(),
            inflight: Semaphore::new(config.max_inflight),
            config,
            client,
        })
    }

    pub fn config(&self) -> &HttpConfig {
        &self.config
    }

    fn body(&self, request: &LlmRequest, stream: bool) -> ChatRequest {
        let mut messages = Vec::new();
        if !request.system_prompt.is_empty() {
            messages.push(Message { role: "system".into(), content: request.system_prompt.clone() });
        }
        messages.push(Message { role: "user".into(), content: request.user_prompt.clone() });
        if let Some(prefix) = &request.assistant_prefix {
            messages.push(Message { role: "assistant".into(), content: prefix.clone() });
        }
        ChatRequest {
            model: self.config.model.clone(),
            messages,
            max_tokens: request.max_tokens,
            temperature: request.temperature,
            logprobs: request.want_logprobs,
            top_logprobs: request.want_logprobs.then_some(request.top_logprobs),
            stream,
        }
    }

    fn send_once(&self, request: &LlmRequest, body: &ChatRequest) -> Result<Response, LlmError> {
        let mut rb = self
            .client
            .post(&self.url)
            .header(ROLE_HEADER, request.role_tag.as_str())
            .json(body);
        if let Some(t) = request.truncation_index {
            rb = rb.header(TRUNCATION_HEADER, t.to_string());
        }
        if let Some(key) = &self.config.api_key {
            rb = rb.bearer_auth(key);
        }
        let resp = rb.send().map_err(transport)?;
        let status = resp.status();
        if status.is_success() {
            return Ok(resp);
        }
        let message = resp.text().unwrap_or_default();
        Err(LlmError::Transport { status: Some(status.as_u16()), message })
    }

    fn retrying<T>(&self, mut f: impl FnMut() -> Result<T, LlmError>) -> Result<T, LlmError> {
        let mut attempt = 0;
        loop {
            match f() {
                Err(e) if transient(&e) && attempt < self.config.retry.max_retries => {
                    thread::sleep(self.config.retry.delay(attempt));
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

fn parse_completion(request: &LlmRequest, raw: &str) -> Result<Completion, LlmError> {
    let resp: ChatResponse =
        serde_json::from_str(raw).map_err(|e| LlmError::MalformedResponse(e.to_string()))?;
    let choice = resp
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| LlmError::MalformedResponse("no choices".into()))?;
    let text = choice.message.and_then(|m| m.content).unwrap_or_default();
    let finish_reason = choice.finish_reason.as_deref().map_or(FinishReason::Stop, parse_finish);
    let tokens = if request.want_logprobs {
        let content = choice.logprobs.and_then(|l| l.content).unwrap_or_default();
        if content.is_empty() && !text.is_empty() {
            return Err(LlmError::MalformedResponse("logprobs requested but missing".into()));
        }
        content.iter().enumerate().map(|(i, lp)| to_record(i, lp)).collect()
    } else {
        Vec::new()
    };
    Ok(Completion { text, tokens, finish_reason })
}

impl LlmClient for HttpLlm {
    fn complete(&self, request: &LlmRequest) -> Result<Completion, LlmError> {
        request.validate()?;
        let _permit = self.inflight.acquire();
        let body = self.body(request, false);
        self.retrying(|| {
            let raw = self.send_once(request, &body)?.text().map_err(transport)?;
            parse_completion(request, &raw)
        })
    }

    /// Streams server-sent events. Only establishing the stream is retried;
    /// a failure after tokens were delivered is returned as is.
    fn stream(
        &self,
        request: &LlmRequest,
        on_token: &mut dyn FnMut(&TokenRecord) -> StreamControl,
    ) -> Result<Completion, LlmError> {
        request.validate()?;
        let _permit = self.inflight.acquire();
        let body = self.body(request, true);
        let resp = self.retrying(|| self.send_once(request, &body))?;

        let mut delivered: Vec<TokenRecord> = Vec::new();
        let mut finish: Option<FinishReason> = None;
        let mut reader = BufReader::new(resp);
        let mut line = String::new();
        'events: loop {
            line.clear();
            let n = reader
                .read_line(&mut line)
                .map_err(|e| LlmError::Transport { status: None, message: e.to_string() })?;
            if n == 0 {
                break;
            }
            let Some(data) = line.trim_end().strip_prefix("data:") else {
                continue;
            };
            let data = data.trim_start();
            if data == "[DONE]" {
                break;
            }
            let chunk: ChatResponse =
                serde_json::from_str(data).map_err(|e| LlmError::MalformedResponse(e.to_string()))?;
            let Some(choice) = chunk.choices.into_iter().next() else {
                continue;
            };
            let lps = choice.logprobs.and_then(|l| l.content).unwrap_or_default();
            let records: Vec<TokenRecord> = if !lps.is_empty() {
                lps.iter().enumerate().map(|(j, lp)| to_record(delivered.len() + j, lp)).collect()
            } else {
                match choice.delta.and_then(|d| d.content) {
                    Some(text) if !text.is_empty() => {
                        if request.want_logprobs {
                            return Err(LlmError::MalformedResponse("logprobs requested but missing".into()));
                        }
                        vec![bare_record(delivered.len(), &text)]
                    }
                    _ => Vec::new(),
                }
            };
            for r in records {
                let control = on_token(&r);
                delivered.push(r);
                if control == StreamControl::Abort {
                    finish = Some(FinishReason::Aborted);
                    break 'events;
                }
            }
            if let Some(f) = choice.finish_reason.as_deref() {
                finish = Some(parse_finish(f));
            }
        }
        // Dropping the reader closes the connection, which is how an abort
        // reaches the server.
        drop(reader);
        let finish_reason = finish.ok_or_else(|| LlmError::Transport {
            status: None,
            message: "stream ended before a finish reason".into(),
        })?;
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
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    #[test]
    fn urls() {
        let c = |e: &str| HttpConfig::new(e).chat_url();
        assert_eq!(c("http://h:1"), "http://h:1/v1/chat/completions");
        assert_eq!(c("http://h:1/v1/"), "http://h:1/v1/chat/completions");
        assert_eq!(c("http://h:1/x/chat/completions"), "http://h:1/x/chat/completions");
    }

    #[test]
    fn backoff_caps_grow_geometrically() {
        let p = RetryPolicy::default();
        assert_eq!(p.cap(0), Duration::from_millis(250));
        assert_eq!(p.cap(2), Duration::from_millis(1000));
        for a in 0..3 {
            assert!(p.delay(a) <= p.cap(a));
        }
    }

    #[test]
    fn retry_classes() {
        assert!(transient(&LlmError::Timeout));
        assert!(transient(&LlmError::Transport { status: Some(503), message: String::new() }));
        assert!(transient(&LlmError::Transport { status: Some(429), message: String::new() }));
        assert!(!transient(&LlmError::Transport { status: Some(400), message: String::new() }));
        assert!(!transient(&LlmError::MalformedResponse(String::new())));
    }

    #[test]
    fn semaphore_bounds_concurrency() {
        let sem = Arc::new(Semaphore::new(3));
        let live = Arc::new(AtomicUsize::new(0));
        let peak = Arc::new(AtomicUsize::new(0));
        let handles: Vec<_> = (0..12)
            .map(|_| {
                let (sem, live, peak) = (sem.clone(), live.clone(), peak.clone());
                thread::spawn(move || {
                    let _p = sem.acquire();
                    let now = live.fetch_add(1, Ordering::SeqCst) + 1;
                    peak.fetch_max(now, Ordering::SeqCst);
                    thread::sleep(Duration::from_millis(5));
                    live.fetch_sub(1, Ordering::SeqCst);
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        assert!(peak.load(Ordering::SeqCst) <= 3);
    }

    #[test]
    fn missing_logprobs_is_malformed() {
        let req = LlmRequest::new(optexit_core::llm::RoleTag::Generate, "p").with_logprobs(2);
        let raw = r#"{"choices":[{"message":{"content":"hi"},"finish_reason":"stop"}]}"#;
        assert!(matches!(parse_completion(&req, raw), Err(LlmError::MalformedResponse(_))));
        let plain = LlmRequest::new(optexit_core::llm::RoleTag::Generate, "p");
        assert_eq!(parse_completion(&plain, raw).unwrap().text, "hi");
    }
}
