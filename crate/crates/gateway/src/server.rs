//! Scripted mock of the chat-completions endpoint.
//!
//! Responses are a pure function of the request body, the role and
//! truncation headers, and the script, so identical requests get identical
//! bodies.

use std::io::Cursor;
use std::net::{SocketAddr, TcpListener};
use std::path::Path;
use std::sync::Arc;
use std::thread::{self, JoinHandle};

use thiserror::Error;
use tiny_http::{Header, Method, Request, Response, Server, StatusCode};

use optexit_core::llm::mock::{cap_tokens, MockScript, ScriptError};
use optexit_core::llm::{FinishReason, LlmError, LlmRequest, RoleTag, ROLE_HEADER, TRUNCATION_HEADER};
use optexit_core::TokenRecord;

use crate::wire::{
    finish_str, from_record, ChatRequest, ChatResponse, Choice, ChoiceLogprobs, ResponseMessage,
};

const RESPONSE_ID: &str = "chatcmpl-optexit-mock";

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("port {0} is already in use")]
    PortInUse(u16),
    #[error("i/o error: {0}")]
    Io(String),
    #[error(transparent)]
    Script(#[from] ScriptError),
}

pub struct MockServer {
    server: Arc<Server>,
    workers: Vec<JoinHandle<()>>,
    addr: SocketAddr,
}

impl MockServer {
    /// Serves `script` on 127.0.0.1:`port`; port 0 picks a free port.
    pub fn start(script: MockScript, port: u16) -> Result<Self, ServeError> {
        MockServer::start_on("127.0.0.1", script, port, 4)
    }

    pub fn start_file(path: &Path, port: u16) -> Result<Self, ServeError> {
        MockServer::start(MockScript::load(path)?, port)
    }

    pub fn start_on(host: &str, script: MockScript, port: u16, threads: usize) -> Result<Self, ServeError> {
        let listener = TcpListener::bind((host, port)).map_err(|e| match e.kind() {
            std::io::ErrorKind::AddrInUse => ServeError::PortInUse(port),
            _ => ServeError::Io(e.to_string()),
        })?;
        let addr = listener.local_addr().map_err(|e| ServeError::Io(e.to_string()))?;
        let server = Arc::new(Server::from_listener(listener, None).map_err(|e| ServeError::Io(e.to_string()))?);
        let script = Arc::new(script);
        let workers = (0..threads.max(1))
            .map(|_| {
                let (server, script) = (server.clone(), script.clone());
                thread::spawn(move || {
                    while let Ok(req) = server.recv() {
                        handle(&script, req);
                    }
                })
            })
            .collect();
        Ok(MockServer { server, workers, addr })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Blocks until the server stops.
    pub fn wait(mut self) {
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        for _ in 0..self.workers.len() {
            self.server.unblock();
        }
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

fn header(name: &str, value: &str) -> Header {
    Header::from_bytes(name.as_bytes(), value.as_bytes()).expect("valid header")
}

fn error_body(message: &str) -> String {
    serde_json::json!({ "error": { "message": message } }).to_string()
}

fn reply(req: Request, status: u16, content_type: &str, body: Vec<u8>) {
    let len = body.len();
    let resp = Response::new(
        StatusCode(status),
        vec![header("Content-Type", content_type)],
        Cursor::new(body),
        Some(len),
        None,
    );
    let _ = req.respond(resp);
}

fn header_value<'a>(req: &'a Request, name: &str) -> Option<&'a str> {
    req.headers()
        .iter()
        .find(|h| h.field.as_str().as_str().eq_ignore_ascii_case(name))
        .map(|h| h.value.as_str())
}

/// Maps a wire request plus headers to the internal request.
pub fn to_llm_request(body: &ChatRequest, role: Option<&str>, truncation: Option<&str>) -> Result<LlmRequest, String> {
    let role_tag: RoleTag = role.map_or(Ok(RoleTag::Generate), str::parse)?;
    let mut r = LlmRequest::new(role_tag, "");
    for m in &body.messages {
        match m.role.as_str() {
            "system" => r.system_prompt = m.content.clone(),
            "user" => r.user_prompt = m.content.clone(),
            "assistant" => r.assistant_prefix = Some(m.content.clone()),
            other => return Err(format!("unsupported message role `{other}`")),
        }
    }
    if body.messages.last().is_some_and(|m| m.role != "assistant") {
        r.assistant_prefix = None;
    }
    r.max_tokens = body.max_tokens;
    r.temperature = body.temperature;
    r.want_logprobs = body.logprobs;
    r.top_logprobs = body.top_logprobs.unwrap_or(0);
    if let Some(t) = truncation {
        r.truncation_index = Some(t.trim().parse().map_err(|_| format!("bad {TRUNCATION_HEADER} `{t}`"))?);
    }
    Ok(r)
}

fn full_body(model: &str, tokens: &[TokenRecord], finish: FinishReason, logprobs: bool) -> String {
    let resp = ChatResponse {
        id: RESPONSE_ID.into(),
        object: "chat.completion".into(),
        created: 0,
        model: model.into(),
        choices: vec![Choice {
            index: 0,
            message: Some(ResponseMessage {
                role: Some("assistant".into()),
                content: Some(tokens.iter().map(|t| t.token_text.as_str()).collect()),
            }),
            delta: None,
            logprobs: logprobs.then(|| ChoiceLogprobs { content: Some(tokens.iter().map(from_record).collect()) }),
            finish_reason: Some(finish_str(finish).into()),
        }],
    };
    serde_json::to_string(&resp).expect("response serializes")
}

fn sse_body(model: &str, tokens: &[TokenRecord], finish: FinishReason, logprobs: bool) -> String {
    let chunk = |delta: ResponseMessage, lp: Option<ChoiceLogprobs>, finish: Option<String>| {
        let c = ChatResponse {
            id: RESPONSE_ID.into(),
            object: "chat.completion.chunk".into(),
            created: 0,
            model: model.into(),
            choices: vec![Choice { index: 0, message: None, delta: Some(delta), logprobs: lp, finish_reason: finish }],
        };
        format!("data: {}\n\n", serde_json::to_string(&c).expect("chunk serializes"))
    };
    let mut out = String::new();
    for t in tokens {
        let lp = logprobs.then(|| ChoiceLogprobs { content: Some(vec![from_record(t)]) });
        out.push_str(&chunk(ResponseMessage { role: None, content: Some(t.token_text.clone()) }, lp, None));
    }
    out.push_str(&chunk(ResponseMessage::default(), None, Some(finish_str(finish).into())));
    out.push_str("data: [DONE]\n\n");
    out
}

fn handle(script: &MockScript, mut req: Request) {
    let path = req.url().split('?').next().unwrap_or("").to_string();
    if *req.method() != Method::Post || !path.ends_with("/chat/completions") {
        reply(req, 404, "application/json", error_body("not found").into_bytes());
        return;
    }
    let mut raw = Vec::new();
    if let Err(e) = req.as_reader().read_to_end(&mut raw) {
        reply(req, 400, "application/json", error_body(&e.to_string()).into_bytes());
        return;
    }
    let body: ChatRequest = match serde_json::from_slice(&raw) {
        Ok(b) => b,
        Err(e) => return reply(req, 400, "application/json", error_body(&e.to_string()).into_bytes()),
    };
    let llm_req = match to_llm_request(&body, header_value(&req, ROLE_HEADER), header_value(&req, TRUNCATION_HEADER)) {
        Ok(r) => r,
        Err(e) => return reply(req, 400, "application/json", error_body(&e).into_bytes()),
    };
    let tokens = match script.respond(&llm_req) {
        Ok(t) => t,
        Err(e @ LlmError::NoMatch(_)) => {
            return reply(req, 404, "application/json", error_body(&e.to_string()).into_bytes())
        }
        Err(e) => return reply(req, 400, "application/json", error_body(&e.to_string()).into_bytes()),
    };
    let (tokens, finish) = cap_tokens(tokens, llm_req.max_tokens);
    if body.stream {
        let text = sse_body(&body.model, &tokens, finish, body.logprobs);
        reply(req, 200, "text/event-stream", text.into_bytes());
    } else {
        let text = full_body(&body.model, &tokens, finish, body.logprobs);
        reply(req, 200, "application/json", text.into_bytes());
    }
}
