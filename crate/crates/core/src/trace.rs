//! Trace data model, line-delimited file formats and label assignment.

use std::collections::HashSet;
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default number of top-K alternatives stored per token.
pub const DEFAULT_TOP_K: usize = 20;

pub const THINK_OPEN: &str = "<think>";
pub const THINK_CLOSE: &str = "</think>";

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("file not found: {0}")]
    MissingFile(PathBuf),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("schema error at line {line}, field `{field}`: {message}")]
    Schema {
        line: usize,
        field: String,
        message: String,
    },
    #[error("duplicate trace_id `{id}` at line {line}")]
    DuplicateTraceId { line: usize, id: String },
    #[error("answer position for `{0}` is not verified")]
    UnverifiedAnswer(String),
    #[error("token index {index} out of range for trace of length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("trace `{0}` has an empty think region")]
    EmptyThinkRegion(String),
}

impl TraceError {
    fn schema(line: usize, field: &str, message: impl Into<String>) -> Self {
        TraceError::Schema {
            line,
            field: field.to_string(),
            message: message.into(),
        }
    }
}

/// One top-K alternative at a position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TopKEntry {
    pub token_id: u32,
    /// Natural-log probability, always `<= 0`.
    pub logprob: f64,
}

/// A generated token with its log-probability and the top-K slice of the
/// next-token distribution at that position.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenRecord {
    pub index: usize,
    pub token_id: u32,
    pub token_text: String,
    pub chosen_logprob: f64,
    /// Sorted by logprob, descending.
    pub top_k: Vec<TopKEntry>,
}

impl TokenRecord {
    pub fn char_len(&self) -> usize {
        self.token_text.chars().count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub trace_id: String,
    pub prompt: String,
    pub cot_tokens: Vec<TokenRecord>,
    pub solution_text: String,
    pub final_answer: Option<String>,
    pub source: String,
    pub model: String,
    /// Top-K width shared by every token in the trace.
    pub k: usize,
}

impl Trace {
    /// Number of CoT tokens.
    pub fn len(&self) -> usize {
        self.cot_tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cot_tokens.is_empty()
    }

    /// Decoded CoT text: the concatenation of every stored token text.
    pub fn cot_text(&self) -> String {
        self.cot_tokens.iter().map(|t| t.token_text.as_str()).collect()
    }

    /// Positions strictly inside the think region.
    pub fn think_region(&self) -> Range<usize> {
        think_region(&self.cot_tokens)
    }

    /// Decoded text of the reasoning prefix holding the first `len` tokens,
    /// with think markers dropped.
    pub fn prefix_text(&self, len: usize) -> String {
        let region = self.think_region();
        self.cot_tokens[..len.min(self.len())]
            .iter()
            .enumerate()
            .filter(|(i, _)| region.contains(i))
            .map(|(_, t)| t.token_text.as_str())
            .collect()
    }
}

/// Span strictly between a `<think>` token and the following `</think>` token.
/// A missing opener starts the region at 0; a missing closer ends it at M.
pub fn think_region(tokens: &[TokenRecord]) -> Range<usize> {
    let start = tokens
        .iter()
        .position(|t| t.token_text.trim() == THINK_OPEN)
        .map_or(0, |p| p + 1);
    let end = tokens[start.min(tokens.len())..]
        .iter()
        .position(|t| t.token_text.trim() == THINK_CLOSE)
        .map_or(tokens.len(), |p| p + start);
    start..end.max(start)
}

/// Verified earliest arrival of the final answer inside a trace's CoT.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerPosition {
    #[serde(skip)]
    pub trace_id: String,
    pub span_text: String,
    pub char_start: usize,
    pub char_end: usize,
    pub token_index: usize,
    pub verified: bool,
    pub retries_used: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledTrace {
    pub trace: Trace,
    pub answer: AnswerPosition,
    /// `labels[i] == 1` iff `i >= answer.token_index`.
    pub labels: Vec<u8>,
    pub loss_mask: Vec<u8>,
}

/// Builds per-token labels (1 from the answer position onward) and the
/// think-region loss mask.
pub fn assign_labels(trace: Trace, answer: AnswerPosition) -> Result<LabeledTrace, TraceError> {
    if !answer.verified {
        return Err(TraceError::UnverifiedAnswer(trace.trace_id.clone()));
    }
    let m = trace.len();
    if answer.token_index >= m {
        return Err(TraceError::IndexOutOfRange {
            index: answer.token_index,
            len: m,
        });
    }
    let labels = (0..m).map(|i| u8::from(i >= answer.token_index)).collect();
    let region = trace.think_region();
    let loss_mask: Vec<u8> = (0..m).map(|i| u8::from(region.contains(&i))).collect();
    if !loss_mask.contains(&1) {
        return Err(TraceError::EmptyThinkRegion(trace.trace_id.clone()));
    }
    let answer = AnswerPosition {
        trace_id: trace.trace_id.clone(),
        ..answer
    };
    Ok(LabeledTrace {
        trace,
        answer,
        labels,
        loss_mask,
    })
}

// ---------------------------------------------------------------------------
// Wire format

#[derive(Serialize, Deserialize)]
struct TokenWire {
    i: usize,
    id: u32,
    text: String,
    lp: f64,
    topk: Vec<(u32, f64)>,
}

#[derive(Serialize, Deserialize)]
struct TraceWire {
    trace_id: String,
    prompt: String,
    source: String,
    model: String,
    k: usize,
    solution_text: String,
    final_answer: Option<String>,
    cot_tokens: Vec<TokenWire>,
}

#[derive(Serialize, Deserialize)]
struct LabeledWire {
    #[serde(flatten)]
    trace: TraceWire,
    answer: AnswerPosition,
    labels: Vec<u8>,
    loss_mask: Vec<u8>,
}

impl From<&Trace> for TraceWire {
    fn from(t: &Trace) -> Self {
        TraceWire {
            trace_id: t.trace_id.clone(),
            prompt: t.prompt.clone(),
            source: t.source.clone(),
            model: t.model.clone(),
            k: t.k,
            solution_text: t.solution_text.clone(),
            final_answer: t.final_answer.clone(),
            cot_tokens: t
                .cot_tokens
                .iter()
                .map(|r| TokenWire {
                    i: r.index,
                    id: r.token_id,
                    text: r.token_text.clone(),
                    lp: r.chosen_logprob,
                    topk: r.top_k.iter().map(|e| (e.token_id, e.logprob)).collect(),
                })
                .collect(),
        }
    }
}

fn trace_from_wire(w: TraceWire, line: usize) -> Result<Trace, TraceError> {
    if w.trace_id.is_empty() {
        return Err(TraceError::schema(line, "trace_id", "empty"));
    }
    if w.cot_tokens.is_empty() {
        return Err(TraceError::schema(line, "cot_tokens", "M must be >= 1"));
    }
    if w.k == 0 {
        return Err(TraceError::schema(line, "k", "must be >= 1"));
    }
    let mut tokens = Vec::with_capacity(w.cot_tokens.len());
    for (pos, t) in w.cot_tokens.into_iter().enumerate() {
        if t.i != pos {
            return Err(TraceError::schema(
                line,
                "i",
                format!("expected index {pos}, found {}", t.i),
            ));
        }
        if !t.lp.is_finite() || t.lp > 0.0 {
            return Err(TraceError::schema(line, "lp", format!("invalid logprob {}", t.lp)));
        }
        if t.topk.len() != w.k {
            return Err(TraceError::schema(
                line,
                "top_k",
                format!("token {pos} has {} entries, trace k = {}", t.topk.len(), w.k),
            ));
        }
        if t.topk.iter().any(|&(_, lp)| !lp.is_finite() || lp > 0.0) {
            return Err(TraceError::schema(line, "top_k", format!("token {pos}: invalid logprob")));
        }
        if t.topk.windows(2).any(|p| p[0].1 < p[1].1) {
            return Err(TraceError::schema(
                line,
                "top_k",
                format!("token {pos}: not sorted descending"),
            ));
        }
        tokens.push(TokenRecord {
            index: pos,
            token_id: t.id,
            token_text: t.text,
            chosen_logprob: t.lp,
            top_k: t
                .topk
                .into_iter()
                .map(|(token_id, logprob)| TopKEntry { token_id, logprob })
                .collect(),
        });
    }
    Ok(Trace {
        trace_id: w.trace_id,
        prompt: w.prompt,
        cot_tokens: tokens,
        solution_text: w.solution_text,
        final_answer: w.final_answer,
        source: w.source,
        model: w.model,
        k: w.k,
    })
}

fn field_of(err: &serde_json::Error) -> String {
    // serde_json reports `missing field `x`` / `unknown field `x``; recover `x`.
    let msg = err.to_string();
    msg.split('`').nth(1).unwrap_or("record").to_string()
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>, TraceError> {
    let file = fs::File::open(path).map_err(|e| match e.kind() {
        io::ErrorKind::NotFound => TraceError::MissingFile(path.to_path_buf()),
        _ => TraceError::Io(e),
    })?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push((n + 1, line));
        }
    }
    Ok(out)
}

/// Serializes one trace as a single JSON line (no trailing newline).
pub fn trace_to_line(trace: &Trace) -> String {
    serde_json::to_string(&TraceWire::from(trace)).expect("trace serializes")
}

pub fn trace_from_line(line: &str, line_no: usize) -> Result<Trace, TraceError> {
    let wire: TraceWire = serde_json::from_str(line)
        .map_err(|e| TraceError::schema(line_no, &field_of(&e), e.to_string()))?;
    trace_from_wire(wire, line_no)
}

/// Loads a line-delimited trace file, preserving file order.
pub fn load_traces(path: &Path) -> Result<Vec<Trace>, TraceError> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (n, line) in read_lines(path)? {
        let trace = trace_from_line(&line, n)?;
        if !seen.insert(trace.trace_id.clone()) {
            return Err(TraceError::DuplicateTraceId {
                line: n,
                id: trace.trace_id,
            });
        }
        out.push(trace);
    }
    Ok(out)
}

pub fn save_traces(path: &Path, traces: &[Trace]) -> Result<(), TraceError> {
    let mut buf = Vec::new();
    for t in traces {
        buf.extend_from_slice(trace_to_line(t).as_bytes());
        buf.push(b'\n');
    }
    write_atomic(path, &buf)
}

pub fn labeled_to_line(lt: &LabeledTrace) -> String {
    let wire = LabeledWire {
        trace: TraceWire::from(&lt.trace),
        answer: lt.answer.clone(),
        labels: lt.labels.clone(),
        loss_mask: lt.loss_mask.clone(),
    };
    serde_json::to_string(&wire).expect("labeled trace serializes")
}

pub fn labeled_from_line(line: &str, line_no: usize) -> Result<LabeledTrace, TraceError> {
    let wire: LabeledWire = serde_json::from_str(line)
        .map_err(|e| TraceError::schema(line_no, &field_of(&e), e.to_string()))?;
    let trace = trace_from_wire(wire.trace, line_no)?;
    let m = trace.len();
    let mut answer = wire.answer;
    answer.trace_id = trace.trace_id.clone();
    if !answer.verified {
        return Err(TraceError::schema(line_no, "verified", "unverified answer in dataset"));
    }
    if answer.token_index >= m {
        return Err(TraceError::schema(line_no, "token_index", "out of range"));
    }
    if answer.char_start >= answer.char_end {
        return Err(TraceError::schema(line_no, "char_start", "char_start must be < char_end"));
    }
    if wire.labels.len() != m || wire.labels.iter().any(|&b| b > 1) {
        return Err(TraceError::schema(line_no, "labels", "length or value mismatch"));
    }
    if wire
        .labels
        .iter()
        .enumerate()
        .any(|(i, &b)| (b == 1) != (i >= answer.token_index))
    {
        return Err(TraceError::schema(line_no, "labels", "inconsistent with token_index"));
    }
    if wire.loss_mask.len() != m || wire.loss_mask.iter().any(|&b| b > 1) {
        return Err(TraceError::schema(line_no, "loss_mask", "length or value mismatch"));
    }
    if !wire.loss_mask.contains(&1) {
        return Err(TraceError::schema(line_no, "loss_mask", "no active position"));
    }
    Ok(LabeledTrace {
        trace,
        answer,
        labels: wire.labels,
        loss_mask: wire.loss_mask,
    })
}

pub fn load_labeled(path: &Path) -> Result<Vec<LabeledTrace>, TraceError> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (n, line) in read_lines(path)? {
        let lt = labeled_from_line(&line, n)?;
        if !seen.insert(lt.trace.trace_id.clone()) {
            return Err(TraceError::DuplicateTraceId {
                line: n,
                id: lt.trace.trace_id,
            });
        }
        out.push(lt);
    }
    Ok(out)
}

pub fn save_labeled(path: &Path, data: &[LabeledTrace]) -> Result<(), TraceError> {
    let mut buf = Vec::new();
    for lt in data {
        buf.extend_from_slice(labeled_to_line(lt).as_bytes());
        buf.push(b'\n');
    }
    write_atomic(path, &buf)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), TraceError> {
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    f.flush()?;
    Ok(())
}
