//! Answer-position curation.
//!
//! For each trace: extract the final answer from the solution, ask a model for
//! the span of the CoT where that answer first arrives, ask it to verify the
//! span, retry with the rejected spans as feedback, then locate the verified
//! span in the CoT text and convert its end to a token index.

pub mod fuzzy;
pub mod offsets;
pub mod prompts;

use std::fmt::Write as _;

use thiserror::Error;

use crate::answer::{normalize_answer, parse_boxed};
use crate::exec::{self, ExecMode};
use crate::llm::{LlmClient, LlmError, LlmRequest, RoleTag};
use crate::trace::{assign_labels, AnswerPosition, LabeledTrace, Trace, TraceError};

pub use fuzzy::{fuzzy_match_span, FuzzyError, SpanMatch};
pub use offsets::{char_to_token, OutOfRange};
pub use prompts::Prompts;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CurationError {
    #[error("empty solution text")]
    EmptySolution,
    #[error("model returned no extractable answer")]
    LlmRefusal,
    #[error("trace has no final answer")]
    MissingFinalAnswer,
    #[error("no verified span after {attempts} attempts")]
    RetriesExhausted {
        attempts: usize,
        rejected_spans: Vec<String>,
    },
    #[error("verified span not found in CoT (best score {0:.4})")]
    SpanNotFound(f64),
    #[error("empty span")]
    EmptySpan,
    #[error(transparent)]
    Offset(#[from] OutOfRange),
    #[error("llm: {0}")]
    Llm(#[from] LlmError),
    #[error("labels: {0}")]
    Labels(String),
    #[error("every trace failed curation; first failure: {0}")]
    AllFailed(Box<CurationError>),
    #[error("no input traces")]
    EmptyInput,
}

impl CurationError {
    /// Short status tag used in curation reports.
    pub fn status(&self) -> &'static str {
        match self {
            CurationError::EmptySolution => "empty_solution",
            CurationError::LlmRefusal => "llm_refusal",
            CurationError::MissingFinalAnswer => "missing_final_answer",
            CurationError::RetriesExhausted { .. } => "retries_exhausted",
            CurationError::SpanNotFound(_) | CurationError::EmptySpan => "span_not_found",
            CurationError::Offset(_) => "offset_error",
            CurationError::Llm(_) => "llm_error",
            CurationError::Labels(_) => "label_error",
            CurationError::AllFailed(_) | CurationError::EmptyInput => "failed",
        }
    }
}

#[derive(Debug, Clone)]
pub struct CurationConfig {
    pub max_retries: usize,
    pub min_fuzzy_score: f64,
    pub prompts: Prompts,
    pub max_tokens: usize,
    pub temperature: f64,
    pub exec: ExecMode,
}

impl Default for CurationConfig {
    fn default() -> Self {
        CurationConfig {
            max_retries: 4,
            min_fuzzy_score: 0.9,
            prompts: Prompts::default(),
            max_tokens: 1024,
            temperature: 0.0,
            exec: ExecMode::default(),
        }
    }
}

/// Spans rejected by verification, in order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeedbackLog {
    pub rejected_spans: Vec<String>,
}

fn ask(llm: &dyn LlmClient, config: &CurationConfig, role: RoleTag, prompt: String) -> Result<String, LlmError> {
    let mut req = LlmRequest::new(role, prompt);
    req.system_prompt = config.prompts.system.clone();
    req.max_tokens = config.max_tokens;
    req.temperature = config.temperature;
    Ok(llm.complete(&req)?.text)
}

/// Final answer of a solution. A `\boxed{}` marker is parsed locally; the
/// model is only consulted when there is none.
pub fn extract_answer(
    solution_text: &str,
    llm: &dyn LlmClient,
    config: &CurationConfig,
) -> Result<String, CurationError> {
    if solution_text.trim().is_empty() {
        return Err(CurationError::EmptySolution);
    }
    if let Some(a) = parse_boxed(solution_text) {
        return Ok(a);
    }
    let reply = ask(llm, config, RoleTag::Extract, config.prompts.extract_prompt(solution_text))?;
    let answer = parse_boxed(&reply).unwrap_or_else(|| normalize_answer(&reply));
    if answer.is_empty() || answer.eq_ignore_ascii_case("none") {
        return Err(CurationError::LlmRefusal);
    }
    Ok(answer)
}

fn parse_verdict(reply: &str) -> bool {
    let r = reply.trim().trim_start_matches(|c: char| !c.is_alphanumeric()).to_lowercase();
    r.starts_with("true") || r.starts_with("yes")
}

/// Identify-verify loop with feedback, followed by fuzzy location and
/// conversion of the span end to a token index.
pub fn locate_answer(
    trace: &Trace,
    config: &CurationConfig,
    llm: &dyn LlmClient,
) -> Result<AnswerPosition, CurationError> {
    let answer = trace
        .final_answer
        .as_deref()
        .ok_or(CurationError::MissingFinalAnswer)?;
    let cot = trace.cot_text();
    let mut log = FeedbackLog::default();
    for attempt in 0..config.max_retries.max(1) {
        let prompt = config.prompts.identify_prompt(answer, &cot, &log.rejected_spans);
        let span = ask(llm, config, RoleTag::Identify, prompt)?.trim().to_string();
        let verified = !span.is_empty() && {
            let reply = ask(llm, config, RoleTag::Verify, config.prompts.verify_prompt(&span, answer))?;
            parse_verdict(&reply)
        };
        if !verified {
            log.rejected_spans.push(span);
            continue;
        }
        let found = match fuzzy_match_span(&span, &cot, config.min_fuzzy_score) {
            Ok(m) => m,
            Err(FuzzyError::BelowThreshold(s)) => return Err(CurationError::SpanNotFound(s)),
            Err(FuzzyError::EmptySpan) => return Err(CurationError::EmptySpan),
        };
        let token_index = char_to_token(found.char_end, &trace.cot_tokens)?;
        return Ok(AnswerPosition {
            trace_id: trace.trace_id.clone(),
            span_text: span,
            char_start: found.char_start,
            char_end: found.char_end,
            token_index,
            verified: true,
            retries_used: attempt,
        });
    }
    Err(CurationError::RetriesExhausted {
        attempts: config.max_retries.max(1),
        rejected_spans: log.rejected_spans,
    })
}

/// Runs extraction and location for one trace and builds its labels.
pub fn curate_trace(
    trace: &Trace,
    config: &CurationConfig,
    llm: &dyn LlmClient,
) -> Result<LabeledTrace, CurationError> {
    let mut trace = trace.clone();
    if trace.final_answer.is_none() {
        trace.final_answer = Some(extract_answer(&trace.solution_text, llm, config)?);
    }
    let pos = locate_answer(&trace, config, llm)?;
    assign_labels(trace, pos).map_err(|e: TraceError| CurationError::Labels(e.to_string()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurationRow {
    pub trace_id: String,
    pub status: String,
    pub retries_used: Option<usize>,
    pub token_index: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurationReport {
    pub rows: Vec<CurationRow>,
}

impl CurationReport {
    pub fn attempted(&self) -> usize {
        self.rows.len()
    }

    pub fn succeeded(&self) -> usize {
        self.rows.iter().filter(|r| r.status == "ok").count()
    }

    /// Percentage of traces admitted to the dataset.
    pub fn success_rate(&self) -> f64 {
        100.0 * self.succeeded() as f64 / self.attempted().max(1) as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("trace_id,status,retries_used,token_index\n");
        for r in &self.rows {
            let opt = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{},{},{}",
                r.trace_id,
                r.status,
                opt(r.retries_used),
                opt(r.token_index)
            );
        }
        s
    }
}

/// Curates every trace; failures are dropped from the dataset and recorded
/// in the report. Output is sorted by trace_id.
pub fn assemble_dataset(
    traces: &[Trace],
    config: &CurationConfig,
    llm: &dyn LlmClient,
) -> Result<(Vec<LabeledTrace>, CurationReport), CurationError> {
    if traces.is_empty() {
        return Err(CurationError::EmptyInput);
    }
    let results = exec::map(config.exec, traces, |t| (t.trace_id.clone(), curate_trace(t, config, llm)));
    let mut results = results;
    results.sort_by(|a, b| a.0.cmp(&b.0));

    let mut data = Vec::new();
    let mut rows = Vec::new();
    let mut first_failure = None;
    for (trace_id, result) in results {
        match result {
            Ok(lt) => {
                rows.push(CurationRow {
                    trace_id,
                    status: "ok".into(),
                    retries_used: Some(lt.answer.retries_used),
                    token_index: Some(lt.answer.token_index),
                });
                data.push(lt);
            }
            Err(e) => {
                rows.push(CurationRow {
                    trace_id,
                    status: e.status().into(),
                    retries_used: match e {
                        CurationError::RetriesExhausted { attempts, .. } => Some(attempts),
                        _ => None,
                    },
                    token_index: None,
                });
                first_failure.get_or_insert(e);
            }
        }
    }
    if data.is_empty() {
        return Err(CurationError::AllFailed(Box::new(first_failure.expect("input is non-empty"))));
    }
    Ok((data, CurationReport { rows }))
}
