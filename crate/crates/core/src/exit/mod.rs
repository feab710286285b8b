//! Online early exit and the offline evaluators built on truncated CoTs.

pub mod controller;
pub mod horl;
pub mod session;
pub mod sweep;

use thiserror::Error;

use crate::answer::{answers_match, parse_boxed};
use crate::features::FeatureError;
use crate::llm::{LlmClient, LlmError, LlmRequest, RoleTag};
use crate::probe::ProbeError;
use crate::trace::{Trace, THINK_CLOSE, THINK_OPEN};

pub use controller::{Decision, ExitConfig, ExitSession, Warmup};
pub use horl::{horl, HorlStrategy};
pub use session::{replay_session, run_session, SessionParams};
pub use sweep::{parse_fractions, truncation_sweep, SweepPoint, SweepResult};

#[derive(Debug, Error)]
pub enum ExitError {
    #[error("invalid exit config: {0}")]
    BadConfig(String),
    #[error("session already exited")]
    SteppedAfterExit,
    #[error("compression rate needs 1 <= M_early <= M, got M_early={m_early}, M={m}")]
    OutOfRange { m_early: usize, m: usize },
    #[error("trace `{0}` has no final answer")]
    MissingFinalAnswer(String),
    #[error("trace `{0}` has no CoT tokens")]
    EmptyTrace(String),
    #[error("invalid fractions: {0}")]
    BadFractions(String),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
}

/// Result of running one policy on one prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct ExitOutcome {
    pub trace_id: String,
    /// CoT tokens consumed before the exit.
    pub m_early: usize,
    /// CoT length of the full run.
    pub m: usize,
    pub compression_rate: f64,
    pub solution_text: String,
    pub answer: Option<String>,
    pub matched_full_run_answer: bool,
    /// True when the policy decided to stop before the CoT ended.
    pub exited: bool,
    /// Set by policies that skip the think phase entirely.
    pub empty_think: bool,
    pub solution_tokens: usize,
}

pub fn compression_rate(m_early: usize, m: usize) -> Result<f64, ExitError> {
    if m_early == 0 || m_early > m {
        return Err(ExitError::OutOfRange { m_early, m });
    }
    Ok(m_early as f64 / m as f64)
}

/// Answer of the full run: the stored one, else the solution's `\boxed{}`.
pub fn full_run_answer(trace: &Trace) -> Option<String> {
    trace.final_answer.clone().or_else(|| parse_boxed(&trace.solution_text))
}

/// Request for the solution after a CoT cut to `index` tokens whose decoded
/// reasoning text is `reasoning`.
pub fn truncated_request(prompt: &str, reasoning: &str, index: usize) -> LlmRequest {
    let prefix = format!("{THINK_OPEN}{reasoning}{THINK_CLOSE}\n");
    LlmRequest::new(RoleTag::SolveAfterTruncation, prompt)
        .with_prefix(prefix)
        .with_truncation(index)
}

/// Solution text and parsed answer after truncating `trace` to `index` tokens.
pub fn solve_truncated(
    trace: &Trace,
    index: usize,
    llm: &dyn LlmClient,
    max_tokens: usize,
) -> Result<(String, Option<String>, usize), LlmError> {
    solve_with_reasoning(&trace.prompt, &trace.prefix_text(index), index, llm, max_tokens)
}

pub(crate) fn solve_with_reasoning(
    prompt: &str,
    reasoning: &str,
    index: usize,
    llm: &dyn LlmClient,
    max_tokens: usize,
) -> Result<(String, Option<String>, usize), LlmError> {
    let mut req = truncated_request(prompt, reasoning, index);
    req.max_tokens = max_tokens;
    let done = llm.complete(&req)?;
    let n = if done.tokens.is_empty() {
        crate::llm::mock::split_text(&done.text).len()
    } else {
        done.tokens.len()
    };
    let answer = parse_boxed(&done.text);
    Ok((done.text, answer, n))
}

/// Assembles an outcome, checking the answer against the full run.
pub(crate) fn outcome(
    trace: &Trace,
    m_early: usize,
    m: usize,
    exited: bool,
    solution_text: String,
    answer: Option<String>,
    solution_tokens: usize,
) -> Result<ExitOutcome, ExitError> {
    let matched = match (&answer, full_run_answer(trace)) {
        (Some(a), Some(b)) => answers_match(a, &b),
        _ => false,
    };
    Ok(ExitOutcome {
        trace_id: trace.trace_id.clone(),
        m_early,
        m,
        compression_rate: compression_rate(m_early, m)?,
        solution_text,
        answer,
        matched_full_run_answer: matched,
        exited,
        empty_think: false,
        solution_tokens,
    })
}

/// Outcome of letting the model finish, from the stored trace.
pub fn vanilla(trace: &Trace) -> Result<ExitOutcome, ExitError> {
    if trace.is_empty() {
        return Err(ExitError::EmptyTrace(trace.trace_id.clone()));
    }
    let n = crate::llm::mock::split_text(&trace.solution_text).len();
    outcome(
        trace,
        trace.len(),
        trace.len(),
        false,
        trace.solution_text.clone(),
        full_run_answer(trace),
        n,
    )
}
