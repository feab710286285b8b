//! Comparison exit policies: vanilla, NoThinking, chunk-confidence (DEER as
//! described in the OptExit evaluation) and answer-consistency probing
//! (Dynasor as described there).

use thiserror::Error;

use crate::answer::{answers_match, normalize_answer, parse_boxed, parse_interim};
use crate::exit::{full_run_answer, outcome, solve_truncated, vanilla, ExitError, ExitOutcome};
use crate::llm::mock::split_text;
use crate::llm::{LlmClient, LlmError, LlmRequest, RoleTag};
use crate::trace::{TokenRecord, Trace, THINK_CLOSE, THINK_OPEN};

pub const DYNASOR_PROBE_PROMPT: &str =
    "Oh, I suddenly got the answer to the whole problem, Final Answer: \\boxed{";

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("chat template is missing think markers")]
    TemplateError,
    #[error("token {0} has no usable chosen logprob")]
    MissingLogprobs(usize),
    #[error("invalid baseline config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Exit(#[from] ExitError),
    #[error(transparent)]
    Llm(#[from] LlmError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Policy {
    Vanilla,
    NoThinking,
    Deer,
    Dynasor,
    OptExit,
}

impl Policy {
    pub fn as_str(self) -> &'static str {
        match self {
            Policy::Vanilla => "vanilla",
            Policy::NoThinking => "nothinking",
            Policy::Deer => "deer",
            Policy::Dynasor => "dynasor",
            Policy::OptExit => "optexit",
        }
    }
}

impl std::str::FromStr for Policy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "vanilla" => Ok(Policy::Vanilla),
            "nothinking" => Ok(Policy::NoThinking),
            "deer" => Ok(Policy::Deer),
            "dynasor" => Ok(Policy::Dynasor),
            "optexit" => Ok(Policy::OptExit),
            other => Err(format!("unknown policy `{other}`")),
        }
    }
}

/// Think-region delimiters of the model's chat template.
#[derive(Debug, Clone, PartialEq)]
pub struct ThinkMarkers {
    pub open: String,
    pub close: String,
}

impl Default for ThinkMarkers {
    fn default() -> Self {
        ThinkMarkers { open: THINK_OPEN.into(), close: THINK_CLOSE.into() }
    }
}

/// Asks for the solution behind an empty think block. With a reference CoT
/// length the compression rate is 0 and `empty_think` is set.
pub fn nothinking(
    trace_id: &str,
    prompt: &str,
    reference: Option<&Trace>,
    markers: &ThinkMarkers,
    llm: &dyn LlmClient,
    max_tokens: usize,
) -> Result<ExitOutcome, BaselineError> {
    if markers.open.trim().is_empty() || markers.close.trim().is_empty() {
        return Err(BaselineError::TemplateError);
    }
    let mut req = LlmRequest::new(RoleTag::SolveAfterTruncation, prompt)
        .with_prefix(format!("{}\n\n{}", markers.open, markers.close))
        .with_truncation(0);
    req.max_tokens = max_tokens;
    let done = llm.complete(&req)?;
    let answer = parse_boxed(&done.text).or_else(|| {
        let a = normalize_answer(&done.text);
        (!a.is_empty()).then_some(a)
    });
    let matched = match (&answer, reference.and_then(full_run_answer)) {
        (Some(a), Some(b)) => answers_match(a, &b),
        _ => false,
    };
    let solution_tokens = if done.tokens.is_empty() { split_text(&done.text).len() } else { done.tokens.len() };
    Ok(ExitOutcome {
        trace_id: trace_id.to_string(),
        m_early: 0,
        m: reference.map_or(0, Trace::len),
        compression_rate: 0.0,
        solution_text: done.text,
        answer,
        matched_full_run_answer: matched,
        exited: true,
        empty_think: true,
        solution_tokens,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeerConfig {
    pub chunk_tokens: usize,
    pub prob_threshold: f64,
}

impl Default for DeerConfig {
    fn default() -> Self {
        DeerConfig { chunk_tokens: 64, prob_threshold: 0.95 }
    }
}

/// Index of the last token of the first chunk whose mean token probability
/// exceeds the threshold. Incomplete trailing chunks are not scored.
pub fn deer_exit(tokens: &[TokenRecord], config: &DeerConfig) -> Result<Option<usize>, BaselineError> {
    if config.chunk_tokens == 0 {
        return Err(BaselineError::BadConfig("chunk_tokens must be >= 1".into()));
    }
    for (c, chunk) in tokens.chunks_exact(config.chunk_tokens).enumerate() {
        let mut sum = 0.0;
        for (j, t) in chunk.iter().enumerate() {
            if !(t.chosen_logprob <= 0.0) {
                return Err(BaselineError::MissingLogprobs(c * config.chunk_tokens + j));
            }
            sum += t.chosen_logprob.exp();
        }
        if sum / config.chunk_tokens as f64 > config.prob_threshold {
            return Ok(Some((c + 1) * config.chunk_tokens - 1));
        }
    }
    Ok(None)
}

/// Chunk-confidence exit replayed over a stored trace.
pub fn deer_outcome(
    trace: &Trace,
    config: &DeerConfig,
    llm: &dyn LlmClient,
    max_tokens: usize,
) -> Result<ExitOutcome, BaselineError> {
    match deer_exit(&trace.cot_tokens, config)? {
        Some(i) if i + 1 < trace.len() => {
            let m_early = i + 1;
            let (text, answer, n) = solve_truncated(trace, m_early, llm, max_tokens)?;
            Ok(outcome(trace, m_early, trace.len(), true, text, answer, n)?)
        }
        _ => Ok(vanilla(trace)?),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DynasorConfig {
    pub interval_tokens: usize,
    pub consistency_w: usize,
    pub probe_prompt: String,
}

impl Default for DynasorConfig {
    fn default() -> Self {
        DynasorConfig {
            interval_tokens: 64,
            consistency_w: 8,
            probe_prompt: DYNASOR_PROBE_PROMPT.into(),
        }
    }
}

/// Run length of identical interim answers. Missing answers reset the run.
#[derive(Debug, Clone, Default)]
pub struct ConsistencyCounter {
    last: Option<String>,
    run: usize,
}

impl ConsistencyCounter {
    /// Records one probe result and returns the current run length.
    pub fn push(&mut self, answer: Option<&str>) -> usize {
        match answer.map(normalize_answer).filter(|a| !a.is_empty()) {
            None => {
                self.last = None;
                self.run = 0;
            }
            Some(a) => {
                if self.last.as_deref() == Some(a.as_str()) {
                    self.run += 1;
                } else {
                    self.last = Some(a);
                    self.run = 1;
                }
            }
        }
        self.run
    }
}

/// 1-based probe number at which `w` consecutive equal answers first occur.
pub fn consistent_probe(answers: &[Option<&str>], w: usize) -> Option<usize> {
    let mut c = ConsistencyCounter::default();
    answers.iter().position(|a| c.push(*a) >= w).map(|p| p + 1)
}

/// Consistency probing replayed over a stored trace: after every
/// `interval_tokens` CoT tokens the model is asked to complete the probe
/// prompt; the CoT is cut once `consistency_w` interim answers agree.
pub fn dynasor_outcome(
    trace: &Trace,
    config: &DynasorConfig,
    llm: &dyn LlmClient,
    max_tokens: usize,
) -> Result<ExitOutcome, BaselineError> {
    if config.interval_tokens == 0 || config.consistency_w < 2 {
        return Err(BaselineError::BadConfig("need interval_tokens >= 1 and consistency_w >= 2".into()));
    }
    let m = trace.len();
    let mut counter = ConsistencyCounter::default();
    let mut at = config.interval_tokens;
    while at < m {
        let mut req = LlmRequest::new(RoleTag::SolveAfterTruncation, trace.prompt.clone())
            .with_prefix(format!("{THINK_OPEN}{}{}", trace.prefix_text(at), config.probe_prompt))
            .with_truncation(at);
        req.max_tokens = max_tokens.min(32);
        let reply = llm.complete(&req)?.text;
        if counter.push(parse_interim(&reply).as_deref()) >= config.consistency_w {
            let (text, answer, n) = solve_truncated(trace, at, llm, max_tokens)?;
            return Ok(outcome(trace, at, m, true, text, answer, n)?);
        }
        at += config.interval_tokens;
    }
    Ok(vanilla(trace)?)
}
