//! Early-exit runs: live over a token stream, or replayed over a stored trace.

use crate::answer::parse_boxed;
use crate::features::{FeatureError, FeatureMatrix, FeatureProvider};
use crate::llm::{LlmClient, LlmRequest, RoleTag, StreamControl};
use crate::probe::{predict, ProbeError, ProbeModel};
use crate::trace::{think_region, TokenRecord, Trace, THINK_CLOSE};

use super::controller::{Decision, ExitConfig, ExitSession};
use super::{outcome, solve_truncated, solve_with_reasoning, vanilla, ExitError, ExitOutcome};

#[derive(Debug, Clone, PartialEq)]
pub struct SessionParams {
    pub top_logprobs: usize,
    pub temperature: f64,
    pub solution_max_tokens: usize,
}

impl Default for SessionParams {
    fn default() -> Self {
        SessionParams { top_logprobs: 20, temperature: 0.0, solution_max_tokens: 1024 }
    }
}

fn reasoning_text(tokens: &[TokenRecord]) -> String {
    let region = think_region(tokens);
    tokens[region].iter().map(|t| t.token_text.as_str()).collect()
}

/// Streams a fresh generation for `trace.prompt` and stops it when the probe
/// votes to exit. `trace` supplies the id, the full-run CoT length used for
/// the compression rate and the full-run answer.
pub fn run_session(
    trace: &Trace,
    probe: &ProbeModel,
    provider: &mut dyn FeatureProvider,
    config: &ExitConfig,
    params: &SessionParams,
    llm: &dyn LlmClient,
) -> Result<ExitOutcome, ExitError> {
    if provider.dim() != probe.input_dim {
        return Err(ProbeError::DimMismatch { expected: probe.input_dim, found: provider.dim() }.into());
    }
    provider.reset();
    let mut session = ExitSession::new(config.clone())?;
    let mut req = LlmRequest::new(RoleTag::Generate, trace.prompt.clone()).with_logprobs(params.top_logprobs);
    req.max_tokens = config.max_cot_tokens + params.solution_max_tokens;
    req.temperature = params.temperature;

    let mut cot: Vec<TokenRecord> = Vec::new();
    let mut solution: Vec<TokenRecord> = Vec::new();
    let mut closed = false;
    let mut stopped = false;
    let mut failure: Option<ExitError> = None;
    llm.stream(&req, &mut |record| {
        if closed {
            solution.push(record.clone());
            return StreamControl::Continue;
        }
        cot.push(record.clone());
        let feats = provider.push(record);
        let step = predict(probe, &feats)
            .map_err(ExitError::from)
            .and_then(|p| session.step_token(&record.token_text, p));
        match step {
            Err(e) => {
                failure = Some(e);
                return StreamControl::Abort;
            }
            Ok(_) if record.token_text.trim() == THINK_CLOSE => closed = true,
            Ok(Decision::Exit) => {
                stopped = true;
                return StreamControl::Abort;
            }
            Ok(Decision::Continue) => {}
        }
        if cot.len() >= config.max_cot_tokens {
            stopped = true;
            return StreamControl::Abort;
        }
        StreamControl::Continue
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    if cot.is_empty() {
        return Err(ExitError::EmptyTrace(trace.trace_id.clone()));
    }

    let m_early = cot.len();
    if stopped || !closed {
        let m = if stopped { trace.len().max(m_early) } else { m_early };
        let (text, answer, n) =
            solve_with_reasoning(&trace.prompt, &reasoning_text(&cot), m_early, llm, params.solution_max_tokens)?;
        return outcome(trace, m_early, m, m_early < m, text, answer, n);
    }
    let text: String = solution.iter().map(|t| t.token_text.as_str()).collect();
    let answer = parse_boxed(&text);
    outcome(trace, m_early, m_early, false, text, answer, solution.len())
}

/// Runs the exit rule over a stored trace with precomputed features; only the
/// post-exit solution is requested from the model.
pub fn replay_session(
    trace: &Trace,
    features: &FeatureMatrix,
    probe: &ProbeModel,
    config: &ExitConfig,
    llm: &dyn LlmClient,
    solution_max_tokens: usize,
) -> Result<ExitOutcome, ExitError> {
    let m = trace.len();
    if m == 0 {
        return Err(ExitError::EmptyTrace(trace.trace_id.clone()));
    }
    if features.rows != m {
        return Err(FeatureError::RowCountMismatch { expected: m, found: features.rows }.into());
    }
    if features.dim != probe.input_dim {
        return Err(ProbeError::DimMismatch { expected: probe.input_dim, found: features.dim }.into());
    }
    let mut session = ExitSession::new(config.clone())?;
    let mut stop = None;
    for (i, tok) in trace.cot_tokens.iter().enumerate() {
        let p = predict(probe, &features.row_f64(i))?;
        let d = session.step_token(&tok.token_text, p)?;
        if d == Decision::Exit || i + 1 == config.max_cot_tokens {
            stop = Some(i + 1);
            break;
        }
    }
    match stop {
        Some(m_early) if m_early < m => {
            let (text, answer, n) = solve_truncated(trace, m_early, llm, solution_max_tokens)?;
            outcome(trace, m_early, m, true, text, answer, n)
        }
        _ => vanilla(trace),
    }
}
