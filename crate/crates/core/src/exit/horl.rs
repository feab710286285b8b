//! Hindsight-optimal reasoning length: the shortest CoT prefix after which the
//! model still gives the full run's answer.

use crate::answer::answers_match;
use crate::llm::LlmClient;
use crate::trace::Trace;

use super::{full_run_answer, solve_truncated, ExitError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HorlStrategy {
    /// Every prefix length in ascending order.
    ExactScan,
    /// Evenly spaced probes, then an exact scan of the first interval whose
    /// right end succeeds.
    Grid { points: usize },
}

impl std::str::FromStr for HorlStrategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "exact" | "exact_scan" => Ok(HorlStrategy::ExactScan),
            "grid" => Ok(HorlStrategy::Grid { points: 21 }),
            other => Err(format!("unknown strategy `{other}`")),
        }
    }
}

/// Shortest prefix length `i` in `1..=M` whose truncated continuation yields
/// the full-run answer. `M` itself is never queried.
pub fn horl(
    trace: &Trace,
    llm: &dyn LlmClient,
    strategy: HorlStrategy,
    max_tokens: usize,
) -> Result<usize, ExitError> {
    let m = trace.len();
    if m == 0 {
        return Err(ExitError::EmptyTrace(trace.trace_id.clone()));
    }
    let target = full_run_answer(trace).ok_or_else(|| ExitError::MissingFinalAnswer(trace.trace_id.clone()))?;
    let succeeds = |i: usize| -> Result<bool, ExitError> {
        if i >= m {
            return Ok(true);
        }
        let (_, answer, _) = solve_truncated(trace, i, llm, max_tokens)?;
        Ok(answer.is_some_and(|a| answers_match(&a, &target)))
    };
    let scan = |lo: usize, hi: usize| -> Result<usize, ExitError> {
        for i in lo..hi {
            if succeeds(i)? {
                return Ok(i);
            }
        }
        Ok(hi)
    };
    match strategy {
        HorlStrategy::ExactScan => scan(1, m),
        HorlStrategy::Grid { points } => {
            let spacing = m.div_ceil(points.max(2) - 1).max(1);
            let mut prev = 0;
            loop {
                let g = (prev + spacing).min(m);
                if succeeds(g)? {
                    return scan(prev + 1, g);
                }
                prev = g;
            }
        }
    }
}
