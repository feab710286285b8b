//! Accuracy and compression when every CoT is cut at a fixed fraction.

use std::collections::HashMap;

use crate::answer::answers_match;
use crate::exec::{self, ExecMode};
use crate::llm::LlmClient;
use crate::trace::{LabeledTrace, Trace};

use super::{full_run_answer, solve_truncated, ExitError};

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub fraction: f64,
    pub mean_accuracy: f64,
    pub mean_cr: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub points: Vec<SweepPoint>,
    /// Mean relative position of the first answer arrival, when answer
    /// positions are known.
    pub answer_marker: Option<f64>,
}

impl SweepResult {
    pub fn with_marker(mut self, data: &[LabeledTrace]) -> Self {
        self.answer_marker = answer_marker(data);
        self
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("fraction,mean_accuracy,mean_cr,n\n");
        for p in &self.points {
            out.push_str(&format!("{},{},{},{}\n", p.fraction, p.mean_accuracy, p.mean_cr, p.n));
        }
        out
    }
}

/// Parses `start:stop:step` or a comma-separated list.
pub fn parse_fractions(spec: &str) -> Result<Vec<f64>, ExitError> {
    let bad = || ExitError::BadFractions(spec.to_string());
    let parts: Vec<&str> = spec.split(':').collect();
    let values = if parts.len() == 3 {
        let nums: Vec<f64> = parts
            .iter()
            .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<_, _>>()?;
        let (start, stop, step) = (nums[0], nums[1], nums[2]);
        if !(step > 0.0) || start > stop {
            return Err(bad());
        }
        let n = ((stop - start) / step + 1e-9).floor() as usize;
        (0..=n).map(|i| ((start + i as f64 * step) * 1e9).round() / 1e9).collect()
    } else {
        spec.split(',')
            .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<Vec<_>, _>>()?
    };
    normalize_fractions(&values)
}

fn normalize_fractions(fractions: &[f64]) -> Result<Vec<f64>, ExitError> {
    if fractions.is_empty() || fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
        return Err(ExitError::BadFractions(format!("{fractions:?}")));
    }
    let mut out = fractions.to_vec();
    out.sort_by(f64::total_cmp);
    out.dedup();
    Ok(out)
}

/// Tokens kept when cutting `m` tokens at fraction `f`: `ceil(f m)`, at least 1.
pub fn kept_tokens(f: f64, m: usize) -> usize {
    // The tolerance keeps products such as 0.15 * 20 = 3.0000000000000004 at 3.
    ((f * m as f64 - 1e-9).ceil() as usize).clamp(1, m)
}

/// Runs the sweep. Accuracy is scored against `ground_truth` when it has the
/// trace, otherwise against the full run's answer. A cut that keeps the whole
/// CoT reuses the stored solution.
pub fn truncation_sweep(
    traces: &[Trace],
    fractions: &[f64],
    ground_truth: &HashMap<String, String>,
    llm: &dyn LlmClient,
    max_tokens: usize,
    mode: ExecMode,
) -> Result<SweepResult, ExitError> {
    let fractions = normalize_fractions(fractions)?;
    if let Some(t) = traces.iter().find(|t| t.is_empty()) {
        return Err(ExitError::EmptyTrace(t.trace_id.clone()));
    }
    let mut ordered: Vec<&Trace> = traces.iter().collect();
    ordered.sort_by(|a, b| a.trace_id.cmp(&b.trace_id));
    let jobs: Vec<(usize, &Trace)> = (0..fractions.len())
        .flat_map(|fi| ordered.iter().map(move |t| (fi, *t)))
        .collect();
    let scored = exec::map(mode, &jobs, |&(fi, trace)| -> Result<(bool, f64), ExitError> {
        let m = trace.len();
        let keep = kept_tokens(fractions[fi], m);
        let answer = if keep == m {
            full_run_answer(trace)
        } else {
            solve_truncated(trace, keep, llm, max_tokens)?.1
        };
        let truth = ground_truth.get(&trace.trace_id).cloned().or_else(|| full_run_answer(trace));
        let correct = matches!((answer, truth), (Some(a), Some(t)) if answers_match(&a, &t));
        Ok((correct, keep as f64 / m as f64))
    });
    let scored: Vec<(bool, f64)> = scored.into_iter().collect::<Result<_, _>>()?;
    let n = ordered.len();
    let points = fractions
        .iter()
        .enumerate()
        .map(|(fi, &fraction)| {
            let chunk = &scored[fi * n..(fi + 1) * n];
            let mean = |xs: &mut dyn Iterator<Item = f64>| if n == 0 { 0.0 } else { xs.sum::<f64>() / n as f64 };
            SweepPoint {
                fraction,
                mean_accuracy: mean(&mut chunk.iter().map(|r| f64::from(u8::from(r.0)))),
                mean_cr: mean(&mut chunk.iter().map(|r| r.1)),
                n,
            }
        })
        .collect();
    Ok(SweepResult { points, answer_marker: None })
}

/// Mean of `(i* + 1) / M` over labeled traces.
pub fn answer_marker(data: &[LabeledTrace]) -> Option<f64> {
    if data.is_empty() {
        return None;
    }
    let sum: f64 = data
        .iter()
        .map(|lt| (lt.answer.token_index + 1) as f64 / lt.trace.len() as f64)
        .sum();
    Some(sum / data.len() as f64)
}
