//! Approximate location of an identified span inside the decoded CoT.
//!
//! Exact occurrences win outright (earliest first). Otherwise every window
//! whose length lies within ±20% of the span length is scored as
//! `1 - edit_distance / max(span_len, window_len)` over Unicode scalar values.
//! One Levenshtein table per start position yields the distances for all
//! window lengths from that start at once.

use thiserror::Error;

use crate::exec::{self, ExecMode};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FuzzyError {
    #[error("empty span")]
    EmptySpan,
    #[error("best fuzzy score {0:.4} is below threshold")]
    BelowThreshold(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpanMatch {
    /// Character offsets into the CoT text, `char_start < char_end`.
    pub char_start: usize,
    pub char_end: usize,
    pub score: f64,
}

/// Window length band for a span of `m` characters.
pub fn window_band(m: usize) -> (usize, usize) {
    let lo = ((m as f64) * 0.8).floor().max(1.0) as usize;
    let hi = ((m as f64) * 1.2).ceil() as usize;
    (lo, hi.max(lo))
}

pub fn fuzzy_match_span(span: &str, cot_text: &str, min_score: f64) -> Result<SpanMatch, FuzzyError> {
    fuzzy_match_span_with(ExecMode::default(), span, cot_text, min_score)
}

pub fn fuzzy_match_span_with(
    mode: ExecMode,
    span: &str,
    cot_text: &str,
    min_score: f64,
) -> Result<SpanMatch, FuzzyError> {
    if span.is_empty() {
        return Err(FuzzyError::EmptySpan);
    }
    if let Some(byte_at) = cot_text.find(span) {
        let start = cot_text[..byte_at].chars().count();
        return Ok(SpanMatch {
            char_start: start,
            char_end: start + span.chars().count(),
            score: 1.0,
        });
    }
    let pattern: Vec<char> = span.chars().collect();
    let text: Vec<char> = cot_text.chars().collect();
    let best = best_window(mode, &pattern, &text);
    match best {
        Some(m) if m.score >= min_score => Ok(m),
        Some(m) => Err(FuzzyError::BelowThreshold(m.score)),
        None => Err(FuzzyError::BelowThreshold(0.0)),
    }
}

/// Best-scoring window; ties go to the earliest start, then the shortest window.
fn best_window(mode: ExecMode, pattern: &[char], text: &[char]) -> Option<SpanMatch> {
    let m = pattern.len();
    let (lo, hi) = window_band(m);
    if text.len() < lo {
        return None;
    }
    let starts = text.len() - lo + 1;
    let per_start = exec::map_range(mode, starts, |s| {
        let window = &text[s..(s + hi).min(text.len())];
        let last_row = levenshtein_prefix_row(pattern, window);
        let mut best: Option<(f64, usize)> = None;
        for (len, &d) in last_row.iter().enumerate().take(window.len() + 1).skip(lo) {
            let score = 1.0 - d as f64 / m.max(len) as f64;
            if best.is_none_or(|(b, _)| score > b) {
                best = Some((score, len));
            }
        }
        best.map(|(score, len)| SpanMatch {
            char_start: s,
            char_end: s + len,
            score,
        })
    });
    per_start
        .into_iter()
        .flatten()
        .fold(None, |acc: Option<SpanMatch>, cand| match acc {
            Some(a) if a.score >= cand.score => Some(a),
            _ => Some(cand),
        })
}

/// Edit distances between `pattern` and every prefix of `window`:
/// `row[j] = lev(pattern, window[..j])`.
fn levenshtein_prefix_row(pattern: &[char], window: &[char]) -> Vec<usize> {
    // Iterate over window characters as rows so the result is one column per
    // prefix length; keep only the column for the full pattern.
    let m = pattern.len();
    let mut col: Vec<usize> = (0..=m).collect();
    let mut out = Vec::with_capacity(window.len() + 1);
    out.push(m);
    for (j, &wc) in window.iter().enumerate() {
        let mut diag = col[0];
        col[0] = j + 1;
        for i in 1..=m {
            let up = col[i];
            let cost = usize::from(pattern[i - 1] != wc);
            col[i] = (diag + cost).min(up + 1).min(col[i - 1] + 1);
            diag = up;
        }
        out.push(col[m]);
    }
    out
}
