//! Token-Confidence and the signal studies around the answer arrival:
//! event-locked averaging, thinking-token rate shifts and rate-vs-length
//! binning.

use std::fmt::Write as _;

use thiserror::Error;

use crate::trace::{TokenRecord, Trace};

#[derive(Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("token has an empty top-K slice")]
    EmptyTopK,
    #[error("{series} series but {positions} positions")]
    LengthMismatch { series: usize, positions: usize },
    #[error("position {position} outside series `{trace_id}` of length {len}")]
    PositionOutOfRange {
        trace_id: String,
        position: usize,
        len: usize,
    },
    #[error("no input points")]
    EmptyInput,
    #[error("{points} points cannot fill {bins} bins")]
    TooFewPoints { points: usize, bins: usize },
}

/// Token-Confidence: the negative mean log-probability over the top-K slice.
/// Higher values mean a more peaked next-token distribution.
pub fn token_confidence(record: &TokenRecord) -> Result<f64, AnalysisError> {
    if record.top_k.is_empty() {
        return Err(AnalysisError::EmptyTopK);
    }
    let sum: f64 = record.top_k.iter().map(|e| e.logprob).sum();
    Ok(-sum / record.top_k.len() as f64)
}

/// Which per-token signal to extract from a trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Signal {
    Confidence,
    Logprob,
}

impl std::str::FromStr for Signal {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "confidence" => Ok(Signal::Confidence),
            "logprob" => Ok(Signal::Logprob),
            other => Err(format!("unknown signal `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SignalSeries {
    pub trace_id: String,
    pub values: Vec<f64>,
}

impl SignalSeries {
    pub fn from_trace(trace: &Trace, signal: Signal) -> Result<Self, AnalysisError> {
        let values = trace
            .cot_tokens
            .iter()
            .map(|r| match signal {
                Signal::Confidence => token_confidence(r),
                Signal::Logprob => Ok(r.chosen_logprob),
            })
            .collect::<Result<_, _>>()?;
        Ok(SignalSeries {
            trace_id: trace.trace_id.clone(),
            values,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventLockedAverage {
    pub offsets: Vec<i64>,
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
    pub count: Vec<usize>,
}

impl EventLockedAverage {
    pub fn at(&self, offset: i64) -> Option<(f64, f64, usize)> {
        let k = self.offsets.iter().position(|&o| o == offset)?;
        Some((self.mean[k], self.stderr[k], self.count[k]))
    }

    /// Centered moving average of the mean curve; width 1 is the identity.
    pub fn smoothed_mean(&self, width: usize) -> Vec<f64> {
        let half = width.max(1) / 2;
        let n = self.mean.len();
        (0..n)
            .map(|i| {
                let lo = i.saturating_sub(half);
                let hi = (i + half + 1).min(n);
                self.mean[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("offset,mean,stderr,count\n");
        for k in 0..self.offsets.len() {
            let _ = writeln!(
                s,
                "{},{},{},{}",
                self.offsets[k], self.mean[k], self.stderr[k], self.count[k]
            );
        }
        s
    }
}

/// Aligns each series so its answer position sits at offset 0 and averages
/// across the traces that cover each offset. Traces that do not reach an
/// offset are left out of it rather than padded.
pub fn event_locked_average(
    series: &[SignalSeries],
    positions: &[usize],
    window: (usize, usize),
) -> Result<EventLockedAverage, AnalysisError> {
    if series.len() != positions.len() {
        return Err(AnalysisError::LengthMismatch {
            series: series.len(),
            positions: positions.len(),
        });
    }
    for (s, &p) in series.iter().zip(positions) {
        if p >= s.values.len() {
            return Err(AnalysisError::PositionOutOfRange {
                trace_id: s.trace_id.clone(),
                position: p,
                len: s.values.len(),
            });
        }
    }
    // Reduce in ascending trace_id order so sums are reproducible.
    let mut order: Vec<usize> = (0..series.len()).collect();
    order.sort_by(|&a, &b| series[a].trace_id.cmp(&series[b].trace_id));

    let (pre, post) = (window.0 as i64, window.1 as i64);
    let mut out = EventLockedAverage {
        offsets: Vec::new(),
        mean: Vec::new(),
        stderr: Vec::new(),
        count: Vec::new(),
    };
    for offset in -pre..=post {
        let covered: Vec<f64> = order
            .iter()
            .filter_map(|&j| {
                let idx = positions[j] as i64 + offset;
                (idx >= 0 && (idx as usize) < series[j].values.len())
                    .then(|| series[j].values[idx as usize])
            })
            .collect();
        if covered.is_empty() {
            continue;
        }
        let (mean, sd) = mean_and_sd(&covered);
        out.offsets.push(offset);
        out.mean.push(mean);
        out.stderr.push(sd / (covered.len() as f64).sqrt());
        out.count.push(covered.len());
    }
    Ok(out)
}

/// Mean and sample standard deviation (0 for a single value).
fn mean_and_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Lowercased, whitespace-trimmed token text used for needle matching.
pub fn normalize_token(text: &str) -> String {
    text.trim().to_lowercase()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShiftPoint {
    pub trace_id: String,
    pub rate_before: f64,
    pub rate_after: f64,
    pub cot_length: usize,
}

/// Occurrence rates of `needle` before and after the answer position.
/// Position `i_star` counts towards the "after" side.
pub fn token_shift_rates(trace: &Trace, i_star: usize, needle: &str) -> ShiftPoint {
    let needle = normalize_token(needle);
    let m = trace.len();
    let i_star = i_star.min(m);
    let hits = |range: std::ops::Range<usize>| {
        trace.cot_tokens[range]
            .iter()
            .filter(|r| normalize_token(&r.token_text) == needle)
            .count()
    };
    let before = hits(0..i_star);
    let after = hits(i_star..m);
    ShiftPoint {
        trace_id: trace.trace_id.clone(),
        rate_before: if i_star == 0 { 0.0 } else { before as f64 / i_star as f64 },
        rate_after: if m == i_star { 0.0 } else { after as f64 / (m - i_star) as f64 },
        cot_length: m,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShiftSummary {
    pub above_diagonal_pct: f64,
    pub at_origin_pct: f64,
    pub n: usize,
}

pub fn shift_summary(points: &[ShiftPoint]) -> Result<ShiftSummary, AnalysisError> {
    if points.is_empty() {
        return Err(AnalysisError::EmptyInput);
    }
    let n = points.len();
    let above = points.iter().filter(|p| p.rate_after > p.rate_before).count();
    let origin = points
        .iter()
        .filter(|p| p.rate_before == 0.0 && p.rate_after == 0.0)
        .count();
    Ok(ShiftSummary {
        above_diagonal_pct: 100.0 * above as f64 / n as f64,
        at_origin_pct: 100.0 * origin as f64 / n as f64,
        n,
    })
}

pub fn shift_csv(points: &[ShiftPoint]) -> String {
    let mut sorted: Vec<&ShiftPoint> = points.iter().collect();
    sorted.sort_by(|a, b| a.trace_id.cmp(&b.trace_id));
    let mut s = String::from("trace_id,rate_before,rate_after,cot_length\n");
    for p in sorted {
        let _ = writeln!(s, "{},{},{},{}", p.trace_id, p.rate_before, p.rate_after, p.cot_length);
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct LengthBin {
    pub edge_lo: f64,
    pub edge_hi: f64,
    pub mean_before: f64,
    pub mean_after: f64,
    /// Half-width of the normal-approximation 95% interval.
    pub ci95_before: f64,
    pub ci95_after: f64,
    pub n: usize,
}

/// Linear-interpolated empirical percentile of sorted data, `q` in [0, 1].
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Bins shift points by CoT length with percentile edges and reports the mean
/// before/after rates per bin. Empty bins are omitted.
pub fn rate_vs_length(points: &[ShiftPoint], bins: usize) -> Result<Vec<LengthBin>, AnalysisError> {
    if bins == 0 || points.len() < bins {
        return Err(AnalysisError::TooFewPoints {
            points: points.len(),
            bins,
        });
    }
    let mut lengths: Vec<f64> = points.iter().map(|p| p.cot_length as f64).collect();
    lengths.sort_by(f64::total_cmp);
    let edges: Vec<f64> = (0..=bins)
        .map(|b| percentile(&lengths, b as f64 / bins as f64))
        .collect();

    let mut members: Vec<Vec<&ShiftPoint>> = vec![Vec::new(); bins];
    for p in points {
        let x = p.cot_length as f64;
        let j = edges.iter().rposition(|&e| e <= x).unwrap_or(0).min(bins - 1);
        members[j].push(p);
    }
    let z = 1.96;
    Ok(members
        .into_iter()
        .enumerate()
        .filter(|(_, m)| !m.is_empty())
        .map(|(j, mut m)| {
            m.sort_by(|a, b| a.trace_id.cmp(&b.trace_id));
            let before: Vec<f64> = m.iter().map(|p| p.rate_before).collect();
            let after: Vec<f64> = m.iter().map(|p| p.rate_after).collect();
            let (mb, sb) = mean_and_sd(&before);
            let (ma, sa) = mean_and_sd(&after);
            let root_n = (m.len() as f64).sqrt();
            LengthBin {
                edge_lo: edges[j],
                edge_hi: edges[j + 1],
                mean_before: mb,
                mean_after: ma,
                ci95_before: z * sb / root_n,
                ci95_after: z * sa / root_n,
                n: m.len(),
            }
        })
        .collect())
}

pub fn rate_length_csv(bins: &[LengthBin]) -> String {
    let mut s = String::from("bin_lo,bin_hi,mean_before,ci95_before,mean_after,ci95_after,n\n");
    for b in bins {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            b.edge_lo, b.edge_hi, b.mean_before, b.ci95_before, b.mean_after, b.ci95_after, b.n
        );
    }
    s
}
