//! Benchmark aggregation: per-policy tables, Pareto fronts, CSV and SVG output.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exit::ExitOutcome;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no results to report")]
    EmptyResults,
    #[error("rows span several datasets: {0:?}")]
    MixedDatasets(Vec<String>),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

/// One outcome with the labels needed to aggregate it.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredOutcome {
    pub policy: String,
    pub dataset: String,
    pub outcome: ExitOutcome,
    pub correct: bool,
}

impl ScoredOutcome {
    /// Compression rate used in tables. Policies that skip thinking are
    /// charged their solution length relative to the full CoT.
    pub fn table_cr(&self) -> f64 {
        let o = &self.outcome;
        if o.empty_think {
            if o.m == 0 {
                0.0
            } else {
                o.solution_tokens as f64 / o.m as f64
            }
        } else {
            o.compression_rate
        }
    }
}

/// A row of the per-results CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub trace_id: String,
    pub policy: String,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "M_early")]
    pub m_early: usize,
    pub cr: f64,
    pub answer: String,
    pub correct: bool,
}

impl From<&ScoredOutcome> for ResultRow {
    fn from(s: &ScoredOutcome) -> Self {
        ResultRow {
            trace_id: s.outcome.trace_id.clone(),
            policy: s.policy.clone(),
            m: s.outcome.m,
            m_early: s.outcome.m_early,
            cr: s.table_cr(),
            answer: s.outcome.answer.clone().unwrap_or_default(),
            correct: s.correct,
        }
    }
}

pub fn results_csv(rows: &[ResultRow]) -> Result<String, ReportError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    if rows.is_empty() {
        w.write_record(["trace_id", "policy", "M", "M_early", "cr", "answer", "correct"])?;
    }
    let bytes = w.into_inner().map_err(|e| e.into_error())?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn parse_results_csv(text: &str) -> Result<Vec<ResultRow>, ReportError> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    Ok(r.deserialize().collect::<Result<Vec<ResultRow>, _>>()?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkRow {
    pub policy: String,
    pub dataset: String,
    pub accuracy_pct: f64,
    /// Mean CoT tokens consumed per sample.
    pub mean_tokens: f64,
    pub mean_cr_pct: f64,
    pub n: usize,
}

/// Input of [`report`] when starting from result files.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportInput {
    pub policy: String,
    pub dataset: String,
    pub tokens: usize,
    pub cr: f64,
    pub correct: bool,
}

impl From<&ScoredOutcome> for ReportInput {
    fn from(s: &ScoredOutcome) -> Self {
        ReportInput {
            policy: s.policy.clone(),
            dataset: s.dataset.clone(),
            tokens: s.outcome.m_early,
            cr: s.table_cr(),
            correct: s.correct,
        }
    }
}

impl ReportInput {
    pub fn from_row(row: &ResultRow, dataset: &str) -> Self {
        ReportInput {
            policy: row.policy.clone(),
            dataset: dataset.to_string(),
            tokens: row.m_early,
            cr: row.cr,
            correct: row.correct,
        }
    }
}

/// One row per (policy, dataset), sorted by dataset then policy.
pub fn report(results: &[ReportInput]) -> Result<Vec<BenchmarkRow>, ReportError> {
    if results.is_empty() {
        return Err(ReportError::EmptyResults);
    }
    let mut groups: BTreeMap<(&str, &str), Vec<&ReportInput>> = BTreeMap::new();
    for r in results {
        groups.entry((r.dataset.as_str(), r.policy.as_str())).or_default().push(r);
    }
    Ok(groups
        .into_iter()
        .map(|((dataset, policy), rs)| {
            let n = rs.len() as f64;
            BenchmarkRow {
                policy: policy.to_string(),
                dataset: dataset.to_string(),
                accuracy_pct: 100.0 * rs.iter().filter(|r| r.correct).count() as f64 / n,
                mean_tokens: rs.iter().map(|r| r.tokens as f64).sum::<f64>() / n,
                mean_cr_pct: 100.0 * rs.iter().map(|r| r.cr).sum::<f64>() / n,
                n: rs.len(),
            }
        })
        .collect())
}

fn dominates(a: &BenchmarkRow, b: &BenchmarkRow) -> bool {
    a.accuracy_pct >= b.accuracy_pct
        && a.mean_cr_pct <= b.mean_cr_pct
        && (a.accuracy_pct > b.accuracy_pct || a.mean_cr_pct < b.mean_cr_pct)
}

/// Rows not dominated on (higher accuracy, lower CR). Input order is kept.
pub fn pareto(rows: &[BenchmarkRow]) -> Result<Vec<BenchmarkRow>, ReportError> {
    let mut datasets: Vec<String> = rows.iter().map(|r| r.dataset.clone()).collect();
    datasets.sort();
    datasets.dedup();
    if datasets.len() > 1 {
        return Err(ReportError::MixedDatasets(datasets));
    }
    Ok(rows
        .iter()
        .filter(|r| !rows.iter().any(|o| dominates(o, r)))
        .cloned()
        .collect())
}

/// Table with percentages to one decimal place.
pub fn table_csv(rows: &[BenchmarkRow]) -> String {
    let mut out = String::from("policy,dataset,accuracy,tokens,cr,n\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{:.1},{:.1},{:.1},{}",
            r.policy, r.dataset, r.accuracy_pct, r.mean_tokens, r.mean_cr_pct, r.n
        );
    }
    out
}

pub fn parse_table_csv(text: &str) -> Result<Vec<BenchmarkRow>, ReportError> {
    #[derive(Deserialize)]
    struct Raw {
        policy: String,
        dataset: String,
        accuracy: f64,
        tokens: f64,
        cr: f64,
        n: usize,
    }
    let mut r = csv::Reader::from_reader(text.as_bytes());
    r.deserialize()
        .map(|row| {
            let raw: Raw = row?;
            Ok(BenchmarkRow {
                policy: raw.policy,
                dataset: raw.dataset,
                accuracy_pct: raw.accuracy,
                mean_tokens: raw.tokens,
                mean_cr_pct: raw.cr,
                n: raw.n,
            })
        })
        .collect()
}

const W: f64 = 480.0;
const H: f64 = 320.0;
const PAD: f64 = 48.0;

fn to_px(x: f64, y: f64, (x0, x1): (f64, f64), (y0, y1): (f64, f64)) -> (f64, f64) {
    let sx = if x1 > x0 { (x - x0) / (x1 - x0) } else { 0.5 };
    let sy = if y1 > y0 { (y - y0) / (y1 - y0) } else { 0.5 };
    (PAD + sx * (W - 2.0 * PAD), H - PAD - sy * (H - 2.0 * PAD))
}

fn svg_frame(title: &str, x_label: &str, y_label: &str, body: &str) -> String {
    format!(
        concat!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n",
            "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n",
            "<text x=\"{cx}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{title}</text>\n",
            "<line x1=\"{p}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n",
            "<line x1=\"{p}\" y1=\"{p}\" x2=\"{p}\" y2=\"{b}\" stroke=\"black\"/>\n",
            "<text x=\"{cx}\" y=\"{xl}\" text-anchor=\"middle\" font-size=\"12\">{x_label}</text>\n",
            "<text x=\"14\" y=\"{cy}\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 14 {cy})\">{y_label}</text>\n",
            "{body}</svg>\n"
        ),
        w = W,
        h = H,
        cx = W / 2.0,
        cy = H / 2.0,
        p = PAD,
        b = H - PAD,
        r = W - PAD,
        xl = H - 12.0,
        title = escape(title),
        x_label = escape(x_label),
        y_label = escape(y_label),
        body = body
    )
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Accuracy against CR scatter with the frontier drawn as a line.
pub fn pareto_svg(rows: &[BenchmarkRow], frontier: &[BenchmarkRow]) -> String {
    let xr = (0.0, 100.0);
    let yr = (0.0, 100.0);
    let mut body = String::new();
    for r in rows {
        let (x, y) = to_px(r.mean_cr_pct, r.accuracy_pct, xr, yr);
        let _ = writeln!(body, "<circle cx=\"{x:.1}\" cy=\"{y:.1}\" r=\"4\" fill=\"steelblue\"/>");
        let _ = writeln!(
            body,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"10\">{}</text>",
            x + 6.0,
            y - 6.0,
            escape(&r.policy)
        );
    }
    let mut front: Vec<&BenchmarkRow> = frontier.iter().collect();
    front.sort_by(|a, b| a.mean_cr_pct.total_cmp(&b.mean_cr_pct));
    let pts: Vec<String> = front
        .iter()
        .map(|r| {
            let (x, y) = to_px(r.mean_cr_pct, r.accuracy_pct, xr, yr);
            format!("{x:.1},{y:.1}")
        })
        .collect();
    let _ = writeln!(body, "<polyline points=\"{}\" fill=\"none\" stroke=\"firebrick\"/>", pts.join(" "));
    svg_frame("Accuracy vs compression", "CR (%)", "Accuracy (%)", &body)
}

/// Line plot of `(x, y)` pairs with an optional vertical marker.
pub fn line_svg(title: &str, x_label: &str, y_label: &str, points: &[(f64, f64)], marker: Option<f64>) -> String {
    let finite = |v: f64| if v.is_finite() { v } else { 0.0 };
    let xs: Vec<f64> = points.iter().map(|p| finite(p.0)).collect();
    let ys: Vec<f64> = points.iter().map(|p| finite(p.1)).collect();
    let range = |v: &[f64]| {
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if lo.is_finite() { (lo, hi) } else { (0.0, 1.0) }
    };
    let (xr, yr) = (range(&xs), range(&ys));
    let pts: Vec<String> = xs
        .iter()
        .zip(&ys)
        .map(|(&x, &y)| {
            let (px, py) = to_px(x, y, xr, yr);
            format!("{px:.1},{py:.1}")
        })
        .collect();
    let mut body = format!("<polyline points=\"{}\" fill=\"none\" stroke=\"steelblue\"/>\n", pts.join(" "));
    if let Some(m) = marker.filter(|m| m.is_finite()) {
        let (x, _) = to_px(m, yr.0, xr, yr);
        let _ = writeln!(
            body,
            "<line x1=\"{x:.1}\" y1=\"{PAD}\" x2=\"{x:.1}\" y2=\"{:.1}\" stroke=\"firebrick\" stroke-dasharray=\"4 3\"/>",
            H - PAD
        );
    }
    svg_frame(title, x_label, y_label, &body)
}
