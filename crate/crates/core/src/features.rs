//! Per-token feature vectors.
//!
//! Two providers exist. Hidden-state features come from `OPTX` sidecar files
//! written by an external extractor; they are only available offline. The
//! log-probability provider derives a small vector from each token's top-K
//! slice and can run online against any endpoint that returns logprobs.

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::analysis::token_confidence;
use crate::trace::{Trace, TokenRecord};

pub const OPTX_MAGIC: &[u8; 4] = b"OPTX";
pub const OPTX_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

/// Smoothing factor of the moving average of Token-Confidence.
pub const CONFIDENCE_EMA_ALPHA: f64 = 0.1;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported sidecar version {0}")]
    VersionMismatch(u32),
    #[error("truncated sidecar: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("row count mismatch: expected {expected}, found {found}")]
    RowCountMismatch { expected: usize, found: usize },
    #[error("non-finite value at row {row}, col {col}")]
    NonFiniteValue { row: usize, col: usize },
    #[error("feature provider `{0}` is not available for live streams")]
    FeatureUnavailable(&'static str),
}

/// Row-major `rows x dim` matrix of single-precision features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub trace_id: String,
    pub rows: usize,
    pub dim: usize,
    pub values: Vec<f32>,
}

impl FeatureMatrix {
    pub fn zeros(trace_id: &str, rows: usize, dim: usize) -> Self {
        FeatureMatrix {
            trace_id: trace_id.to_string(),
            rows,
            dim,
            values: vec![0.0; rows * dim],
        }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    /// Row `i` widened to f64.
    pub fn row_f64(&self, i: usize) -> Vec<f64> {
        self.row(i).iter().map(|&v| f64::from(v)).collect()
    }

    pub fn from_rows(trace_id: &str, rows: &[Vec<f64>]) -> Self {
        let dim = rows.first().map_or(0, Vec::len);
        FeatureMatrix {
            trace_id: trace_id.to_string(),
            rows: rows.len(),
            dim,
            values: rows.iter().flatten().map(|&v| v as f32).collect(),
        }
    }
}

pub fn encode_optx(m: &FeatureMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + m.values.len() * 4);
    out.extend_from_slice(OPTX_MAGIC);
    out.extend_from_slice(&OPTX_VERSION.to_le_bytes());
    out.extend_from_slice(&(m.rows as u32).to_le_bytes());
    out.extend_from_slice(&(m.dim as u32).to_le_bytes());
    for v in &m.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

pub fn decode_optx(trace_id: &str, bytes: &[u8]) -> Result<FeatureMatrix, FeatureError> {
    if bytes.len() < 4 || &bytes[..4] != OPTX_MAGIC {
        return Err(FeatureError::BadMagic);
    }
    if bytes.len() < HEADER_LEN {
        return Err(FeatureError::Truncated {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let version = u32_at(bytes, 4);
    if version != OPTX_VERSION {
        return Err(FeatureError::VersionMismatch(version));
    }
    let rows = u32_at(bytes, 8) as usize;
    let dim = u32_at(bytes, 12) as usize;
    let expected = HEADER_LEN + rows * dim * 4;
    if bytes.len() != expected {
        return Err(FeatureError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    let mut values = Vec::with_capacity(rows * dim);
    for (n, chunk) in bytes[HEADER_LEN..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        if !v.is_finite() {
            return Err(FeatureError::NonFiniteValue {
                row: n / dim,
                col: n % dim,
            });
        }
        values.push(v);
    }
    Ok(FeatureMatrix {
        trace_id: trace_id.to_string(),
        rows,
        dim,
        values,
    })
}

pub fn write_optx(path: &Path, m: &FeatureMatrix) -> Result<(), FeatureError> {
    fs::write(path, encode_optx(m))?;
    Ok(())
}

pub fn read_optx(path: &Path, trace_id: &str) -> Result<FeatureMatrix, FeatureError> {
    decode_optx(trace_id, &fs::read(path)?)
}

/// Sidecar file name for a trace: `<trace_id>.optx`.
pub fn sidecar_name(trace_id: &str) -> String {
    format!("{trace_id}.optx")
}

/// Loads the sidecar for `trace` and checks that it has one row per token.
pub fn attach_features(trace: &Trace, sidecar: &Path) -> Result<FeatureMatrix, FeatureError> {
    let m = read_optx(sidecar, &trace.trace_id)?;
    if m.rows != trace.len() {
        return Err(FeatureError::RowCountMismatch {
            expected: trace.len(),
            found: m.rows,
        });
    }
    Ok(m)
}

/// Selects where per-token features come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureSource {
    /// Hidden states from `OPTX` sidecars.
    Sidecar,
    /// Online features from top-K logprobs.
    Logprob,
}

impl std::str::FromStr for FeatureSource {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "sidecar" => Ok(FeatureSource::Sidecar),
            "logprob" => Ok(FeatureSource::Logprob),
            other => Err(format!("unknown feature source `{other}`")),
        }
    }
}

/// Streaming feature computation: one vector per pushed token.
pub trait FeatureProvider: Send {
    fn dim(&self) -> usize;
    fn reset(&mut self);
    fn push(&mut self, record: &TokenRecord) -> Vec<f64>;
}

/// `[C_i, chosen logprob, top1 - top2 margin, EMA(C)]` per token.
#[derive(Debug, Clone, Default)]
pub struct LogprobFeatures {
    ema: Option<f64>,
}

pub const LOGPROB_FEATURE_DIM: usize = 4;

impl LogprobFeatures {
    pub fn new() -> Self {
        Self::default()
    }

    /// Computes the whole matrix for a stored trace.
    pub fn matrix(trace: &Trace) -> FeatureMatrix {
        let mut p = LogprobFeatures::new();
        let rows: Vec<Vec<f64>> = trace.cot_tokens.iter().map(|r| p.push(r)).collect();
        let mut m = FeatureMatrix::from_rows(&trace.trace_id, &rows);
        m.dim = LOGPROB_FEATURE_DIM;
        m
    }
}

impl FeatureProvider for LogprobFeatures {
    fn dim(&self) -> usize {
        LOGPROB_FEATURE_DIM
    }

    fn reset(&mut self) {
        self.ema = None;
    }

    fn push(&mut self, record: &TokenRecord) -> Vec<f64> {
        let conf = token_confidence(record).unwrap_or(0.0);
        let margin = match record.top_k.as_slice() {
            [a, b, ..] => a.logprob - b.logprob,
            _ => 0.0,
        };
        let ema = match self.ema {
            None => conf,
            Some(prev) => CONFIDENCE_EMA_ALPHA * conf + (1.0 - CONFIDENCE_EMA_ALPHA) * prev,
        };
        self.ema = Some(ema);
        vec![conf, record.chosen_logprob, margin, ema]
    }
}
