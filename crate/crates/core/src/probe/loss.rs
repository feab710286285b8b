//! Class-weighted binary cross-entropy and inverse-frequency class weights.

use crate::exec::{self, ExecMode};
use crate::features::FeatureMatrix;

use super::model::{sigmoid, ProbeError, ProbeModel};

/// Probabilities are clamped to `[EPS, 1 - EPS]` before taking logs.
pub const EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassWeights {
    pub w0: f64,
    pub w1: f64,
}

impl ClassWeights {
    pub const UNIT: ClassWeights = ClassWeights { w0: 1.0, w1: 1.0 };
}

/// Inverse-frequency weights: `w_c = (n0 + n1) / (2 n_c)`.
pub fn class_weights(n0: usize, n1: usize) -> Result<ClassWeights, ProbeError> {
    if n0 == 0 || n1 == 0 {
        return Err(ProbeError::MissingClass { n0, n1 });
    }
    let total = (n0 + n1) as f64;
    Ok(ClassWeights {
        w0: total / (2.0 * n0 as f64),
        w1: total / (2.0 * n1 as f64),
    })
}

/// A labeled token: its feature row and label.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub x: &'a [f64],
    pub y: u8,
}

/// Rows accumulated per parallel chunk; fixed so reductions are reproducible.
const CHUNK: usize = 256;

/// Loss and gradient averaged over `samples`.
pub fn loss_and_grad(
    model: &ProbeModel,
    samples: &[Sample<'_>],
    weights: ClassWeights,
    mode: ExecMode,
) -> Result<(f64, Vec<f64>), ProbeError> {
    if samples.is_empty() {
        return Err(ProbeError::EmptyMask);
    }
    let n_params = model.weights.len();
    let partials = exec::map_chunks(mode, samples, CHUNK, |chunk| {
        let mut loss = 0.0;
        let mut grad = vec![0.0; n_params];
        for s in chunk {
            let pass = model.forward(s.x);
            let p = sigmoid(pass.logit);
            let clamped = !(EPS..=1.0 - EPS).contains(&p);
            let pc = p.clamp(EPS, 1.0 - EPS);
            let y = f64::from(s.y);
            loss -= weights.w1 * y * pc.ln() + weights.w0 * (1.0 - y) * (1.0 - pc).ln();
            if !clamped {
                // d/dz of the per-token loss; zero where the clamp is active.
                let dz = weights.w0 * (1.0 - y) * p - weights.w1 * y * (1.0 - p);
                model.backward(&pass, dz, &mut grad);
            }
        }
        (loss, grad)
    });
    let mut loss = 0.0;
    let mut grad = vec![0.0; n_params];
    for (l, g) in partials {
        loss += l;
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    let n = samples.len() as f64;
    loss /= n;
    grad.iter_mut().for_each(|g| *g /= n);
    if !loss.is_finite() {
        return Err(ProbeError::NonFiniteLoss);
    }
    Ok((loss, grad))
}

/// Loss averaged over masked positions only.
pub fn loss_only(
    model: &ProbeModel,
    samples: &[Sample<'_>],
    weights: ClassWeights,
    mode: ExecMode,
) -> Result<f64, ProbeError> {
    if samples.is_empty() {
        return Err(ProbeError::EmptyMask);
    }
    let partials = exec::map_chunks(mode, samples, CHUNK, |chunk| {
        chunk
            .iter()
            .map(|s| {
                let p = sigmoid(model.forward(s.x).logit).clamp(EPS, 1.0 - EPS);
                let y = f64::from(s.y);
                -(weights.w1 * y * p.ln() + weights.w0 * (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<f64>()
    });
    let loss = partials.into_iter().sum::<f64>() / samples.len() as f64;
    if !loss.is_finite() {
        return Err(ProbeError::NonFiniteLoss);
    }
    Ok(loss)
}

/// Class-weighted BCE of one trace, normalized by the number of masked
/// positions, with its exact gradient.
pub fn weighted_bce(
    model: &ProbeModel,
    features: &FeatureMatrix,
    labels: &[u8],
    loss_mask: &[u8],
    weights: ClassWeights,
) -> Result<(f64, Vec<f64>), ProbeError> {
    if labels.len() != features.rows || loss_mask.len() != features.rows {
        return Err(ProbeError::ShapeMismatch);
    }
    if features.dim != model.input_dim {
        return Err(ProbeError::DimMismatch { expected: model.input_dim, found: features.dim });
    }
    let rows: Vec<(Vec<f64>, u8)> = (0..features.rows)
        .filter(|&i| loss_mask[i] == 1)
        .map(|i| (features.row_f64(i), labels[i]))
        .collect();
    let samples: Vec<Sample<'_>> = rows.iter().map(|(x, y)| Sample { x, y: *y }).collect();
    loss_and_grad(model, &samples, weights, ExecMode::Sequential)
}
