//! Mini-batch gradient descent with momentum on the class-weighted loss,
//! with model selection on validation Macro-F1.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::exec::ExecMode;
use crate::features::FeatureMatrix;

use super::loss::{class_weights, loss_and_grad, loss_only, ClassWeights, Sample};
use super::metrics::macro_f1;
use super::model::{predict, Arch, ProbeError, ProbeModel, DEFAULT_THRESHOLD};

/// One trace's worth of training data.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub trace_id: String,
    pub features: FeatureMatrix,
    pub labels: Vec<u8>,
    pub loss_mask: Vec<u8>,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub arch: Arch,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Tokens per gradient step.
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a validation Macro-F1 improvement before stopping.
    pub early_stop_patience: usize,
    pub validation_fraction: f64,
    pub decision_threshold: f64,
    pub seed: u64,
    pub exec: ExecMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            arch: Arch::Linear,
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 256,
            max_epochs: 200,
            early_stop_patience: 20,
            validation_fraction: 0.2,
            decision_threshold: DEFAULT_THRESHOLD,
            seed: 7,
            exec: ExecMode::default(),
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), ProbeError> {
        let bad = |m: &str| Err(ProbeError::BadConfig(m.to_string()));
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.early_stop_patience == 0 {
            return bad("batch_size, max_epochs and early_stop_patience must be positive");
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return bad("validation_fraction must be in (0, 1)");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if !(self.decision_threshold > 0.0 && self.decision_threshold < 1.0) {
            return Err(ProbeError::BadThreshold(self.decision_threshold));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Weighted loss over the whole training split after the epoch.
    pub train_loss: f64,
    pub val_macro_f1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_macro_f1: f64,
    pub class_weights: ClassWeights,
    pub train_traces: Vec<String>,
    pub val_traces: Vec<String>,
}

impl TrainReport {
    /// True when the training loss never rises by more than `tol` between
    /// consecutive epochs.
    pub fn loss_non_increasing(&self, tol: f64) -> bool {
        self.epochs
            .windows(2)
            .all(|w| w[1].train_loss <= w[0].train_loss + tol)
    }
}

/// Masked rows of a set of traces, flattened to f64.
struct TokenSet {
    dim: usize,
    x: Vec<f64>,
    y: Vec<u8>,
}

impl TokenSet {
    fn gather(examples: &[&TrainExample], dim: usize) -> Result<Self, ProbeError> {
        let mut set = TokenSet { dim, x: Vec::new(), y: Vec::new() };
        for ex in examples {
            let f = &ex.features;
            if f.dim != dim {
                return Err(ProbeError::DimMismatch { expected: dim, found: f.dim });
            }
            if ex.labels.len() != f.rows || ex.loss_mask.len() != f.rows {
                return Err(ProbeError::ShapeMismatch);
            }
            for i in (0..f.rows).filter(|&i| ex.loss_mask[i] == 1) {
                set.x.extend(f.row(i).iter().map(|&v| f64::from(v)));
                set.y.push(ex.labels[i]);
            }
        }
        Ok(set)
    }

    fn len(&self) -> usize {
        self.y.len()
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.dim..(i + 1) * self.dim]
    }

    fn samples(&self) -> Vec<Sample<'_>> {
        (0..self.len()).map(|i| Sample { x: self.row(i), y: self.y[i] }).collect()
    }

    fn standardize(&mut self, mean: &[f64], scale: &[f64]) {
        for row in self.x.chunks_mut(self.dim) {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean[j]) / scale[j];
            }
        }
    }

    fn moments(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.len().max(1) as f64;
        let mut mean = vec![0.0; self.dim];
        for row in self.x.chunks(self.dim) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; self.dim];
        for row in self.x.chunks(self.dim) {
            for j in 0..self.dim {
                var[j] += (row[j] - mean[j]).powi(2);
            }
        }
        let scale = var
            .into_iter()
            .map(|v| {
                let s = (v / n).sqrt();
                if s > 1e-12 { s } else { 1.0 }
            })
            .collect();
        (mean, scale)
    }
}

fn init_weights(arch: &Arch, dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let widths = arch.widths(dim);
    let mut w = Vec::with_capacity(arch.param_count(dim));
    for p in widths.windows(2) {
        let (n_in, n_out) = (p[0], p[1]);
        let limit = (6.0 / (n_in + n_out) as f64).sqrt();
        w.extend((0..n_in * n_out).map(|_| rng.gen_range(-limit..limit)));
        w.extend(std::iter::repeat_n(0.0, n_out));
    }
    w
}

fn val_macro_f1(model: &ProbeModel, set: &TokenSet) -> f64 {
    if set.len() == 0 {
        return 0.0;
    }
    let preds: Vec<u8> = (0..set.len())
        .map(|i| {
            let p = predict(model, set.row(i)).unwrap_or(0.0);
            u8::from(p >= model.decision_threshold)
        })
        .collect();
    macro_f1(&set.y, &preds).unwrap_or(0.0)
}

/// Splits traces (not tokens) into train and validation using `seed`.
pub fn split_traces(n: usize, validation_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>), ProbeError> {
    if n < 2 {
        return Err(ProbeError::TooFewTraces(n));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((n as f64 * validation_fraction).round() as usize).clamp(1, n - 1);
    let val = idx[..n_val].to_vec();
    let train = idx[n_val..].to_vec();
    Ok((train, val))
}

pub fn train(dataset: &[TrainExample], config: &TrainConfig) -> Result<(ProbeModel, TrainReport), ProbeError> {
    config.validate()?;
    let dim = dataset.first().map_or(0, |e| e.features.dim);
    // Sort by trace_id so the split does not depend on input order.
    let mut ordered: Vec<&TrainExample> = dataset.iter().collect();
    ordered.sort_by(|a, b| a.trace_id.cmp(&b.trace_id));
    let (train_idx, val_idx) = split_traces(ordered.len(), config.validation_fraction, config.seed)?;
    let train_ex: Vec<&TrainExample> = train_idx.iter().map(|&i| ordered[i]).collect();
    let val_ex: Vec<&TrainExample> = val_idx.iter().map(|&i| ordered[i]).collect();

    let mut train_set = TokenSet::gather(&train_ex, dim)?;
    let mut val_set = TokenSet::gather(&val_ex, dim)?;
    let n1 = train_set.y.iter().filter(|&&y| y == 1).count();
    let weights = class_weights(train_set.len() - n1, n1)?;

    let (mean, scale) = train_set.moments();
    train_set.standardize(&mean, &scale);
    val_set.standardize(&mean, &scale);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut model = ProbeModel::new(
        config.arch.clone(),
        dim,
        init_weights(&config.arch, dim, &mut rng),
        config.decision_threshold,
    )?;
    let mut velocity = vec![0.0; model.weights.len()];
    let all_samples = train_set.samples();
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    let mut epochs = Vec::new();
    let mut best: Option<(f64, usize, Vec<f64>)> = None;
    let mut since_best = 0;
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let samples: Vec<Sample<'_>> = batch.iter().map(|&i| all_samples[i]).collect();
            let (_, grad) = loss_and_grad(&model, &samples, weights, config.exec)
                .map_err(|_| ProbeError::Diverged(epoch))?;
            for ((w, v), g) in model.weights.iter_mut().zip(&mut velocity).zip(&grad) {
                *v = config.momentum * *v - config.learning_rate * g;
                *w += *v;
            }
            if model.weights.iter().any(|w| !w.is_finite()) {
                return Err(ProbeError::Diverged(epoch));
            }
        }
        let train_loss =
            loss_only(&model, &all_samples, weights, config.exec).map_err(|_| ProbeError::Diverged(epoch))?;
        let f1 = val_macro_f1(&model, &val_set);
        epochs.push(EpochStats { epoch, train_loss, val_macro_f1: f1 });
        if best.as_ref().is_none_or(|(b, _, _)| f1 > *b) {
            best = Some((f1, epoch, model.weights.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.early_stop_patience {
                break;
            }
        }
    }
    let (best_f1, best_epoch, best_weights) = best.expect("at least one epoch runs");
    model.weights = best_weights;
    model.fold_standardization(&mean, &scale);
    let report = TrainReport {
        epochs,
        best_epoch,
        best_val_macro_f1: best_f1,
        class_weights: weights,
        train_traces: train_ex.iter().map(|e| e.trace_id.clone()).collect(),
        val_traces: val_ex.iter().map(|e| e.trace_id.clone()).collect(),
    };
    Ok((model, report))
}

/// Synthetic linearly separable task: 4-d features, label 1 iff the first
/// feature is positive, with `|feature[0]| >= margin`. Labels switch from 0 to
/// 1 at a random position in each trace.
pub fn separable_fixture(n_traces: usize, len: usize, margin: f64, seed: u64) -> Vec<TrainExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_traces)
        .map(|t| {
            let i_star = rng.gen_range(1..len);
            let mut rows = Vec::with_capacity(len);
            for i in 0..len {
                let sign = if i >= i_star { 1.0 } else { -1.0 };
                let lead = sign * (margin + rng.gen::<f64>());
                rows.push(vec![
                    lead,
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ]);
            }
            let id = format!("syn-{t:04}");
            TrainExample {
                features: FeatureMatrix::from_rows(&id, &rows),
                trace_id: id,
                labels: (0..len).map(|i| u8::from(i >= i_star)).collect(),
                loss_mask: vec![1; len],
            }
        })
        .collect()
}
