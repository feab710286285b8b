use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProbeError {
    #[error("expected {expected} features, got {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("expected {expected} weights, got {found}")]
    WeightCount { expected: usize, found: usize },
    #[error("decision threshold {0} outside (0, 1)")]
    BadThreshold(f64),
    #[error("missing class: n0 = {n0}, n1 = {n1}")]
    MissingClass { n0: usize, n1: usize },
    #[error("loss mask has no active position")]
    EmptyMask,
    #[error("non-finite loss")]
    NonFiniteLoss,
    #[error("labels/mask/features disagree in length")]
    ShapeMismatch,
    #[error("training diverged at epoch {0}")]
    Diverged(usize),
    #[error("need at least two traces to split train/validation, got {0}")]
    TooFewTraces(usize),
    #[error("invalid training config: {0}")]
    BadConfig(String),
}

/// Probe architecture: a logistic head, optionally behind tanh hidden layers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Arch {
    Linear,
    Mlp { hidden: Vec<usize> },
}

impl Arch {
    pub fn hidden(&self) -> &[usize] {
        match self {
            Arch::Linear => &[],
            Arch::Mlp { hidden } => hidden,
        }
    }

    pub fn tag(&self) -> u8 {
        match self {
            Arch::Linear => 0,
            Arch::Mlp { .. } => 1,
        }
    }

    /// Layer widths from input to the single output unit.
    pub fn widths(&self, input_dim: usize) -> Vec<usize> {
        let mut w = vec![input_dim];
        w.extend_from_slice(self.hidden());
        w.push(1);
        w
    }

    /// Number of parameters, biases included.
    pub fn param_count(&self, input_dim: usize) -> usize {
        self.widths(input_dim)
            .windows(2)
            .map(|p| p[1] * p[0] + p[1])
            .sum()
    }
}

/// `linear`, `mlp` (one hidden layer of 64) or `mlp:64,32`.
impl std::str::FromStr for Arch {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.split_once(':') {
            None if s == "linear" => Ok(Arch::Linear),
            None if s == "mlp" => Ok(Arch::Mlp { hidden: vec![64] }),
            Some(("mlp", widths)) => {
                let hidden = widths
                    .split(',')
                    .map(|w| w.trim().parse::<usize>().ok().filter(|&w| w > 0))
                    .collect::<Option<Vec<_>>>()
                    .ok_or_else(|| format!("bad hidden widths `{widths}`"))?;
                Ok(Arch::Mlp { hidden })
            }
            _ => Err(format!("unknown architecture `{s}`")),
        }
    }
}

/// Default decision threshold on the probe probability.
pub const DEFAULT_THRESHOLD: f64 = 0.7;

/// Per-token binary classifier. Parameters are stored layer by layer, each
/// layer as its row-major `out x in` weight matrix followed by `out` biases.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeModel {
    pub arch: Arch,
    pub input_dim: usize,
    pub weights: Vec<f64>,
    pub decision_threshold: f64,
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Activations of one forward pass, kept for backpropagation.
pub(crate) struct ForwardPass {
    /// Inputs to each layer; `acts[0]` is the feature vector.
    pub acts: Vec<Vec<f64>>,
    pub logit: f64,
}

impl ProbeModel {
    pub fn new(arch: Arch, input_dim: usize, weights: Vec<f64>, threshold: f64) -> Result<Self, ProbeError> {
        let expected = arch.param_count(input_dim);
        if weights.len() != expected {
            return Err(ProbeError::WeightCount { expected, found: weights.len() });
        }
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(ProbeError::BadThreshold(threshold));
        }
        Ok(ProbeModel { arch, input_dim, weights, decision_threshold: threshold })
    }

    pub fn zeros(arch: Arch, input_dim: usize) -> Self {
        let n = arch.param_count(input_dim);
        ProbeModel { arch, input_dim, weights: vec![0.0; n], decision_threshold: DEFAULT_THRESHOLD }
    }

    pub(crate) fn forward(&self, x: &[f64]) -> ForwardPass {
        let widths = self.arch.widths(self.input_dim);
        let layers = widths.len() - 1;
        let mut acts = vec![x.to_vec()];
        let mut offset = 0;
        let mut logit = 0.0;
        for l in 0..layers {
            let (n_in, n_out) = (widths[l], widths[l + 1]);
            let w = &self.weights[offset..offset + n_out * n_in];
            let b = &self.weights[offset + n_out * n_in..offset + n_out * n_in + n_out];
            offset += n_out * n_in + n_out;
            let input = acts.last().expect("input layer");
            let z: Vec<f64> = (0..n_out)
                .map(|o| {
                    w[o * n_in..(o + 1) * n_in]
                        .iter()
                        .zip(input)
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        + b[o]
                })
                .collect();
            if l + 1 == layers {
                logit = z[0];
            } else {
                acts.push(z.into_iter().map(f64::tanh).collect());
            }
        }
        ForwardPass { acts, logit }
    }

    /// Adds `scale * d logit / d params` at `x` into `grad`.
    pub(crate) fn backward(&self, pass: &ForwardPass, scale: f64, grad: &mut [f64]) {
        let widths = self.arch.widths(self.input_dim);
        let layers = widths.len() - 1;
        let mut offsets = Vec::with_capacity(layers);
        let mut off = 0;
        for l in 0..layers {
            offsets.push(off);
            off += widths[l + 1] * widths[l] + widths[l + 1];
        }
        // delta = d(scaled logit) / d(pre-activation) of the current layer.
        let mut delta = vec![scale];
        for l in (0..layers).rev() {
            let (n_in, n_out) = (widths[l], widths[l + 1]);
            let input = &pass.acts[l];
            let base = offsets[l];
            for o in 0..n_out {
                let row = &mut grad[base + o * n_in..base + (o + 1) * n_in];
                for (g, a) in row.iter_mut().zip(input) {
                    *g += delta[o] * a;
                }
                grad[base + n_out * n_in + o] += delta[o];
            }
            if l > 0 {
                let w = &self.weights[base..base + n_out * n_in];
                delta = (0..n_in)
                    .map(|i| {
                        let back: f64 = (0..n_out).map(|o| w[o * n_in + i] * delta[o]).sum();
                        back * (1.0 - input[i] * input[i])
                    })
                    .collect();
            }
        }
    }

    /// Pre-activation of the output unit.
    pub fn logit(&self, x: &[f64]) -> Result<f64, ProbeError> {
        self.check_dim(x)?;
        Ok(self.forward(x).logit)
    }

    fn check_dim(&self, x: &[f64]) -> Result<(), ProbeError> {
        if x.len() != self.input_dim {
            return Err(ProbeError::DimMismatch { expected: self.input_dim, found: x.len() });
        }
        Ok(())
    }

    /// Folds a per-feature standardization `(x - mean) / scale` into the first
    /// layer so the model consumes raw features.
    pub(crate) fn fold_standardization(&mut self, mean: &[f64], scale: &[f64]) {
        let n_in = self.input_dim;
        let n_out = self.arch.widths(n_in)[1];
        let (w, rest) = self.weights.split_at_mut(n_out * n_in);
        for o in 0..n_out {
            let mut shift = 0.0;
            for i in 0..n_in {
                let wi = w[o * n_in + i] / scale[i];
                shift += wi * mean[i];
                w[o * n_in + i] = wi;
            }
            rest[o] -= shift;
        }
    }
}

/// Probability that the answer has already been generated at this token.
pub fn predict(model: &ProbeModel, features: &[f64]) -> Result<f64, ProbeError> {
    Ok(sigmoid(model.logit(features)?))
}
