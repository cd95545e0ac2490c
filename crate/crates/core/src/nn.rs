//! Minimal fully-connected network: ReLU hidden layers, identity output,
//! exact backpropagation and SGD/Adam updates.
//!
//! Parameters live in one flat vector, layer by layer, each layer stored as its
//! row-major `out x in` weight matrix followed by its bias vector. Gradients and
//! optimizer moments share that layout.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::NnError;

const CHECKPOINT_FORMAT: &str = "sigimpute-mlp";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    params: Vec<f64>,
    // offset of each layer's weights in `params`
    offsets: Vec<usize>,
}

/// Batch loss for one training step.
#[derive(Clone, Copy, Debug)]
pub enum Loss<'a> {
    /// Mean over samples and outputs of the squared error; `targets` is
    /// `batch x output_dim`, flattened.
    Mse { targets: &'a [f64] },
    /// Squared error of one selected output per sample, averaged over samples
    /// (the Q-learning regression to a Bellman target).
    Selected { outputs: &'a [usize], targets: &'a [f64] },
}

impl Mlp {
    /// Fan-in scaled uniform weights `U(-sqrt(6/fan_in), sqrt(6/fan_in))`, zero biases.
    pub fn new(sizes: &[usize], seed: u64) -> Result<Self, NnError> {
        let mut mlp = Self::zeros(sizes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in 0..mlp.num_layers() {
            let (n_in, n_out) = (sizes[l], sizes[l + 1]);
            let limit = (6.0 / n_in as f64).sqrt();
            let off = mlp.offsets[l];
            for w in &mut mlp.params[off..off + n_in * n_out] {
                *w = rng.random_range(-limit..limit);
            }
        }
        Ok(mlp)
    }

    pub fn zeros(sizes: &[usize]) -> Result<Self, NnError> {
        if sizes.len() < 2 {
            return Err(NnError::TooFewLayers(sizes.len()));
        }
        if let Some(l) = sizes.iter().position(|&s| s == 0) {
            return Err(NnError::ZeroWidth(l));
        }
        let mut offsets = Vec::with_capacity(sizes.len() - 1);
        let mut total = 0;
        for w in sizes.windows(2) {
            offsets.push(total);
            total += w[0] * w[1] + w[1];
        }
        Ok(Self { sizes: sizes.to_vec(), params: vec![0.0; total], offsets })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("at least two layers")
    }

    fn num_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn copy_params_from(&mut self, other: &Mlp) {
        assert_eq!(self.sizes, other.sizes, "layer sizes differ");
        self.params.copy_from_slice(&other.params);
    }

    pub fn weights(&self, layer: usize) -> &[f64] {
        let off = self.offsets[layer];
        &self.params[off..off + self.sizes[layer] * self.sizes[layer + 1]]
    }

    pub fn biases(&self, layer: usize) -> &[f64] {
        let off = self.offsets[layer] + self.sizes[layer] * self.sizes[layer + 1];
        &self.params[off..off + self.sizes[layer + 1]]
    }

    pub fn weights_mut(&mut self, layer: usize) -> &mut [f64] {
        let off = self.offsets[layer];
        let len = self.sizes[layer] * self.sizes[layer + 1];
        &mut self.params[off..off + len]
    }

    pub fn biases_mut(&mut self, layer: usize) -> &mut [f64] {
        let off = self.offsets[layer] + self.sizes[layer] * self.sizes[layer + 1];
        let len = self.sizes[layer + 1];
        &mut self.params[off..off + len]
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>, NnError> {
        if input.len() != self.input_dim() {
            return Err(NnError::Dimension { expected: self.input_dim(), got: input.len() });
        }
        let mut act = input.to_vec();
        for l in 0..self.num_layers() {
            act = self.layer_forward(l, &act);
        }
        Ok(act)
    }

    fn layer_forward(&self, l: usize, x: &[f64]) -> Vec<f64> {
        let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
        let w = self.weights(l);
        let b = self.biases(l);
        let hidden = l + 1 < self.num_layers();
        (0..n_out)
            .map(|o| {
                let row = &w[o * n_in..(o + 1) * n_in];
                let z = b[o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
                if hidden { z.max(0.0) } else { z }
            })
            .collect()
    }

    /// Batch loss and its exact gradient with respect to every parameter.
    /// `inputs` is `batch x input_dim`, flattened.
    pub fn loss_and_grad(&self, inputs: &[f64], loss: Loss<'_>) -> Result<(f64, Vec<f64>), NnError> {
        let d_in = self.input_dim();
        let d_out = self.output_dim();
        if inputs.is_empty() {
            return Err(NnError::EmptyBatch);
        }
        if !inputs.len().is_multiple_of(d_in) {
            return Err(NnError::Dimension { expected: d_in, got: inputs.len() % d_in });
        }
        let n = inputs.len() / d_in;
        match loss {
            Loss::Mse { targets } if targets.len() != n * d_out => {
                return Err(NnError::Dimension { expected: n * d_out, got: targets.len() })
            }
            Loss::Selected { outputs, targets } if outputs.len() != n || targets.len() != n => {
                return Err(NnError::Dimension { expected: n, got: outputs.len().min(targets.len()) })
            }
            Loss::Selected { outputs, .. } if outputs.iter().any(|&a| a >= d_out) => {
                return Err(NnError::Dimension { expected: d_out, got: *outputs.iter().max().expect("non-empty") + 1 })
            }
            _ => {}
        }

        let mut grad = vec![0.0; self.params.len()];
        let mut total = 0.0;
        let layers = self.num_layers();
        for s in 0..n {
            // forward, keeping every layer's activation
            let mut acts = Vec::with_capacity(layers + 1);
            acts.push(inputs[s * d_in..(s + 1) * d_in].to_vec());
            for l in 0..layers {
                let next = self.layer_forward(l, &acts[l]);
                acts.push(next);
            }
            let out = &acts[layers];
            let mut delta = vec![0.0; d_out];
            match loss {
                Loss::Mse { targets } => {
                    let scale = 1.0 / (n * d_out) as f64;
                    for o in 0..d_out {
                        let r = out[o] - targets[s * d_out + o];
                        total += r * r * scale;
                        delta[o] = 2.0 * r * scale;
                    }
                }
                Loss::Selected { outputs, targets } => {
                    let a = outputs[s];
                    let r = out[a] - targets[s];
                    total += r * r / n as f64;
                    delta[a] = 2.0 * r / n as f64;
                }
            }
            // backward
            for l in (0..layers).rev() {
                let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
                let x = &acts[l];
                let off = self.offsets[l];
                let boff = off + n_in * n_out;
                for o in 0..n_out {
                    let d = delta[o];
                    if d == 0.0 {
                        continue;
                    }
                    grad[boff + o] += d;
                    let g = &mut grad[off + o * n_in..off + (o + 1) * n_in];
                    for (gi, xi) in g.iter_mut().zip(x) {
                        *gi += d * xi;
                    }
                }
                if l > 0 {
                    let w = self.weights(l);
                    let mut prev = vec![0.0; n_in];
                    for (o, d) in delta.iter().enumerate() {
                        if *d == 0.0 {
                            continue;
                        }
                        for (p, wi) in prev.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                            *p += d * wi;
                        }
                    }
                    // ReLU derivative: zero where the activation was clamped
                    for (p, a) in prev.iter_mut().zip(x) {
                        if *a <= 0.0 {
                            *p = 0.0;
                        }
                    }
                    delta = prev;
                }
            }
        }
        if !total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(NnError::Divergence);
        }
        Ok((total, grad))
    }

    /// Computes the loss and gradient, applies one optimizer update and returns
    /// the pre-update loss.
    pub fn train_step(&mut self, inputs: &[f64], loss: Loss<'_>, opt: &mut Optimizer) -> Result<f64, NnError> {
        let (value, grad) = self.loss_and_grad(inputs, loss)?;
        opt.apply(&mut self.params, grad)?;
        Ok(value)
    }

    pub fn to_checkpoint(&self, input_layout: &str) -> MlpCheckpoint {
        MlpCheckpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            input_layout: input_layout.to_string(),
            layer_sizes: self.sizes.clone(),
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: &MlpCheckpoint) -> Result<Self, NnError> {
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(NnError::Checkpoint(format!("unsupported format {} v{}", ckpt.format, ckpt.version)));
        }
        let mut mlp = Self::zeros(&ckpt.layer_sizes)?;
        if ckpt.params.len() != mlp.params.len() {
            return Err(NnError::Checkpoint(format!(
                "expected {} parameters, found {}",
                mlp.params.len(),
                ckpt.params.len()
            )));
        }
        if ckpt.params.iter().any(|p| !p.is_finite()) {
            return Err(NnError::Checkpoint("non-finite parameter".into()));
        }
        mlp.params.copy_from_slice(&ckpt.params);
        Ok(mlp)
    }
}

/// Parameter dump shared by Q-networks and reward models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpCheckpoint {
    pub format: String,
    pub version: u32,
    /// Free-text description of the input vector layout.
    pub input_layout: String,
    pub layer_sizes: Vec<usize>,
    pub params: Vec<f64>,
}

impl MlpCheckpoint {
    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        let text = serde_json::to_string(self).map_err(|e| NnError::Checkpoint(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NnError> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| NnError::Checkpoint(e.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub const ADAM: OptimizerKind = OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 };
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub kind: OptimizerKind,
    /// Rescale the gradient to this global L2 norm when it is exceeded.
    pub clip_norm: Option<f64>,
}

impl OptimizerConfig {
    pub fn adam(learning_rate: f64) -> Self {
        Self { learning_rate, kind: OptimizerKind::ADAM, clip_norm: None }
    }

    pub fn sgd(learning_rate: f64) -> Self {
        Self { learning_rate, kind: OptimizerKind::Sgd, clip_norm: None }
    }
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Result<Self, NnError> {
        if !(config.learning_rate.is_finite() && config.learning_rate >= 0.0) {
            return Err(NnError::InvalidLearningRate);
        }
        Ok(Self { config, m: Vec::new(), v: Vec::new(), t: 0 })
    }

    pub fn apply(&mut self, params: &mut [f64], mut grad: Vec<f64>) -> Result<(), NnError> {
        if grad.len() != params.len() {
            return Err(NnError::Dimension { expected: params.len(), got: grad.len() });
        }
        if let Some(max) = self.config.clip_norm {
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > max {
                grad.iter_mut().for_each(|g| *g *= max / norm);
            }
        }
        let lr = self.config.learning_rate;
        match self.config.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(&grad) {
                    *p -= lr * g;
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                if self.m.len() != params.len() {
                    self.m = vec![0.0; params.len()];
                    self.v = vec![0.0; params.len()];
                    self.t = 0;
                }
                self.t += 1;
                let c1 = 1.0 - beta1.powi(self.t);
                let c2 = 1.0 - beta2.powi(self.t);
                for i in 0..params.len() {
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * grad[i];
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * grad[i] * grad[i];
                    params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}
