//! Minimal differentiable models with hand-derived gradients.
//!
//! Two architectures: softmax regression and a one-hidden-layer ReLU MLP
//! whose hidden width is configurable, so the parameter blocks can be made
//! deliberately imbalanced (a small bias block next to a weight block that
//! is orders of magnitude larger). No autodiff, no framework: gradients are
//! written out by hand, which keeps training fully deterministic and easy
//! to audit with finite differences.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{LayerPartition, ParamVector};
use crate::seeding::rng_for;

/// Model architecture, with enough information to derive the flat parameter
/// dimension and the canonical layer partition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelArch {
    /// Multinomial logistic regression: blocks `[input_dim * classes, classes]`.
    Softmax { input_dim: usize, num_classes: usize },
    /// One hidden ReLU layer: blocks
    /// `[input_dim * hidden, hidden, hidden * classes, classes]`.
    Mlp1 {
        input_dim: usize,
        hidden_dim: usize,
        num_classes: usize,
    },
}

impl ModelArch {
    pub fn input_dim(&self) -> usize {
        match *self {
            ModelArch::Softmax { input_dim, .. } => input_dim,
            ModelArch::Mlp1 { input_dim, .. } => input_dim,
        }
    }

    pub fn num_classes(&self) -> usize {
        match *self {
            ModelArch::Softmax { num_classes, .. } => num_classes,
            ModelArch::Mlp1 { num_classes, .. } => num_classes,
        }
    }

    /// Flat parameter dimension `d`.
    pub fn param_dim(&self) -> usize {
        self.canonical_partition().total_dim()
    }

    /// Canonical layer partition of the flat parameter vector: one block per
    /// weight matrix or bias vector, in forward order.
    pub fn canonical_partition(&self) -> LayerPartition {
        let blocks = match *self {
            ModelArch::Softmax {
                input_dim,
                num_classes,
            } => vec![input_dim * num_classes, num_classes],
            ModelArch::Mlp1 {
                input_dim,
                hidden_dim,
                num_classes,
            } => vec![
                input_dim * hidden_dim,
                hidden_dim,
                hidden_dim * num_classes,
                num_classes,
            ],
        };
        LayerPartition::new(blocks).expect("arch dimensions are positive")
    }

    fn check_valid(&self) -> Result<()> {
        let ok = match *self {
            ModelArch::Softmax {
                input_dim,
                num_classes,
            } => input_dim >= 1 && num_classes >= 2,
            ModelArch::Mlp1 {
                input_dim,
                hidden_dim,
                num_classes,
            } => input_dim >= 1 && hidden_dim >= 1 && num_classes >= 2,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidSpec(
                "model dims must be positive with at least 2 classes".into(),
            ))
        }
    }

    fn check_params(&self, params: &ParamVector) -> Result<()> {
        if params.dim() != self.param_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.param_dim(),
                got: params.dim(),
            });
        }
        Ok(())
    }
}

/// A labelled dataset stored as a dense row-major feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    feature_dim: usize,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(features: Vec<f64>, feature_dim: usize, labels: Vec<usize>) -> Result<Self> {
        if feature_dim == 0 || features.len() != feature_dim * labels.len() {
            return Err(Error::InvalidSpec(format!(
                "feature matrix of {} values does not form {} rows of width {}",
                features.len(),
                labels.len(),
                feature_dim
            )));
        }
        for (index, v) in features.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite { index });
            }
        }
        Ok(Self {
            features,
            feature_dim,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Copy out the rows at `indices`, in order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.feature_dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            features,
            feature_dim: self.feature_dim,
            labels,
        }
    }

    /// Replace the label of row `i`.
    pub(crate) fn set_label(&mut self, i: usize, label: usize) {
        self.labels[i] = label;
    }
}

/// Local optimizer configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSpec {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub epochs_per_round: usize,
    pub batch_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl OptimizerSpec {
    /// Adam with the defaults used throughout the experiments:
    /// learning rate 0.001, 10 epochs per round, batch size 32.
    pub fn adam_default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate: 0.001,
            epochs_per_round: 10,
            batch_size: 32,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
        }
    }

    pub fn sgd(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            learning_rate,
            ..Self::adam_default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::InvalidSpec("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidSpec("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Initialize parameters: weights uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`,
/// biases zero. Deterministic under `(arch, seed)`.
pub fn init_params(arch: &ModelArch, seed: u64) -> Result<ParamVector> {
    arch.check_valid()?;
    let mut rng = rng_for(seed, 0x1217, 0);
    let mut values = Vec::with_capacity(arch.param_dim());
    match *arch {
        ModelArch::Softmax {
            input_dim,
            num_classes,
        } => {
            let bound = 1.0 / (input_dim as f64).sqrt();
            for _ in 0..input_dim * num_classes {
                values.push(rng.gen_range(-bound..bound));
            }
            values.extend(std::iter::repeat(0.0).take(num_classes));
        }
        ModelArch::Mlp1 {
            input_dim,
            hidden_dim,
            num_classes,
        } => {
            let bound1 = 1.0 / (input_dim as f64).sqrt();
            for _ in 0..input_dim * hidden_dim {
                values.push(rng.gen_range(-bound1..bound1));
            }
            values.extend(std::iter::repeat(0.0).take(hidden_dim));
            let bound2 = 1.0 / (hidden_dim as f64).sqrt();
            for _ in 0..hidden_dim * num_classes {
                values.push(rng.gen_range(-bound2..bound2));
            }
            values.extend(std::iter::repeat(0.0).take(num_classes));
        }
    }
    ParamVector::new(values)
}

/// Mean cross-entropy over the batch and its exact gradient, flattened in
/// the architecture's canonical parameter order.
pub fn loss_and_grad(arch: &ModelArch, params: &ParamVector, batch: &Dataset) -> Result<(f64, ParamVector)> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let indices: Vec<usize> = (0..batch.len()).collect();
    loss_and_grad_on(arch, params, batch, &indices)
}

/// As [`loss_and_grad`] but restricted to `indices`, which avoids copying
/// rows during mini-batch training.
fn loss_and_grad_on(
    arch: &ModelArch,
    params: &ParamVector,
    data: &Dataset,
    indices: &[usize],
) -> Result<(f64, ParamVector)> {
    arch.check_params(params)?;
    if data.feature_dim() != arch.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: arch.input_dim(),
            got: data.feature_dim(),
        });
    }
    if indices.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let theta = params.as_slice();
    let mut grad = vec![0.0; params.dim()];
    let mut loss = 0.0;
    match *arch {
        ModelArch::Softmax {
            input_dim,
            num_classes,
        } => {
            let (w, b) = theta.split_at(input_dim * num_classes);
            let mut logits = vec![0.0; num_classes];
            for &i in indices {
                let x = data.row(i);
                let y = data.label(i);
                for c in 0..num_classes {
                    let mut z = b[c];
                    for (j, &xj) in x.iter().enumerate() {
                        z += xj * w[j * num_classes + c];
                    }
                    logits[c] = z;
                }
                loss += nll_and_dlogits(&mut logits, y);
                // logits now holds d(loss)/d(z).
                let (gw, gb) = grad.split_at_mut(input_dim * num_classes);
                for c in 0..num_classes {
                    let dz = logits[c];
                    gb[c] += dz;
                    for (j, &xj) in x.iter().enumerate() {
                        gw[j * num_classes + c] += xj * dz;
                    }
                }
            }
        }
        ModelArch::Mlp1 {
            input_dim,
            hidden_dim,
            num_classes,
        } => {
            let (w1, rest) = theta.split_at(input_dim * hidden_dim);
            let (b1, rest) = rest.split_at(hidden_dim);
            let (w2, b2) = rest.split_at(hidden_dim * num_classes);
            let mut pre = vec![0.0; hidden_dim];
            let mut hidden = vec![0.0; hidden_dim];
            let mut logits = vec![0.0; num_classes];
            let mut dhidden = vec![0.0; hidden_dim];
            for &i in indices {
                let x = data.row(i);
                let y = data.label(i);
                for h in 0..hidden_dim {
                    let mut a = b1[h];
                    for (j, &xj) in x.iter().enumerate() {
                        a += xj * w1[j * hidden_dim + h];
                    }
                    pre[h] = a;
                    hidden[h] = a.max(0.0);
                }
                for c in 0..num_classes {
                    let mut z = b2[c];
                    for h in 0..hidden_dim {
                        z += hidden[h] * w2[h * num_classes + c];
                    }
                    logits[c] = z;
                }
                loss += nll_and_dlogits(&mut logits, y);
                let (g1, grest) = grad.split_at_mut(input_dim * hidden_dim);
                let (gb1, grest) = grest.split_at_mut(hidden_dim);
                let (g2, gb2) = grest.split_at_mut(hidden_dim * num_classes);
                for h in 0..hidden_dim {
                    let mut dh = 0.0;
                    for c in 0..num_classes {
                        let dz = logits[c];
                        g2[h * num_classes + c] += hidden[h] * dz;
                        dh += w2[h * num_classes + c] * dz;
                    }
                    dhidden[h] = if pre[h] > 0.0 { dh } else { 0.0 };
                }
                for c in 0..num_classes {
                    gb2[c] += logits[c];
                }
                for h in 0..hidden_dim {
                    let da = dhidden[h];
                    if da != 0.0 {
                        gb1[h] += da;
                        for (j, &xj) in x.iter().enumerate() {
                            g1[j * hidden_dim + h] += xj * da;
                        }
                    }
                }
            }
        }
    }
    let scale = 1.0 / indices.len() as f64;
    for g in &mut grad {
        *g *= scale;
    }
    Ok((loss * scale, ParamVector::new(grad)?))
}

/// Numerically stable negative log-likelihood of class `y` given `logits`.
/// On return `logits` is overwritten with the gradient `softmax(z) - e_y`.
fn nll_and_dlogits(logits: &mut [f64], y: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for z in logits.iter() {
        sum += (z - max).exp();
    }
    let log_sum = max + sum.ln();
    let loss = log_sum - logits[y];
    for z in logits.iter_mut() {
        *z = (*z - log_sum).exp();
    }
    logits[y] -= 1.0;
    loss
}

/// Run `epochs_per_round` passes of seeded mini-batch optimization from
/// `start` and return the resulting parameters.
///
/// Adam moment state lives for the duration of the call, matching a client
/// that re-initializes its optimizer each round.
pub fn train_local(
    arch: &ModelArch,
    start: &ParamVector,
    data: &Dataset,
    opt: &OptimizerSpec,
    seed: u64,
) -> Result<ParamVector> {
    arch.check_params(start)?;
    opt.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let d = start.dim();
    let mut theta = start.as_slice().to_vec();
    let mut adam_m = vec![0.0; d];
    let mut adam_v = vec![0.0; d];
    let mut step = 0usize;
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..opt.epochs_per_round {
        let mut rng = rng_for(seed, 0x5751, epoch as u64);
        // Fisher-Yates with the per-epoch stream.
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for batch in order.chunks(opt.batch_size) {
            let current = ParamVector::new(theta.clone())?;
            let (_, grad) = loss_and_grad_on(arch, &current, data, batch)?;
            let g = grad.as_slice();
            match opt.kind {
                OptimizerKind::Sgd => {
                    for (t, &gi) in theta.iter_mut().zip(g) {
                        *t -= opt.learning_rate * gi;
                    }
                }
                OptimizerKind::Adam => {
                    step += 1;
                    let bc1 = 1.0 - opt.adam_beta1.powi(step as i32);
                    let bc2 = 1.0 - opt.adam_beta2.powi(step as i32);
                    for i in 0..d {
                        adam_m[i] = opt.adam_beta1 * adam_m[i] + (1.0 - opt.adam_beta1) * g[i];
                        adam_v[i] = opt.adam_beta2 * adam_v[i] + (1.0 - opt.adam_beta2) * g[i] * g[i];
                        let m_hat = adam_m[i] / bc1;
                        let v_hat = adam_v[i] / bc2;
                        theta[i] -= opt.learning_rate * m_hat / (v_hat.sqrt() + opt.adam_epsilon);
                    }
                }
            }
        }
    }
    ParamVector::new(theta)
}

/// Mean cross-entropy and top-1 accuracy on `data`. Prediction ties go to
/// the lowest class index.
pub fn evaluate(arch: &ModelArch, params: &ParamVector, data: &Dataset) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    arch.check_params(params)?;
    let indices: Vec<usize> = (0..data.len()).collect();
    let (loss, _) = loss_and_grad_on(arch, params, data, &indices)?;
    let mut correct = 0usize;
    for i in 0..data.len() {
        if predict(arch, params, data.row(i)) == data.label(i) {
            correct += 1;
        }
    }
    Ok((loss, correct as f64 / data.len() as f64))
}

/// Predicted class for a single feature row.
pub fn predict(arch: &ModelArch, params: &ParamVector, x: &[f64]) -> usize {
    let logits = forward_logits(arch, params, x);
    let mut best = 0;
    for (c, &z) in logits.iter().enumerate() {
        if z > logits[best] {
            best = c;
        }
    }
    best
}

fn forward_logits(arch: &ModelArch, params: &ParamVector, x: &[f64]) -> Vec<f64> {
    let theta = params.as_slice();
    match *arch {
        ModelArch::Softmax {
            input_dim,
            num_classes,
        } => {
            let (w, b) = theta.split_at(input_dim * num_classes);
            (0..num_classes)
                .map(|c| {
                    let mut z = b[c];
                    for (j, &xj) in x.iter().enumerate() {
                        z += xj * w[j * num_classes + c];
                    }
                    z
                })
                .collect()
        }
        ModelArch::Mlp1 {
            input_dim,
            hidden_dim,
            num_classes,
        } => {
            let (w1, rest) = theta.split_at(input_dim * hidden_dim);
            let (b1, rest) = rest.split_at(hidden_dim);
            let (w2, b2) = rest.split_at(hidden_dim * num_classes);
            let hidden: Vec<f64> = (0..hidden_dim)
                .map(|h| {
                    let mut a = b1[h];
                    for (j, &xj) in x.iter().enumerate() {
                        a += xj * w1[j * hidden_dim + h];
                    }
                    a.max(0.0)
                })
                .collect();
            (0..num_classes)
                .map(|c| {
                    let mut z = b2[c];
                    for (h, &hh) in hidden.iter().enumerate() {
                        z += hh * w2[h * num_classes + c];
                    }
                    z
                })
                .collect()
        }
    }
}
