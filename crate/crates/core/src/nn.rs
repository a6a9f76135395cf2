//! Feed-forward classifier: ReLU hidden layers, softmax output, cross-entropy
//! loss, Adam updates and early-stopped mini-batch training.
//!
//! Seed-stream layout: stream 0 of the ChaCha8 generator seeded with
//! `config.seed` initializes layers in input-to-output order (weights
//! row-major, biases zero); stream 1 drives the per-epoch shuffles.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureMatrix, Preprocessor};
use crate::labeling::Task;
use crate::sampling::LabeledDataset;

pub const HIDDEN_DIMS: [usize; 3] = [23, 14, 8];
pub const LEARNING_RATE: f64 = 0.001;
pub const BATCH_SIZE: usize = 30;
pub const MAX_EPOCHS: usize = 400;
pub const PATIENCE: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Epochs without validation-loss improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl NetworkConfig {
    pub fn new(input_dim: usize, output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dims: HIDDEN_DIMS.to_vec(),
            output_dim,
            learning_rate: LEARNING_RATE,
            batch_size: BATCH_SIZE,
            max_epochs: MAX_EPOCHS,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            patience: PATIENCE,
            seed: 0,
        }
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.hidden_dims);
        dims.push(self.output_dim);
        dims
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_dims().contains(&0) {
            return Err(Error::InvalidConfig("layer dimensions must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig("learning rate must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return Err(Error::InvalidConfig("invalid Adam hyper-parameters".into()));
        }
        Ok(())
    }
}

/// Dense layer, `weights` row-major `[out][in]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Layer {
    fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            biases: vec![0.0; out_dim],
        }
    }

    fn affine(&self, x: &[f64]) -> Vec<f64> {
        (0..self.out_dim)
            .map(|o| {
                let row = &self.weights[o * self.in_dim..(o + 1) * self.in_dim];
                self.biases[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub layers: Vec<Layer>,
}

/// Gradients share the network's shape.
pub type Gradients = Network;

impl Network {
    pub fn zeros(dims: &[usize]) -> Self {
        Self {
            layers: dims.windows(2).map(|d| Layer::zeros(d[0], d[1])).collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.in_dim)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim()];
        dims.extend(self.layers.iter().map(|l| l.out_dim));
        dims
    }

    /// Parameter tensors in order `w0, b0, w1, b1, ...`.
    pub fn tensors(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.as_slice(), l.biases.as_slice()])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weights.as_mut_slice(), l.biases.as_mut_slice()])
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Pre-activations of every layer plus the final logits.
    fn activations(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = vec![x.to_vec()];
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = layer.affine(acts.last().expect("input present"));
            if i + 1 < self.layers.len() {
                for v in &mut z {
                    *v = v.max(0.0);
                }
            }
            acts.push(z);
        }
        acts
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        Ok(self.activations(x).pop().expect("output present"))
    }
}

/// He-normal weights (variance 2 / fan_in) and zero biases.
pub fn init_network(config: &NetworkConfig) -> Result<Network> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(0);
    let mut net = Network::zeros(&config.layer_dims());
    for layer in &mut net.layers {
        let normal = Normal::new(0.0, (2.0 / layer.in_dim as f64).sqrt()).expect("positive std");
        for w in &mut layer.weights {
            *w = normal.sample(&mut rng);
        }
    }
    Ok(net)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Class probabilities for one row.
pub fn forward(net: &Network, x: &[f64]) -> Result<Vec<f64>> {
    Ok(softmax(&net.logits(x)?))
}

/// Lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

fn log_softmax_at(logits: &[f64], class: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits[class] - lse
}

fn check_batch(net: &Network, x: &[&[f64]], y: &[usize]) -> Result<()> {
    if x.is_empty() || x.len() != y.len() {
        return Err(Error::ShapeMismatch(format!("{} rows vs {} labels", x.len(), y.len())));
    }
    if let Some(row) = x.iter().find(|r| r.len() != net.input_dim()) {
        return Err(Error::DimensionMismatch {
            expected: net.input_dim(),
            got: row.len(),
        });
    }
    if let Some(&bad) = y.iter().find(|&&c| c >= net.output_dim()) {
        return Err(Error::InvalidData(format!("label {bad} out of range")));
    }
    Ok(())
}

/// Mean cross-entropy over the batch.
pub fn loss(net: &Network, x: &[&[f64]], y: &[usize]) -> Result<f64> {
    check_batch(net, x, y)?;
    let total: f64 = x
        .iter()
        .zip(y)
        .map(|(row, &c)| -log_softmax_at(&net.activations(row).pop().expect("logits"), c))
        .sum();
    Ok(total / x.len() as f64)
}

/// Mean cross-entropy and its gradient by backpropagation.
pub fn loss_and_grad(net: &Network, x: &[&[f64]], y: &[usize]) -> Result<(f64, Gradients)> {
    check_batch(net, x, y)?;
    let n = x.len() as f64;
    let mut grads = Network::zeros(&net.layer_dims());
    let mut total = 0.0;
    for (row, &class) in x.iter().zip(y) {
        let acts = net.activations(row);
        let logits = acts.last().expect("logits");
        total -= log_softmax_at(logits, class);
        // dL/dz for the output layer: p - onehot.
        let mut delta = softmax(logits);
        delta[class] -= 1.0;
        for l in (0..net.layers.len()).rev() {
            let layer = &net.layers[l];
            let input = &acts[l];
            let g = &mut grads.layers[l];
            for o in 0..layer.out_dim {
                let d = delta[o] / n;
                g.biases[o] += d;
                let row = &mut g.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                for (gw, a) in row.iter_mut().zip(input) {
                    *gw += d * a;
                }
            }
            if l > 0 {
                let mut prev = vec![0.0; layer.in_dim];
                for o in 0..layer.out_dim {
                    let row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                    for (p, w) in prev.iter_mut().zip(row) {
                        *p += delta[o] * w;
                    }
                }
                // ReLU derivative; acts[l] holds post-activation values of layer l-1.
                for (p, a) in prev.iter_mut().zip(input) {
                    if *a <= 0.0 {
                        *p = 0.0;
                    }
                }
                delta = prev;
            }
        }
    }
    Ok((total / n, grads))
}

/// First and second moment estimates per parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(shapes: &[usize]) -> Self {
        Self {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn for_network(net: &Network) -> Self {
        Self::new(&net.tensors().iter().map(|t| t.len()).collect::<Vec<_>>())
    }

    /// One bias-corrected Adam update over a list of tensors.
    pub fn step(
        &mut self,
        params: &mut [&mut [f64]],
        grads: &[&[f64]],
        learning_rate: f64,
        beta1: f64,
        beta2: f64,
        epsilon: f64,
    ) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} parameter tensors, {} gradient tensors, state has {}",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for (k, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.m[k].len() || g.len() != self.m[k].len() {
                return Err(Error::ShapeMismatch(format!("tensor {k} length differs from state")));
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

pub fn adam_step(net: &mut Network, grads: &Gradients, state: &mut AdamState, config: &NetworkConfig) -> Result<()> {
    if net.layer_dims() != grads.layer_dims() {
        return Err(Error::ShapeMismatch("gradient shape differs from network".into()));
    }
    let g = grads.tensors();
    let mut p = net.tensors_mut();
    state.step(&mut p, &g, config.learning_rate, config.beta1, config.beta2, config.epsilon)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    EarlyStopping,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose weights were kept; 0 means the initial weights.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stop_reason: StopReason,
}

fn rows_of(ds: &LabeledDataset) -> Vec<&[f64]> {
    ds.x.iter().map(Vec::as_slice).collect()
}

fn accuracy_on(net: &Network, x: &[&[f64]], y: &[usize]) -> f64 {
    let hits = x
        .iter()
        .zip(y)
        .filter(|(row, &c)| argmax(&net.activations(row).pop().expect("logits")) == c)
        .count();
    hits as f64 / x.len() as f64
}

/// Mini-batch Adam with validation-loss early stopping; returns the weights of
/// the best validation epoch.
pub fn train(train_set: &LabeledDataset, validation: &LabeledDataset, config: &NetworkConfig) -> Result<(Network, TrainReport)> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyPartition("train".into()));
    }
    if validation.is_empty() {
        return Err(Error::EmptyPartition("validation".into()));
    }
    let mut net = init_network(config)?;
    let (train_x, val_x) = (rows_of(train_set), rows_of(validation));
    check_batch(&net, &train_x, &train_set.labels)?;
    check_batch(&net, &val_x, &validation.labels)?;

    let mut state = AdamState::for_network(&net);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);

    let mut best = net.clone();
    let mut best_val_loss = loss(&net, &val_x, &validation.labels)?;
    let mut best_epoch = 0;
    let mut epochs = Vec::new();
    let mut stop_reason = StopReason::MaxEpochs;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let bx: Vec<&[f64]> = chunk.iter().map(|&i| train_x[i]).collect();
            let by: Vec<usize> = chunk.iter().map(|&i| train_set.labels[i]).collect();
            let (_, grads) = loss_and_grad(&net, &bx, &by)?;
            adam_step(&mut net, &grads, &mut state, config)?;
        }
        let val_loss = loss(&net, &val_x, &validation.labels)?;
        epochs.push(EpochRecord {
            epoch,
            train_loss: loss(&net, &train_x, &train_set.labels)?,
            train_accuracy: accuracy_on(&net, &train_x, &train_set.labels),
            val_loss,
            val_accuracy: accuracy_on(&net, &val_x, &validation.labels),
        });
        if val_loss < best_val_loss {
            best_val_loss = val_loss;
            best_epoch = epoch;
            best = net.clone();
        } else if epoch - best_epoch >= config.patience {
            stop_reason = StopReason::EarlyStopping;
            break;
        }
    }
    if !best.is_finite() {
        return Err(Error::InvalidData("training diverged to non-finite weights".into()));
    }
    Ok((
        best,
        TrainReport {
            epochs,
            best_epoch,
            best_val_loss,
            stop_reason,
        },
    ))
}

/// Everything needed to score raw feature rows later.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub task: Task,
    pub class_names: Vec<String>,
    pub layer_dims: Vec<usize>,
    /// Row-major `[out][in]` per layer.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    /// Column order, imputation values and normalization statistics.
    pub preprocessor: Preprocessor,
    /// Preprocessed columns fed to the network, when a subset was selected.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_columns: Option<Vec<usize>>,
    pub config: NetworkConfig,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub event_id: String,
    pub class: usize,
    pub probabilities: Vec<f64>,
}

impl ModelBundle {
    pub fn new(task: Task, class_names: Vec<String>, net: &Network, preprocessor: Preprocessor, config: NetworkConfig) -> Self {
        Self {
            task,
            class_names,
            layer_dims: net.layer_dims(),
            weights: net.layers.iter().map(|l| l.weights.clone()).collect(),
            biases: net.layers.iter().map(|l| l.biases.clone()).collect(),
            preprocessor,
            input_columns: None,
            seed: config.seed,
            config,
        }
    }

    pub fn network(&self) -> Result<Network> {
        let dims = &self.layer_dims;
        if dims.len() < 2 || self.weights.len() != dims.len() - 1 || self.biases.len() != dims.len() - 1 {
            return Err(Error::SchemaMismatch("layer count disagrees with layer_dims".into()));
        }
        let layers = dims
            .windows(2)
            .zip(self.weights.iter().zip(&self.biases))
            .map(|(d, (w, b))| {
                if w.len() != d[0] * d[1] || b.len() != d[1] {
                    return Err(Error::SchemaMismatch("weight shape disagrees with layer_dims".into()));
                }
                Ok(Layer {
                    in_dim: d[0],
                    out_dim: d[1],
                    weights: w.clone(),
                    biases: b.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let width = self.preprocessor.columns.len();
        let inputs = self.input_columns.as_ref().map_or(width, Vec::len);
        if dims[0] != inputs || self.input_columns.iter().flatten().any(|&j| j >= width) {
            return Err(Error::SchemaMismatch("input width disagrees with column order".into()));
        }
        Ok(Network { layers })
    }

    /// Scores raw (unimputed, unnormalized) feature rows; columns are matched by name.
    pub fn predict(&self, features: &FeatureMatrix) -> Result<Vec<Prediction>> {
        let net = self.network()?;
        let mut rows = self.preprocessor.transform(features)?;
        if let Some(keep) = &self.input_columns {
            rows = rows.iter().map(|r| keep.iter().map(|&j| r[j]).collect()).collect();
        }
        rows.iter()
            .zip(&features.event_ids)
            .map(|(row, id)| {
                let probabilities = forward(&net, row)?;
                Ok(Prediction {
                    event_id: id.clone(),
                    class: argmax(&probabilities),
                    probabilities,
                })
            })
            .collect()
    }
}
