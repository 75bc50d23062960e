//! Softmax classifiers: the target model and every shadow model.
//!
//! Networks are fully connected with ReLU hidden layers; an empty `hidden_sizes`
//! gives multinomial logistic regression. Training is plain mini-batch SGD with
//! momentum and L2 weight decay on the weight matrices, and is single-threaded so
//! that a (dataset, config) pair always yields bit-identical parameters.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Instance};
use crate::seed;
use crate::{Error, Result};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before any log.
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub hidden_sizes: Vec<usize>,
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hidden_sizes: vec![64],
            epochs: 100,
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 64,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be > 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must be in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay must be >= 0"));
        }
        if self.hidden_sizes.contains(&0) {
            return Err(Error::config("hidden layer sizes must be positive"));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.clone()
        }
    }
}

/// One affine layer; `weights` is `[inputs x outputs]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    layers: Vec<Layer>,
}

impl Classifier {
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::config("classifier needs at least one layer"));
        }
        for w in layers.windows(2) {
            if w[0].weights.ncols() != w[1].weights.nrows() {
                return Err(Error::DimensionMismatch {
                    expected: w[0].weights.ncols(),
                    actual: w[1].weights.nrows(),
                });
            }
        }
        for l in &layers {
            if l.bias.len() != l.weights.ncols() {
                return Err(Error::DimensionMismatch {
                    expected: l.weights.ncols(),
                    actual: l.bias.len(),
                });
            }
        }
        Ok(Classifier { layers })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(input_dim: usize, hidden: &[usize], num_classes: usize, rng: &mut impl Rng) -> Self {
        let mut sizes = vec![input_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(num_classes);
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let weights = Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-a..a));
                Layer {
                    weights,
                    bias: Array1::zeros(fan_out),
                }
            })
            .collect();
        Classifier { layers }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.layers[self.layers.len() - 1].weights.ncols()
    }

    /// Logits for a batch of row-major inputs.
    pub fn logits_batch(&self, xs: ArrayView2<f64>) -> Result<Array2<f64>> {
        if xs.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                actual: xs.ncols(),
            });
        }
        Ok(self.forward(xs).pop().unwrap())
    }

    /// Activations of every layer; the last entry holds the logits.
    fn forward(&self, xs: ArrayView2<f64>) -> Vec<Array2<f64>> {
        let mut acts: Vec<Array2<f64>> = Vec::with_capacity(self.layers.len());
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let input = if k == 0 { xs } else { acts[k - 1].view() };
            let mut z = input.dot(&layer.weights);
            z += &layer.bias;
            if k != last {
                z.mapv_inplace(|v| v.max(0.0));
            }
            acts.push(z);
        }
        acts
    }

    pub fn predict_proba(&self, features: &[f64]) -> Result<Vec<f64>> {
        let xs = ArrayView2::from_shape((1, features.len()), features)
            .map_err(|e| Error::Format(e.to_string()))?;
        let logits = self.logits_batch(xs)?;
        Ok(softmax(logits.row(0)))
    }

    pub fn predict_proba_batch(&self, xs: ArrayView2<f64>) -> Result<Array2<f64>> {
        let mut logits = self.logits_batch(xs)?;
        for mut row in logits.rows_mut() {
            let p = softmax(row.view());
            row.iter_mut().zip(p).for_each(|(r, v)| *r = v);
        }
        Ok(logits)
    }

    /// Scaled confidence of `features` for class `label`.
    pub fn scaled_confidence(&self, features: &[f64], label: usize) -> Result<f64> {
        let xs = ArrayView2::from_shape((1, features.len()), features)
            .map_err(|e| Error::Format(e.to_string()))?;
        let logits = self.logits_batch(xs)?;
        Ok(scaled_from_logits(logits.row(0), label))
    }

    /// Cross-entropy of one labelled instance.
    pub fn loss(&self, instance: &Instance) -> Result<f64> {
        let p = self.predict_proba(&instance.features)?;
        if instance.label >= p.len() {
            return Err(Error::DimensionMismatch {
                expected: p.len(),
                actual: instance.label + 1,
            });
        }
        Ok(loss_from_prob(p[instance.label]))
    }

    pub fn accuracy(&self, dataset: &Dataset) -> Result<f64> {
        if dataset.is_empty() {
            return Err(Error::Empty("accuracy of empty dataset".into()));
        }
        let xs = feature_matrix(dataset);
        let logits = self.logits_batch(xs.view())?;
        let correct = logits
            .rows()
            .into_iter()
            .zip(dataset.instances())
            .filter(|(row, inst)| argmax(row.view()) == inst.label)
            .count();
        Ok(correct as f64 / dataset.len() as f64)
    }

    /// Mean cross-entropy plus `0.5 * weight_decay * sum ||W||^2`.
    pub fn objective(&self, xs: ArrayView2<f64>, labels: &[usize], weight_decay: f64) -> Result<f64> {
        let logits = self.logits_batch(xs)?;
        let ce: f64 = logits
            .rows()
            .into_iter()
            .zip(labels)
            .map(|(row, &y)| log_sum_exp(row.iter().copied()) - row[y])
            .sum::<f64>()
            / labels.len() as f64;
        Ok(ce + 0.5 * weight_decay * self.weight_norm_sq())
    }

    fn weight_norm_sq(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.weights.iter().map(|w| w * w).sum::<f64>())
            .sum()
    }

    /// Analytic gradient of [`Classifier::objective`], one `(dW, db)` per layer.
    pub fn gradients(
        &self,
        xs: ArrayView2<f64>,
        labels: &[usize],
        weight_decay: f64,
    ) -> Result<Vec<(Array2<f64>, Array1<f64>)>> {
        if xs.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                actual: xs.ncols(),
            });
        }
        let (grads, _) = self.backprop(xs, labels, weight_decay);
        Ok(grads)
    }

    /// Returns gradients and the summed (unregularised) cross-entropy of the batch.
    fn backprop(
        &self,
        xs: ArrayView2<f64>,
        labels: &[usize],
        weight_decay: f64,
    ) -> (Vec<(Array2<f64>, Array1<f64>)>, f64) {
        let acts = self.forward(xs);
        let n = labels.len() as f64;
        let mut delta = acts[acts.len() - 1].clone();
        let mut loss_sum = 0.0;
        for (mut row, &y) in delta.rows_mut().into_iter().zip(labels) {
            let lse = log_sum_exp(row.iter().copied());
            loss_sum += lse - row[y];
            row.mapv_inplace(|z| (z - lse).exp());
            row[y] -= 1.0;
        }
        delta.mapv_inplace(|v| v / n);

        let mut grads = Vec::with_capacity(self.layers.len());
        for k in (0..self.layers.len()).rev() {
            let input = if k == 0 { xs } else { acts[k - 1].view() };
            let mut gw = input.t().dot(&delta);
            if weight_decay > 0.0 {
                gw.scaled_add(weight_decay, &self.layers[k].weights);
            }
            let gb = delta.sum_axis(Axis(0));
            if k > 0 {
                let mut next = delta.dot(&self.layers[k].weights.t());
                next.zip_mut_with(&acts[k - 1], |d, &a| {
                    if a <= 0.0 {
                        *d = 0.0
                    }
                });
                delta = next;
            }
            grads.push((gw, gb));
        }
        grads.reverse();
        (grads, loss_sum)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CLASSIFIER_MAGIC);
        out.extend_from_slice(&CLASSIFIER_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for l in &self.layers {
            out.extend_from_slice(&(l.weights.nrows() as u32).to_le_bytes());
            out.extend_from_slice(&(l.weights.ncols() as u32).to_le_bytes());
            for w in l.weights.iter() {
                out.extend_from_slice(&w.to_le_bytes());
            }
            for b in l.bias.iter() {
                out.extend_from_slice(&b.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != CLASSIFIER_MAGIC {
            return Err(Error::Format("classifier magic mismatch".into()));
        }
        let version = r.u16()?;
        if version != CLASSIFIER_VERSION {
            return Err(Error::Format(format!("unsupported classifier version {version}")));
        }
        let count = r.u32()? as usize;
        let mut layers = Vec::with_capacity(count);
        for _ in 0..count {
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let w = (0..rows * cols).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let b = (0..cols).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            layers.push(Layer {
                weights: Array2::from_shape_vec((rows, cols), w)
                    .map_err(|e| Error::Format(e.to_string()))?,
                bias: Array1::from(b),
            });
        }
        if !r.is_empty() {
            return Err(Error::Format("trailing bytes after classifier".into()));
        }
        Classifier::from_layers(layers)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Classifier::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

const CLASSIFIER_MAGIC: &[u8; 4] = b"MIAC";
const CLASSIFIER_VERSION: u16 = 1;

pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        ByteReader { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format(format!(
                "truncated: need {n} bytes at offset {}, have {}",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn is_empty(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

pub fn feature_matrix(dataset: &Dataset) -> Array2<f64> {
    let d = dataset.dim();
    let mut xs = Array2::zeros((dataset.len(), d));
    for (mut row, inst) in xs.rows_mut().into_iter().zip(dataset.instances()) {
        row.iter_mut().zip(&inst.features).for_each(|(r, &v)| *r = v);
    }
    xs
}

/// Mini-batch SGD with momentum. Shuffling and initialization draw from a single
/// generator seeded by `config.seed`.
pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<Classifier> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    let mut rng = seed::rng(config.seed);
    let mut model = Classifier::init(
        dataset.dim(),
        &config.hidden_sizes,
        dataset.num_classes(),
        &mut rng,
    );
    let xs = feature_matrix(dataset);
    let labels = dataset.labels();
    let mut velocity: Vec<(Array2<f64>, Array1<f64>)> = model
        .layers
        .iter()
        .map(|l| (Array2::zeros(l.weights.raw_dim()), Array1::zeros(l.bias.len())))
        .collect();

    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let bx = xs.select(Axis(0), batch);
            let by: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let (grads, loss_sum) = model.backprop(bx.view(), &by, config.weight_decay);
            epoch_loss += loss_sum;
            for ((layer, vel), (gw, gb)) in model.layers.iter_mut().zip(&mut velocity).zip(grads) {
                vel.0.zip_mut_with(&gw, |v, &g| *v = config.momentum * *v + g);
                vel.1.zip_mut_with(&gb, |v, &g| *v = config.momentum * *v + g);
                layer.weights.scaled_add(-config.learning_rate, &vel.0);
                layer.bias.scaled_add(-config.learning_rate, &vel.1);
            }
        }
        let mean = epoch_loss / dataset.len() as f64;
        let finite = model.layers.iter().all(|l| {
            l.weights.iter().chain(l.bias.iter()).all(|w| w.is_finite())
        });
        if !mean.is_finite() || !finite {
            return Err(Error::Diverged { epoch, loss: mean });
        }
    }
    Ok(model)
}

pub fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn softmax(logits: ArrayView1<f64>) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn argmax(row: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// `log(p / (1 - p))` after clamping.
pub fn logit_scale(p: f64) -> f64 {
    // 1 - p is exact for p in [0.5, 1], which keeps the map odd around 0.5
    fn lower(q: f64) -> f64 {
        let q = q.max(PROB_CLAMP);
        q.ln() - (-q).ln_1p()
    }
    if p > 0.5 {
        -lower(1.0 - p)
    } else {
        lower(p)
    }
}

/// Range of [`logit_scale`] outputs.
pub fn scaled_bound() -> f64 {
    logit_scale(1.0)
}

/// `log(p_y / (1 - p_y))` evaluated from logits as `z_y - logsumexp_{j != y} z_j`.
///
/// Mathematically equal to `logit_scale(softmax(z)[y])` but free of the
/// cancellation in `1 - p_y` for confident predictions; clamped to the same range.
pub fn scaled_from_logits(logits: ArrayView1<f64>, label: usize) -> f64 {
    let others = log_sum_exp(
        logits
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != label)
            .map(|(_, &z)| z),
    );
    let bound = scaled_bound();
    (logits[label] - others).clamp(-bound, bound)
}

pub fn loss_from_prob(p: f64) -> f64 {
    -clamp_prob(p).ln()
}

/// Cross-entropy recovered from a scaled confidence: `log(1 + exp(-phi))`.
pub fn loss_from_scaled(phi: f64) -> f64 {
    // softplus(-phi), stable for both signs
    if phi > 0.0 {
        (-phi).exp().ln_1p()
    } else {
        -phi + phi.exp().ln_1p()
    }
}

/// Probability recovered from a scaled confidence.
pub fn prob_from_scaled(phi: f64) -> f64 {
    1.0 / (1.0 + (-phi).exp())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Number of views per instance, including the unmodified one.
    pub n_queries: usize,
    pub noise_scale: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            n_queries: 1,
            noise_scale: 0.0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_queries == 0 {
            return Err(Error::config("n_queries must be >= 1"));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::config("noise_scale must be >= 0"));
        }
        Ok(())
    }
}

/// View 0 is the instance itself; the rest add isotropic Gaussian noise.
/// Views depend only on (instance id, seed).
pub fn augment(instance: &Instance, config: &AugmentConfig, seed: u64) -> Vec<Vec<f64>> {
    let mut views = Vec::with_capacity(config.n_queries.max(1));
    views.push(instance.features.clone());
    if config.n_queries <= 1 {
        return views;
    }
    let mut rng = seed::rng(seed::derive_tagged(seed, "augment", instance.id));
    for _ in 1..config.n_queries {
        views.push(
            instance
                .features
                .iter()
                .map(|&x| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    x + config.noise_scale * z
                })
                .collect(),
        );
    }
    views
}

/// Stacks every augmented view, instance-major: row `i * n_aug + a`.
pub fn augmented_matrix(instances: &[Instance], config: &AugmentConfig, seed: u64) -> Array2<f64> {
    let n_aug = config.n_queries.max(1);
    let d = instances.first().map_or(0, |i| i.features.len());
    let mut xs = Array2::zeros((instances.len() * n_aug, d));
    for (i, inst) in instances.iter().enumerate() {
        for (a, view) in augment(inst, config, seed).into_iter().enumerate() {
            xs.row_mut(i * n_aug + a)
                .iter_mut()
                .zip(view)
                .for_each(|(r, v)| *r = v);
        }
    }
    xs
}
