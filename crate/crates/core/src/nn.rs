//! Rectified MLP mapping a grade preview plus the speed set point to the
//! MPC fuel weight.
//!
//! Inputs and the target are min-max scaled with scalers fitted on the
//! training portion only. Every layer, the output included, is a ReLU, so
//! predictions are never negative. Training is plain mini-batch SGD on MSE
//! with an L2 penalty on the weights and early stopping on a validation
//! slice.

use alloc::vec::Vec;

use nalgebra::{DMatrix, DMatrixView};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::inverse::GammaSeries;
use crate::math;
use crate::road::RoadProfile;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NnError {
    #[error("gamma series has {series} rows but the road has {road} steps")]
    Alignment { series: usize, road: usize },
    #[error("expected {expected} features, got {got}")]
    FeatureCount { expected: usize, got: usize },
    #[error("dataset has {got} samples, need at least {need}")]
    TooFewSamples { got: usize, need: usize },
    #[error("training diverged at epoch {0}")]
    Diverged(usize),
    #[error("invalid training configuration: {0}")]
    InvalidConfig(&'static str),
    #[error("invalid model: {0}")]
    InvalidModel(&'static str),
}

/// Per-feature `(x − min) / range`; a zero range is treated as 1 so
/// constant features map to 0 instead of NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct MinMaxScaler {
    pub min: Vec<f64>,
    pub range: Vec<f64>,
}

impl MinMaxScaler {
    /// Fit on the rows `idx` of a row-major `data` matrix with `dim` columns.
    pub fn fit(data: &[f64], dim: usize, idx: &[usize]) -> Self {
        let mut lo = alloc::vec![f64::INFINITY; dim];
        let mut hi = alloc::vec![f64::NEG_INFINITY; dim];
        for &i in idx {
            for (j, &x) in data[i * dim..(i + 1) * dim].iter().enumerate() {
                lo[j] = lo[j].min(x);
                hi[j] = hi[j].max(x);
            }
        }
        let range = lo
            .iter()
            .zip(&hi)
            .map(|(l, h)| {
                let r = h - l;
                if r > 0.0 && r.is_finite() {
                    r
                } else {
                    1.0
                }
            })
            .collect();
        let min = lo.into_iter().map(|l| if l.is_finite() { l } else { 0.0 }).collect();
        Self { min, range }
    }

    pub fn dim(&self) -> usize {
        self.min.len()
    }

    pub fn transform(&self, x: &[f64], out: &mut [f64]) {
        for j in 0..x.len() {
            out[j] = (x[j] - self.min[j]) / self.range[j];
        }
    }

    pub fn scale(&self, j: usize, x: f64) -> f64 {
        (x - self.min[j]) / self.range[j]
    }

    pub fn unscale(&self, j: usize, y: f64) -> f64 {
        self.min[j] + y * self.range[j]
    }
}

/// Row-major feature matrix with one target per row.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub dim: usize,
    pub features: Vec<f64>,
    pub targets: Vec<f64>,
    /// Road step each sample was taken from.
    pub positions: Vec<usize>,
}

impl Dataset {
    pub fn new(dim: usize) -> Self {
        Self { dim, ..Self::default() }
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn push(&mut self, features: &[f64], target: f64, position: usize) -> Result<(), NnError> {
        if features.len() != self.dim {
            return Err(NnError::FeatureCount { expected: self.dim, got: features.len() });
        }
        self.features.extend_from_slice(features);
        self.targets.push(target);
        self.positions.push(position);
        Ok(())
    }

    pub fn extend(&mut self, other: &Dataset) -> Result<(), NnError> {
        if other.dim != self.dim {
            return Err(NnError::FeatureCount { expected: self.dim, got: other.dim });
        }
        self.features.extend_from_slice(&other.features);
        self.targets.extend_from_slice(&other.targets);
        self.positions.extend_from_slice(&other.positions);
        Ok(())
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let mut out = Dataset::new(self.dim);
        for &i in idx {
            out.features.extend_from_slice(self.row(i));
            out.targets.push(self.targets[i]);
            out.positions.push(self.positions[i]);
        }
        out
    }

    /// Columns that take a single value over the whole set.
    pub fn zero_variance_features(&self) -> Vec<usize> {
        if self.is_empty() {
            return Vec::new();
        }
        let first = self.row(0);
        (0..self.dim).filter(|&j| (1..self.len()).all(|i| self.row(i)[j] == first[j])).collect()
    }
}

/// One sample per road step: the `preview_len` grades ahead followed by the
/// set point, labelled with the recovered weight. Flagged rows are skipped.
pub fn make_dataset(road: &RoadProfile, series: &GammaSeries, v_ref: f64, preview_len: usize) -> Result<Dataset, NnError> {
    if series.len() != road.steps() {
        return Err(NnError::Alignment { series: series.len(), road: road.steps() });
    }
    let mut ds = Dataset::new(preview_len + 1);
    let mut row = Vec::with_capacity(preview_len + 1);
    for (i, &k) in series.positions.iter().enumerate() {
        if !series.flags[i].is_clean() {
            continue;
        }
        row.clear();
        row.extend_from_slice(&road.preview(k, preview_len).samples);
        row.push(v_ref);
        ds.push(&row, series.gamma[i], k)?;
    }
    Ok(ds)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    /// Heavy-ball momentum of the SGD update; 0 gives plain SGD.
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub l2: f64,
    pub test_fraction: f64,
    /// Share of the training portion held out for early stopping.
    pub val_fraction: f64,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: alloc::vec![250, 80, 16],
            learning_rate: 1e-2,
            momentum: 0.9,
            epochs: 500,
            batch_size: 32,
            l2: 1e-5,
            test_fraction: 0.2,
            val_fraction: 0.05,
            patience: 25,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        if self.hidden.contains(&0) {
            return Err(NnError::InvalidConfig("hidden widths must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(NnError::InvalidConfig("learning_rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(NnError::InvalidConfig("momentum must lie in [0, 1)"));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(NnError::InvalidConfig("epochs and batch_size must be positive"));
        }
        if !(self.l2 >= 0.0) {
            return Err(NnError::InvalidConfig("l2 must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.test_fraction) || !(0.0..1.0).contains(&self.val_fraction) {
            return Err(NnError::InvalidConfig("split fractions must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Stable 64-bit digest of every field, stored with trained models.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv::new();
        for &w in &self.hidden {
            h.u64(w as u64);
        }
        h.f64(self.learning_rate);
        h.f64(self.momentum);
        h.u64(self.epochs as u64);
        h.u64(self.batch_size as u64);
        h.f64(self.l2);
        h.f64(self.test_fraction);
        h.f64(self.val_fraction);
        h.u64(self.patience as u64);
        h.u64(self.seed);
        h.finish()
    }
}

/// FNV-1a; only used for small provenance digests.
struct Fnv(u64);

impl Fnv {
    fn new() -> Self {
        Self(0xcbf2_9ce4_8422_2325)
    }
    fn u64(&mut self, x: u64) {
        for b in x.to_le_bytes() {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }
    fn f64(&mut self, x: f64) {
        self.u64(x.to_bits());
    }
    fn finish(&self) -> u64 {
        self.0
    }
}

/// Digest of a set of sample indices, order-insensitive.
pub fn index_digest(idx: &[usize]) -> u64 {
    let mut sorted = idx.to_vec();
    sorted.sort_unstable();
    let mut h = Fnv::new();
    h.u64(sorted.len() as u64);
    for i in sorted {
        h.u64(i as u64);
    }
    h.finish()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    /// `[inputs, hidden.., 1]`.
    pub dims: Vec<usize>,
    /// Layer `l` is `dims[l+1] × dims[l]`, row-major.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub input_scaler: MinMaxScaler,
    pub target_scaler: MinMaxScaler,
    /// Digest of the sample indices the scalers were fitted on.
    pub scaler_provenance: u64,
    pub config_fingerprint: u64,
}

/// Parameter-shaped buffer for gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradients {
    fn zeros_like(m: &MlpModel) -> Self {
        Self {
            weights: m.weights.iter().map(|w| alloc::vec![0.0; w.len()]).collect(),
            biases: m.biases.iter().map(|b| alloc::vec![0.0; b.len()]).collect(),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub mse_scaled: f64,
    pub mae_scaled: f64,
    pub mse: f64,
    pub mae: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// Epoch (0-based) whose weights were kept.
    pub best_epoch: usize,
    pub stopped_early: bool,
    /// Times training was restarted from a fresh draw after the output unit died.
    pub restarts: usize,
}

/// Sample indices of the three splits.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    /// Shuffle, hold out `test_fraction` for testing, then `val_fraction`
    /// of the rest for validation.
    pub fn new(n: usize, test_fraction: f64, val_fraction: f64, seed: u64) -> Self {
        let mut idx: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SPLIT_SALT);
        idx.shuffle(&mut rng);
        let n_test = math::round(n as f64 * test_fraction) as usize;
        let test = idx.split_off(n - n_test.min(n));
        let n_val = math::round(idx.len() as f64 * val_fraction) as usize;
        let val = idx.split_off(idx.len() - n_val.min(idx.len()));
        Self { train: idx, val, test }
    }

    /// Everything except the test set; the scalers are fitted on this.
    pub fn fit_portion(&self) -> Vec<usize> {
        let mut v = self.train.clone();
        v.extend_from_slice(&self.val);
        v
    }
}

const MAX_INIT_DRAWS: u64 = 16;

/// Keeps the split shuffle independent of the weight-init stream.
const SPLIT_SALT: u64 = 0x5eed_5b17_0000_0001;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: MlpModel,
    pub history: TrainHistory,
    pub split: Split,
}

#[inline]
fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

impl MlpModel {
    /// Glorot-uniform weights, small positive biases, identity scalers.
    pub fn new(dims: &[usize], seed: u64) -> Result<Self, NnError> {
        if dims.len() < 2 || dims.contains(&0) || *dims.last().unwrap() != 1 {
            return Err(NnError::InvalidModel("dims must be positive and end in a single output"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let limit = math::sqrt(6.0 / (fan_in + fan_out) as f64);
            weights.push((0..fan_in * fan_out).map(|_| rng.random_range(-limit..limit)).collect());
            biases.push(alloc::vec![0.01; fan_out]);
        }
        let n_in = dims[0];
        Ok(Self {
            dims: dims.to_vec(),
            weights,
            biases,
            input_scaler: MinMaxScaler { min: alloc::vec![0.0; n_in], range: alloc::vec![1.0; n_in] },
            target_scaler: MinMaxScaler { min: alloc::vec![0.0], range: alloc::vec![1.0] },
            scaler_provenance: 0,
            config_fingerprint: 0,
        })
    }

    pub fn inputs(&self) -> usize {
        self.dims[0]
    }

    pub fn layers(&self) -> usize {
        self.weights.len()
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(Vec::len).sum::<usize>() + self.biases.iter().map(Vec::len).sum::<usize>()
    }

    pub fn params(&self) -> Vec<f64> {
        Gradients { weights: self.weights.clone(), biases: self.biases.clone() }.flatten()
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<(), NnError> {
        if p.len() != self.param_count() {
            return Err(NnError::InvalidModel("parameter vector length"));
        }
        let mut at = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            let (nw, nb) = (w.len(), b.len());
            w.copy_from_slice(&p[at..at + nw]);
            at += nw;
            b.copy_from_slice(&p[at..at + nb]);
            at += nb;
        }
        Ok(())
    }

    pub fn weight_norm_sq(&self) -> f64 {
        self.weights.iter().flatten().map(|w| w * w).sum()
    }

    /// Forward pass on already-scaled input, keeping every activation.
    fn forward_all(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = Vec::with_capacity(self.layers() + 1);
        acts.push(x.to_vec());
        for l in 0..self.layers() {
            let (n_in, n_out) = (self.dims[l], self.dims[l + 1]);
            let a = &acts[l];
            let w = &self.weights[l];
            let out: Vec<f64> =
                (0..n_out).map(|o| relu(math::dot(&w[o * n_in..(o + 1) * n_in], a) + self.biases[l][o])).collect();
            acts.push(out);
        }
        acts
    }

    /// Scaled-space output for a scaled input.
    pub fn forward_scaled(&self, x: &[f64]) -> f64 {
        self.forward_all(x)[self.layers()][0]
    }

    /// Prediction for raw features (preview grades followed by the set point).
    pub fn predict_row(&self, features: &[f64]) -> Result<f64, NnError> {
        if features.len() != self.inputs() {
            return Err(NnError::FeatureCount { expected: self.inputs(), got: features.len() });
        }
        let mut x = alloc::vec![0.0; features.len()];
        self.input_scaler.transform(features, &mut x);
        Ok(self.target_scaler.unscale(0, self.forward_scaled(&x)).max(0.0))
    }

    pub fn predict(&self, preview: &[f64], v_ref: f64) -> Result<f64, NnError> {
        if preview.len() + 1 != self.inputs() {
            return Err(NnError::FeatureCount { expected: self.inputs() - 1, got: preview.len() });
        }
        let mut row = Vec::with_capacity(self.inputs());
        row.extend_from_slice(preview);
        row.push(v_ref);
        self.predict_row(&row)
    }

    /// Mean squared error plus `l2·‖W‖²` on scaled samples, and its gradient.
    pub fn loss_and_gradient(&self, xs: &[&[f64]], ys: &[f64], l2: f64) -> (f64, Gradients) {
        let mut grad = Gradients::zeros_like(self);
        let loss = self.accumulate(xs, ys, &mut grad);
        let mut total = loss + l2 * self.weight_norm_sq();
        for (g, w) in grad.weights.iter_mut().zip(&self.weights) {
            for (gi, wi) in g.iter_mut().zip(w) {
                *gi += 2.0 * l2 * wi;
            }
        }
        if !total.is_finite() {
            total = f64::INFINITY;
        }
        (total, grad)
    }

    /// Adds the MSE gradient of the batch to `grad`, returns the MSE.
    fn accumulate(&self, xs: &[&[f64]], ys: &[f64], grad: &mut Gradients) -> f64 {
        let nb = xs.len();
        let b = nb as f64;
        let nl = self.layers();
        // Column j of each activation matrix is sample j. Row-major `out × in`
        // weights are exactly the column-major `in × out` transpose.
        let mut acts: Vec<DMatrix<f64>> = Vec::with_capacity(nl + 1);
        let mut x0 = DMatrix::<f64>::zeros(self.dims[0], nb);
        for (j, x) in xs.iter().enumerate() {
            x0.column_mut(j).copy_from_slice(x);
        }
        acts.push(x0);
        for l in 0..nl {
            let wt = DMatrixView::from_slice(&self.weights[l], self.dims[l], self.dims[l + 1]);
            let mut z = wt.tr_mul(&acts[l]);
            for mut col in z.column_iter_mut() {
                for (zi, bi) in col.iter_mut().zip(&self.biases[l]) {
                    *zi = relu(*zi + bi);
                }
            }
            acts.push(z);
        }
        let mut loss = 0.0;
        let mut delta = DMatrix::<f64>::zeros(1, nb);
        for j in 0..nb {
            let out = acts[nl][(0, j)];
            let err = out - ys[j];
            loss += err * err;
            delta[(0, j)] = if out > 0.0 { 2.0 * err / b } else { 0.0 };
        }
        for l in (0..nl).rev() {
            let gwt = &acts[l] * delta.transpose();
            for (g, v) in grad.weights[l].iter_mut().zip(gwt.iter()) {
                *g += v;
            }
            for (o, g) in grad.biases[l].iter_mut().enumerate() {
                *g += delta.row(o).sum();
            }
            if l > 0 {
                let wt = DMatrixView::from_slice(&self.weights[l], self.dims[l], self.dims[l + 1]);
                let mut prev = wt * &delta;
                for (p, a) in prev.iter_mut().zip(acts[l].iter()) {
                    if *a <= 0.0 {
                        *p = 0.0;
                    }
                }
                delta = prev;
            }
        }
        loss / b
    }

    /// `vel ← μ·vel + g`, `θ ← θ − lr·vel`, with the L2 term folded into `g`.
    fn sgd_step(&mut self, grad: &Gradients, vel: &mut Gradients, lr: f64, momentum: f64, l2: f64) {
        for ((w, g), v) in self.weights.iter_mut().zip(&grad.weights).zip(vel.weights.iter_mut()) {
            for ((wi, gi), vi) in w.iter_mut().zip(g).zip(v.iter_mut()) {
                *vi = momentum * *vi + gi + 2.0 * l2 * *wi;
                *wi -= lr * *vi;
            }
        }
        for ((b, g), v) in self.biases.iter_mut().zip(&grad.biases).zip(vel.biases.iter_mut()) {
            for ((bi, gi), vi) in b.iter_mut().zip(g).zip(v.iter_mut()) {
                *vi = momentum * *vi + gi;
                *bi -= lr * *vi;
            }
        }
    }

    /// Scaled-space outputs for a batch of scaled inputs.
    pub fn forward_batch(&self, xs: &[&[f64]]) -> Vec<f64> {
        let mut a = DMatrix::<f64>::zeros(self.dims[0], xs.len());
        for (j, x) in xs.iter().enumerate() {
            a.column_mut(j).copy_from_slice(x);
        }
        for l in 0..self.layers() {
            let wt = DMatrixView::from_slice(&self.weights[l], self.dims[l], self.dims[l + 1]);
            let mut z = wt.tr_mul(&a);
            for mut col in z.column_iter_mut() {
                for (zi, bi) in col.iter_mut().zip(&self.biases[l]) {
                    *zi = relu(*zi + bi);
                }
            }
            a = z;
        }
        a.iter().copied().collect()
    }

    /// Scaled MSE over pre-scaled rows.
    fn mse_scaled(&self, xs: &[Vec<f64>], ys: &[f64], idx: &[usize]) -> f64 {
        if idx.is_empty() {
            return 0.0;
        }
        let mut total = 0.0;
        for chunk in idx.chunks(256) {
            let rows: Vec<&[f64]> = chunk.iter().map(|&i| xs[i].as_slice()).collect();
            for (out, &i) in self.forward_batch(&rows).iter().zip(chunk) {
                let e = out - ys[i];
                total += e * e;
            }
        }
        total / idx.len() as f64
    }

    /// Share of rows whose output unit is active.
    fn live_fraction(&self, xs: &[Vec<f64>], idx: &[usize]) -> f64 {
        if idx.is_empty() {
            return 1.0;
        }
        let rows: Vec<&[f64]> = idx.iter().map(|&i| xs[i].as_slice()).collect();
        self.forward_batch(&rows).iter().filter(|&&o| o > 0.0).count() as f64 / idx.len() as f64
    }

    /// Error metrics on raw samples, in scaled and original target units.
    pub fn evaluate(&self, data: &Dataset) -> Result<Metrics, NnError> {
        let n = data.len();
        if n == 0 {
            return Ok(Metrics { mse_scaled: 0.0, mae_scaled: 0.0, mse: 0.0, mae: 0.0 });
        }
        let (mut mse_s, mut mae_s, mut mse, mut mae) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..n {
            let pred = self.predict_row(data.row(i))?;
            let y = data.targets[i];
            let es = self.target_scaler.scale(0, pred) - self.target_scaler.scale(0, y);
            let e = pred - y;
            mse_s += es * es;
            mae_s += es.abs();
            mse += e * e;
            mae += e.abs();
        }
        let n = n as f64;
        Ok(Metrics { mse_scaled: mse_s / n, mae_scaled: mae_s / n, mse: mse / n, mae: mae / n })
    }
}

/// Fit scalers on the non-test portion, then train with SGD and early
/// stopping. Deterministic for a fixed seed.
pub fn train(data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome, NnError> {
    cfg.validate()?;
    const MIN_SAMPLES: usize = 10;
    if data.len() < MIN_SAMPLES {
        return Err(NnError::TooFewSamples { got: data.len(), need: MIN_SAMPLES });
    }
    let split = Split::new(data.len(), cfg.test_fraction, cfg.val_fraction, cfg.seed);
    let fit = split.fit_portion();

    let mut dims = alloc::vec![data.dim];
    dims.extend_from_slice(&cfg.hidden);
    dims.push(1);
    let mut model = MlpModel::new(&dims, cfg.seed)?;
    model.input_scaler = MinMaxScaler::fit(&data.features, data.dim, &fit);
    model.target_scaler = MinMaxScaler::fit(&data.targets, 1, &fit);
    model.scaler_provenance = index_digest(&fit);
    model.config_fingerprint = cfg.fingerprint();

    let xs: Vec<Vec<f64>> = (0..data.len())
        .map(|i| {
            let mut x = alloc::vec![0.0; data.dim];
            model.input_scaler.transform(data.row(i), &mut x);
            x
        })
        .collect();
    let ys: Vec<f64> = data.targets.iter().map(|&y| model.target_scaler.scale(0, y)).collect();

    let draw = |attempt: u64| MlpModel::new(&dims, cfg.seed.wrapping_add(attempt.wrapping_mul(0x9e37_79b9_7f4a_7c15)));
    let mut attempt = 0u64;
    let mut restarts = 0usize;
    'run: loop {
        // A rectified output unit that is dead on every sample never receives
        // gradient again, so such draws (at init or after an epoch) are redone.
        let mut fresh = draw(attempt)?;
        while attempt < MAX_INIT_DRAWS && fresh.live_fraction(&xs, &split.train) < 0.5 {
            attempt += 1;
            fresh = draw(attempt)?;
        }
        model.weights = fresh.weights;
        model.biases = fresh.biases;

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
        let mut order = split.train.clone();
        let mut history = TrainHistory { restarts, ..TrainHistory::default() };
        let mut best = (f64::INFINITY, model.clone(), 0usize);
        let mut grad = Gradients::zeros_like(&model);
        let mut vel = Gradients::zeros_like(&model);
        let mut bx: Vec<&[f64]> = Vec::with_capacity(cfg.batch_size);
        let mut by: Vec<f64> = Vec::with_capacity(cfg.batch_size);

        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(cfg.batch_size) {
                bx.clear();
                by.clear();
                for &i in chunk {
                    bx.push(&xs[i]);
                    by.push(ys[i]);
                }
                for g in grad.weights.iter_mut().chain(grad.biases.iter_mut()) {
                    g.iter_mut().for_each(|v| *v = 0.0);
                }
                model.accumulate(&bx, &by, &mut grad);
                model.sgd_step(&grad, &mut vel, cfg.learning_rate, cfg.momentum, cfg.l2);
            }
            let train_loss = model.mse_scaled(&xs, &ys, &split.train);
            if !train_loss.is_finite() {
                return Err(NnError::Diverged(epoch));
            }
            if attempt + 1 < MAX_INIT_DRAWS && model.live_fraction(&xs, &split.train) == 0.0 {
                attempt += 1;
                restarts += 1;
                continue 'run;
            }
            let val_loss = if split.val.is_empty() { train_loss } else { model.mse_scaled(&xs, &ys, &split.val) };
            history.train_loss.push(train_loss);
            history.val_loss.push(val_loss);
            if val_loss < best.0 {
                best = (val_loss, model.clone(), epoch);
            } else if cfg.patience > 0 && epoch - best.2 >= cfg.patience {
                history.stopped_early = true;
                break;
            }
        }
        history.best_epoch = best.2;
        return Ok(TrainOutcome { model: best.1, history, split });
    }
}
