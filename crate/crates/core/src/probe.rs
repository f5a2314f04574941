//! Variational linear probes trained with a description-length objective,
//! plus the representation-shift metrics built on them.
//!
//! A probe mixes the `L` layer representations of a token with softmax
//! weights, applies a `d x |Y|` weight matrix sampled from a factorized
//! Gaussian posterior, and is trained on summed token cross-entropy plus the
//! KL term of that posterior against a prior. Losses are in nats internally;
//! reports are in bits.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::tensorstore::{read_checkpoint, write_checkpoint, TensorKind, TensorRecord};

// Sparse variational dropout KL approximation constants.
const K1: f64 = 0.63576;
const K2: f64 = 1.87320;
const K3: f64 = 1.48695;
const MEAN_SQ_GUARD: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeItem {
    /// `num_layers x dim`, row-major.
    pub layers: Vec<f64>,
    pub label: usize,
    pub sequence: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeDataset {
    pub num_layers: usize,
    pub dim: usize,
    pub num_classes: usize,
    pub items: Vec<ProbeItem>,
}

impl ProbeDataset {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.dim == 0 || self.num_classes == 0 {
            return Err(Error::invalid("probe dataset needs layers, dimension and classes"));
        }
        for (i, it) in self.items.iter().enumerate() {
            if it.layers.len() != self.num_layers * self.dim {
                return Err(Error::DimensionMismatch(format!(
                    "item {i} has {} values, expected {}",
                    it.layers.len(),
                    self.num_layers * self.dim
                )));
            }
            if it.label >= self.num_classes {
                return Err(Error::invalid(format!("item {i} label {} >= {}", it.label, self.num_classes)));
            }
        }
        Ok(())
    }

    /// A copy with labels shuffled among items.
    pub fn with_shuffled_labels(&self, seed: u64) -> Self {
        let mut labels: Vec<usize> = self.items.iter().map(|i| i.label).collect();
        labels.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut out = self.clone();
        for (it, l) in out.items.iter_mut().zip(labels) {
            it.label = l;
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Prior {
    #[default]
    LogUniform,
    StandardNormal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeModel {
    pub dim: usize,
    pub num_classes: usize,
    /// `dim x num_classes`, row-major.
    pub weight_means: Vec<f64>,
    pub weight_log_variances: Vec<f64>,
    pub mix_logits: Vec<f64>,
    pub prior: Prior,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeGradients {
    pub weight_means: Vec<f64>,
    pub weight_log_variances: Vec<f64>,
    pub mix_logits: Vec<f64>,
}

impl ProbeGradients {
    fn zeros(p: &ProbeModel) -> Self {
        ProbeGradients {
            weight_means: vec![0.0; p.weight_means.len()],
            weight_log_variances: vec![0.0; p.weight_log_variances.len()],
            mix_logits: vec![0.0; p.mix_logits.len()],
        }
    }
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Softmax-weighted combination of the layers of a `num_layers x dim` stack.
pub fn mix_layers(stack: &[f64], mix_logits: &[f64]) -> Result<Vec<f64>> {
    let l = mix_logits.len();
    if l == 0 || stack.len() % l != 0 {
        return Err(Error::DimensionMismatch(format!("{} values for {l} layers", stack.len())));
    }
    let d = stack.len() / l;
    let alpha = softmax(mix_logits);
    let mut h = vec![0.0; d];
    for (layer, a) in stack.chunks_exact(d).zip(&alpha) {
        for (hj, v) in h.iter_mut().zip(layer) {
            *hj += a * v;
        }
    }
    Ok(h)
}

impl ProbeModel {
    pub fn new(dim: usize, num_classes: usize, num_layers: usize, prior: Prior) -> Self {
        ProbeModel {
            dim,
            num_classes,
            weight_means: vec![0.0; dim * num_classes],
            weight_log_variances: vec![-10.0; dim * num_classes],
            mix_logits: vec![0.0; num_layers],
            prior,
        }
    }

    pub fn num_weights(&self) -> usize {
        self.dim * self.num_classes
    }

    pub fn mix_weights(&self) -> Vec<f64> {
        softmax(&self.mix_logits)
    }

    fn check(&self, data: &ProbeDataset) -> Result<()> {
        if data.dim != self.dim || data.num_layers != self.mix_logits.len() || data.num_classes > self.num_classes {
            return Err(Error::DimensionMismatch(format!(
                "probe is {}x{} over {} layers, data is {}x{} over {} layers",
                self.dim,
                self.num_classes,
                self.mix_logits.len(),
                data.dim,
                data.num_classes,
                data.num_layers
            )));
        }
        Ok(())
    }

    /// Class scores with posterior-mean weights.
    pub fn logits(&self, item: &ProbeItem) -> Result<Vec<f64>> {
        let h = mix_layers(&item.layers, &self.mix_logits)?;
        if h.len() != self.dim {
            return Err(Error::DimensionMismatch(format!("representation of size {} for probe of {}", h.len(), self.dim)));
        }
        let c = self.num_classes;
        let mut z = vec![0.0; c];
        for (j, hj) in h.iter().enumerate() {
            for (k, zk) in z.iter_mut().enumerate() {
                *zk += self.weight_means[j * c + k] * hj;
            }
        }
        Ok(z)
    }

    pub fn predict(&self, item: &ProbeItem) -> Result<usize> {
        let z = self.logits(item)?;
        let mut best = 0;
        for k in 1..z.len() {
            if z[k] > z[best] {
                best = k;
            }
        }
        Ok(best)
    }

    /// KL(posterior || prior) in nats and its gradients.
    pub fn kl(&self) -> (f64, Vec<f64>, Vec<f64>) {
        let n = self.num_weights();
        let mut total = 0.0;
        let mut g_mu = vec![0.0; n];
        let mut g_lv = vec![0.0; n];
        for i in 0..n {
            let mu = self.weight_means[i];
            let lv = self.weight_log_variances[i];
            match self.prior {
                Prior::StandardNormal => {
                    let var = lv.exp();
                    total += 0.5 * (var + mu * mu - 1.0 - lv);
                    g_mu[i] = mu;
                    g_lv[i] = 0.5 * (var - 1.0);
                }
                Prior::LogUniform => {
                    let m2 = mu * mu + MEAN_SQ_GUARD;
                    let log_alpha = lv - m2.ln();
                    let s = sigmoid(K2 + K3 * log_alpha);
                    total += K1 * (1.0 - s) + 0.5 * softplus(-log_alpha);
                    let d_log_alpha = -K1 * K3 * s * (1.0 - s) - 0.5 * sigmoid(-log_alpha);
                    g_lv[i] = d_log_alpha;
                    g_mu[i] = d_log_alpha * (-2.0 * mu / m2);
                }
            }
        }
        (total.max(0.0), g_mu, g_lv)
    }

    /// Summed cross-entropy (nats) of `items` under weights `theta`, with gradients.
    fn data_term(&self, items: &[&ProbeItem], theta: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        let c = self.num_classes;
        let d = self.dim;
        let l = self.mix_logits.len();
        let alpha = softmax(&self.mix_logits);
        let mut loss = 0.0;
        let mut g_theta = vec![0.0; d * c];
        let mut g_logits = vec![0.0; l];
        let mut h = vec![0.0; d];
        let mut g_h = vec![0.0; d];
        let mut g_alpha = vec![0.0; l];
        for item in items {
            if item.layers.len() != l * d {
                return Err(Error::DimensionMismatch("item layer stack does not match probe".into()));
            }
            if item.label >= c {
                return Err(Error::invalid(format!("label {} >= {c}", item.label)));
            }
            h.iter_mut().for_each(|v| *v = 0.0);
            for (layer, a) in item.layers.chunks_exact(d).zip(&alpha) {
                for (hj, v) in h.iter_mut().zip(layer) {
                    *hj += a * v;
                }
            }
            let mut z = vec![0.0; c];
            for j in 0..d {
                for k in 0..c {
                    z[k] += theta[j * c + k] * h[j];
                }
            }
            let p = softmax(&z);
            let zmax = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = zmax + z.iter().map(|v| (v - zmax).exp()).sum::<f64>().ln();
            loss += lse - z[item.label];
            let mut g_z = p;
            g_z[item.label] -= 1.0;
            for j in 0..d {
                let mut acc = 0.0;
                for k in 0..c {
                    g_theta[j * c + k] += h[j] * g_z[k];
                    acc += theta[j * c + k] * g_z[k];
                }
                g_h[j] = acc;
            }
            for (li, layer) in item.layers.chunks_exact(d).enumerate() {
                g_alpha[li] = layer.iter().zip(&g_h).map(|(a, b)| a * b).sum();
            }
            let dot: f64 = alpha.iter().zip(&g_alpha).map(|(a, g)| a * g).sum();
            for li in 0..l {
                g_logits[li] += alpha[li] * (g_alpha[li] - dot);
            }
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite("probe cross-entropy".into()));
        }
        Ok((loss, g_theta, g_logits))
    }

    fn sampled_weights(&self, noise: &[f64]) -> Vec<f64> {
        self.weight_means
            .iter()
            .zip(&self.weight_log_variances)
            .zip(noise)
            .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
            .collect()
    }
}

struct ObjectiveParts {
    data: f64,
    kl: f64,
    data_grad: ProbeGradients,
    kl_grad: ProbeGradients,
}

fn objective_parts(probe: &ProbeModel, batch: &[&ProbeItem], noise: &[f64]) -> Result<ObjectiveParts> {
    if noise.len() != probe.num_weights() {
        return Err(Error::DimensionMismatch(format!(
            "{} noise values for {} weights",
            noise.len(),
            probe.num_weights()
        )));
    }
    let theta = probe.sampled_weights(noise);
    let (data, g_theta, g_logits) = probe.data_term(batch, &theta)?;
    let g_lv = g_theta
        .iter()
        .zip(noise)
        .zip(&probe.weight_log_variances)
        .map(|((g, e), lv)| g * e * 0.5 * (0.5 * lv).exp())
        .collect();
    let (kl, kl_mu, kl_lv) = probe.kl();
    let mut kl_grad = ProbeGradients::zeros(probe);
    kl_grad.weight_means = kl_mu;
    kl_grad.weight_log_variances = kl_lv;
    Ok(ObjectiveParts {
        data,
        kl,
        data_grad: ProbeGradients {
            weight_means: g_theta,
            weight_log_variances: g_lv,
            mix_logits: g_logits,
        },
        kl_grad,
    })
}

/// Description-length loss (nats) of a batch for one reparameterization draw
/// `noise` (one standard-normal value per weight), with exact gradients.
pub fn mdl_objective(probe: &ProbeModel, batch: &[ProbeItem], noise: &[f64]) -> Result<(f64, ProbeGradients)> {
    let refs: Vec<&ProbeItem> = batch.iter().collect();
    let parts = objective_parts(probe, &refs, noise)?;
    let loss = parts.data + parts.kl;
    if !loss.is_finite() {
        return Err(Error::NonFinite("MDL loss".into()));
    }
    let add = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x + y).collect::<Vec<_>>();
    Ok((
        loss,
        ProbeGradients {
            weight_means: add(&parts.data_grad.weight_means, &parts.kl_grad.weight_means),
            weight_log_variances: add(&parts.data_grad.weight_log_variances, &parts.kl_grad.weight_log_variances),
            mix_logits: parts.data_grad.mix_logits,
        },
    ))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub prior: Prior,
    /// Fraction of items held out for macro-F1.
    pub heldout_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            learning_rate: 0.05,
            batch_size: 64,
            seed: 0,
            prior: Prior::LogUniform,
            heldout_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CodelengthReport {
    pub data_bits: f64,
    pub kl_bits: f64,
    pub total_bits: f64,
    pub macro_f1: f64,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Adam { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, params: &mut [&mut f64], grads: &[f64], lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t);
        let c2 = 1.0 - B2.powi(self.t);
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads[i];
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * g;
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * g * g;
            **p -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + 1e-8);
        }
    }
}

/// Deterministic train/held-out split of item indices.
pub fn split_indices(n: usize, heldout_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5911));
    let held = ((n as f64) * heldout_fraction.clamp(0.0, 1.0)).round() as usize;
    let held = held.min(n.saturating_sub(1));
    let heldout = idx.split_off(n - held);
    (idx, heldout)
}

/// Trains a probe and reports its codelength on the training split and
/// macro-F1 on the held-out split.
pub fn train(dataset: &ProbeDataset, cfg: &TrainConfig) -> Result<(ProbeModel, CodelengthReport)> {
    dataset.validate()?;
    let classes: std::collections::BTreeSet<usize> = dataset.items.iter().map(|i| i.label).collect();
    if classes.len() < 2 {
        return Err(Error::invalid("probe training needs at least two classes"));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 || !(cfg.learning_rate > 0.0) {
        return Err(Error::invalid("epochs, batch size and learning rate must be positive"));
    }
    let (train_idx, held_idx) = split_indices(dataset.items.len(), cfg.heldout_fraction, cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut probe = ProbeModel::new(dataset.dim, dataset.num_classes, dataset.num_layers, cfg.prior);
    let init = Normal::new(0.0, 0.01).expect("valid normal");
    for m in &mut probe.weight_means {
        *m = init.sample(&mut rng);
    }
    let n_w = probe.num_weights();
    let n_l = probe.mix_logits.len();
    let mut adam = Adam::new(2 * n_w + n_l);
    let scale = train_idx.len() as f64;
    let mut order = train_idx.clone();
    let mut noise = vec![0.0; n_w];
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            for e in &mut noise {
                *e = StandardNormal.sample(&mut rng);
            }
            let batch: Vec<&ProbeItem> = chunk.iter().map(|&i| &dataset.items[i]).collect();
            let parts = objective_parts(&probe, &batch, &noise)?;
            let w = scale / chunk.len() as f64;
            let mut grads = Vec::with_capacity(2 * n_w + n_l);
            grads.extend(
                parts.data_grad.weight_means.iter().zip(&parts.kl_grad.weight_means).map(|(d, k)| w * d + k),
            );
            grads.extend(
                parts
                    .data_grad
                    .weight_log_variances
                    .iter()
                    .zip(&parts.kl_grad.weight_log_variances)
                    .map(|(d, k)| w * d + k),
            );
            grads.extend(parts.data_grad.mix_logits.iter().map(|d| w * d));
            let ProbeModel { weight_means, weight_log_variances, mix_logits, .. } = &mut probe;
            let mut params: Vec<&mut f64> = weight_means
                .iter_mut()
                .chain(weight_log_variances.iter_mut())
                .chain(mix_logits.iter_mut())
                .collect();
            adam.step(&mut params, &grads, cfg.learning_rate);
        }
    }
    let train_items: Vec<&ProbeItem> = train_idx.iter().map(|&i| &dataset.items[i]).collect();
    let eval_items: Vec<&ProbeItem> = if held_idx.is_empty() {
        train_items.clone()
    } else {
        held_idx.iter().map(|&i| &dataset.items[i]).collect()
    };
    let mut report = codelength(&probe, &train_items)?;
    report.macro_f1 = macro_f1_of(&probe, &eval_items)?;
    Ok((probe, report))
}

/// Codelength (bits) of `items` under the posterior-mean weights plus the KL term.
fn codelength(probe: &ProbeModel, items: &[&ProbeItem]) -> Result<CodelengthReport> {
    let (data, _, _) = probe.data_term(items, &probe.weight_means)?;
    let (kl, _, _) = probe.kl();
    let data_bits = data / std::f64::consts::LN_2;
    let kl_bits = kl / std::f64::consts::LN_2;
    Ok(CodelengthReport {
        data_bits,
        kl_bits,
        total_bits: data_bits + kl_bits,
        macro_f1: f64::NAN,
    })
}

/// Unweighted mean of per-class F1 over the classes present in `gold`.
pub fn macro_f1(predicted: &[usize], gold: &[usize]) -> Result<f64> {
    if predicted.len() != gold.len() {
        return Err(Error::Misaligned("prediction and gold lengths differ".into()));
    }
    if gold.is_empty() {
        return Err(Error::invalid("macro-F1 of an empty set"));
    }
    let classes: std::collections::BTreeSet<usize> = gold.iter().copied().collect();
    let mut total = 0.0;
    for &c in &classes {
        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut fn_ = 0usize;
        for (&p, &g) in predicted.iter().zip(gold) {
            match (p == c, g == c) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
        total += 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64;
    }
    Ok(total / classes.len() as f64)
}

fn macro_f1_of(probe: &ProbeModel, items: &[&ProbeItem]) -> Result<f64> {
    let pred = items.iter().map(|it| probe.predict(it)).collect::<Result<Vec<_>>>()?;
    let gold: Vec<usize> = items.iter().map(|it| it.label).collect();
    macro_f1(&pred, &gold)
}

pub fn evaluate_macro_f1(probe: &ProbeModel, dataset: &ProbeDataset) -> Result<f64> {
    probe.check(dataset)?;
    let items: Vec<&ProbeItem> = dataset.items.iter().collect();
    macro_f1_of(probe, &items)
}

/// Probe codelength over a random-representation baseline; near 0 is efficient.
pub fn codelength_ratio(model: &CodelengthReport, random_baseline: &CodelengthReport) -> Result<f64> {
    if !(random_baseline.total_bits > 0.0) {
        return Err(Error::Degenerate("baseline codelength must be positive".into()));
    }
    Ok(model.total_bits / random_baseline.total_bits)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubspaceAngles {
    /// Principal angles in degrees, ascending.
    pub angles: Vec<f64>,
    pub mean: f64,
    pub rank_a: usize,
    pub rank_b: usize,
}

fn orthonormal_basis(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let svd = m.clone().svd(true, false);
    let smax = svd.singular_values.max();
    if !(smax > 0.0) {
        return Err(Error::Degenerate("zero matrix has no column space".into()));
    }
    let u = svd.u.expect("u requested");
    let keep: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| svd.singular_values[i] > 1e-10 * smax)
        .collect();
    Ok(DMatrix::from_fn(m.nrows(), keep.len(), |r, c| u[(r, keep[c])]))
}

/// Principal angles between the column spans of two `rows x cols` row-major matrices.
pub fn subspace_angles(a: &[f64], b: &[f64], rows: usize, cols: usize) -> Result<SubspaceAngles> {
    if a.len() != rows * cols || b.len() != rows * cols {
        return Err(Error::DimensionMismatch("probe matrices must share a shape".into()));
    }
    let qa = orthonormal_basis(&DMatrix::from_row_slice(rows, cols, a))?;
    let qb = orthonormal_basis(&DMatrix::from_row_slice(rows, cols, b))?;
    let (rank_a, rank_b) = (qa.ncols(), qb.ncols());
    // The larger basis plays the role of the reference subspace.
    let (big, small) = if rank_a >= rank_b { (&qa, &qb) } else { (&qb, &qa) };
    let cross = big.transpose() * small;
    let mut cos: Vec<f64> = cross.singular_values().iter().map(|v| v.clamp(0.0, 1.0)).collect();
    cos.sort_by(|x, y| y.total_cmp(x));
    let residual = small - big * &cross;
    let mut sin: Vec<f64> = residual.singular_values().iter().map(|v| v.clamp(0.0, 1.0)).collect();
    sin.sort_by(f64::total_cmp);
    let m = small.ncols();
    let angles: Vec<f64> = (0..m)
        .map(|i| {
            let c = cos.get(i).copied().unwrap_or(0.0);
            let theta = if c * c >= 0.5 { sin[i].asin() } else { c.acos() };
            theta.to_degrees()
        })
        .collect();
    let mean = angles.iter().sum::<f64>() / m as f64;
    Ok(SubspaceAngles { angles, mean, rank_a, rank_b })
}

const FISHER_CLAMP: f64 = 1.0 - 1e-9;

/// `tanh(mean(atanh r))`, clamping |r| near 1.
pub fn fisher_average(rs: &[f64]) -> Result<f64> {
    if rs.is_empty() {
        return Err(Error::invalid("no correlations to average"));
    }
    let mut acc = 0.0;
    for &r in rs {
        if !r.is_finite() || r.abs() > 1.0 + 1e-12 {
            return Err(Error::invalid(format!("correlation {r} outside [-1, 1]")));
        }
        let r = if r.abs() > FISHER_CLAMP {
            log::warn!("clamping correlation {r} to +-{FISHER_CLAMP} for the Fisher transform");
            r.signum() * FISHER_CLAMP
        } else {
            r
        };
        acc += r.atanh();
    }
    Ok((acc / rs.len() as f64).tanh())
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Misaligned("correlation needs two equal-length series of length >= 2".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Err(Error::Degenerate("zero-variance trajectory".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Two-sided p-value of a Pearson correlation over `n` points.
pub fn correlation_p_value(r: f64, n: usize) -> f64 {
    if n < 3 {
        return f64::NAN;
    }
    if r.abs() >= 1.0 {
        return 0.0;
    }
    let df = (n - 2) as f64;
    let t = r * (df / (1.0 - r * r)).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).expect("valid t distribution");
    2.0 * (1.0 - dist.cdf(t.abs()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationSummary {
    pub labels: Vec<String>,
    pub r: Vec<Vec<f64>>,
    pub p_values: Vec<Vec<f64>>,
    /// Fisher average over every ordered pair, self-pairs included.
    pub fisher_mean: f64,
}

pub fn trajectory_correlations(trajectories: &[(String, Vec<f64>)]) -> Result<CorrelationSummary> {
    if trajectories.is_empty() {
        return Err(Error::invalid("no trajectories"));
    }
    let n = trajectories[0].1.len();
    if trajectories.iter().any(|(_, t)| t.len() != n) {
        return Err(Error::Misaligned("trajectories have different lengths".into()));
    }
    let m = trajectories.len();
    let mut r = vec![vec![1.0; m]; m];
    let mut p = vec![vec![0.0; m]; m];
    for i in 0..m {
        for j in i..m {
            let v = if i == j {
                pearson(&trajectories[i].1, &trajectories[i].1)?;
                1.0
            } else {
                pearson(&trajectories[i].1, &trajectories[j].1)?
            };
            r[i][j] = v;
            r[j][i] = v;
            let pv = correlation_p_value(v, n);
            p[i][j] = pv;
            p[j][i] = pv;
        }
    }
    let all: Vec<f64> = r.iter().flatten().copied().collect();
    Ok(CorrelationSummary {
        labels: trajectories.iter().map(|(l, _)| l.clone()).collect(),
        fisher_mean: fisher_average(&all)?,
        r,
        p_values: p,
    })
}

fn encode_header(header: &BTreeMap<String, String>) -> TensorRecord {
    let text: String = header.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    let bytes: Vec<f32> = text.bytes().map(f32::from).collect();
    let len = bytes.len().max(1);
    let mut data = bytes;
    data.resize(len, f32::from(b'\n'));
    TensorRecord::with_kind("header", TensorKind::Other, vec![len], data).expect("valid header record")
}

fn decode_header(r: &TensorRecord) -> Result<BTreeMap<String, String>> {
    let bytes: Vec<u8> = r
        .data
        .iter()
        .map(|&v| {
            if (0.0..=255.0).contains(&v) && v.fract() == 0.0 {
                Ok(v as u8)
            } else {
                Err(Error::Format("header record holds non-byte values".into()))
            }
        })
        .collect::<Result<_>>()?;
    let text = String::from_utf8(bytes).map_err(|_| Error::Format("header record is not UTF-8".into()))?;
    Ok(text
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect())
}

/// Writes a representation dump: `layer.<l>` records (tokens x dim), a
/// `labels` record, a `sequence_ids` record and a `header` record holding
/// `key=value` lines as byte values.
pub fn write_representation_dump(
    dataset: &ProbeDataset,
    header: &BTreeMap<String, String>,
    path: impl AsRef<Path>,
) -> Result<()> {
    dataset.validate()?;
    let n = dataset.items.len();
    if n == 0 {
        return Err(Error::invalid("cannot dump an empty dataset"));
    }
    let d = dataset.dim;
    let mut header = header.clone();
    header.insert("classes".into(), dataset.num_classes.to_string());
    let mut records = vec![encode_header(&header)];
    for l in 0..dataset.num_layers {
        let data = dataset
            .items
            .iter()
            .flat_map(|it| it.layers[l * d..(l + 1) * d].iter().map(|&v| v as f32))
            .collect();
        records.push(TensorRecord::with_kind(format!("layer.{l}"), TensorKind::Other, vec![n, d], data)?);
    }
    records.push(TensorRecord::with_kind(
        "labels",
        TensorKind::Other,
        vec![n],
        dataset.items.iter().map(|it| it.label as f32).collect(),
    )?);
    records.push(TensorRecord::with_kind(
        "sequence_ids",
        TensorKind::Other,
        vec![n],
        dataset.items.iter().map(|it| it.sequence as f32).collect(),
    )?);
    write_checkpoint(&records, path)
}

pub fn read_representation_dump(path: impl AsRef<Path>) -> Result<(ProbeDataset, BTreeMap<String, String>)> {
    let records = read_checkpoint(path)?;
    let find = |name: &str| records.iter().find(|r| r.name == name);
    let header = find("header").map(decode_header).transpose()?.unwrap_or_default();
    let labels = find("labels").ok_or_else(|| Error::Format("dump has no `labels` record".into()))?;
    let n = labels.data.len();
    let mut layers = Vec::new();
    while let Some(r) = find(&format!("layer.{}", layers.len())) {
        if r.rank() != 2 || r.shape[0] != n {
            return Err(Error::Format(format!("record `{}` is not a tokens x dim matrix", r.name)));
        }
        layers.push(r);
    }
    let first = layers.first().ok_or_else(|| Error::Format("dump has no `layer.0` record".into()))?;
    let d = first.shape[1];
    if layers.iter().any(|r| r.shape[1] != d) {
        return Err(Error::Format("layers have different widths".into()));
    }
    let sequences = find("sequence_ids");
    let as_index = |v: f32| -> Result<usize> {
        if v >= 0.0 && v.fract() == 0.0 {
            Ok(v as usize)
        } else {
            Err(Error::Format(format!("non-integer index {v}")))
        }
    };
    let mut items = Vec::with_capacity(n);
    for t in 0..n {
        let stack = layers
            .iter()
            .flat_map(|r| r.data[t * d..(t + 1) * d].iter().map(|&v| f64::from(v)))
            .collect();
        items.push(ProbeItem {
            layers: stack,
            label: as_index(labels.data[t])?,
            sequence: sequences.map(|s| as_index(s.data[t])).transpose()?.unwrap_or(t) as u64,
        });
    }
    let max_label = items.iter().map(|i| i.label).max().unwrap_or(0);
    let num_classes = match header.get("classes") {
        Some(c) => c.parse().map_err(|_| Error::Format(format!("bad class count `{c}`")))?,
        None => max_label + 1,
    };
    let dataset = ProbeDataset { num_layers: layers.len(), dim: d, num_classes, items };
    dataset.validate()?;
    Ok((dataset, header))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mixing_cases() {
        let stack = [1.0, 2.0, 3.0, 5.0];
        assert_eq!(mix_layers(&stack, &[0.0, 0.0]).unwrap(), vec![2.0, 3.5]);
        let sat = mix_layers(&stack, &[0.0, 1000.0]).unwrap();
        assert!((sat[0] - 3.0).abs() < 1e-12 && (sat[1] - 5.0).abs() < 1e-12);
        assert_eq!(mix_layers(&[4.0, 2.0], &[-7.0]).unwrap(), vec![4.0, 2.0]);
        assert!(mix_layers(&[1.0, 2.0, 3.0], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn uniform_prediction_and_gaussian_kl() {
        let mut probe = ProbeModel::new(3, 4, 2, Prior::StandardNormal);
        probe.weight_log_variances = vec![-30.0; 12];
        let items: Vec<ProbeItem> = (0..10)
            .map(|i| ProbeItem { layers: vec![i as f64 * 0.1; 6], label: i % 4, sequence: 0 })
            .collect();
        let noise = vec![0.3; 12];
        let (loss, _) = mdl_objective(&probe, &items, &noise).unwrap();
        let kl_expected: f64 = 12.0 * 0.5 * ((-30f64).exp() - 1.0 + 30.0);
        assert!((loss - (10.0 * 4f64.ln() + kl_expected)).abs() < 1e-9);
        // 2 bits per token for a uniform 4-way prediction
        let refs: Vec<&ProbeItem> = items.iter().collect();
        let report = codelength(&probe, &refs).unwrap();
        assert!((report.data_bits - 20.0).abs() < 1e-9);
    }

    #[test]
    fn duplicating_items_doubles_data_term() {
        let mut probe = ProbeModel::new(2, 3, 1, Prior::LogUniform);
        probe.weight_means = vec![0.5, -0.2, 0.1, 0.3, 0.9, -0.4];
        let items = vec![
            ProbeItem { layers: vec![1.0, 2.0], label: 0, sequence: 0 },
            ProbeItem { layers: vec![-1.0, 0.5], label: 2, sequence: 1 },
        ];
        let noise = vec![0.1, -0.3, 0.2, 0.0, 0.5, -1.0];
        let (single, _) = mdl_objective(&probe, &items, &noise).unwrap();
        let doubled: Vec<ProbeItem> = items.iter().chain(&items).cloned().collect();
        let (double, _) = mdl_objective(&probe, &doubled, &noise).unwrap();
        let (kl, _, _) = probe.kl();
        assert!(((double - kl) - 2.0 * (single - kl)).abs() < 1e-10);
    }

    #[test]
    fn log_uniform_kl_is_nonnegative_and_vanishes_for_pruned_weights() {
        let mut probe = ProbeModel::new(1, 2, 1, Prior::LogUniform);
        probe.weight_means = vec![0.0, 3.0];
        probe.weight_log_variances = vec![0.0, -12.0];
        let (kl, _, _) = probe.kl();
        assert!(kl > 0.0);
        probe.weight_means = vec![0.0, 0.0];
        probe.weight_log_variances = vec![10.0, 10.0];
        assert!(probe.kl().0 < 1e-6);
    }

    #[test]
    fn macro_f1_cases() {
        assert_eq!(macro_f1(&[0, 1, 2], &[0, 1, 2]).unwrap(), 1.0);
        let f = macro_f1(&[0, 0, 0, 0], &[0, 0, 1, 1]).unwrap();
        assert!((f - 1.0 / 3.0).abs() < 1e-12);
        let perm = [1, 0];
        let pred = [0, 1, 1, 0, 0];
        let gold = [0, 1, 0, 0, 1];
        let a = macro_f1(&pred, &gold).unwrap();
        let pp: Vec<usize> = pred.iter().map(|&c| perm[c]).collect();
        let gp: Vec<usize> = gold.iter().map(|&c| perm[c]).collect();
        assert!((macro_f1(&pp, &gp).unwrap() - a).abs() < 1e-12);
        assert!(macro_f1(&[], &[]).is_err());
    }

    #[test]
    fn ratio_cases() {
        let r = |t| CodelengthReport { data_bits: t, kl_bits: 0.0, total_bits: t, macro_f1: 0.0 };
        assert_eq!(codelength_ratio(&r(50.0), &r(100.0)).unwrap(), 0.5);
        assert_eq!(codelength_ratio(&r(70.0), &r(70.0)).unwrap(), 1.0);
        assert!(codelength_ratio(&r(1.0), &r(0.0)).is_err());
    }

    #[test]
    fn angle_cases() {
        let same = subspace_angles(&[1.0, 2.0, 3.0, 4.0, 5.0, 7.0], &[1.0, 2.0, 3.0, 4.0, 5.0, 7.0], 3, 2).unwrap();
        assert!(same.angles.iter().all(|&a| a < 1e-6));
        let orth = subspace_angles(&[1.0, 0.0], &[0.0, 1.0], 2, 1).unwrap();
        assert!((orth.mean - 90.0).abs() < 1e-6);
        let s = 0.5f64.sqrt();
        let diag = subspace_angles(&[1.0, 0.0], &[s, s], 2, 1).unwrap();
        assert!((diag.mean - 45.0).abs() < 1e-9);
        assert!(subspace_angles(&[0.0, 0.0], &[1.0, 0.0], 2, 1).is_err());
        assert!(subspace_angles(&[1.0, 0.0], &[1.0, 0.0, 0.0], 2, 1).is_err());
    }

    #[test]
    fn rank_deficient_probe() {
        // second column duplicates the first
        let a = [1.0, 1.0, 0.0, 0.0, 0.0, 0.0];
        let b = [1.0, 0.0, 0.0, 1.0, 0.0, 0.0];
        let r = subspace_angles(&a, &b, 3, 2).unwrap();
        assert_eq!((r.rank_a, r.rank_b), (1, 2));
        assert_eq!(r.angles.len(), 1);
        assert!(r.angles[0].abs() < 1e-6);
    }

    #[test]
    fn fisher_cases() {
        assert!((fisher_average(&[0.5, 0.5, 0.5]).unwrap() - 0.5).abs() < 1e-15);
        let v = fisher_average(&[0.5, 0.9]).unwrap();
        assert!((v - 0.7661).abs() < 1e-4);
        assert_eq!(fisher_average(&[0.0]).unwrap(), 0.0);
        assert!(fisher_average(&[]).is_err());
        assert!(fisher_average(&[1.0]).unwrap() > 0.999_999);
    }

    #[test]
    fn correlation_cases() {
        let t: Vec<f64> = (0..20).map(|i| (i as f64 * 0.3).sin()).collect();
        let neg: Vec<f64> = t.iter().map(|v| -v).collect();
        let s = trajectory_correlations(&[("a".into(), t.clone()), ("b".into(), t.clone()), ("c".into(), neg)]).unwrap();
        assert!((s.r[0][1] - 1.0).abs() < 1e-12);
        assert!((s.r[0][2] + 1.0).abs() < 1e-12);
        assert_eq!(s.r[1][0], s.r[0][1]);
        assert!(trajectory_correlations(&[("a".into(), t.clone()), ("b".into(), vec![1.0; 20])]).is_err());
        assert!(trajectory_correlations(&[("a".into(), t), ("b".into(), vec![1.0; 3])]).is_err());
        // t-test p-value for r = 0.5 over 12 points: t = 1.8257, df = 10
        assert!((correlation_p_value(0.5, 12) - 0.097_95).abs() < 1e-4);
    }

    #[test]
    fn single_class_dataset_rejected() {
        let data = ProbeDataset {
            num_layers: 1,
            dim: 1,
            num_classes: 2,
            items: vec![ProbeItem { layers: vec![1.0], label: 0, sequence: 0 }; 4],
        };
        assert!(train(&data, &TrainConfig::default()).is_err());
    }

    #[test]
    fn dump_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rep.ptns");
        let data = ProbeDataset {
            num_layers: 2,
            dim: 3,
            num_classes: 3,
            items: (0..5)
                .map(|i| ProbeItem { layers: (0..6).map(|j| (i * 6 + j) as f64 * 0.5).collect(), label: i % 2, sequence: i as u64 / 2 })
                .collect(),
        };
        let header = BTreeMap::from([("task".to_string(), "pos".to_string()), ("step".to_string(), "1000".to_string())]);
        write_representation_dump(&data, &header, &path).unwrap();
        let (back, h) = read_representation_dump(&path).unwrap();
        assert_eq!(back, data);
        assert_eq!(h.get("task").map(String::as_str), Some("pos"));
        assert_eq!(h.get("classes").map(String::as_str), Some("3"));
    }
}
