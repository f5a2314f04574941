//! Diagonal-covariance Gaussian hidden Markov models.
//!
//! Forward-backward uses per-step scaling with emissions shifted by their
//! per-step maximum, so long sequences and far-apart emissions cannot
//! underflow; Viterbi runs in the log domain. Fitting pools any number of sequences that
//! share a feature dimension.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};

/// One observation per row.
pub type Sequence = Vec<Vec<f64>>;

pub const DEFAULT_NUM_STATES: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HmmModel {
    pub feature_names: Vec<String>,
    pub initial: Vec<f64>,
    pub transition: Vec<Vec<f64>>,
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitConfig {
    pub restarts: usize,
    pub max_iterations: usize,
    /// Stop once the relative log-likelihood gain falls below this.
    pub tolerance: f64,
    pub variance_floor: f64,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            restarts: 10,
            max_iterations: 500,
            tolerance: 1e-6,
            variance_floor: 1e-6,
            seed: 0,
        }
    }
}

impl FitConfig {
    fn validate(&self) -> Result<()> {
        if self.restarts == 0 || self.max_iterations == 0 {
            return Err(Error::invalid("restarts and max_iterations must be positive"));
        }
        if !(self.tolerance > 0.0) || !(self.variance_floor > 0.0) {
            return Err(Error::invalid("tolerance and variance floor must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub restart_log_likelihoods: Vec<f64>,
    pub chosen_restart: usize,
    /// Log-likelihood after each E-step of the chosen restart.
    pub trace: Vec<f64>,
    pub converged: bool,
}

impl FitReport {
    pub fn final_log_likelihood(&self) -> f64 {
        self.restart_log_likelihoods[self.chosen_restart]
    }

    /// True when the trace never drops by more than `slack` (scaled by |L|).
    pub fn is_monotone(&self, slack: f64) -> bool {
        self.trace
            .windows(2)
            .all(|w| w[1] >= w[0] - slack * (1.0 + w[0].abs()))
    }
}

impl HmmModel {
    pub fn num_states(&self) -> usize {
        self.initial.len()
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.num_states();
        let d = self.dim();
        if k == 0 {
            return Err(Error::invalid("model has no states"));
        }
        if self.transition.len() != k
            || self.transition.iter().any(|r| r.len() != k)
            || self.means.len() != k
            || self.variances.len() != k
            || self.means.iter().chain(&self.variances).any(|r| r.len() != d)
            || self.feature_names.len() != d
        {
            return Err(Error::DimensionMismatch("inconsistent model array shapes".into()));
        }
        let stochastic = |row: &[f64]| row.iter().all(|&p| (0.0..=1.0 + 1e-12).contains(&p)) && (row.iter().sum::<f64>() - 1.0).abs() <= 1e-9;
        if !stochastic(&self.initial) || !self.transition.iter().all(|r| stochastic(r)) {
            return Err(Error::invalid("initial/transition probabilities are not stochastic"));
        }
        if self.variances.iter().flatten().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::invalid("variances must be positive"));
        }
        Ok(())
    }

    /// Log-density of `x` under every state's emission.
    pub fn log_emissions(&self, x: &[f64]) -> Vec<f64> {
        self.means
            .iter()
            .zip(&self.variances)
            .map(|(mu, var)| {
                -0.5 * mu
                    .iter()
                    .zip(var)
                    .zip(x)
                    .map(|((m, v), xi)| (2.0 * PI * v).ln() + (xi - m) * (xi - m) / v)
                    .sum::<f64>()
            })
            .collect()
    }

    fn check_seq(&self, seq: &[Vec<f64>]) -> Result<()> {
        let d = self.dim();
        if let Some(bad) = seq.iter().position(|x| x.len() != d) {
            return Err(Error::DimensionMismatch(format!(
                "observation {bad} has dimension {}, model expects {d}",
                seq[bad].len()
            )));
        }
        Ok(())
    }

    /// Relabels states: old state `s` becomes `map[s]`.
    pub fn relabeled(&self, map: &[usize]) -> Self {
        let k = self.num_states();
        let mut inv = vec![0; k];
        for (old, &new) in map.iter().enumerate() {
            inv[new] = old;
        }
        HmmModel {
            feature_names: self.feature_names.clone(),
            initial: inv.iter().map(|&o| self.initial[o]).collect(),
            transition: inv
                .iter()
                .map(|&oi| inv.iter().map(|&oj| self.transition[oi][oj]).collect())
                .collect(),
            means: inv.iter().map(|&o| self.means[o].clone()).collect(),
            variances: inv.iter().map(|&o| self.variances[o].clone()).collect(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: HmmModel = serde_json::from_str(text)?;
        m.validate()?;
        Ok(m)
    }
}

struct Posterior {
    log_likelihood: f64,
    gamma: Vec<Vec<f64>>,
    xi_sum: Vec<Vec<f64>>,
}

fn ln_vec(v: &[f64]) -> Vec<f64> {
    v.iter().map(|p| p.ln()).collect()
}

/// Emission densities divided by their per-step maximum, with the log of
/// that maximum. The largest entry of every row is exactly 1.
fn shifted_emissions(model: &HmmModel, seq: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<f64>) {
    let norm: Vec<f64> = model.variances.iter().map(|v| -0.5 * v.iter().map(|x| (2.0 * PI * x).ln()).sum::<f64>()).collect();
    let inv: Vec<Vec<f64>> = model.variances.iter().map(|v| v.iter().map(|x| 1.0 / x).collect()).collect();
    let mut shift = Vec::with_capacity(seq.len());
    let b = seq
        .iter()
        .map(|x| {
            let lb: Vec<f64> = (0..model.num_states())
                .map(|s| {
                    let q: f64 = x.iter().zip(&model.means[s]).zip(&inv[s]).map(|((xi, m), iv)| (xi - m) * (xi - m) * iv).sum();
                    norm[s] - 0.5 * q
                })
                .collect();
            let m = lb.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            shift.push(m);
            lb.into_iter().map(|v| (v - m).exp()).collect()
        })
        .collect();
    (b, shift)
}

/// Scaled forward pass: normalized alphas and the per-step scale factors.
fn forward_scaled(model: &HmmModel, b: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let k = model.num_states();
    let mut alpha = Vec::with_capacity(b.len());
    let mut scale = Vec::with_capacity(b.len());
    let mut cur: Vec<f64> = (0..k).map(|s| model.initial[s] * b[0][s]).collect();
    for t in 0..b.len() {
        if t > 0 {
            let prev: &Vec<f64> = alpha.last().unwrap();
            cur = vec![0.0; k];
            for (j, &pj) in prev.iter().enumerate() {
                if pj == 0.0 {
                    continue;
                }
                for (c, a) in cur.iter_mut().zip(&model.transition[j]) {
                    *c += pj * a;
                }
            }
            for (c, bs) in cur.iter_mut().zip(&b[t]) {
                *c *= bs;
            }
        }
        let c: f64 = cur.iter().sum();
        if !(c > 0.0) || !c.is_finite() {
            return Err(Error::Degenerate("sequence has zero likelihood under the model".into()));
        }
        cur.iter_mut().for_each(|v| *v /= c);
        scale.push(c);
        alpha.push(cur.clone());
    }
    Ok((alpha, scale))
}

fn posterior(model: &HmmModel, seq: &[Vec<f64>]) -> Result<Posterior> {
    let k = model.num_states();
    let t_len = seq.len();
    let (b, shift) = shifted_emissions(model, seq);
    let (alpha, scale) = forward_scaled(model, &b)?;
    let ll: f64 = scale.iter().zip(&shift).map(|(c, m)| c.ln() + m).sum();
    let mut beta = vec![vec![1.0; k]; t_len];
    let mut xi_sum = vec![vec![0.0; k]; k];
    let mut w = vec![0.0; k];
    for t in (0..t_len - 1).rev() {
        for s in 0..k {
            w[s] = b[t + 1][s] * beta[t + 1][s] / scale[t + 1];
        }
        for j in 0..k {
            let row = &model.transition[j];
            beta[t][j] = (0..k).map(|s| row[s] * w[s]).sum();
            let aj = alpha[t][j];
            if aj != 0.0 {
                for s in 0..k {
                    xi_sum[j][s] += aj * row[s] * w[s];
                }
            }
        }
    }
    let gamma = alpha.iter().zip(&beta).map(|(a, be)| a.iter().zip(be).map(|(x, y)| x * y).collect()).collect();
    Ok(Posterior {
        log_likelihood: ll,
        gamma,
        xi_sum,
    })
}

/// `log p(seq | model)` by the scaled forward recursion.
pub fn sequence_log_likelihood(model: &HmmModel, seq: &[Vec<f64>]) -> Result<f64> {
    model.check_seq(seq)?;
    if seq.is_empty() {
        return Ok(0.0);
    }
    let (b, shift) = shifted_emissions(model, seq);
    let (_, scale) = forward_scaled(model, &b)?;
    Ok(scale.iter().zip(&shift).map(|(c, m)| c.ln() + m).sum())
}

pub fn total_log_likelihood(model: &HmmModel, sequences: &[Sequence]) -> Result<f64> {
    sequences
        .iter()
        .map(|s| sequence_log_likelihood(model, s))
        .sum()
}

/// Most probable state path; ties go to the lower state index.
pub fn viterbi(model: &HmmModel, seq: &[Vec<f64>]) -> Result<Vec<usize>> {
    model.check_seq(seq)?;
    if seq.is_empty() {
        return Ok(Vec::new());
    }
    let k = model.num_states();
    let log_a: Vec<Vec<f64>> = model.transition.iter().map(|r| ln_vec(r)).collect();
    let log_pi = ln_vec(&model.initial);
    let first = model.log_emissions(&seq[0]);
    let mut delta: Vec<f64> = (0..k).map(|s| log_pi[s] + first[s]).collect();
    let mut back: Vec<Vec<usize>> = Vec::with_capacity(seq.len());
    for x in &seq[1..] {
        let lb = model.log_emissions(x);
        let mut next = vec![f64::NEG_INFINITY; k];
        let mut arg = vec![0; k];
        for s in 0..k {
            let mut best = f64::NEG_INFINITY;
            let mut best_j = 0;
            for j in 0..k {
                let v = delta[j] + log_a[j][s];
                if v > best {
                    best = v;
                    best_j = j;
                }
            }
            next[s] = best + lb[s];
            arg[s] = best_j;
        }
        back.push(arg);
        delta = next;
    }
    let mut state = 0;
    let mut best = f64::NEG_INFINITY;
    for (s, &v) in delta.iter().enumerate() {
        if v > best {
            best = v;
            state = s;
        }
    }
    let mut path = vec![state; seq.len()];
    for t in (0..back.len()).rev() {
        state = back[t][state];
        path[t] = state;
    }
    Ok(path)
}

/// Number of free parameters: initial, transitions, diagonal means and variances.
pub fn num_free_parameters(k: usize, d: usize) -> usize {
    (k - 1) + k * (k - 1) + 2 * k * d
}

pub fn bic_from_log_likelihood(log_likelihood: f64, k: usize, d: usize, n_obs: usize) -> f64 {
    -2.0 * log_likelihood + num_free_parameters(k, d) as f64 * (n_obs as f64).ln()
}

pub fn bic_score(model: &HmmModel, sequences: &[Sequence]) -> Result<f64> {
    let ll = total_log_likelihood(model, sequences)?;
    let n: usize = sequences.iter().map(Vec::len).sum();
    Ok(bic_from_log_likelihood(ll, model.num_states(), model.dim(), n))
}

fn validate_sequences(sequences: &[Sequence], k: usize) -> Result<usize> {
    let d = sequences
        .iter()
        .flat_map(|s| s.first())
        .map(Vec::len)
        .next()
        .ok_or_else(|| Error::invalid("no observations"))?;
    if d == 0 {
        return Err(Error::invalid("observations have dimension 0"));
    }
    let mut n = 0;
    for (si, s) in sequences.iter().enumerate() {
        for (t, x) in s.iter().enumerate() {
            if x.len() != d {
                return Err(Error::DimensionMismatch(format!(
                    "sequence {si} observation {t} has dimension {}, expected {d}",
                    x.len()
                )));
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("sequence {si} observation {t}")));
            }
        }
        n += s.len();
    }
    if k == 0 {
        return Err(Error::invalid("state count must be positive"));
    }
    if n <= k {
        return Err(Error::invalid(format!("{n} observations for {k} states")));
    }
    Ok(d)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding followed by a few Lloyd steps.
fn kmeans_init(points: &[&[f64]], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centers: Vec<Vec<f64>> = vec![points[rng.random_range(0..points.len())].to_vec()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = points.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.random_range(0..points.len())
        };
        centers.push(points[idx].to_vec());
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, centers.last().unwrap()));
        }
    }
    let d = points[0].len();
    for _ in 0..10 {
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for p in points {
            let c = nearest(p, &centers);
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(p.iter()) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }
    centers
}

fn nearest(p: &[f64], centers: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, center) in centers.iter().enumerate() {
        let dist = sq_dist(p, center);
        if dist < best_d {
            best_d = dist;
            best = c;
        }
    }
    best
}

fn initial_model(sequences: &[Sequence], k: usize, d: usize, cfg: &FitConfig, rng: &mut ChaCha8Rng) -> HmmModel {
    let points: Vec<&[f64]> = sequences.iter().flatten().map(Vec::as_slice).collect();
    let n = points.len() as f64;
    let pooled_mean: Vec<f64> = (0..d).map(|j| points.iter().map(|p| p[j]).sum::<f64>() / n).collect();
    let pooled_var: Vec<f64> = (0..d)
        .map(|j| {
            let v = points.iter().map(|p| (p[j] - pooled_mean[j]).powi(2)).sum::<f64>() / n;
            v.max(cfg.variance_floor)
        })
        .collect();
    let means = kmeans_init(&points, k, rng);
    let mut sums = vec![vec![0.0; d]; k];
    let mut counts = vec![0usize; k];
    for p in &points {
        let c = nearest(p, &means);
        counts[c] += 1;
        for j in 0..d {
            sums[c][j] += (p[j] - means[c][j]).powi(2);
        }
    }
    let variances = (0..k)
        .map(|c| {
            if counts[c] >= 2 {
                sums[c].iter().map(|s| (s / counts[c] as f64).max(cfg.variance_floor)).collect()
            } else {
                pooled_var.clone()
            }
        })
        .collect();
    let transition = (0..k)
        .map(|i| {
            (0..k)
                .map(|j| match (k, i == j) {
                    (1, _) => 1.0,
                    (_, true) => 0.9,
                    (_, false) => 0.1 / (k - 1) as f64,
                })
                .collect()
        })
        .collect();
    HmmModel {
        feature_names: Vec::new(),
        initial: vec![1.0 / k as f64; k],
        transition,
        means,
        variances,
    }
}

fn m_step(model: &mut HmmModel, sequences: &[Sequence], posts: &[Posterior], floor: f64) {
    let k = model.num_states();
    let d = model.dim();
    let mut init = vec![0.0; k];
    let mut xi = vec![vec![0.0; k]; k];
    let mut weight = vec![0.0; k];
    let mut sum_x = vec![vec![0.0; d]; k];
    for (seq, post) in sequences.iter().zip(posts) {
        for s in 0..k {
            init[s] += post.gamma[0][s];
            for j in 0..k {
                xi[s][j] += post.xi_sum[s][j];
            }
        }
        for (x, g) in seq.iter().zip(&post.gamma) {
            for s in 0..k {
                weight[s] += g[s];
                for j in 0..d {
                    sum_x[s][j] += g[s] * x[j];
                }
            }
        }
    }
    let init_total: f64 = init.iter().sum();
    model.initial = init.iter().map(|v| v / init_total).collect();
    for s in 0..k {
        let row: f64 = xi[s].iter().sum();
        if row > 0.0 {
            model.transition[s] = xi[s].iter().map(|v| v / row).collect();
        }
    }
    let occupied: Vec<bool> = weight.iter().map(|&w| w > 1e-300).collect();
    for s in 0..k {
        if occupied[s] {
            model.means[s] = sum_x[s].iter().map(|v| v / weight[s]).collect();
        }
    }
    let mut sum_sq = vec![vec![0.0; d]; k];
    for (seq, post) in sequences.iter().zip(posts) {
        for (x, g) in seq.iter().zip(&post.gamma) {
            for s in 0..k {
                for j in 0..d {
                    let diff = x[j] - model.means[s][j];
                    sum_sq[s][j] += g[s] * diff * diff;
                }
            }
        }
    }
    for s in 0..k {
        if occupied[s] {
            model.variances[s] = sum_sq[s].iter().map(|v| (v / weight[s]).max(floor)).collect();
        }
    }
}

fn run_em(sequences: &[Sequence], mut model: HmmModel, cfg: &FitConfig) -> Result<(HmmModel, Vec<f64>, bool)> {
    let mut trace: Vec<f64> = Vec::new();
    let mut converged = false;
    for _ in 0..cfg.max_iterations {
        let posts = sequences
            .iter()
            .map(|s| posterior(&model, s))
            .collect::<Result<Vec<_>>>()?;
        let ll: f64 = posts.iter().map(|p| p.log_likelihood).sum();
        if let Some(&prev) = trace.last() {
            if (ll - prev) < cfg.tolerance * prev.abs().max(1.0) {
                trace.push(ll);
                converged = true;
                break;
            }
        }
        trace.push(ll);
        m_step(&mut model, sequences, &posts, cfg.variance_floor);
    }
    Ok((model, trace, converged))
}

/// Baum-Welch over all `sequences`; the best of `cfg.restarts` restarts is kept.
pub fn fit(sequences: &[Sequence], k: usize, cfg: &FitConfig) -> Result<(HmmModel, FitReport)> {
    cfg.validate()?;
    let d = validate_sequences(sequences, k)?;
    let sequences: Vec<Sequence> = sequences.iter().filter(|s| !s.is_empty()).cloned().collect();
    let runs: Vec<Result<(HmmModel, Vec<f64>, bool)>> = (0..cfg.restarts)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(r as u64);
            let init = initial_model(&sequences, k, d, cfg, &mut rng);
            run_em(&sequences, init, cfg)
        })
        .collect();
    let runs = runs.into_iter().collect::<Result<Vec<_>>>()?;
    let finals: Vec<f64> = runs.iter().map(|(_, t, _)| *t.last().unwrap()).collect();
    let mut chosen = 0;
    for (i, &v) in finals.iter().enumerate() {
        if v > finals[chosen] {
            chosen = i;
        }
    }
    let (mut model, trace, converged) = runs.into_iter().nth(chosen).unwrap();
    model.feature_names = (0..d).map(|j| format!("f{j}")).collect();
    Ok((
        model,
        FitReport {
            restart_log_likelihoods: finals,
            chosen_restart: chosen,
            trace,
            converged,
        },
    ))
}

/// Like [`fit`] but records the given feature names on the model.
pub fn fit_named(
    sequences: &[Sequence],
    feature_names: &[String],
    k: usize,
    cfg: &FitConfig,
) -> Result<(HmmModel, FitReport)> {
    let (mut model, report) = fit(sequences, k, cfg)?;
    if feature_names.len() != model.dim() {
        return Err(Error::DimensionMismatch(format!(
            "{} feature names for dimension {}",
            feature_names.len(),
            model.dim()
        )));
    }
    model.feature_names = feature_names.to_vec();
    Ok((model, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BicRow {
    pub k: usize,
    pub log_likelihood: f64,
    pub bic: f64,
}

/// Fits each candidate state count and keeps the BIC minimizer (smaller K on ties).
pub fn select_num_states(
    sequences: &[Sequence],
    k_range: &[usize],
    cfg: &FitConfig,
) -> Result<(usize, Vec<BicRow>)> {
    if k_range.is_empty() {
        return Err(Error::invalid("empty state-count range"));
    }
    let n: usize = sequences.iter().map(Vec::len).sum();
    let mut table = Vec::with_capacity(k_range.len());
    for &k in k_range {
        let (model, report) = fit(sequences, k, cfg)?;
        let ll = report.final_log_likelihood();
        table.push(BicRow {
            k,
            log_likelihood: ll,
            bic: bic_from_log_likelihood(ll, k, model.dim(), n),
        });
    }
    let best = table
        .iter()
        .min_by(|a, b| a.bic.total_cmp(&b.bic).then(a.k.cmp(&b.k)))
        .unwrap()
        .k;
    Ok((best, table))
}
