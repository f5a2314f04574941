//! Deterministic synthetic runs with known ground truth.
//!
//! Every generator is a pure function of its configuration and seed. Random
//! numbers come from ChaCha8 (`rand_chacha`); run `i` of a script uses the
//! generator seeded with the script seed on stream `i`, so runs can be made
//! in parallel and individually.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agreement::{LogHeader, PredictionItem, PredictionLog};
use crate::error::{Error, Result};
use crate::paramstats::{checkpoint_statistics, write_stats_csv, StatConfig, StatSeries, StatVector, NUM_FEATURES};
use crate::probe::{ProbeDataset, ProbeItem};
use crate::stability::{AccuracyRow, AccuracyTable};
use crate::tensorstore::{default_schedule, save_manifest, write_checkpoint, CheckpointRef, RunManifest, TensorKind, TensorRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Regime {
    /// First checkpoint index of the regime.
    pub start: usize,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    /// Per-run start offsets are drawn uniformly from `[-jitter, jitter]`.
    #[serde(default)]
    pub jitter: usize,
}

/// A loss-spike episode: `spike_len` checkpoints in `spike_regime` from
/// `spike_index`, then `return_len` checkpoints in `return_regime`, then the
/// scripted path resumes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Anomaly {
    pub seeds: BTreeSet<u64>,
    pub spike_index: usize,
    pub spike_len: usize,
    pub spike_regime: usize,
    pub return_regime: usize,
    pub return_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeScript {
    pub size: String,
    pub regimes: Vec<Regime>,
    pub anomaly: Option<Anomaly>,
    pub schedule: Vec<u64>,
    pub seeds: u64,
}

impl RegimeScript {
    /// Regimes whose every feature mean is `r * separation` (alternating sign
    /// per feature) with unit std, starting at the given indices of the
    /// default schedule.
    pub fn separated(size: impl Into<String>, starts: &[usize], separation: f64, seeds: u64) -> Self {
        let regimes = starts
            .iter()
            .enumerate()
            .map(|(r, &start)| Regime {
                start,
                means: (0..NUM_FEATURES)
                    .map(|f| if f % 2 == 0 { 1.0 } else { -1.0 } * separation * r as f64)
                    .collect(),
                stds: vec![1.0; NUM_FEATURES],
                jitter: 0,
            })
            .collect();
        RegimeScript {
            size: size.into(),
            regimes,
            anomaly: None,
            schedule: default_schedule(),
            seeds,
        }
    }

    /// Regimes shaped like real checkpoint statistics, for tensor generation:
    /// regime `r` has `l2 = 20 + 10 r` and `mu_w = 0.01 r` (each 10 stds
    /// apart), bias mean `0.05 r` and bias variance `0.01 (1 + r)`.
    pub fn checkpoint_like(size: impl Into<String>, starts: &[usize], seeds: u64) -> Self {
        let regimes = starts
            .iter()
            .enumerate()
            .map(|(r, &start)| {
                let r = r as f64;
                let mut means = vec![0.0; NUM_FEATURES];
                let mut stds = vec![1.0; NUM_FEATURES];
                means[1] = 20.0 + 10.0 * r;
                means[3] = 0.01 * r;
                stds[3] = 0.001;
                means[6] = 0.05 * r;
                stds[6] = 0.005;
                means[8] = 0.01 * (1.0 + r);
                stds[8] = 0.001;
                Regime { start, means, stds, jitter: 0 }
            })
            .collect();
        RegimeScript {
            size: size.into(),
            regimes,
            anomaly: None,
            schedule: default_schedule(),
            seeds,
        }
    }

    /// `count` regime starts spread evenly over `n` checkpoints.
    pub fn even_starts(n: usize, count: usize) -> Vec<usize> {
        (0..count).map(|r| r * n / count.max(1)).collect()
    }

    /// Same script with every std multiplied by `factor`.
    pub fn with_noise_scale(&self, factor: f64) -> Self {
        let mut s = self.clone();
        for r in &mut s.regimes {
            r.stds.iter_mut().for_each(|v| *v *= factor);
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.schedule.len();
        if n == 0 || self.seeds == 0 {
            return Err(Error::invalid("script needs a schedule and at least one seed"));
        }
        if self.schedule.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("schedule steps must be strictly increasing"));
        }
        if self.regimes.is_empty() || self.regimes[0].start != 0 {
            return Err(Error::invalid("the first regime must start at index 0"));
        }
        let dim = self.regimes[0].means.len();
        for (i, r) in self.regimes.iter().enumerate() {
            if r.means.len() != dim || r.stds.len() != dim {
                return Err(Error::DimensionMismatch(format!("regime {i} has inconsistent feature count")));
            }
            if r.stds.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) || r.means.iter().any(|m| !m.is_finite()) {
                return Err(Error::invalid(format!("regime {i} has invalid means or stds")));
            }
            if r.start >= n {
                return Err(Error::invalid(format!("regime {i} starts beyond the schedule")));
            }
        }
        for (i, w) in self.regimes.windows(2).enumerate() {
            if w[1].start <= w[0].start + w[0].jitter + w[1].jitter {
                return Err(Error::invalid(format!(
                    "regime {} start must exceed regime {i} start plus jitter",
                    i + 1
                )));
            }
        }
        if let Some(last) = self.regimes.last() {
            if last.start + last.jitter >= n {
                return Err(Error::invalid("jittered final regime would start beyond the schedule"));
            }
        }
        if let Some(a) = &self.anomaly {
            let k = self.regimes.len();
            if a.spike_regime >= k || a.return_regime >= k {
                return Err(Error::invalid("anomaly references an unknown regime"));
            }
            if a.spike_len == 0 || a.spike_index + a.spike_len + a.return_len > n {
                return Err(Error::invalid("anomaly does not fit in the schedule"));
            }
            if let Some(s) = a.seeds.iter().find(|&&s| s >= self.seeds) {
                return Err(Error::invalid(format!("anomaly seed {s} outside 0..{}", self.seeds)));
            }
        }
        Ok(())
    }

    /// Ground-truth regime per checkpoint for run `run`, drawing start jitter from `rng`.
    fn labels_for(&self, run: u64, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let n = self.schedule.len();
        let starts: Vec<usize> = self
            .regimes
            .iter()
            .map(|r| {
                if r.jitter == 0 {
                    r.start
                } else {
                    let j = r.jitter as i64;
                    (r.start as i64 + rng.random_range(-j..=j)) as usize
                }
            })
            .collect();
        let mut labels = vec![0usize; n];
        for (r, &s) in starts.iter().enumerate() {
            labels[s..].iter_mut().for_each(|l| *l = r);
        }
        if let Some(a) = self.anomaly.as_ref().filter(|a| a.seeds.contains(&run)) {
            let spike_end = a.spike_index + a.spike_len;
            labels[a.spike_index..spike_end].iter_mut().for_each(|l| *l = a.spike_regime);
            labels[spike_end..spike_end + a.return_len].iter_mut().for_each(|l| *l = a.return_regime);
        }
        labels
    }

    fn run_rng(seed: u64, run: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(run);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthEnsemble {
    pub series: Vec<StatSeries>,
    /// Ground-truth regime per run per checkpoint.
    pub labels: Vec<Vec<usize>>,
}

/// Statistic series drawn from the active regime's Gaussian at every checkpoint.
pub fn generate_stat_series(script: &RegimeScript, seed: u64) -> Result<SynthEnsemble> {
    script.validate()?;
    if script.regimes[0].means.len() != NUM_FEATURES {
        return Err(Error::DimensionMismatch(format!(
            "regimes have {} features, statistic vectors have {NUM_FEATURES}",
            script.regimes[0].means.len()
        )));
    }
    let runs: Vec<(StatSeries, Vec<usize>)> = (0..script.seeds)
        .into_par_iter()
        .map(|run| {
            let mut rng = RegimeScript::run_rng(seed, run);
            let labels = script.labels_for(run, &mut rng);
            let vectors = script
                .schedule
                .iter()
                .zip(&labels)
                .map(|(&step, &r)| {
                    let reg = &script.regimes[r];
                    let mut v = [0.0; NUM_FEATURES];
                    for f in 0..NUM_FEATURES {
                        let e: f64 = StandardNormal.sample(&mut rng);
                        v[f] = reg.means[f] + reg.stds[f] * e;
                    }
                    StatVector::from_array(step, v)
                })
                .collect();
            (StatSeries { size: script.size.clone(), seed: run, vectors }, labels)
        })
        .collect();
    let (series, labels) = runs.into_iter().unzip();
    Ok(SynthEnsemble { series, labels })
}

/// `seed,step,regime` ground-truth sidecar.
pub fn write_truth_csv<W: Write>(schedule: &[u64], labels: &[Vec<usize>], mut out: W) -> Result<()> {
    writeln!(out, "seed,step,regime")?;
    for (seed, path) in labels.iter().enumerate() {
        for (step, r) in schedule.iter().zip(path) {
            writeln!(out, "{seed},{step},{r}")?;
        }
    }
    Ok(())
}

pub fn read_truth_csv(text: &str) -> Result<BTreeMap<u64, Vec<(u64, usize)>>> {
    let mut out: BTreeMap<u64, Vec<(u64, usize)>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        let parse = |s: &str| s.trim().parse::<u64>().map_err(|_| Error::Format(format!("truth line {}: `{line}`", i + 1)));
        if f.len() != 3 {
            return Err(Error::Format(format!("truth line {} has {} fields", i + 1, f.len())));
        }
        out.entry(parse(f[0])?).or_default().push((parse(f[1])?, parse(f[2])? as usize));
    }
    Ok(out)
}

/// Shape of one generated weight matrix and whether it carries a bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub bias: bool,
}

pub fn default_tensor_specs() -> Vec<TensorSpec> {
    vec![
        TensorSpec { name: "layer0.attn".into(), rows: 32, cols: 32, bias: true },
        TensorSpec { name: "layer0.mlp_in".into(), rows: 64, cols: 32, bias: true },
        TensorSpec { name: "layer0.mlp_out".into(), rows: 32, cols: 64, bias: false },
    ]
}

/// Targets for checkpoint tensors: every matrix gets Frobenius norm `l2`
/// and the concatenated weights get mean `mu_w`; biases get mean `mu_b` and
/// population variance `sigma_b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TensorTargets {
    pub l2: f64,
    pub mu_w: f64,
    pub mu_b: f64,
    pub sigma_b: f64,
}

impl TensorTargets {
    pub fn from_stat_vector(v: &StatVector) -> Self {
        TensorTargets { l2: v.l2, mu_w: v.mu_w, mu_b: v.mu_b, sigma_b: v.sigma_b.max(0.0) }
    }
}

fn standard_normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn center(xs: &mut [f64]) -> f64 {
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    xs.iter_mut().for_each(|v| *v -= m);
    xs.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Builds one checkpoint's tensors from base matrices by the closed-form
/// shift and scale that hits the targets.
pub fn build_checkpoint(specs: &[TensorSpec], targets: &TensorTargets, rng: &mut ChaCha8Rng) -> Result<Vec<TensorRecord>> {
    if !(targets.l2 >= 0.0) || !targets.mu_w.is_finite() {
        return Err(Error::invalid(format!("infeasible target l2 = {}", targets.l2)));
    }
    let mut records = Vec::new();
    for spec in specs {
        let n = spec.rows * spec.cols;
        if n == 0 {
            return Err(Error::invalid(format!("tensor `{}` has an empty shape", spec.name)));
        }
        let mut base = standard_normals(rng, n);
        let norm = center(&mut base);
        let rest = targets.l2 * targets.l2 - targets.mu_w * targets.mu_w * n as f64;
        if rest < 0.0 || norm == 0.0 {
            return Err(Error::invalid(format!(
                "infeasible target for `{}`: l2 {} cannot hold mean {} over {n} entries",
                spec.name, targets.l2, targets.mu_w
            )));
        }
        let s = rest.sqrt() / norm;
        let data = base.iter().map(|c| (s * c + targets.mu_w) as f32).collect();
        records.push(TensorRecord::with_kind(format!("{}.weight", spec.name), TensorKind::WeightMatrix, vec![spec.rows, spec.cols], data)?);
        if spec.bias {
            let mut b = standard_normals(rng, spec.rows);
            let norm = center(&mut b);
            let scale = if norm > 0.0 { (targets.sigma_b * spec.rows as f64).sqrt() / norm } else { 0.0 };
            let data = b.iter().map(|c| (scale * c + targets.mu_b) as f32).collect();
            records.push(TensorRecord::with_kind(format!("{}.bias", spec.name), TensorKind::BiasVector, vec![spec.rows], data)?);
        }
    }
    Ok(records)
}

#[derive(Debug, Clone)]
pub struct GeneratedCheckpoints {
    pub manifests: Vec<PathBuf>,
    /// Statistics recomputed from the written tensors.
    pub realized: Vec<StatSeries>,
    pub labels: Vec<Vec<usize>>,
}

/// Writes `seed_<s>/step_<n>.ptns` files and `seed_<s>/manifest.txt` under
/// `out_dir`, plus `truth.csv` and `realized_stats.csv`. Scripted `l2` and
/// `mu_w` are matched exactly; the other features are whatever the
/// construction produces and are recorded in the sidecar.
pub fn generate_checkpoints(
    script: &RegimeScript,
    seed: u64,
    specs: &[TensorSpec],
    out_dir: impl AsRef<Path>,
) -> Result<GeneratedCheckpoints> {
    let out_dir = out_dir.as_ref();
    if specs.is_empty() {
        return Err(Error::invalid("no tensor shapes given"));
    }
    let ens = generate_stat_series(script, seed)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let results: Vec<(PathBuf, StatSeries)> = ens
        .series
        .par_iter()
        .map(|series| {
            let dir = out_dir.join(format!("seed_{}", series.seed));
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            // stream offset keeps tensor noise independent of the series noise
            let mut rng = RegimeScript::run_rng(seed, series.seed + (1 << 32));
            let mut refs = Vec::with_capacity(series.vectors.len());
            let mut realized = Vec::with_capacity(series.vectors.len());
            for v in &series.vectors {
                let records = build_checkpoint(specs, &TensorTargets::from_stat_vector(v), &mut rng)
                    .map_err(|e| e.at_step(v.step))?;
                let name = format!("step_{}.ptns", v.step);
                write_checkpoint(&records, dir.join(&name))?;
                realized.push(checkpoint_statistics(&records, &StatConfig::default()).map_err(|e| e.at_step(v.step))?);
                refs.push(CheckpointRef { step: v.step, path: PathBuf::from(name) });
            }
            let mut manifest = RunManifest::new(series.size.clone(), series.seed, refs)?;
            manifest.metadata.insert("generator".into(), "synthlab".into());
            let path = dir.join("manifest.txt");
            save_manifest(&manifest, &path)?;
            Ok((path, StatSeries { size: series.size.clone(), seed: series.seed, vectors: realized }))
        })
        .collect::<Result<_>>()?;
    let (manifests, realized): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let truth = out_dir.join("truth.csv");
    let mut buf = Vec::new();
    write_truth_csv(&script.schedule, &ens.labels, &mut buf)?;
    std::fs::write(&truth, buf).map_err(|e| Error::io(&truth, e))?;
    let stats = out_dir.join("realized_stats.csv");
    let mut buf = Vec::new();
    write_stats_csv(&realized, &mut buf)?;
    std::fs::write(&stats, buf).map_err(|e| Error::io(&stats, e))?;
    Ok(GeneratedCheckpoints { manifests, realized, labels: ens.labels })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTaskConfig {
    pub classes: usize,
    pub dim: usize,
    pub layers: usize,
    pub informative_layer: usize,
    /// Distance between class means, in noise std units.
    pub separation: f64,
    pub tokens_per_class: usize,
    pub seed: u64,
}

impl Default for SynthTaskConfig {
    fn default() -> Self {
        SynthTaskConfig {
            classes: 4,
            dim: 16,
            layers: 3,
            informative_layer: 1,
            separation: 5.0,
            tokens_per_class: 250,
            seed: 0,
        }
    }
}

/// Class `c` has mean `separation / sqrt(2) * e_c` in the informative layer,
/// so every pair of class means is `separation` apart; other layers are
/// standard normal noise.
pub fn generate_probe_task(cfg: &SynthTaskConfig) -> Result<ProbeDataset> {
    if cfg.classes < 2 || cfg.classes > cfg.dim {
        return Err(Error::invalid("need 2 <= classes <= dim"));
    }
    if cfg.layers == 0 || cfg.informative_layer >= cfg.layers || cfg.tokens_per_class == 0 {
        return Err(Error::invalid("invalid layer or token configuration"));
    }
    if !(cfg.separation >= 0.0) {
        return Err(Error::invalid("separation must be non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let offset = cfg.separation / std::f64::consts::SQRT_2;
    let mut labels: Vec<usize> = (0..cfg.classes).flat_map(|c| std::iter::repeat_n(c, cfg.tokens_per_class)).collect();
    labels.shuffle(&mut rng);
    let items = labels
        .into_iter()
        .enumerate()
        .map(|(i, label)| {
            let mut layers = standard_normals(&mut rng, cfg.layers * cfg.dim);
            layers[cfg.informative_layer * cfg.dim + label] += offset;
            ProbeItem { layers, label, sequence: (i / 16) as u64 }
        })
        .collect();
    Ok(ProbeDataset { num_layers: cfg.layers, dim: cfg.dim, num_classes: cfg.classes, items })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthLogConfig {
    pub items: usize,
    pub options: usize,
    pub target_kappa: f64,
    pub accuracy: f64,
    pub seed: u64,
    /// Number of logs; log 0 is the reference rater.
    pub raters: usize,
    pub task: String,
    pub size: String,
    pub step: u64,
}

impl Default for SynthLogConfig {
    fn default() -> Self {
        SynthLogConfig {
            items: 10_000,
            options: 4,
            target_kappa: 0.5,
            accuracy: 0.3,
            seed: 0,
            raters: 2,
            task: "synthetic".into(),
            size: "synth".into(),
            step: 0,
        }
    }
}

impl SynthLogConfig {
    fn validate(&self) -> Result<()> {
        if self.items == 0 || self.options < 2 || self.raters == 0 {
            return Err(Error::invalid("need items, at least two options and one rater"));
        }
        if !(0.0..=1.0).contains(&self.target_kappa) || !(0.0..=1.0).contains(&self.accuracy) {
            return Err(Error::invalid("kappa and accuracy must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Gold answers and a reference rater that is right with probability
/// `accuracy` and otherwise picks a wrong option uniformly. Both have
/// uniform marginals.
fn base_rater(cfg: &SynthLogConfig, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let m = cfg.options;
    let gold: Vec<usize> = (0..cfg.items).map(|_| rng.random_range(0..m)).collect();
    let chosen = gold
        .iter()
        .map(|&g| {
            if rng.random::<f64>() < cfg.accuracy {
                g
            } else {
                (g + 1 + rng.random_range(0..m - 1)) % m
            }
        })
        .collect();
    (gold, chosen)
}

/// Copies `base` with probability `p`, otherwise draws uniformly. Against
/// `base` (uniform marginals) this gives kappa = p in expectation.
fn copy_rater(base: &[usize], p: f64, m: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    base.iter()
        .map(|&b| if rng.random::<f64>() < p { b } else { rng.random_range(0..m) })
        .collect()
}

fn make_log(cfg: &SynthLogConfig, seed: u64, step: u64, gold: &[usize], chosen: Vec<usize>) -> PredictionLog {
    PredictionLog {
        header: LogHeader { task: cfg.task.clone(), size: cfg.size.clone(), seed, step },
        items: gold
            .iter()
            .zip(chosen)
            .enumerate()
            .map(|(i, (&g, c))| PredictionItem { item: format!("q{i:05}"), chosen: c, gold: g, n_options: cfg.options })
            .collect(),
    }
}

/// Log 0 is the reference rater; logs 1.. each agree with it at kappa close
/// to the target (pairs of non-reference logs agree at about target squared).
pub fn generate_prediction_logs(cfg: &SynthLogConfig) -> Result<Vec<PredictionLog>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (gold, base) = base_rater(cfg, &mut rng);
    let mut logs = vec![make_log(cfg, 0, cfg.step, &gold, base.clone())];
    for r in 1..cfg.raters {
        let chosen = copy_rater(&base, cfg.target_kappa, cfg.options, &mut rng);
        logs.push(make_log(cfg, r as u64, cfg.step, &gold, chosen));
    }
    Ok(logs)
}

/// One seed's logs over `steps`; the copy probability towards the final
/// answers rises linearly, reaching 1 at the last step.
pub fn generate_drifting_logs(cfg: &SynthLogConfig, steps: &[u64]) -> Result<Vec<PredictionLog>> {
    cfg.validate()?;
    if steps.is_empty() {
        return Err(Error::invalid("no steps"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (gold, fin) = base_rater(cfg, &mut rng);
    let n = steps.len();
    Ok(steps
        .iter()
        .enumerate()
        .map(|(i, &step)| {
            let p = (i + 1) as f64 / n as f64;
            let chosen = if i + 1 == n { fin.clone() } else { copy_rater(&fin, p, cfg.options, &mut rng) };
            make_log(cfg, 0, step, &gold, chosen)
        })
        .collect())
}

/// An accuracy table whose per-seed scores are an affine image of `scores`
/// for every task, so the seed-averaged z-scores are the standardized scores.
pub fn accuracy_table_from_scores(size: &str, seeds: &[u64], scores: &[f64], tasks: usize) -> Result<AccuracyTable> {
    if seeds.len() != scores.len() || tasks == 0 {
        return Err(Error::Misaligned("one score per seed and at least one task required".into()));
    }
    let m = scores.iter().sum::<f64>() / scores.len() as f64;
    let spread = scores.iter().map(|s| (s - m).abs()).fold(0.0, f64::max);
    let spread = if spread > 0.0 { spread } else { 1.0 };
    let mut rows = Vec::new();
    for (&seed, &s) in seeds.iter().zip(scores) {
        for t in 0..tasks {
            rows.push(AccuracyRow {
                size: size.to_string(),
                seed,
                task: format!("task{t}"),
                accuracy: 0.45 + 0.02 * t as f64 + 0.3 * (s - m) / spread,
            });
        }
    }
    AccuracyTable::from_rows(&rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::paramstats::run_statistics;
    use crate::tensorstore::load_manifest;

    fn three_regime() -> RegimeScript {
        RegimeScript::separated("s", &[0, 50, 100], 3.0, 4)
    }

    #[test]
    fn zero_noise_is_constant() {
        let mut s = RegimeScript::separated("s", &[0], 0.0, 2);
        s.regimes[0].means = (0..14).map(|f| f as f64).collect();
        s.regimes[0].stds = vec![0.0; 14];
        let e = generate_stat_series(&s, 1).unwrap();
        for run in &e.series {
            for v in &run.vectors {
                assert_eq!(v.to_array().to_vec(), s.regimes[0].means);
            }
        }
    }

    #[test]
    fn labels_switch_at_scripted_indices() {
        let e = generate_stat_series(&three_regime(), 3).unwrap();
        for path in &e.labels {
            assert_eq!(path.len(), 154);
            assert!(path[..50].iter().all(|&l| l == 0));
            assert!(path[50..100].iter().all(|&l| l == 1));
            assert!(path[100..].iter().all(|&l| l == 2));
        }
    }

    #[test]
    fn regime_sample_means_match_script() {
        let s = three_regime();
        let e = generate_stat_series(&s, 9).unwrap();
        for r in 0..3 {
            let mut acc = [0.0; 14];
            let mut n = 0.0;
            for (run, path) in e.series.iter().zip(&e.labels) {
                for (v, &l) in run.vectors.iter().zip(path) {
                    if l == r {
                        for (a, x) in acc.iter_mut().zip(v.to_array()) {
                            *a += x;
                        }
                        n += 1.0;
                    }
                }
            }
            for f in 0..14 {
                let m = acc[f] / n;
                // 4 sigma keeps the 42 joint checks from failing by chance
                assert!((m - s.regimes[r].means[f]).abs() < 4.0 * s.regimes[r].stds[f] / n.sqrt());
            }
        }
    }

    #[test]
    fn anomaly_and_jitter_paths() {
        let mut s = three_regime();
        s.regimes[2].jitter = 3;
        s.anomaly = Some(Anomaly { seeds: [1].into(), spike_index: 70, spike_len: 4, spike_regime: 2, return_regime: 1, return_len: 10 });
        let e = generate_stat_series(&s, 0).unwrap();
        let p = &e.labels[1];
        assert!(p[70..74].iter().all(|&l| l == 2));
        assert!(p[74..84].iter().all(|&l| l == 1));
        assert!(e.labels[0][..97].iter().all(|&l| l < 2));
        let again = generate_stat_series(&s, 0).unwrap();
        assert_eq!(again, e);
    }

    #[test]
    fn invalid_scripts() {
        let mut s = three_regime();
        s.regimes[1].start = 0;
        assert!(s.validate().is_err());
        let mut s = three_regime();
        s.regimes[0].stds[0] = -1.0;
        assert!(s.validate().is_err());
        let mut s = three_regime();
        s.anomaly = Some(Anomaly { seeds: [9].into(), spike_index: 1, spike_len: 1, spike_regime: 0, return_regime: 0, return_len: 0 });
        assert!(s.validate().is_err());
    }

    #[test]
    fn checkpoint_targets_are_hit() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let specs = default_tensor_specs();
        let t = TensorTargets { l2: 20.0, mu_w: 0.01, mu_b: 0.1, sigma_b: 0.04 };
        let recs = build_checkpoint(&specs, &t, &mut rng).unwrap();
        let v = checkpoint_statistics(&recs, &StatConfig::default()).unwrap();
        assert!((v.l2 - 20.0).abs() / 20.0 < 1e-6);
        assert!((v.mu_w - 0.01).abs() < 1e-6);
        assert!((v.mu_b - 0.1).abs() < 1e-6);
        assert!((v.sigma_b - 0.04).abs() < 1e-6);
        let doubled = build_checkpoint(&specs, &TensorTargets { l2: 40.0, ..t }, &mut rng).unwrap();
        let v2 = checkpoint_statistics(&doubled, &StatConfig::default()).unwrap();
        assert!((v2.l2 / v.l2 - 2.0).abs() < 2e-6);
        assert!(build_checkpoint(&specs, &TensorTargets { l2: -1.0, ..t }, &mut rng).is_err());
        assert!(build_checkpoint(&specs, &TensorTargets { l2: 0.1, mu_w: 1.0, ..t }, &mut rng).is_err());
    }

    #[test]
    fn generated_checkpoints_are_reproducible_and_consistent() {
        let mut s = RegimeScript::separated("s", &[0, 3], 0.0, 2);
        s.schedule = vec![0, 10, 20, 30, 40];
        for (r, reg) in s.regimes.iter_mut().enumerate() {
            reg.means = vec![0.0; 14];
            reg.means[1] = 10.0 * (r + 1) as f64;
            reg.stds = vec![0.0; 14];
        }
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let specs = vec![TensorSpec { name: "w".into(), rows: 4, cols: 3, bias: true }];
        let ga = generate_checkpoints(&s, 5, &specs, a.path()).unwrap();
        generate_checkpoints(&s, 5, &specs, b.path()).unwrap();
        let fa = std::fs::read(a.path().join("seed_1/step_30.ptns")).unwrap();
        let fb = std::fs::read(b.path().join("seed_1/step_30.ptns")).unwrap();
        assert_eq!(fa, fb);
        let manifest = load_manifest(&ga.manifests[0]).unwrap();
        let recomputed = run_statistics(&manifest, &StatConfig::default()).unwrap();
        for (x, y) in recomputed.vectors.iter().zip(&ga.realized[0].vectors) {
            for (p, q) in x.to_array().iter().zip(y.to_array()) {
                assert!((p - q).abs() <= 1e-8 * (1.0 + q.abs()));
            }
        }
        assert!((recomputed.vectors[4].l2 / recomputed.vectors[0].l2 - 2.0).abs() < 1e-6);
        assert!(a.path().join("truth.csv").exists());
    }

    #[test]
    fn probe_task_is_balanced_and_deterministic() {
        let cfg = SynthTaskConfig { tokens_per_class: 20, ..Default::default() };
        let d = generate_probe_task(&cfg).unwrap();
        assert_eq!(d.items.len(), 80);
        for c in 0..4 {
            assert_eq!(d.items.iter().filter(|i| i.label == c).count(), 20);
        }
        assert_eq!(generate_probe_task(&cfg).unwrap(), d);
        assert!(generate_probe_task(&SynthTaskConfig { classes: 1, ..cfg.clone() }).is_err());
        assert!(generate_probe_task(&SynthTaskConfig { separation: -1.0, ..cfg }).is_err());
    }

    #[test]
    fn log_generator_targets() {
        use crate::agreement::{accuracy, kappa_between};
        let cfg = SynthLogConfig { target_kappa: 1.0, items: 200, ..Default::default() };
        let logs = generate_prediction_logs(&cfg).unwrap();
        assert_eq!(logs[0].items, logs[1].items);
        let cfg = SynthLogConfig::default();
        let logs = generate_prediction_logs(&cfg).unwrap();
        assert!((kappa_between(&logs[0], &logs[1]).unwrap().kappa - 0.5).abs() < 0.05);
        assert!((accuracy(&logs[0]).unwrap() - 0.3).abs() < 0.02);
        let zero = generate_prediction_logs(&SynthLogConfig { target_kappa: 0.0, ..cfg }).unwrap();
        assert!(kappa_between(&zero[0], &zero[1]).unwrap().kappa.abs() < 0.05);
    }

    #[test]
    fn accuracy_table_preserves_score_order() {
        let t = accuracy_table_from_scores("s", &[0, 1, 2], &[1.0, -2.0, 0.5], 3).unwrap();
        let z = crate::stability::zscore(&t).unwrap();
        let avg = &z.sizes[0].average;
        assert!(avg[1] < avg[2] && avg[2] < avg[0]);
    }
}
