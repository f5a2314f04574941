//! Training maps: standardized statistic ensembles decoded into state paths.

use std::collections::{BTreeSet, HashSet};
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hmm::{viterbi, HmmModel, Sequence};
use crate::paramstats::{feature_names, StatSeries};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum StandardizationMode {
    /// At every step, each feature is standardized across seeds.
    #[default]
    PerCheckpoint,
    /// Each feature is standardized over all (seed, step) cells of a size.
    Pooled,
}

pub const DEFAULT_EPSILON: f64 = 1e-12;

/// Location and scale used to standardize an ensemble, kept for reuse on other data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mode: StandardizationMode,
    pub epsilon: f64,
    pub feature_names: Vec<String>,
    /// Steps the rows refer to (per-checkpoint mode); empty for pooled mode.
    pub steps: Vec<u64>,
    /// One row per step (per-checkpoint) or a single row (pooled).
    pub means: Vec<Vec<f64>>,
    pub stds: Vec<Vec<f64>>,
}

impl Scaler {
    /// Whether a (row, feature) cell had std below epsilon and is mapped to 0.
    pub fn is_degenerate(&self, row: usize, feature: usize) -> bool {
        self.stds[row][feature] < self.epsilon
    }

    /// Features degenerate in every row of the scaler.
    pub fn degenerate_features(&self) -> Vec<String> {
        (0..self.feature_names.len())
            .filter(|&f| (0..self.stds.len()).all(|r| self.is_degenerate(r, f)))
            .map(|f| self.feature_names[f].clone())
            .collect()
    }

    pub fn apply(&self, runs: &[RawRun]) -> Result<StandardizedEnsemble> {
        let d = self.feature_names.len();
        let mut out = Vec::with_capacity(runs.len());
        for run in runs {
            if run.rows.iter().any(|r| r.len() != d) {
                return Err(Error::DimensionMismatch(format!(
                    "run {}/{} does not have {d} features",
                    run.size, run.seed
                )));
            }
            if self.mode == StandardizationMode::PerCheckpoint && run.steps != self.steps {
                return Err(Error::Misaligned(format!(
                    "run {}/{} steps differ from the scaler's",
                    run.size, run.seed
                )));
            }
            let rows = run
                .rows
                .iter()
                .enumerate()
                .map(|(t, x)| {
                    let r = if self.mode == StandardizationMode::PerCheckpoint { t } else { 0 };
                    (0..d)
                        .map(|f| {
                            if self.is_degenerate(r, f) {
                                0.0
                            } else {
                                (x[f] - self.means[r][f]) / self.stds[r][f]
                            }
                        })
                        .collect()
                })
                .collect();
            out.push(StandardizedRun {
                size: run.size.clone(),
                seed: run.seed,
                steps: run.steps.clone(),
                rows,
            });
        }
        Ok(StandardizedEnsemble {
            feature_names: self.feature_names.clone(),
            runs: out,
            scaler: self.clone(),
        })
    }
}

/// A run's feature rows before standardization.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRun {
    pub size: String,
    pub seed: u64,
    pub steps: Vec<u64>,
    pub rows: Sequence,
}

impl From<&StatSeries> for RawRun {
    fn from(s: &StatSeries) -> Self {
        RawRun {
            size: s.size.clone(),
            seed: s.seed,
            steps: s.steps(),
            rows: s.rows(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StandardizedRun {
    pub size: String,
    pub seed: u64,
    pub steps: Vec<u64>,
    pub rows: Sequence,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StandardizedEnsemble {
    pub feature_names: Vec<String>,
    pub runs: Vec<StandardizedRun>,
    pub scaler: Scaler,
}

impl StandardizedEnsemble {
    pub fn sequences(&self) -> Vec<Sequence> {
        self.runs.iter().map(|r| r.rows.clone()).collect()
    }

    /// Keeps only the checkpoints with step <= `max_step`.
    pub fn truncated(&self, max_step: u64) -> Self {
        let runs = self
            .runs
            .iter()
            .map(|r| {
                let n = r.steps.iter().take_while(|&&s| s <= max_step).count();
                StandardizedRun {
                    size: r.size.clone(),
                    seed: r.seed,
                    steps: r.steps[..n].to_vec(),
                    rows: r.rows[..n].to_vec(),
                }
            })
            .collect();
        StandardizedEnsemble {
            feature_names: self.feature_names.clone(),
            runs,
            scaler: self.scaler.clone(),
        }
    }
}

fn sample_mean_std(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = xs.clone().count() as f64;
    let m = xs.clone().sum::<f64>() / n;
    let ss: f64 = xs.map(|x| (x - m) * (x - m)).sum();
    let sd = if n > 1.0 { (ss / (n - 1.0)).sqrt() } else { 0.0 };
    (m, sd)
}

pub fn standardize(ensemble: &[StatSeries], mode: StandardizationMode, epsilon: f64) -> Result<StandardizedEnsemble> {
    let runs: Vec<RawRun> = ensemble.iter().map(RawRun::from).collect();
    standardize_runs(&runs, &feature_names(), mode, epsilon)
}

/// Standardizes arbitrary feature rows. Sample (n-1) standard deviations are used.
pub fn standardize_runs(
    runs: &[RawRun],
    names: &[String],
    mode: StandardizationMode,
    epsilon: f64,
) -> Result<StandardizedEnsemble> {
    if !(epsilon > 0.0) {
        return Err(Error::invalid("epsilon must be positive"));
    }
    let first = runs.first().ok_or_else(|| Error::invalid("empty ensemble"))?;
    let d = names.len();
    for r in runs {
        if r.steps.len() != r.rows.len() || r.rows.iter().any(|x| x.len() != d) {
            return Err(Error::DimensionMismatch(format!("run {}/{} has malformed rows", r.size, r.seed)));
        }
    }
    let scaler = match mode {
        StandardizationMode::PerCheckpoint => {
            if runs.len() < 2 {
                return Err(Error::invalid("per-checkpoint standardization needs at least 2 seeds"));
            }
            if let Some(r) = runs.iter().find(|r| r.steps != first.steps) {
                return Err(Error::Misaligned(format!(
                    "run {}/{} has different steps from run {}/{}",
                    r.size, r.seed, first.size, first.seed
                )));
            }
            let mut means = Vec::with_capacity(first.steps.len());
            let mut stds = Vec::with_capacity(first.steps.len());
            for t in 0..first.steps.len() {
                let (m, s): (Vec<f64>, Vec<f64>) = (0..d)
                    .map(|f| sample_mean_std(runs.iter().map(move |r| r.rows[t][f])))
                    .unzip();
                means.push(m);
                stds.push(s);
            }
            Scaler {
                mode,
                epsilon,
                feature_names: names.to_vec(),
                steps: first.steps.clone(),
                means,
                stds,
            }
        }
        StandardizationMode::Pooled => {
            let (m, s): (Vec<f64>, Vec<f64>) = (0..d)
                .map(|f| sample_mean_std(runs.iter().flat_map(|r| r.rows.iter()).map(move |x| x[f])))
                .unzip();
            Scaler {
                mode,
                epsilon,
                feature_names: names.to_vec(),
                steps: Vec::new(),
                means: vec![m],
                stds: vec![s],
            }
        }
    };
    scaler.apply(runs)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingMap {
    pub size: String,
    pub seed: u64,
    pub steps: Vec<u64>,
    pub states: Vec<usize>,
    pub forks: Vec<usize>,
}

impl TrainingMap {
    pub fn new(size: impl Into<String>, seed: u64, steps: Vec<u64>, states: Vec<usize>) -> Self {
        let forks = fork_positions(&states);
        TrainingMap {
            size: size.into(),
            seed,
            steps,
            states,
            forks,
        }
    }

    pub fn has_fork(&self) -> bool {
        !self.forks.is_empty()
    }

    /// The map restricted to checkpoints with step <= `max_step`.
    pub fn truncated(&self, max_step: u64) -> Self {
        let n = self.steps.iter().take_while(|&&s| s <= max_step).count();
        TrainingMap::new(self.size.clone(), self.seed, self.steps[..n].to_vec(), self.states[..n].to_vec())
    }
}

/// Indices where the path re-enters a state it has already left.
pub fn fork_positions(states: &[usize]) -> Vec<usize> {
    let mut exited = HashSet::new();
    let mut forks = Vec::new();
    for i in 1..states.len() {
        if states[i] != states[i - 1] {
            exited.insert(states[i - 1]);
            if exited.contains(&states[i]) {
                forks.push(i);
            }
        }
    }
    forks
}

pub fn detect_fork(map: &TrainingMap) -> (bool, Vec<usize>) {
    let forks = fork_positions(&map.states);
    (!forks.is_empty(), forks)
}

/// Canonical relabeling `map[raw] = canonical`.
///
/// States are ordered by first appearance in the per-step majority path
/// (ties to the lower raw index), then by earliest appearance in any run,
/// then unvisited states by raw index.
pub fn canonical_mapping(paths: &[Vec<usize>], k: usize) -> Vec<usize> {
    let t_max = paths.iter().map(Vec::len).max().unwrap_or(0);
    let mut order: Vec<usize> = Vec::with_capacity(k);
    let mut placed = vec![false; k];
    for t in 0..t_max {
        let mut counts = vec![0usize; k];
        for p in paths.iter().filter(|p| t < p.len()) {
            counts[p[t]] += 1;
        }
        let mut maj = 0;
        for s in 1..k {
            if counts[s] > counts[maj] {
                maj = s;
            }
        }
        if counts[maj] > 0 && !placed[maj] {
            placed[maj] = true;
            order.push(maj);
        }
    }
    let mut first_seen: Vec<(usize, usize)> = (0..k)
        .filter(|&s| !placed[s])
        .filter_map(|s| {
            paths
                .iter()
                .filter_map(|p| p.iter().position(|&x| x == s))
                .min()
                .map(|t| (t, s))
        })
        .collect();
    first_seen.sort();
    for (_, s) in first_seen {
        placed[s] = true;
        order.push(s);
    }
    order.extend((0..k).filter(|&s| !placed[s]));
    let mut map = vec![0; k];
    for (canon, &raw) in order.iter().enumerate() {
        map[raw] = canon;
    }
    map
}

fn check_dim(model: &HmmModel, ensemble: &StandardizedEnsemble) -> Result<()> {
    if ensemble.feature_names.len() != model.dim() {
        return Err(Error::DimensionMismatch(format!(
            "model has {} features, data has {}",
            model.dim(),
            ensemble.feature_names.len()
        )));
    }
    Ok(())
}

/// Viterbi-decodes every run and returns the raw (model-index) paths.
pub fn decode_raw(model: &HmmModel, ensemble: &StandardizedEnsemble) -> Result<Vec<Vec<usize>>> {
    check_dim(model, ensemble)?;
    ensemble.runs.par_iter().map(|r| viterbi(model, &r.rows)).collect()
}

/// Decodes and relabels canonically; also returns the raw-to-canonical mapping.
pub fn decode_maps_with_mapping(
    model: &HmmModel,
    ensemble: &StandardizedEnsemble,
) -> Result<(Vec<TrainingMap>, Vec<usize>)> {
    let raw = decode_raw(model, ensemble)?;
    let mapping = canonical_mapping(&raw, model.num_states());
    let maps = ensemble
        .runs
        .iter()
        .zip(raw)
        .map(|(run, path)| {
            let states = path.into_iter().map(|s| mapping[s]).collect();
            TrainingMap::new(run.size.clone(), run.seed, run.steps.clone(), states)
        })
        .collect();
    Ok((maps, mapping))
}

pub fn decode_maps(model: &HmmModel, ensemble: &StandardizedEnsemble) -> Result<Vec<TrainingMap>> {
    Ok(decode_maps_with_mapping(model, ensemble)?.0)
}

/// Permutes the model's states into the canonical order induced by `ensemble`,
/// so that raw decoding under the returned model is already canonical.
pub fn canonicalize_model(model: &HmmModel, ensemble: &StandardizedEnsemble) -> Result<HmmModel> {
    let raw = decode_raw(model, ensemble)?;
    Ok(model.relabeled(&canonical_mapping(&raw, model.num_states())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionSummary {
    pub from: usize,
    pub to: usize,
    pub mean_step: Option<f64>,
    /// Sample standard deviation; `None` with fewer than two present runs.
    pub std_step: Option<f64>,
    pub per_seed: Vec<(u64, Option<u64>)>,
    pub missing: Vec<u64>,
}

/// Step at which each run first moves `a -> a+1`, for `a` in `0..k-1`.
pub fn transition_step_summary(
    maps: &[TrainingMap],
    exclude_seeds: &BTreeSet<u64>,
    k: usize,
) -> Vec<TransitionSummary> {
    (0..k.saturating_sub(1))
        .map(|a| {
            let b = a + 1;
            let per_seed: Vec<(u64, Option<u64>)> = maps
                .iter()
                .filter(|m| !exclude_seeds.contains(&m.seed))
                .map(|m| {
                    let step = (1..m.states.len())
                        .find(|&i| m.states[i - 1] == a && m.states[i] == b)
                        .map(|i| m.steps[i]);
                    (m.seed, step)
                })
                .collect();
            let present: Vec<f64> = per_seed.iter().filter_map(|(_, s)| s.map(|v| v as f64)).collect();
            let missing = per_seed.iter().filter(|(_, s)| s.is_none()).map(|(seed, _)| *seed).collect();
            let (mean_step, std_step) = match present.len() {
                0 => (None, None),
                1 => (Some(present[0]), None),
                _ => {
                    let (m, s) = sample_mean_std(present.iter().copied());
                    (Some(m), Some(s))
                }
            };
            TransitionSummary {
                from: a,
                to: b,
                mean_step,
                std_step,
                per_seed,
                missing,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Up,
    Down,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Up => "up",
            Direction::Down => "down",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionDriver {
    pub from: usize,
    pub to: usize,
    pub feature: String,
    pub direction: Direction,
    pub magnitude: f64,
}

/// Features whose emission mean changes most between states `a` and `b`.
pub fn transition_drivers(model: &HmmModel, transition: (usize, usize), top: usize) -> Result<Vec<TransitionDriver>> {
    let (a, b) = transition;
    let k = model.num_states();
    if a >= k || b >= k {
        return Err(Error::invalid(format!("transition {a}->{b} outside 0..{k}")));
    }
    let mut drivers: Vec<TransitionDriver> = model
        .feature_names
        .iter()
        .enumerate()
        .map(|(f, name)| {
            let delta = model.means[b][f] - model.means[a][f];
            TransitionDriver {
                from: a,
                to: b,
                feature: name.clone(),
                direction: if delta < 0.0 { Direction::Down } else { Direction::Up },
                magnitude: delta.abs(),
            }
        })
        .collect();
    drivers.sort_by(|x, y| y.magnitude.total_cmp(&x.magnitude).then_with(|| x.feature.cmp(&y.feature)));
    drivers.truncate(top);
    Ok(drivers)
}

fn permutations(k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut perm: Vec<usize> = (0..k).collect();
    fn rec(i: usize, perm: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if i == perm.len() {
            out.push(perm.clone());
            return;
        }
        for j in i..perm.len() {
            perm.swap(i, j);
            rec(i + 1, perm, out);
            perm.swap(i, j);
        }
    }
    rec(0, &mut perm, &mut out);
    out
}

/// Fraction of positions where `a` and `b` agree under the best relabeling
/// of `a`'s states (exhaustive up to 8 states). Returns `(fraction, map)`
/// with `map[state_in_a] = state_in_b`.
pub fn aligned_agreement(a: &[Vec<usize>], b: &[Vec<usize>], k: usize) -> Result<(f64, Vec<usize>)> {
    if a.len() != b.len() || a.iter().zip(b).any(|(x, y)| x.len() != y.len()) {
        return Err(Error::Misaligned("state paths have different shapes".into()));
    }
    if k > 8 {
        return Err(Error::invalid("label alignment supports at most 8 states"));
    }
    let mut confusion = vec![vec![0usize; k]; k];
    let mut total = 0;
    for (x, y) in a.iter().zip(b) {
        for (&s, &t) in x.iter().zip(y) {
            if s >= k || t >= k {
                return Err(Error::invalid("state index out of range"));
            }
            confusion[s][t] += 1;
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::invalid("no positions to compare"));
    }
    let (best, perm) = permutations(k)
        .into_iter()
        .map(|p| ((0..k).map(|s| confusion[s][p[s]]).sum::<usize>(), p))
        .max_by(|x, y| x.0.cmp(&y.0).then_with(|| y.1.cmp(&x.1)))
        .unwrap();
    Ok((best as f64 / total as f64, perm))
}

pub fn write_maps_csv<W: Write>(maps: &[TrainingMap], mut out: W) -> Result<()> {
    writeln!(out, "size,seed,step,state,is_fork")?;
    for m in maps {
        let forks: HashSet<usize> = m.forks.iter().copied().collect();
        for (i, (&step, &state)) in m.steps.iter().zip(&m.states).enumerate() {
            writeln!(out, "{},{},{},{},{}", m.size, m.seed, step, state, u8::from(forks.contains(&i)))?;
        }
    }
    Ok(())
}

pub fn read_maps_csv(text: &str) -> Result<Vec<TrainingMap>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    match lines.next() {
        Some(h) if h.trim() == "size,seed,step,state,is_fork" => {}
        other => return Err(Error::invalid(format!("unexpected map header {other:?}"))),
    }
    let mut acc: Vec<(String, u64, Vec<u64>, Vec<usize>)> = Vec::new();
    for (i, line) in lines.enumerate() {
        let c: Vec<&str> = line.split(',').map(str::trim).collect();
        if c.len() != 5 {
            return Err(Error::invalid(format!("map row {}: expected 5 columns", i + 2)));
        }
        let bad = |s: &str| Error::invalid(format!("map row {}: bad integer `{s}`", i + 2));
        let seed: u64 = c[1].parse().map_err(|_| bad(c[1]))?;
        let step: u64 = c[2].parse().map_err(|_| bad(c[2]))?;
        let state: usize = c[3].parse().map_err(|_| bad(c[3]))?;
        match acc.iter_mut().find(|e| e.0 == c[0] && e.1 == seed) {
            Some(e) => {
                e.2.push(step);
                e.3.push(state);
            }
            None => acc.push((c[0].to_string(), seed, vec![step], vec![state])),
        }
    }
    Ok(acc
        .into_iter()
        .map(|(size, seed, steps, states)| TrainingMap::new(size, seed, steps, states))
        .collect())
}

pub fn write_drivers_csv<W: Write>(drivers: &[TransitionDriver], mut out: W) -> Result<()> {
    writeln!(out, "from,to,feature,direction,magnitude")?;
    for d in drivers {
        writeln!(out, "{},{},{},{},{}", d.from, d.to, d.feature, d.direction.as_str(), d.magnitude)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::paramstats::{StatVector, NUM_FEATURES};

    fn series(seed: u64, values: &[f64]) -> StatSeries {
        StatSeries {
            size: "s".into(),
            seed,
            vectors: values
                .iter()
                .enumerate()
                .map(|(t, &v)| StatVector::from_array(t as u64, [v; NUM_FEATURES]))
                .collect(),
        }
    }

    #[test]
    fn per_checkpoint_hand_case() {
        let ens = vec![series(0, &[1.0]), series(1, &[2.0]), series(2, &[3.0])];
        let z = standardize(&ens, StandardizationMode::PerCheckpoint, DEFAULT_EPSILON).unwrap();
        let col: Vec<f64> = z.runs.iter().map(|r| r.rows[0][0]).collect();
        for (a, b) in col.iter().zip([-1.0, 0.0, 1.0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_feature_is_zeroed_and_flagged() {
        let ens = vec![series(0, &[4.0, 1.0]), series(1, &[4.0, 1.0])];
        let z = standardize(&ens, StandardizationMode::PerCheckpoint, DEFAULT_EPSILON).unwrap();
        assert!(z.runs.iter().flat_map(|r| r.rows.iter().flatten()).all(|&v| v == 0.0));
        assert_eq!(z.scaler.degenerate_features().len(), NUM_FEATURES);
    }

    #[test]
    fn pooled_is_idempotent() {
        let ens = vec![series(0, &[1.0, 5.0, 2.0]), series(1, &[0.5, 3.0, 9.0])];
        let z1 = standardize(&ens, StandardizationMode::Pooled, DEFAULT_EPSILON).unwrap();
        let raw: Vec<RawRun> = z1
            .runs
            .iter()
            .map(|r| RawRun { size: r.size.clone(), seed: r.seed, steps: r.steps.clone(), rows: r.rows.clone() })
            .collect();
        let z2 = standardize_runs(&raw, &z1.feature_names, StandardizationMode::Pooled, DEFAULT_EPSILON).unwrap();
        for (a, b) in z1.runs.iter().zip(&z2.runs) {
            for (x, y) in a.rows.iter().flatten().zip(b.rows.iter().flatten()) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn standardization_errors() {
        assert!(standardize(&[series(0, &[1.0])], StandardizationMode::PerCheckpoint, DEFAULT_EPSILON).is_err());
        let mut b = series(1, &[1.0]);
        b.vectors[0].step = 7;
        assert!(matches!(
            standardize(&[series(0, &[1.0]), b], StandardizationMode::PerCheckpoint, DEFAULT_EPSILON),
            Err(Error::Misaligned(_))
        ));
    }

    #[test]
    fn canonical_relabeling() {
        let m = canonical_mapping(&[vec![2, 2, 0, 0, 1]], 3);
        let relabeled: Vec<usize> = [2, 2, 0, 0, 1].iter().map(|&s| m[s]).collect();
        assert_eq!(relabeled, vec![0, 0, 1, 1, 2]);
        let runs = vec![vec![3, 3, 1, 0], vec![3, 1, 1, 0], vec![3, 3, 1, 1]];
        let m = canonical_mapping(&runs, 5);
        assert_eq!(m[3], 0);
        assert_eq!(m[1], 1);
        assert_eq!(m[0], 2);
        assert_eq!(m[2], 3);
        assert_eq!(m[4], 4);
    }

    #[test]
    fn fork_definition() {
        assert!(fork_positions(&[0, 1, 2, 3, 4]).is_empty());
        assert_eq!(fork_positions(&[0, 1, 2, 1, 2, 3]), vec![3, 4]);
        assert!(fork_positions(&[0, 0, 1, 1]).is_empty());
        let map = TrainingMap::new("x", 0, (0..6).collect(), vec![0, 1, 2, 1, 2, 3]);
        assert_eq!(detect_fork(&map), (true, vec![3, 4]));
    }

    #[test]
    fn transition_summary_hand_case() {
        let a = TrainingMap::new("x", 0, vec![1000, 5000, 9000], vec![0, 1, 1]);
        let b = TrainingMap::new("x", 1, vec![1000, 6000, 9000], vec![0, 0, 1]);
        let c = TrainingMap::new("x", 2, vec![1000, 6000, 9000], vec![0, 0, 0]);
        let s = transition_step_summary(&[a, b, c], &BTreeSet::new(), 2);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].mean_step, Some(7000.0));
        assert_eq!(s[0].missing, vec![2]);
        let s = transition_step_summary(
            &[
                TrainingMap::new("x", 0, vec![0, 5000], vec![0, 1]),
                TrainingMap::new("x", 1, vec![0, 6000], vec![0, 1]),
                TrainingMap::new("x", 2, vec![0, 1], vec![0, 1]),
            ],
            &BTreeSet::from([2]),
            2,
        );
        assert_eq!(s[0].mean_step, Some(5500.0));
        assert!((s[0].std_step.unwrap() - 707.106_781_186_547_5).abs() < 1e-9);
    }

    fn driver_model() -> HmmModel {
        let d = 4;
        let mut b = vec![0.0; d];
        b[0] = 2.0;
        b[1] = -1.0;
        HmmModel {
            feature_names: vec!["f0".into(), "f1".into(), "f2".into(), "f3".into()],
            initial: vec![0.5, 0.5],
            transition: vec![vec![0.5, 0.5]; 2],
            means: vec![vec![0.0; d], b],
            variances: vec![vec![1.0; d]; 2],
        }
    }

    #[test]
    fn drivers() {
        let m = driver_model();
        let top = transition_drivers(&m, (0, 1), 2).unwrap();
        assert_eq!(top[0].feature, "f0");
        assert_eq!(top[0].direction, Direction::Up);
        assert_eq!(top[0].magnitude, 2.0);
        assert_eq!(top[1].feature, "f1");
        assert_eq!(top[1].direction, Direction::Down);
        assert_eq!(top[1].magnitude, 1.0);
        assert!(transition_drivers(&m, (1, 1), 4).unwrap().iter().all(|d| d.magnitude == 0.0));
        assert_eq!(transition_drivers(&m, (0, 1), 10).unwrap().len(), 4);
        assert!(transition_drivers(&m, (0, 2), 1).is_err());
    }

    #[test]
    fn alignment() {
        let a = vec![vec![0, 0, 1, 1, 2]];
        let b = vec![vec![2, 2, 0, 0, 1]];
        let (frac, perm) = aligned_agreement(&a, &b, 3).unwrap();
        assert_eq!(frac, 1.0);
        assert_eq!(perm, vec![2, 0, 1]);
    }

    #[test]
    fn maps_csv_round_trip() {
        let maps = vec![
            TrainingMap::new("70m", 0, vec![0, 1, 2, 4], vec![0, 1, 0, 2]),
            TrainingMap::new("70m", 1, vec![0, 1, 2, 4], vec![0, 0, 1, 2]),
        ];
        let mut buf = Vec::new();
        write_maps_csv(&maps, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("70m,0,2,0,1"));
        assert_eq!(read_maps_csv(&text).unwrap(), maps);
    }
}
