//! Outlier seeds, bag-of-states regression and cross-size map prediction.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::cartography::{decode_maps, StandardizedEnsemble, TrainingMap};
use crate::error::{Error, Result};
use crate::hmm::HmmModel;

/// Final-checkpoint accuracies of one model size: `values[seed][task]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeAccuracies {
    pub size: String,
    pub seeds: Vec<u64>,
    pub tasks: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AccuracyTable {
    pub sizes: Vec<SizeAccuracies>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub size: String,
    pub seed: u64,
    pub task: String,
    pub accuracy: f64,
}

impl AccuracyTable {
    /// Builds a table from long-format rows; every size must be a complete seed x task grid.
    pub fn from_rows(rows: &[AccuracyRow]) -> Result<Self> {
        let mut grid: BTreeMap<&str, BTreeMap<u64, BTreeMap<&str, f64>>> = BTreeMap::new();
        for r in rows {
            if !(0.0..=1.0).contains(&r.accuracy) {
                return Err(Error::invalid(format!(
                    "accuracy {} for {}/{}/{} outside [0,1]",
                    r.accuracy, r.size, r.seed, r.task
                )));
            }
            let prev = grid
                .entry(&r.size)
                .or_default()
                .entry(r.seed)
                .or_default()
                .insert(&r.task, r.accuracy);
            if prev.is_some() {
                return Err(Error::invalid(format!("duplicate cell {}/{}/{}", r.size, r.seed, r.task)));
            }
        }
        let mut sizes = Vec::new();
        for (size, seeds) in grid {
            let tasks: Vec<String> = seeds.values().next().unwrap().keys().map(|t| t.to_string()).collect();
            let mut values = Vec::new();
            for (seed, cells) in &seeds {
                let row_tasks: Vec<&str> = cells.keys().copied().collect();
                if row_tasks != tasks.iter().map(String::as_str).collect::<Vec<_>>() {
                    return Err(Error::invalid(format!("size {size} seed {seed} does not cover every task")));
                }
                values.push(cells.values().copied().collect());
            }
            sizes.push(SizeAccuracies {
                size: size.to_string(),
                seeds: seeds.keys().copied().collect(),
                tasks,
                values,
            });
        }
        Ok(AccuracyTable { sizes })
    }

    pub fn rows(&self) -> Vec<AccuracyRow> {
        self.sizes
            .iter()
            .flat_map(|s| {
                s.seeds.iter().enumerate().flat_map(move |(i, &seed)| {
                    s.tasks.iter().enumerate().map(move |(j, t)| AccuracyRow {
                        size: s.size.clone(),
                        seed,
                        task: t.clone(),
                        accuracy: s.values[i][j],
                    })
                })
            })
            .collect()
    }
}

/// Reads `size,seed,task,accuracy` CSV.
pub fn read_accuracy_csv<R: Read>(input: R) -> Result<AccuracyTable> {
    let mut reader = csv::Reader::from_reader(input);
    let rows = reader
        .deserialize()
        .collect::<std::result::Result<Vec<AccuracyRow>, _>>()
        .map_err(|e| Error::invalid(format!("accuracy CSV: {e}")))?;
    AccuracyTable::from_rows(&rows)
}

pub fn write_accuracy_csv<W: Write>(table: &AccuracyTable, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in table.rows() {
        w.serialize(r).map_err(|e| Error::invalid(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeZScores {
    pub size: String,
    pub seeds: Vec<u64>,
    pub tasks: Vec<String>,
    pub z: Vec<Vec<f64>>,
    /// Unweighted mean over tasks, per seed.
    pub average: Vec<f64>,
    pub degenerate_tasks: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ZScoreTable {
    pub sizes: Vec<SizeZScores>,
}

impl ZScoreTable {
    pub fn size(&self, label: &str) -> Option<&SizeZScores> {
        self.sizes.iter().find(|s| s.size == label)
    }
}

/// Standardizes each (size, task) column across seeds (sample std).
pub fn zscore(table: &AccuracyTable) -> Result<ZScoreTable> {
    let mut sizes = Vec::with_capacity(table.sizes.len());
    for s in &table.sizes {
        let n = s.seeds.len();
        if n < 2 {
            return Err(Error::invalid(format!("size {} has a single seed", s.size)));
        }
        let mut z = vec![vec![0.0; s.tasks.len()]; n];
        let mut degenerate = Vec::new();
        for (j, task) in s.tasks.iter().enumerate() {
            let col: Vec<f64> = s.values.iter().map(|r| r[j]).collect();
            let m = col.iter().sum::<f64>() / n as f64;
            let sd = (col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64).sqrt();
            if sd <= 1e-12 * m.abs().max(1.0) {
                degenerate.push(task.clone());
                continue;
            }
            for i in 0..n {
                z[i][j] = (col[i] - m) / sd;
            }
        }
        let average = z.iter().map(|r| r.iter().sum::<f64>() / r.len() as f64).collect();
        sizes.push(SizeZScores {
            size: s.size.clone(),
            seeds: s.seeds.clone(),
            tasks: s.tasks.clone(),
            z,
            average,
            degenerate_tasks: degenerate,
        });
    }
    Ok(ZScoreTable { sizes })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum OutlierRule {
    #[default]
    AnyTask,
    Majority,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outlier {
    pub size: String,
    pub seed: u64,
    pub tasks: Vec<String>,
}

pub fn flag_outliers(z: &ZScoreTable, threshold: f64, rule: OutlierRule) -> Vec<Outlier> {
    let mut out = Vec::new();
    for s in &z.sizes {
        for (i, &seed) in s.seeds.iter().enumerate() {
            let tasks: Vec<String> = s
                .tasks
                .iter()
                .enumerate()
                .filter(|&(j, _)| s.z[i][j].abs() > threshold)
                .map(|(_, t)| t.clone())
                .collect();
            let flagged = match rule {
                OutlierRule::AnyTask => !tasks.is_empty(),
                OutlierRule::Majority => 2 * tasks.len() > s.tasks.len(),
            };
            if flagged {
                out.push(Outlier {
                    size: s.size.clone(),
                    seed,
                    tasks,
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BagOfStates {
    pub size: String,
    pub seed: u64,
    pub counts: Vec<usize>,
}

pub fn bag_of_states(map: &TrainingMap, k: usize) -> Result<BagOfStates> {
    let mut counts = vec![0; k];
    for &s in &map.states {
        *counts
            .get_mut(s)
            .ok_or_else(|| Error::invalid(format!("state {s} >= {k} in map {}/{}", map.size, map.seed)))? += 1;
    }
    Ok(BagOfStates {
        size: map.size.clone(),
        seed: map.seed,
        counts,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionResult {
    pub intercept: Option<f64>,
    pub coefficients: Vec<f64>,
    pub fitted: Vec<f64>,
    pub residuals: Vec<f64>,
    pub r_squared: f64,
}

/// Minimum-norm least squares via the SVD pseudo-inverse.
pub fn ols_fit(design: &[Vec<f64>], response: &[f64], add_intercept: bool) -> Result<RegressionResult> {
    let n = response.len();
    if n == 0 {
        return Err(Error::invalid("regression needs at least one observation"));
    }
    if design.len() != n {
        return Err(Error::DimensionMismatch(format!("{} design rows for {n} responses", design.len())));
    }
    let p_raw = design[0].len();
    if design.iter().any(|r| r.len() != p_raw) {
        return Err(Error::DimensionMismatch("ragged design matrix".into()));
    }
    if design.iter().flatten().chain(response).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("regression input".into()));
    }
    let offset = usize::from(add_intercept);
    let p = p_raw + offset;
    if p == 0 {
        return Err(Error::invalid("regression has no columns"));
    }
    let x = DMatrix::from_fn(n, p, |i, j| if add_intercept && j == 0 { 1.0 } else { design[i][j - offset] });
    let y = DVector::from_column_slice(response);
    let svd = x.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let eps = (n.max(p) as f64) * f64::EPSILON * smax;
    let pinv = svd
        .pseudo_inverse(eps.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Degenerate(e.to_string()))?;
    let beta = &pinv * &y;
    let fitted_v = &x * &beta;
    let fitted: Vec<f64> = fitted_v.iter().copied().collect();
    let residuals: Vec<f64> = response.iter().zip(&fitted).map(|(y, f)| y - f).collect();
    let ymean = response.iter().sum::<f64>() / n as f64;
    let ss_tot: f64 = response.iter().map(|y| (y - ymean) * (y - ymean)).sum();
    let ss_res: f64 = residuals.iter().map(|r| r * r).sum();
    let scale = response.iter().map(|y| y * y).sum::<f64>().max(1.0);
    let r_squared = if ss_tot <= 1e-24 * scale {
        if ss_res <= 1e-20 * scale {
            1.0
        } else {
            return Err(Error::Degenerate("constant response with nonzero residual".into()));
        }
    } else {
        1.0 - ss_res / ss_tot
    };
    let beta: Vec<f64> = beta.iter().copied().collect();
    Ok(RegressionResult {
        intercept: add_intercept.then(|| beta[0]),
        coefficients: beta[offset..].to_vec(),
        fitted,
        residuals,
        r_squared,
    })
}

/// Regresses per-seed average z-scores on state counts (with intercept).
pub fn map_performance_regression(bags: &[BagOfStates], z: &[f64]) -> Result<RegressionResult> {
    if bags.len() != z.len() {
        return Err(Error::Misaligned(format!("{} bags for {} z-scores", bags.len(), z.len())));
    }
    let k = bags.first().map_or(0, |b| b.counts.len());
    if bags.iter().any(|b| b.counts.len() != k) {
        return Err(Error::Misaligned("bags have different state counts".into()));
    }
    let design: Vec<Vec<f64>> = bags.iter().map(|b| b.counts.iter().map(|&c| c as f64).collect()).collect();
    ols_fit(&design, z, true)
}

/// Average z-scores for the given seeds of `size`, in the given order.
pub fn average_z_for(z: &ZScoreTable, size: &str, seeds: &[u64]) -> Result<Vec<f64>> {
    let s = z
        .size(size)
        .ok_or_else(|| Error::Misaligned(format!("no z-scores for size {size}")))?;
    seeds
        .iter()
        .map(|seed| {
            s.seeds
                .iter()
                .position(|x| x == seed)
                .map(|i| s.average[i])
                .ok_or_else(|| Error::Misaligned(format!("no z-score for {size} seed {seed}")))
        })
        .collect()
}

/// Decodes `target` (standardized within its own size) with a model fitted on another size.
pub fn zero_shot_decode(foreign: &HmmModel, target: &StandardizedEnsemble) -> Result<Vec<TrainingMap>> {
    if foreign.feature_names != target.feature_names {
        return Err(Error::FeatureMismatch {
            expected: foreign.feature_names.clone(),
            found: target.feature_names.clone(),
        });
    }
    decode_maps(foreign, target)
}

/// R² of the bag-of-states regression using only checkpoints with step <= T.
pub fn truncation_curve(maps: &[TrainingMap], z: &[f64], k: usize, truncation_steps: &[u64]) -> Result<Vec<(u64, f64)>> {
    if truncation_steps.is_empty() {
        return Err(Error::invalid("no truncation steps"));
    }
    truncation_steps
        .iter()
        .map(|&t| {
            let bags = maps
                .iter()
                .map(|m| bag_of_states(&m.truncated(t), k))
                .collect::<Result<Vec<_>>>()?;
            Ok((t, map_performance_regression(&bags, z)?.r_squared))
        })
        .collect()
}
