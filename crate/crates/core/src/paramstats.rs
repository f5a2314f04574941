//! Per-checkpoint parameter statistics.
//!
//! Matrix-level quantities (norms, trace, singular-value summaries) are
//! computed per weight matrix and averaged with equal weight; the weight and
//! bias location/spread statistics are computed over the concatenation of all
//! selected entries. Variances use the population (1/n) convention and all
//! arithmetic is done in f64.

use std::fmt::Write as _;
use std::io::Write;

use glob::Pattern;
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorstore::{read_checkpoint, RunManifest, TensorKind, TensorRecord};

pub const NUM_FEATURES: usize = 14;

/// Column order used everywhere a statistic vector is flattened.
pub const FEATURE_NAMES: [&str; NUM_FEATURES] = [
    "l1",
    "l2",
    "l1_over_l2",
    "mu_w",
    "median_w",
    "sigma_w",
    "mu_b",
    "median_b",
    "sigma_b",
    "trace",
    "lambda_max",
    "trace_over_lambda_max",
    "mu_lambda",
    "sigma_lambda",
];

pub fn feature_names() -> Vec<String> {
    FEATURE_NAMES.iter().map(|s| s.to_string()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MatrixStats {
    pub l1: f64,
    pub l2: f64,
    pub l1_over_l2: f64,
    pub trace: f64,
    pub lambda_max: f64,
    pub trace_over_lambda_max: f64,
    pub mu_lambda: f64,
    pub sigma_lambda: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StatVector {
    pub step: u64,
    pub l1: f64,
    pub l2: f64,
    pub l1_over_l2: f64,
    pub mu_w: f64,
    pub median_w: f64,
    pub sigma_w: f64,
    pub mu_b: f64,
    pub median_b: f64,
    pub sigma_b: f64,
    pub trace: f64,
    pub lambda_max: f64,
    pub trace_over_lambda_max: f64,
    pub mu_lambda: f64,
    pub sigma_lambda: f64,
    /// Set when the checkpoint had no selected bias tensors (bias fields are 0).
    pub no_bias: bool,
}

impl StatVector {
    pub fn to_array(&self) -> [f64; NUM_FEATURES] {
        [
            self.l1,
            self.l2,
            self.l1_over_l2,
            self.mu_w,
            self.median_w,
            self.sigma_w,
            self.mu_b,
            self.median_b,
            self.sigma_b,
            self.trace,
            self.lambda_max,
            self.trace_over_lambda_max,
            self.mu_lambda,
            self.sigma_lambda,
        ]
    }

    pub fn from_array(step: u64, v: [f64; NUM_FEATURES]) -> Self {
        StatVector {
            step,
            l1: v[0],
            l2: v[1],
            l1_over_l2: v[2],
            mu_w: v[3],
            median_w: v[4],
            sigma_w: v[5],
            mu_b: v[6],
            median_b: v[7],
            sigma_b: v[8],
            trace: v[9],
            lambda_max: v[10],
            trace_over_lambda_max: v[11],
            mu_lambda: v[12],
            sigma_lambda: v[13],
            no_bias: false,
        }
    }
}

/// The statistics of one run, in checkpoint order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatSeries {
    pub size: String,
    pub seed: u64,
    pub vectors: Vec<StatVector>,
}

impl StatSeries {
    pub fn steps(&self) -> Vec<u64> {
        self.vectors.iter().map(|v| v.step).collect()
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.vectors.iter().map(|v| v.to_array().to_vec()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum VarianceConvention {
    #[default]
    Population,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StatConfig {
    pub include: Vec<String>,
    pub exclude: Vec<String>,
    pub variance: VarianceConvention,
    /// Convergence threshold handed to the SVD.
    pub svd_tolerance: f64,
}

impl Default for StatConfig {
    fn default() -> Self {
        StatConfig {
            include: vec!["*".into()],
            exclude: Vec::new(),
            variance: VarianceConvention::Population,
            svd_tolerance: f64::EPSILON,
        }
    }
}

struct Selector {
    include: Vec<Pattern>,
    exclude: Vec<Pattern>,
}

impl Selector {
    fn new(cfg: &StatConfig) -> Result<Self> {
        let compile = |pats: &[String]| {
            pats.iter()
                .map(|p| Pattern::new(p).map_err(|e| Error::invalid(format!("bad pattern `{p}`: {e}"))))
                .collect::<Result<Vec<_>>>()
        };
        Ok(Selector {
            include: compile(&cfg.include)?,
            exclude: compile(&cfg.exclude)?,
        })
    }

    fn selects(&self, name: &str) -> bool {
        self.include.iter().any(|p| p.matches(name)) && !self.exclude.iter().any(|p| p.matches(name))
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn population_variance(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64
}

/// Median; the mean of the two middle values for even counts. Reorders `xs`.
pub fn median_in_place(xs: &mut [f64]) -> f64 {
    let n = xs.len();
    if n == 0 {
        return 0.0;
    }
    let (_, upper, _) = xs.select_nth_unstable_by(n / 2, f64::total_cmp);
    let upper = *upper;
    if n % 2 == 1 {
        return upper;
    }
    let lower = xs[..n / 2].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    0.5 * (lower + upper)
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

pub fn singular_values(data: &[f64], rows: usize, cols: usize, tolerance: f64) -> Result<Vec<f64>> {
    let m = DMatrix::from_row_slice(rows, cols, data);
    let svd = m
        .try_svd(false, false, tolerance, 0)
        .ok_or_else(|| Error::Degenerate("SVD did not converge".into()))?;
    let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    Ok(sv)
}

/// Statistics of a single row-major `rows x cols` matrix.
pub fn matrix_statistics(data: &[f64], rows: usize, cols: usize) -> Result<MatrixStats> {
    matrix_statistics_with_tol(data, rows, cols, f64::EPSILON)
}

pub fn matrix_statistics_with_tol(data: &[f64], rows: usize, cols: usize, tol: f64) -> Result<MatrixStats> {
    if rows == 0 || cols == 0 || data.is_empty() {
        return Err(Error::invalid("empty matrix"));
    }
    if data.len() != rows * cols {
        return Err(Error::DimensionMismatch(format!(
            "{rows}x{cols} matrix with {} entries",
            data.len()
        )));
    }
    if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("matrix entry {pos}")));
    }
    let l1: f64 = data.iter().map(|v| v.abs()).sum();
    let l2 = data.iter().map(|v| v * v).sum::<f64>().sqrt();
    let trace: f64 = (0..rows.min(cols)).map(|i| data[i * cols + i]).sum();
    let sv = singular_values(data, rows, cols, tol)?;
    let lambda_max = sv[0];
    Ok(MatrixStats {
        l1,
        l2,
        l1_over_l2: ratio(l1, l2),
        trace,
        lambda_max,
        trace_over_lambda_max: ratio(trace, lambda_max),
        mu_lambda: mean(&sv),
        sigma_lambda: population_variance(&sv),
    })
}

fn record_to_f64(r: &TensorRecord) -> Result<Vec<f64>> {
    r.data
        .iter()
        .map(|&v| {
            if v.is_finite() {
                Ok(f64::from(v))
            } else {
                Err(Error::NonFinite(format!("tensor `{}`", r.name)))
            }
        })
        .collect()
}

pub fn checkpoint_statistics(records: &[TensorRecord], cfg: &StatConfig) -> Result<StatVector> {
    let sel = Selector::new(cfg)?;
    let mut weights: Vec<&TensorRecord> = records
        .iter()
        .filter(|r| r.rank() == 2 && r.kind != TensorKind::BiasVector && sel.selects(&r.name))
        .collect();
    let mut biases: Vec<&TensorRecord> = records
        .iter()
        .filter(|r| r.kind == TensorKind::BiasVector && sel.selects(&r.name))
        .collect();
    if weights.is_empty() {
        return Err(Error::NoTensors("no weight matrix matches the selection".into()));
    }
    // Name order makes the result independent of the order tensors were stored in.
    weights.sort_by(|a, b| a.name.cmp(&b.name));
    biases.sort_by(|a, b| a.name.cmp(&b.name));

    let per_matrix: Vec<MatrixStats> = weights
        .par_iter()
        .map(|r| {
            let data = record_to_f64(r)?;
            matrix_statistics_with_tol(&data, r.shape[0], r.shape[1], cfg.svd_tolerance).map_err(|e| match e {
                Error::NonFinite(_) => Error::NonFinite(format!("tensor `{}`", r.name)),
                other => other,
            })
        })
        .collect::<Result<_>>()?;
    let avg = |f: fn(&MatrixStats) -> f64| per_matrix.iter().map(f).sum::<f64>() / per_matrix.len() as f64;

    let mut w_all = Vec::with_capacity(weights.iter().map(|r| r.numel()).sum());
    for r in &weights {
        w_all.extend(record_to_f64(r)?);
    }
    let mut b_all = Vec::new();
    for r in &biases {
        b_all.extend(record_to_f64(r)?);
    }

    let out = StatVector {
        step: 0,
        l1: avg(|m| m.l1),
        l2: avg(|m| m.l2),
        l1_over_l2: avg(|m| m.l1_over_l2),
        mu_w: mean(&w_all),
        sigma_w: population_variance(&w_all),
        median_w: median_in_place(&mut w_all),
        mu_b: mean(&b_all),
        sigma_b: population_variance(&b_all),
        median_b: median_in_place(&mut b_all),
        trace: avg(|m| m.trace),
        lambda_max: avg(|m| m.lambda_max),
        trace_over_lambda_max: avg(|m| m.trace_over_lambda_max),
        mu_lambda: avg(|m| m.mu_lambda),
        sigma_lambda: avg(|m| m.sigma_lambda),
        no_bias: b_all.is_empty(),
    };
    if out.to_array().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("statistic overflowed".into()));
    }
    Ok(out)
}

pub fn run_statistics(manifest: &RunManifest, cfg: &StatConfig) -> Result<StatSeries> {
    let vectors = manifest
        .checkpoints
        .par_iter()
        .map(|c| {
            let records = read_checkpoint(&c.path).map_err(|e| e.at_step(c.step))?;
            let mut v = checkpoint_statistics(&records, cfg).map_err(|e| e.at_step(c.step))?;
            v.step = c.step;
            Ok(v)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(StatSeries {
        size: manifest.size.clone(),
        seed: manifest.seed,
        vectors,
    })
}

pub fn csv_header() -> String {
    let mut s = String::from("size,seed,step");
    for n in FEATURE_NAMES {
        s.push(',');
        s.push_str(n);
    }
    s
}

/// Writes `size,seed,step,<14 statistics>` rows.
pub fn write_stats_csv<W: Write>(series: &[StatSeries], mut out: W) -> Result<()> {
    writeln!(out, "{}", csv_header())?;
    for s in series {
        for v in &s.vectors {
            let mut line = format!("{},{},{}", s.size, s.seed, v.step);
            for x in v.to_array() {
                write!(line, ",{x}").unwrap();
            }
            writeln!(out, "{line}")?;
        }
    }
    Ok(())
}

/// Parses the CSV written by [`write_stats_csv`] back into per-run series,
/// grouped by (size, seed) in first-appearance order.
pub fn read_stats_csv(text: &str) -> Result<Vec<StatSeries>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| Error::invalid("empty statistics CSV"))?;
    if header.trim() != csv_header() {
        return Err(Error::invalid(format!("unexpected statistics header `{header}`")));
    }
    let mut out: Vec<StatSeries> = Vec::new();
    for (i, line) in lines.enumerate() {
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        if cols.len() != 3 + NUM_FEATURES {
            return Err(Error::invalid(format!("row {}: expected {} columns", i + 2, 3 + NUM_FEATURES)));
        }
        let parse_u = |s: &str| s.parse::<u64>().map_err(|_| Error::invalid(format!("row {}: bad integer `{s}`", i + 2)));
        let seed = parse_u(cols[1])?;
        let step = parse_u(cols[2])?;
        let mut vals = [0.0; NUM_FEATURES];
        for (k, v) in vals.iter_mut().enumerate() {
            *v = cols[3 + k]
                .parse()
                .map_err(|_| Error::invalid(format!("row {}: bad number `{}`", i + 2, cols[3 + k])))?;
        }
        let vector = StatVector::from_array(step, vals);
        match out.iter_mut().find(|s| s.size == cols[0] && s.seed == seed) {
            Some(s) => s.vectors.push(vector),
            None => out.push(StatSeries {
                size: cols[0].to_string(),
                seed,
                vectors: vec![vector],
            }),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn identity_matrix() {
        let s = matrix_statistics(&[1.0, 0.0, 0.0, 1.0], 2, 2).unwrap();
        let r2 = 2f64.sqrt();
        assert!(close(s.l1, 2.0, 1e-12));
        assert!(close(s.l2, r2, 1e-12));
        assert!(close(s.l1_over_l2, r2, 1e-12));
        assert!(close(s.trace, 2.0, 1e-12));
        assert!(close(s.lambda_max, 1.0, 1e-12));
        assert!(close(s.trace_over_lambda_max, 2.0, 1e-12));
        assert!(close(s.mu_lambda, 1.0, 1e-12));
        assert!(close(s.sigma_lambda, 0.0, 1e-12));
    }

    #[test]
    fn diagonal_matrix() {
        let s = matrix_statistics(&[3.0, 0.0, 0.0, 4.0], 2, 2).unwrap();
        assert!(close(s.l1, 7.0, 1e-12));
        assert!(close(s.l2, 5.0, 1e-12));
        assert!(close(s.l1_over_l2, 1.4, 1e-12));
        assert!(close(s.trace, 7.0, 1e-12));
        assert!(close(s.lambda_max, 4.0, 1e-12));
        assert!(close(s.trace_over_lambda_max, 1.75, 1e-12));
        assert!(close(s.mu_lambda, 3.5, 1e-12));
        assert!(close(s.sigma_lambda, 0.25, 1e-12));
    }

    #[test]
    fn rectangular_trace_and_errors() {
        let s = matrix_statistics(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 3, 2).unwrap();
        assert_eq!(s.trace, 5.0);
        assert!(matrix_statistics(&[], 0, 0).is_err());
        assert!(matches!(
            matrix_statistics(&[1.0, f64::NAN], 1, 2),
            Err(Error::NonFinite(_))
        ));
        let z = matrix_statistics(&[0.0; 4], 2, 2).unwrap();
        assert_eq!(z.l1_over_l2, 0.0);
        assert_eq!(z.trace_over_lambda_max, 0.0);
    }

    #[test]
    fn median_conventions() {
        assert_eq!(median_in_place(&mut [0.0, 1.0, 0.0, 1.0]), 0.5);
        assert_eq!(median_in_place(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median_in_place(&mut [4.0, 1.0, 3.0, 2.0]), 2.5);
    }

    fn ident_and_bias() -> Vec<TensorRecord> {
        vec![
            TensorRecord::new("layer.weight", vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            TensorRecord::new("layer.bias", vec![3], vec![1.0, -1.0, 2.0]).unwrap(),
        ]
    }

    #[test]
    fn checkpoint_hand_case() {
        let v = checkpoint_statistics(&ident_and_bias(), &StatConfig::default()).unwrap();
        assert!(close(v.l1, 2.0, 1e-12));
        assert!(close(v.lambda_max, 1.0, 1e-12));
        assert!(close(v.mu_w, 0.5, 1e-12));
        assert!(close(v.median_w, 0.5, 1e-12));
        assert!(close(v.sigma_w, 0.25, 1e-12));
        assert!(close(v.mu_b, 2.0 / 3.0, 1e-12));
        assert!(close(v.median_b, 1.0, 1e-12));
        assert!(close(v.sigma_b, 14.0 / 9.0, 1e-12));
        assert!(!v.no_bias);
    }

    #[test]
    fn averaging_is_idempotent_and_order_free() {
        let one = checkpoint_statistics(&ident_and_bias()[..1], &StatConfig::default()).unwrap();
        let mut recs = ident_and_bias();
        recs.push(TensorRecord::new("copy.weight", vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let two = checkpoint_statistics(&recs, &StatConfig::default()).unwrap();
        assert!(close(one.l2, two.l2, 1e-15));
        assert!(close(one.sigma_lambda, two.sigma_lambda, 1e-15));
        recs.reverse();
        assert_eq!(two, checkpoint_statistics(&recs, &StatConfig::default()).unwrap());
    }

    #[test]
    fn missing_bias_flagged() {
        let v = checkpoint_statistics(&ident_and_bias()[..1], &StatConfig::default()).unwrap();
        assert!(v.no_bias);
        assert_eq!((v.mu_b, v.median_b, v.sigma_b), (0.0, 0.0, 0.0));
    }

    #[test]
    fn selection_patterns() {
        let mut recs = ident_and_bias();
        recs.push(TensorRecord::new("embed.weight", vec![2, 2], vec![3.0, 0.0, 0.0, 4.0]).unwrap());
        let cfg = StatConfig {
            exclude: vec!["embed*".into()],
            ..StatConfig::default()
        };
        let v = checkpoint_statistics(&recs, &cfg).unwrap();
        assert!(close(v.lambda_max, 1.0, 1e-12));
        let none = StatConfig {
            include: vec!["nothing*".into()],
            ..StatConfig::default()
        };
        assert!(matches!(checkpoint_statistics(&recs, &none), Err(Error::NoTensors(_))));
    }

    #[test]
    fn csv_round_trip() {
        let v = checkpoint_statistics(&ident_and_bias(), &StatConfig::default()).unwrap();
        let series = vec![StatSeries {
            size: "14m".into(),
            seed: 3,
            vectors: vec![StatVector { step: 5, no_bias: false, ..v }],
        }];
        let mut buf = Vec::new();
        write_stats_csv(&series, &mut buf).unwrap();
        let back = read_stats_csv(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(back, series);
    }

    proptest! {
        #[test]
        fn norm_ordering_and_scaling(
            rows in 1usize..6, cols in 1usize..6,
            seed in prop::collection::vec(-5.0f64..5.0, 36),
            c in 0.1f64..10.0,
        ) {
            let data: Vec<f64> = seed[..rows * cols].to_vec();
            let s = matrix_statistics(&data, rows, cols).unwrap();
            let tol = 1e-9 * (1.0 + s.l1);
            prop_assert!(s.l1 + tol >= s.l2);
            prop_assert!(s.l2 + tol >= s.lambda_max);
            prop_assert!(s.trace <= rows.min(cols) as f64 * s.lambda_max + tol);
            if s.l2 > 1e-9 {
                prop_assert!(s.l1_over_l2 >= 1.0 - 1e-12);
            }

            let scaled: Vec<f64> = data.iter().map(|v| v * c).collect();
            let t = matrix_statistics(&scaled, rows, cols).unwrap();
            let rel = |a: f64, b: f64| (a - b).abs() <= 1e-9 * (1.0 + a.abs().max(b.abs()));
            prop_assert!(rel(t.l1, c * s.l1));
            prop_assert!(rel(t.l2, c * s.l2));
            prop_assert!(rel(t.lambda_max, c * s.lambda_max));
            prop_assert!(rel(t.mu_lambda, c * s.mu_lambda));
            prop_assert!(rel(t.sigma_lambda, c * c * s.sigma_lambda));
            prop_assert!(rel(t.l1_over_l2, s.l1_over_l2));
        }
    }
}
