//! Library results checked against naive reference implementations.

#[path = "support/oracles.rs"]
mod oracles;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trainmap_core::hmm::{sequence_log_likelihood, viterbi, HmmModel};
use trainmap_core::paramstats::{matrix_statistics, population_variance};
use trainmap_core::probe::{
    fisher_average, mdl_objective, mix_layers, subspace_angles, Prior, ProbeItem, ProbeModel,
};
use trainmap_core::stability::ols_fit;

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<f64> {
    (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect()
}

#[test]
fn spectral_features_match_jacobi_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for &(r, c) in &[(5, 5), (7, 3), (3, 8), (12, 12), (1, 6)] {
        let m = random_matrix(&mut rng, r, c);
        let s = matrix_statistics(&m, r, c).unwrap();
        let sv = oracles::singular_values(&m, r, c);
        let mean = sv.iter().sum::<f64>() / sv.len() as f64;
        assert!(oracles::relative_error(s.lambda_max, sv[0]) < 1e-8);
        assert!(oracles::relative_error(s.mu_lambda, mean) < 1e-8);
        assert!(oracles::relative_error(s.sigma_lambda, population_variance(&sv)) < 1e-8);
    }
}

fn random_hmm(rng: &mut ChaCha8Rng, k: usize, d: usize) -> (HmmModel, oracles::PlainHmm) {
    let stochastic = |rng: &mut ChaCha8Rng| {
        let v: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..1.0)).collect();
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect::<Vec<_>>()
    };
    let initial = stochastic(rng);
    let transition: Vec<Vec<f64>> = (0..k).map(|_| stochastic(rng)).collect();
    let means: Vec<Vec<f64>> = (0..k).map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
    let variances: Vec<Vec<f64>> = (0..k).map(|_| (0..d).map(|_| rng.random_range(0.3..2.0)).collect()).collect();
    let model = HmmModel {
        feature_names: (0..d).map(|j| format!("f{j}")).collect(),
        initial: initial.clone(),
        transition: transition.clone(),
        means: means.clone(),
        variances: variances.clone(),
    };
    (model, oracles::PlainHmm { initial, transition, means, variances })
}

#[test]
fn forward_and_viterbi_match_path_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..20 {
        let k = 2 + trial % 2;
        let (model, plain) = random_hmm(&mut rng, k, 2);
        let t = 3 + trial % 4;
        let seq: Vec<Vec<f64>> = (0..t).map(|_| vec![rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)]).collect();
        let ll = sequence_log_likelihood(&model, &seq).unwrap();
        let want = oracles::brute_force_log_likelihood(&plain, &seq);
        assert!((ll - want).abs() < 1e-9 * want.abs().max(1.0), "trial {trial}: {ll} vs {want}");
        assert_eq!(viterbi(&model, &seq).unwrap(), oracles::brute_force_viterbi(&plain, &seq));
    }
}

#[test]
fn ols_matches_normal_equations() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10 {
        let n = 20;
        let x: Vec<Vec<f64>> = (0..n).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let y: Vec<f64> = x.iter().map(|r| 0.5 + r[0] - 2.0 * r[1] + rng.random_range(-0.1..0.1)).collect();
        let fit = ols_fit(&x, &y, true).unwrap();
        let with_one: Vec<Vec<f64>> = x.iter().map(|r| std::iter::once(1.0).chain(r.iter().copied()).collect()).collect();
        let beta = oracles::normal_equations(&with_one, &y);
        assert!((fit.intercept.unwrap() - beta[0]).abs() < 1e-10);
        for (a, b) in fit.coefficients.iter().zip(&beta[1..]) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}

fn flat(p: &ProbeModel) -> Vec<f64> {
    p.weight_means.iter().chain(&p.weight_log_variances).chain(&p.mix_logits).copied().collect()
}

fn unflat(template: &ProbeModel, v: &[f64]) -> ProbeModel {
    let n = template.num_weights();
    let mut p = template.clone();
    p.weight_means = v[..n].to_vec();
    p.weight_log_variances = v[n..2 * n].to_vec();
    p.mix_logits = v[2 * n..].to_vec();
    p
}

/// Norm-relative error of analytic vs central-difference gradients for
/// (means, log-variances, mix-logits).
pub fn gradient_errors(prior: Prior, seed: u64) -> [f64; 3] {
    let (d, l, c, n) = (8, 3, 4, 32);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = ProbeModel::new(d, c, l, prior);
    probe.weight_means = (0..d * c).map(|_| rng.random_range(-1.0..1.0)).collect();
    probe.weight_log_variances = (0..d * c).map(|_| rng.random_range(-4.0..-1.0)).collect();
    probe.mix_logits = (0..l).map(|_| rng.random_range(-1.0..1.0)).collect();
    let batch: Vec<ProbeItem> = (0..n)
        .map(|i| ProbeItem { layers: (0..l * d).map(|_| rng.random_range(-1.0..1.0)).collect(), label: i % c, sequence: 0 })
        .collect();
    let noise: Vec<f64> = (0..d * c).map(|_| rng.random_range(-1.5..1.5)).collect();
    let (_, grads) = mdl_objective(&probe, &batch, &noise).unwrap();
    let analytic: Vec<f64> = grads.weight_means.iter().chain(&grads.weight_log_variances).chain(&grads.mix_logits).copied().collect();
    let x = flat(&probe);
    let f = |v: &[f64]| mdl_objective(&unflat(&probe, v), &batch, &noise).unwrap().0;
    let numeric: Vec<f64> = (0..x.len()).map(|i| oracles::central_difference(&f, &x, i, 1e-5)).collect();
    let groups = [0..d * c, d * c..2 * d * c, 2 * d * c..x.len()];
    groups.map(|g| {
        let diff: f64 = g.clone().map(|i| (analytic[i] - numeric[i]).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = g.map(|i| numeric[i].powi(2)).sum::<f64>().sqrt();
        diff / norm
    })
}

#[test]
fn mdl_gradients_match_finite_differences() {
    for prior in [Prior::LogUniform, Prior::StandardNormal] {
        for seed in 0..3 {
            let e = gradient_errors(prior, seed);
            assert!(e.iter().all(|&x| x < 1e-4), "{prior:?} seed {seed}: {e:?}");
        }
    }
}

#[test]
fn codelength_is_additive_over_splits() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut probe = ProbeModel::new(4, 3, 2, Prior::StandardNormal);
    probe.weight_means = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
    let items: Vec<ProbeItem> = (0..10)
        .map(|i| ProbeItem { layers: (0..8).map(|_| rng.random_range(-1.0..1.0)).collect(), label: i % 3, sequence: 0 })
        .collect();
    let zero = vec![0.0; 12];
    let kl = probe.kl().0;
    let whole = mdl_objective(&probe, &items, &zero).unwrap().0 - kl;
    let a = mdl_objective(&probe, &items[..4], &zero).unwrap().0 - kl;
    let b = mdl_objective(&probe, &items[4..], &zero).unwrap().0 - kl;
    assert!((whole - a - b).abs() < 1e-10);
}

fn right_multiply(m: &[f64], rows: usize, cols: usize, r: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[i * cols + j] = (0..cols).map(|k| m[i * cols + k] * r[k * cols + j]).sum();
        }
    }
    out
}

proptest! {
    #[test]
    fn angles_symmetric_and_span_invariant(
        a in proptest::collection::vec(-1.0f64..1.0, 12),
        b in proptest::collection::vec(-1.0f64..1.0, 12),
        r in proptest::collection::vec(-1.0f64..1.0, 4),
    ) {
        let det = r[0] * r[3] - r[1] * r[2];
        prop_assume!(det.abs() > 0.1);
        let (Ok(ab), Ok(ba)) = (subspace_angles(&a, &b, 6, 2), subspace_angles(&b, &a, 6, 2)) else {
            return Ok(());
        };
        prop_assume!(ab.rank_a == 2 && ab.rank_b == 2);
        for (x, y) in ab.angles.iter().zip(&ba.angles) {
            prop_assert!((x - y).abs() < 1e-9);
        }
        let ar = right_multiply(&a, 6, 2, &r);
        let moved = subspace_angles(&ar, &b, 6, 2).unwrap();
        for (x, y) in ab.angles.iter().zip(&moved.angles) {
            prop_assert!((x - y).abs() < 1e-7);
        }
        prop_assert!(ab.angles.iter().all(|&t| (0.0..=90.0).contains(&t)));
    }

    #[test]
    fn mixing_stays_in_convex_hull(
        stack in proptest::collection::vec(-5.0f64..5.0, 12),
        logits in proptest::collection::vec(-10.0f64..10.0, 3),
    ) {
        let h = mix_layers(&stack, &logits).unwrap();
        for j in 0..4 {
            let col: Vec<f64> = (0..3).map(|l| stack[l * 4 + j]).collect();
            let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(h[j] >= lo - 1e-12 && h[j] <= hi + 1e-12);
        }
    }

    #[test]
    fn fisher_fixed_point_and_monotone(
        rs in proptest::collection::vec(-0.99f64..0.99, 1..8),
        bump in 0.0f64..0.5,
        c in -0.99f64..0.99,
    ) {
        let constant = vec![c; rs.len()];
        prop_assert!((fisher_average(&constant).unwrap() - c).abs() < 1e-12);
        let base = fisher_average(&rs).unwrap();
        let mut up = rs.clone();
        up[0] = (up[0] + bump).min(0.99);
        prop_assert!(fisher_average(&up).unwrap() >= base - 1e-15);
        prop_assert!(base.abs() <= 1.0);
    }
}
