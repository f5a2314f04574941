//! Independent reference implementations used to check the library.
//! Each is deliberately naive: different algorithm, no shared code.
#![allow(dead_code)]

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, descending.
pub fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let n = a.len();
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
        let scale: f64 = (0..n).map(|i| a[i][i] * a[i][i]).sum::<f64>().max(1e-300);
        if off <= 1e-30 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    ev.sort_by(|x, y| y.total_cmp(x));
    ev
}

/// Singular values of a row-major matrix as square roots of the
/// eigenvalues of its Gram matrix, descending, `min(rows, cols)` of them.
pub fn singular_values(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let (small, big, at) = if cols <= rows { (cols, rows, false) } else { (rows, cols, true) };
    let get = |i: usize, j: usize| if at { data[j * cols + i] } else { data[i * cols + j] };
    let mut g = vec![vec![0.0; small]; small];
    for i in 0..small {
        for j in 0..small {
            g[i][j] = (0..big).map(|k| get(k, i) * get(k, j)).sum();
        }
    }
    jacobi_eigenvalues(g).into_iter().map(|v| v.max(0.0).sqrt()).collect()
}

pub struct PlainHmm {
    pub initial: Vec<f64>,
    pub transition: Vec<Vec<f64>>,
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
}

fn gaussian_density(x: &[f64], m: &[f64], v: &[f64]) -> f64 {
    x.iter()
        .zip(m)
        .zip(v)
        .map(|((xi, mi), vi)| (-(xi - mi) * (xi - mi) / (2.0 * vi)).exp() / (2.0 * std::f64::consts::PI * vi).sqrt())
        .product()
}

fn for_each_path(k: usize, t: usize, mut f: impl FnMut(&[usize])) {
    let mut path = vec![0usize; t];
    loop {
        f(&path);
        let mut i = t;
        loop {
            if i == 0 {
                return;
            }
            i -= 1;
            path[i] += 1;
            if path[i] < k {
                break;
            }
            path[i] = 0;
        }
    }
}

fn path_probability(h: &PlainHmm, seq: &[Vec<f64>], path: &[usize]) -> f64 {
    let mut p = h.initial[path[0]] * gaussian_density(&seq[0], &h.means[path[0]], &h.variances[path[0]]);
    for t in 1..seq.len() {
        p *= h.transition[path[t - 1]][path[t]] * gaussian_density(&seq[t], &h.means[path[t]], &h.variances[path[t]]);
    }
    p
}

/// Log-likelihood by summing the joint density over all K^T state paths.
pub fn brute_force_log_likelihood(h: &PlainHmm, seq: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for_each_path(h.initial.len(), seq.len(), |p| total += path_probability(h, seq, p));
    total.ln()
}

/// The most probable path by exhaustive search; earlier paths in
/// lexicographic order win ties.
pub fn brute_force_viterbi(h: &PlainHmm, seq: &[Vec<f64>]) -> Vec<usize> {
    let mut best = (f64::NEG_INFINITY, Vec::new());
    for_each_path(h.initial.len(), seq.len(), |p| {
        let v = path_probability(h, seq, p);
        if v > best.0 {
            best = (v, p.to_vec());
        }
    });
    best.1
}

/// Least squares through the normal equations, solved by Gaussian
/// elimination with partial pivoting. `x` rows already include any
/// intercept column.
pub fn normal_equations(x: &[Vec<f64>], y: &[f64]) -> Vec<f64> {
    let p = x[0].len();
    let mut a = vec![vec![0.0; p + 1]; p];
    for (row, &yi) in x.iter().zip(y) {
        for i in 0..p {
            for j in 0..p {
                a[i][j] += row[i] * row[j];
            }
            a[i][p] += row[i] * yi;
        }
    }
    for col in 0..p {
        let piv = (col..p).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, piv);
        for r in 0..p {
            if r != col {
                let f = a[r][col] / a[col][col];
                for c in col..=p {
                    a[r][c] -= f * a[col][c];
                }
            }
        }
    }
    (0..p).map(|i| a[i][p] / a[i][i]).collect()
}

/// Central finite difference of `f` along coordinate `i` of `x`.
pub fn central_difference(f: &dyn Fn(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut up = x.to_vec();
    let mut down = x.to_vec();
    up[i] += h;
    down[i] -= h;
    (f(&up) - f(&down)) / (2.0 * h)
}

/// Relative error with an absolute floor for near-zero references.
pub fn relative_error(got: f64, want: f64) -> f64 {
    (got - want).abs() / want.abs().max(1e-6)
}
