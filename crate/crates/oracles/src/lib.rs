//! Independent reference implementations used only by test suites.
//!
//! Everything here is deliberately written against plain `f64` slices and,
//! where dense linear algebra is needed, delegated to `nalgebra`, so none of
//! it shares code with the implementation paths it is used to check.

use nalgebra::{DMatrix, DVector};

/// Plain triple-loop matrix product of row-major `a` (m×k) and `b` (k×n).
pub fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// Central-difference gradient of a scalar function.
pub fn fd_grad(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let saved = xp[i];
        xp[i] = saved + h;
        let fp = f(&xp);
        xp[i] = saved - h;
        let fm = f(&xp);
        xp[i] = saved;
        g[i] = (fp - fm) / (2.0 * h);
    }
    g
}

/// Central-difference Jacobian of a vector function, returned row-major with
/// one row per output component (rows × x.len()).
pub fn fd_jacobian(mut f: impl FnMut(&[f64]) -> Vec<f64>, x: &[f64], h: f64) -> Vec<Vec<f64>> {
    let out_dim = f(x).len();
    let mut jac = vec![vec![0.0; x.len()]; out_dim];
    let mut xp = x.to_vec();
    for j in 0..x.len() {
        let saved = xp[j];
        xp[j] = saved + h;
        let fp = f(&xp);
        xp[j] = saved - h;
        let fm = f(&xp);
        xp[j] = saved;
        for i in 0..out_dim {
            jac[i][j] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    jac
}

/// Direct dense solve of the symmetric positive definite system `a x = b`
/// (row-major `a`, n×n) via Cholesky factorization.
pub fn spd_solve(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    assert_eq!(a.len(), n * n);
    assert_eq!(b.len(), n);
    let m = DMatrix::from_row_slice(n, n, a);
    let rhs = DVector::from_column_slice(b);
    let chol = m.cholesky().expect("oracle: matrix not positive definite");
    chol.solve(&rhs).iter().copied().collect()
}

/// Singular values of a row-major rows×cols matrix, descending.
pub fn singular_values(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    assert_eq!(a.len(), rows * cols);
    let m = DMatrix::from_row_slice(rows, cols, a);
    let mut sv: Vec<f64> = m.singular_values().iter().copied().collect();
    sv.sort_by(|x, y| y.partial_cmp(x).unwrap());
    sv
}

/// Scalar-loop layer normalization with affine gain/bias.
pub fn layer_norm_ref(x: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> Vec<f64> {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let inv = 1.0 / (var + eps).sqrt();
    x.iter()
        .zip(gain.iter().zip(bias.iter()))
        .map(|(v, (g, b))| g * (v - mean) * inv + b)
        .collect()
}

/// Scalar-loop softmax with max subtraction.
pub fn softmax_ref(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ex: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = ex.iter().sum();
    ex.iter().map(|v| v / s).collect()
}

/// Indices of the `k` largest scores, ties broken toward the lower index,
/// found by full sort.
pub fn top_k_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

/// Cosine similarity with the zero-vector convention cos(0, ·) = 0.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Brute-force discard set for a fixed-budget memory: adjacent-pair cosine
/// similarities over the row-major token block (last row scores -inf), then
/// the `excess` highest-similarity rows with ties toward the lower index.
pub fn discard_set_bruteforce(tokens: &[f64], rows: usize, dim: usize, excess: usize) -> Vec<usize> {
    assert_eq!(tokens.len(), rows * dim);
    let mut sims = vec![f64::NEG_INFINITY; rows];
    for n in 0..rows.saturating_sub(1) {
        let a = &tokens[n * dim..(n + 1) * dim];
        let b = &tokens[(n + 1) * dim..(n + 2) * dim];
        sims[n] = cosine(a, b);
    }
    let mut out = top_k_indices(&sims, excess);
    out.sort_unstable();
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let a = vec![1.0, 0.0, 0.0, 1.0];
        let b = vec![3.0, 4.0, 5.0, 6.0];
        assert_eq!(naive_matmul(&a, &b, 2, 2, 2), b);
    }

    #[test]
    fn fd_grad_quadratic() {
        let g = fd_grad(|x| x[0] * x[0] + 3.0 * x[1], &[2.0, 1.0], 1e-6);
        assert!((g[0] - 4.0).abs() < 1e-8);
        assert!((g[1] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn spd_solve_identity() {
        let a = vec![1.0, 0.0, 0.0, 1.0];
        let x = spd_solve(&a, &[5.0, -2.0], 2);
        assert!((x[0] - 5.0).abs() < 1e-12 && (x[1] + 2.0).abs() < 1e-12);
    }

    #[test]
    fn singular_values_diag() {
        let sv = singular_values(&[3.0, 0.0, 0.0, 1.0], 2, 2);
        assert!((sv[0] - 3.0).abs() < 1e-12 && (sv[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn top_k_tie_prefers_lower_index() {
        assert_eq!(top_k_indices(&[1.0, 2.0, 2.0, 0.0], 2), vec![1, 2]);
        assert_eq!(top_k_indices(&[2.0, 2.0, 2.0], 2), vec![0, 1]);
    }
}
