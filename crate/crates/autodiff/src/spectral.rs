//! Power-iteration estimate of the largest singular value.

use crate::tensor::Tensor;

/// Iteration count used when a caller does not choose one.
pub const DEFAULT_POWER_ITERS: usize = 25;

/// Iteration continues past the requested count until the right singular
/// vector moves less than this between rounds.
pub const POWER_TOL: f64 = 1e-11;

/// Hard cap on power-iteration rounds (near-degenerate top singular values).
pub const MAX_POWER_ITERS: usize = 20_000;

/// Result of a power iteration: `sigma ≈ uᵀ W v` with unit `u`, `v`.
#[derive(Debug, Clone, PartialEq)]
pub struct SingularTriplet {
    pub sigma: f64,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

/// Largest singular value of `w` (rows × cols) by at least `iters` rounds
/// of power iteration started from the normalized all-ones vector.
///
/// A zero matrix yields `sigma = 0` with zero singular vectors, so the
/// gradient `u vᵀ` vanishes as well.
pub fn power_iteration(w: &Tensor, iters: usize) -> SingularTriplet {
    let (rows, cols) = w.dims();
    let zero = SingularTriplet { sigma: 0.0, u: vec![0.0; rows], v: vec![0.0; cols] };
    if rows == 0 || cols == 0 || w.max_abs() == 0.0 {
        return zero;
    }
    let mut v = vec![1.0 / (cols as f64).sqrt(); cols];
    // The all-ones start can be orthogonal to every right singular vector
    // with nonzero singular value (e.g. rows summing to zero); restart from
    // the heaviest column's basis vector in that case.
    if norm(&mat_vec(w, &v)) <= 1e-300 {
        let best = (0..cols)
            .max_by(|&a, &b| col_norm(w, a).total_cmp(&col_norm(w, b)))
            .unwrap_or(0);
        v = vec![0.0; cols];
        v[best] = 1.0;
    }
    let mut u = vec![0.0; rows];
    let mut prev = v.clone();
    for k in 0..MAX_POWER_ITERS {
        u = mat_vec(w, &v);
        let nu = norm(&u);
        if nu == 0.0 {
            return zero;
        }
        u.iter_mut().for_each(|x| *x /= nu);
        v = mat_t_vec(w, &u);
        let nv = norm(&v);
        if nv == 0.0 {
            return zero;
        }
        v.iter_mut().for_each(|x| *x /= nv);
        let moved = v.iter().zip(&prev).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        if k + 1 >= iters.max(1) && moved <= POWER_TOL {
            break;
        }
        prev.clone_from(&v);
    }
    let wv = mat_vec(w, &v);
    let sigma = u.iter().zip(&wv).map(|(a, b)| a * b).sum::<f64>();
    SingularTriplet { sigma, u, v }
}

fn mat_vec(w: &Tensor, v: &[f64]) -> Vec<f64> {
    let (rows, cols) = w.dims();
    (0..rows)
        .map(|i| (0..cols).map(|j| w.data[i * cols + j] * v[j]).sum())
        .collect()
}

fn mat_t_vec(w: &Tensor, u: &[f64]) -> Vec<f64> {
    let (rows, cols) = w.dims();
    let mut out = vec![0.0; cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j] += w.data[i * cols + j] * u[i];
        }
    }
    out
}

fn col_norm(w: &Tensor, j: usize) -> f64 {
    let (rows, cols) = w.dims();
    (0..rows).map(|i| w.data[i * cols + j].powi(2)).sum::<f64>().sqrt()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
