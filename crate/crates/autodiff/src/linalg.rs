//! Small dense symmetric positive-definite routines on row-major slices.

use crate::error::{Result, TensorError};

/// Diagonal jitter levels tried in order before giving up.
pub const JITTER_LADDER: [f64; 4] = [0.0, 1e-10, 1e-8, 1e-6];

/// Lower Cholesky factor of an `n x n` SPD matrix.
///
/// Walks [`JITTER_LADDER`]; returns the factor and the jitter that was needed.
pub fn cholesky(a: &[f64], n: usize) -> Result<(Vec<f64>, f64)> {
    for &jitter in &JITTER_LADDER {
        if let Some(l) = try_cholesky(a, n, jitter) {
            return Ok((l, jitter));
        }
    }
    Err(TensorError::NotPositiveDefinite(
        JITTER_LADDER[JITTER_LADDER.len() - 1],
    ))
}

fn try_cholesky(a: &[f64], n: usize, jitter: f64) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut d = a[j * n + j] + jitter;
        for k in 0..j {
            d -= l[j * n + k] * l[j * n + k];
        }
        if !(d > 0.0) || !d.is_finite() {
            return None;
        }
        let djj = d.sqrt();
        l[j * n + j] = djj;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / djj;
        }
    }
    Some(l)
}

/// Solves `L x = b` in place.
pub fn forward_substitute(l: &[f64], n: usize, b: &mut [f64]) {
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}

/// Solves `L^T x = b` in place.
pub fn backward_substitute(l: &[f64], n: usize, b: &mut [f64]) {
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= l[k * n + i] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}

/// Solves `(L L^T) x = b`.
pub fn cholesky_solve(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut x = b.to_vec();
    forward_substitute(l, n, &mut x);
    backward_substitute(l, n, &mut x);
    x
}

/// `ln det(L L^T)`.
pub fn cholesky_log_det(l: &[f64], n: usize) -> f64 {
    2.0 * (0..n).map(|i| l[i * n + i].ln()).sum::<f64>()
}

/// `(L L^T)^{-1}` as a dense row-major matrix.
pub fn cholesky_inverse(l: &[f64], n: usize) -> Vec<f64> {
    let mut inv = vec![0.0; n * n];
    let mut col = vec![0.0; n];
    for j in 0..n {
        col.iter_mut().for_each(|c| *c = 0.0);
        col[j] = 1.0;
        forward_substitute(l, n, &mut col);
        backward_substitute(l, n, &mut col);
        for i in 0..n {
            inv[i * n + j] = col[i];
        }
    }
    // Symmetrize away rounding asymmetry.
    for i in 0..n {
        for j in 0..i {
            let m = 0.5 * (inv[i * n + j] + inv[j * n + i]);
            inv[i * n + j] = m;
            inv[j * n + i] = m;
        }
    }
    inv
}

/// `y = L x` for a lower-triangular factor.
pub fn lower_mul_vec(l: &[f64], n: usize, x: &[f64]) -> Vec<f64> {
    (0..n)
        .map(|i| (0..=i).map(|k| l[i * n + k] * x[k]).sum())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn factor_reproduces_matrix() {
        let a = [4.0, 2.0, 0.6, 2.0, 5.0, 1.5, 0.6, 1.5, 3.0];
        let (l, jitter) = cholesky(&a, 3).unwrap();
        assert_eq!(jitter, 0.0);
        for i in 0..3 {
            for j in 0..3 {
                let s: f64 = (0..3).map(|k| l[i * 3 + k] * l[j * 3 + k]).sum();
                assert!((s - a[i * 3 + j]).abs() < 1e-12);
            }
        }
        let inv = cholesky_inverse(&l, 3);
        for i in 0..3 {
            for j in 0..3 {
                let s: f64 = (0..3).map(|k| a[i * 3 + k] * inv[k * 3 + j]).sum();
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((s - e).abs() < 1e-12);
            }
        }
        let x = cholesky_solve(&l, 3, &[1.0, 2.0, 3.0]);
        for i in 0..3 {
            let s: f64 = (0..3).map(|k| a[i * 3 + k] * x[k]).sum();
            assert!((s - (i + 1) as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn singular_matrix_uses_jitter() {
        // Rank one: exactly singular, rescued by the ladder.
        let a = [1.0, 1.0, 1.0, 1.0];
        let (_, jitter) = cholesky(&a, 2).unwrap();
        assert!(jitter > 0.0);
        let bad = [1.0, 2.0, 2.0, 1.0];
        assert!(matches!(
            cholesky(&bad, 2),
            Err(TensorError::NotPositiveDefinite(_))
        ));
    }
}
