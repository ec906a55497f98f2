//! Sequential oracle and accuracy metrics.
//!
//! The oracle is one dense Householder QR of the whole matrix: no tree, no
//! pair updates, no ledgers.

use crate::error::Result;
use crate::kernels::{apply_q, householder_qr};
use crate::matrix::{LinalgError, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Metrics {
    /// `‖A − QR‖_F / ‖A‖_F`.
    pub backward_error: f64,
    /// `‖QᵀQ − I‖_F`.
    pub orthogonality: f64,
    /// Largest `|R[i][j]|` below the diagonal.
    pub triangularity: f64,
    /// Cross-run difference, filled in by the caller.
    pub max_diff: f64,
}

/// Scales rows of `r` so the diagonal is non-negative. Rows with a zero
/// diagonal keep sign `+1`.
pub fn sign_normalize(r: &Matrix) -> (Matrix, Vec<f64>) {
    let mut out = r.clone();
    let k = r.rows().min(r.cols());
    let mut signs = vec![1.0; r.rows()];
    for i in 0..k {
        if r[(i, i)] < 0.0 {
            signs[i] = -1.0;
            out.scale_row(i, -1.0);
        }
    }
    (out, signs)
}

/// Thin `Q` (`m × n`) and `R` (`n × n`) with a non-negative diagonal.
pub fn oracle_qr(a: &Matrix) -> Result<(Matrix, Matrix)> {
    let f = householder_qr(a)?;
    let (m, n) = a.shape();
    let mut e = Matrix::zeros(m, n);
    for i in 0..n {
        e[(i, i)] = 1.0;
    }
    let mut q = apply_q(&f, &e)?;
    let (r, signs) = sign_normalize(&f.r);
    for j in 0..n {
        if signs[j] < 0.0 {
            for i in 0..m {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    Ok((q, r))
}

pub fn metrics(a: &Matrix, q: &Matrix, r: &Matrix) -> Result<Metrics> {
    let (m, n) = a.shape();
    if q.shape() != (m, n) || r.shape() != (n, n) {
        return Err(LinalgError::Dimension(format!(
            "metrics: A {m}x{n}, Q {:?}, R {:?}",
            q.shape(),
            r.shape()
        ))
        .into());
    }
    let resid = a.sub(&q.matmul(r)?)?.frobenius_norm();
    let norm = a.frobenius_norm();
    let backward_error = if norm == 0.0 { resid } else { resid / norm };
    let orthogonality = q.t_matmul(q)?.sub(&Matrix::identity(n))?.frobenius_norm();
    Ok(Metrics {
        backward_error,
        orthogonality,
        triangularity: r.max_abs_below_diagonal(),
        max_diff: 0.0,
    })
}

/// Largest entrywise difference after sign-normalising both factors.
pub fn compare_runs(r1: &Matrix, r2: &Matrix) -> Result<f64> {
    let (a, _) = sign_normalize(r1);
    let (b, _) = sign_normalize(r2);
    Ok(a.sub(&b)?.max_abs())
}
