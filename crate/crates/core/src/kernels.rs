//! Sequential Householder QR and compact-WY kernels.
//!
//! Every distributed step calls into these locally. Reflectors follow the
//! LAPACK `larfg` convention: the pivot maps to `beta = -sign(alpha)·‖x‖`, and
//! a column that is already zero below the pivot gets `tau = 0` (no
//! reflection), so `R` diagonals may be negative.

use crate::matrix::{LinalgError, Matrix, Result};

/// Implicit Householder factorisation `A = (I − Y T Yᵀ)·[R; 0]`.
#[derive(Debug, Clone, PartialEq)]
pub struct QRFactor {
    /// `m × n`, unit lower trapezoidal.
    pub y: Matrix,
    pub tau: Vec<f64>,
    /// `n × n`, upper triangular.
    pub r: Matrix,
    /// `n × n`, upper triangular compact-WY factor.
    pub t: Matrix,
}

impl QRFactor {
    pub fn rows(&self) -> usize {
        self.y.rows()
    }

    pub fn cols(&self) -> usize {
        self.y.cols()
    }
}

/// Result of factoring two stacked `n × n` upper triangles `[Ra; Rb]`.
///
/// The reflector matrix of such a stack is `[I; Y1]`; only the lower block is
/// kept.
#[derive(Debug, Clone, PartialEq)]
pub struct CombineFactor {
    pub y1: Matrix,
    pub t: Matrix,
    pub rout: Matrix,
}

impl CombineFactor {
    pub fn n(&self) -> usize {
        self.t.rows()
    }
}

/// Householder QR of an `m × n` matrix with `m ≥ n ≥ 1`.
pub fn householder_qr(a: &Matrix) -> Result<QRFactor> {
    let (m, n) = a.shape();
    if n == 0 || m < n {
        return Err(LinalgError::Dimension(format!(
            "householder_qr needs m >= n >= 1, got {m}x{n}"
        )));
    }
    a.check_finite()?;

    let mut w = a.clone();
    let mut y = Matrix::zeros(m, n);
    let mut tau = vec![0.0; n];

    for k in 0..n {
        let alpha = w[(k, k)];
        let tail_sq: f64 = (k + 1..m).map(|i| w[(i, k)] * w[(i, k)]).sum();
        y[(k, k)] = 1.0;
        if tail_sq == 0.0 {
            continue;
        }
        let xnorm = tail_sq.sqrt();
        let beta = -alpha.signum() * alpha.hypot(xnorm);
        let tk = (beta - alpha) / beta;
        let scale = 1.0 / (alpha - beta);
        for i in k + 1..m {
            y[(i, k)] = w[(i, k)] * scale;
        }
        tau[k] = tk;

        // w[k.., k+1..] -= tau v (vᵀ w[k.., k+1..])
        for j in k + 1..n {
            let mut s = w[(k, j)];
            for i in k + 1..m {
                s += y[(i, k)] * w[(i, j)];
            }
            let s = tk * s;
            w[(k, j)] -= s;
            for i in k + 1..m {
                w[(i, j)] -= s * y[(i, k)];
            }
        }
        w[(k, k)] = beta;
        for i in k + 1..m {
            w[(i, k)] = 0.0;
        }
    }

    let r = Matrix::from_fn(n, n, |i, j| if i <= j { w[(i, j)] } else { 0.0 });
    let t = build_t(&y, &tau)?;
    Ok(QRFactor { y, tau, r, t })
}

/// Forward column-wise compact-WY factor: `I − Y T Yᵀ = H₀ H₁ ⋯ H_{n−1}`.
pub fn build_t(y: &Matrix, tau: &[f64]) -> Result<Matrix> {
    let (m, n) = y.shape();
    if tau.len() != n {
        return Err(LinalgError::Length(format!(
            "{} reflector scalars for {n} reflector columns",
            tau.len()
        )));
    }
    let mut t = Matrix::zeros(n, n);
    for i in 0..n {
        t[(i, i)] = tau[i];
        if i == 0 || tau[i] == 0.0 {
            continue;
        }
        // z = -tau_i · Y[:, ..i]ᵀ y_i
        let mut z = vec![0.0; i];
        for (j, zj) in z.iter_mut().enumerate() {
            let mut s = 0.0;
            for p in 0..m {
                s += y[(p, j)] * y[(p, i)];
            }
            *zj = -tau[i] * s;
        }
        // T[..i, i] = T[..i, ..i] · z
        for r in 0..i {
            let mut s = 0.0;
            for (c, zc) in z.iter().enumerate().skip(r) {
                s += t[(r, c)] * zc;
            }
            t[(r, i)] = s;
        }
    }
    Ok(t)
}

fn check_apply(f: &QRFactor, c: &Matrix) -> Result<()> {
    if c.rows() != f.y.rows() {
        return Err(LinalgError::Dimension(format!(
            "factor has {} rows, operand has {}",
            f.y.rows(),
            c.rows()
        )));
    }
    Ok(())
}

/// `QᵀC = C − Y·(Tᵀ·(Yᵀ·C))`.
pub fn apply_qt(f: &QRFactor, c: &Matrix) -> Result<Matrix> {
    check_apply(f, c)?;
    let ytc = f.y.t_matmul(c)?;
    let w = f.t.t_matmul(&ytc)?;
    c.sub(&f.y.matmul(&w)?)
}

/// `QC = C − Y·(T·(Yᵀ·C))`.
pub fn apply_q(f: &QRFactor, c: &Matrix) -> Result<Matrix> {
    check_apply(f, c)?;
    let ytc = f.y.t_matmul(c)?;
    let w = f.t.matmul(&ytc)?;
    c.sub(&f.y.matmul(&w)?)
}

fn check_upper(r: &Matrix, scale: f64) -> Result<()> {
    let below = r.max_abs_below_diagonal();
    if below > 1e-14 * scale {
        return Err(LinalgError::NotTriangular { magnitude: below });
    }
    Ok(())
}

/// QR of the stacked pair `[Ra; Rb]` of `n × n` upper triangles.
///
/// The stack is factored as a general dense matrix; the identity top block
/// of the reflectors is checked, then dropped.
pub fn combine_qr(ra: &Matrix, rb: &Matrix) -> Result<CombineFactor> {
    let n = ra.rows();
    if ra.shape() != (n, n) || rb.shape() != (n, n) || n == 0 {
        return Err(LinalgError::Dimension(format!(
            "combine_qr needs two equal square blocks, got {:?} and {:?}",
            ra.shape(),
            rb.shape()
        )));
    }
    let stacked = Matrix::vstack(ra, rb)?;
    let scale = stacked.frobenius_norm();
    check_upper(ra, scale)?;
    check_upper(rb, scale)?;

    let f = householder_qr(&stacked)?;
    for j in 0..n {
        for i in 0..n {
            let v = f.y[(i, j)];
            let ok = if i == j { v == 1.0 } else { v.abs() <= 1e-14 };
            if !ok {
                return Err(LinalgError::Dimension(format!(
                    "stacked reflectors: top block entry ({i}, {j}) = {v:e} is not identity"
                )));
            }
        }
    }
    Ok(CombineFactor {
        y1: f.y.block(n..2 * n, 0..n),
        t: f.t,
        rout: f.r,
    })
}

fn check_pair(c0: &Matrix, c1: &Matrix, cf: &CombineFactor) -> Result<()> {
    let n = cf.n();
    if c0.rows() != n || c1.rows() != n || c0.cols() != c1.cols() {
        return Err(LinalgError::Dimension(format!(
            "pair update with n = {n}: C0' {:?}, C1' {:?}",
            c0.shape(),
            c1.shape()
        )));
    }
    Ok(())
}

/// `W = Tᵀ·(C0' + Y1ᵀ·C1')`.
pub fn pair_w(c0: &Matrix, c1: &Matrix, cf: &CombineFactor) -> Result<Matrix> {
    check_pair(c0, c1, cf)?;
    let inner = c0.add(&cf.y1.t_matmul(c1)?)?;
    cf.t.t_matmul(&inner)
}

/// Top member of the pair: `Ĉ0' = C0' − W` (its reflector block is `I`).
pub fn update_top(c0: &Matrix, w: &Matrix) -> Result<Matrix> {
    c0.sub(w)
}

/// Bottom member of the pair: `Ĉ1' = C1' − Y1·W`.
pub fn update_bottom(c1: &Matrix, y1: &Matrix, w: &Matrix) -> Result<Matrix> {
    c1.sub(&y1.matmul(w)?)
}

/// Applies the transpose of a combine factor to the stacked pair
/// `[C0'; C1']`, returning `(Ĉ0', Ĉ1', W)`.
pub fn pair_update(
    c0: &Matrix,
    c1: &Matrix,
    cf: &CombineFactor,
) -> Result<(Matrix, Matrix, Matrix)> {
    let w = pair_w(c0, c1, cf)?;
    let chat0 = update_top(c0, &w)?;
    let chat1 = update_bottom(c1, &cf.y1, &w)?;
    Ok((chat0, chat1, w))
}
