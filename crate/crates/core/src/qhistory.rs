//! Implicit `Q` of a distributed factorisation: per panel, the leaf
//! reflectors of every rank and the combine factors of every tree step,
//! each tied to the global rows it acts on.

use crate::error::{Error, Result};
use crate::kernels::{apply_q, apply_qt, CombineFactor, QRFactor};
use crate::matrix::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct PanelQ {
    /// `(first global row, leaf factor)`.
    pub leaves: Vec<(usize, QRFactor)>,
    /// Per tree step: `(top row, bottom row, factor)`, each pair acting on the
    /// `b` rows starting at those offsets.
    pub steps: Vec<Vec<(usize, usize, CombineFactor)>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QHistory {
    rows: usize,
    panels: Vec<PanelQ>,
}

fn rows_of(x: &Matrix, start: usize, len: usize) -> Result<Matrix> {
    if start + len > x.rows() {
        return Err(Error::Protocol(format!(
            "reflector rows {start}..{} exceed {} rows",
            start + len,
            x.rows()
        )));
    }
    Ok(x.block(start..start + len, 0..x.cols()))
}

/// `[C0; C1] ← (I − [I; Y1] T [I; Y1]ᵀ)^{(T)} [C0; C1]`.
fn apply_combine(
    x: &mut Matrix,
    top: usize,
    bottom: usize,
    cf: &CombineFactor,
    transpose: bool,
) -> Result<()> {
    let n = cf.n();
    let c0 = rows_of(x, top, n)?;
    let c1 = rows_of(x, bottom, n)?;
    let inner = c0.add(&cf.y1.t_matmul(&c1)?)?;
    let w = if transpose {
        cf.t.t_matmul(&inner)?
    } else {
        cf.t.matmul(&inner)?
    };
    x.set_block(top, 0, &c0.sub(&w)?);
    x.set_block(bottom, 0, &c1.sub(&cf.y1.matmul(&w)?)?);
    Ok(())
}

impl QHistory {
    pub fn new(rows: usize, panels: Vec<PanelQ>) -> Self {
        Self { rows, panels }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn panels(&self) -> &[PanelQ] {
        &self.panels
    }

    fn check(&self, x: &Matrix) -> Result<()> {
        if x.rows() != self.rows {
            return Err(Error::Linalg(crate::matrix::LinalgError::Dimension(
                format!("Q has {} rows, operand has {}", self.rows, x.rows()),
            )));
        }
        Ok(())
    }

    /// `Q·X`.
    pub fn apply_q(&self, x: &Matrix) -> Result<Matrix> {
        self.check(x)?;
        let mut x = x.clone();
        for p in self.panels.iter().rev() {
            for pairs in p.steps.iter().rev() {
                for (top, bottom, cf) in pairs {
                    apply_combine(&mut x, *top, *bottom, cf, false)?;
                }
            }
            for (start, f) in &p.leaves {
                let blk = rows_of(&x, *start, f.rows())?;
                x.set_block(*start, 0, &apply_q(f, &blk)?);
            }
        }
        Ok(x)
    }

    /// `Qᵀ·X`.
    pub fn apply_qt(&self, x: &Matrix) -> Result<Matrix> {
        self.check(x)?;
        let mut x = x.clone();
        for p in &self.panels {
            for (start, f) in &p.leaves {
                let blk = rows_of(&x, *start, f.rows())?;
                x.set_block(*start, 0, &apply_qt(f, &blk)?);
            }
            for pairs in &p.steps {
                for (top, bottom, cf) in pairs {
                    apply_combine(&mut x, *top, *bottom, cf, true)?;
                }
            }
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::caqr::{factor, Distribution, FactorConfig};
    use crate::fabric::FaultPlan;
    use crate::gen::random_matrix;

    #[test]
    fn q_and_qt_are_inverse() {
        let a = random_matrix(16, 8, 3);
        let d = Distribution::even(16, 8, 2, 4).unwrap();
        let f = factor(&a, &d, &FactorConfig::default(), &FaultPlan::empty()).unwrap();
        let x = random_matrix(16, 3, 4);
        let back = f.q.apply_q(&f.q.apply_qt(&x).unwrap()).unwrap();
        assert!(back.sub(&x).unwrap().max_abs() <= 1e-13);
    }

    #[test]
    fn qt_of_a_is_r() {
        let a = random_matrix(16, 8, 5);
        let d = Distribution::even(16, 8, 4, 2).unwrap();
        let f = factor(&a, &d, &FactorConfig::default(), &FaultPlan::empty()).unwrap();
        let qta = f.q.apply_qt(&a).unwrap();
        assert!(qta.block(0..8, 0..8).sub(&f.r).unwrap().max_abs() <= 1e-13);
        assert!(qta.block(8..16, 0..8).max_abs() <= 1e-13);
    }

    #[test]
    fn wrong_height_is_rejected() {
        let f = QHistory::new(4, vec![]);
        assert!(f.apply_q(&Matrix::zeros(3, 1)).is_err());
    }
}
