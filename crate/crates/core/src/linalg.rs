//! Dense factorization helpers shared by the GP, QP and sampler code.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// A Cholesky factor together with the diagonal ridge that was needed.
#[derive(Debug, Clone)]
pub struct JitteredCholesky {
    pub factor: Cholesky<f64, Dyn>,
    /// Absolute ridge added to the diagonal (0 when none was needed).
    pub jitter: f64,
}

impl JitteredCholesky {
    pub fn l(&self) -> DMatrix<f64> {
        self.factor.l()
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.factor.solve(b)
    }

    pub fn log_det(&self) -> f64 {
        let l = self.factor.l_dirty();
        2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
    }
}

/// Cholesky with diagonal jitter escalation.
///
/// Tries the plain factorization first, then ridges of `rel_start`, `10 * rel_start`,
/// ... up to `rel_max` times the mean diagonal.
pub fn cholesky_with_jitter(mat: &DMatrix<f64>, rel_start: f64, rel_max: f64) -> Result<JitteredCholesky> {
    let n = mat.nrows();
    if n != mat.ncols() {
        return Err(Error::InvalidInput("cholesky of a non-square matrix".into()));
    }
    if n == 0 {
        return Ok(JitteredCholesky { factor: Cholesky::new(mat.clone()).unwrap(), jitter: 0.0 });
    }
    if let Some(factor) = Cholesky::new(mat.clone()) {
        if factor_is_finite(&factor) {
            return Ok(JitteredCholesky { factor, jitter: 0.0 });
        }
    }
    let mean_diag = (0..n).map(|i| mat[(i, i)].abs()).sum::<f64>() / n as f64;
    let scale = if mean_diag > 0.0 { mean_diag } else { 1.0 };
    let mut rel = rel_start;
    while rel <= rel_max * (1.0 + 1e-9) {
        let jitter = rel * scale;
        let mut m = mat.clone();
        for i in 0..n {
            m[(i, i)] += jitter;
        }
        if let Some(factor) = Cholesky::new(m) {
            if factor_is_finite(&factor) {
                return Ok(JitteredCholesky { factor, jitter });
            }
        }
        rel *= 10.0;
    }
    Err(Error::Conditioning(format!(
        "{n}x{n} matrix not positive definite with ridge up to {rel_max:e} of mean diagonal"
    )))
}

/// Default escalation `1e-12 -> 1e-8` relative to the mean diagonal.
pub fn robust_cholesky(mat: &DMatrix<f64>) -> Result<JitteredCholesky> {
    cholesky_with_jitter(mat, 1e-12, 1e-8)
}

fn factor_is_finite(f: &Cholesky<f64, Dyn>) -> bool {
    f.l_dirty().iter().all(|v| v.is_finite())
}

/// `S M` where `S` is given as sparse rows of `(column, value)` pairs.
pub fn sparse_rows_times(rows: &[Vec<(usize, f64)>], m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(rows.len(), m.ncols());
    for j in 0..m.ncols() {
        let src = m.column(j);
        let mut dst = out.column_mut(j);
        for (r, row) in rows.iter().enumerate() {
            dst[r] = row.iter().map(|&(c, v)| v * src[c]).sum();
        }
    }
    out
}

/// Symmetrizes in place by averaging with the transpose.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}
