//! Small dense helpers shared by the oracle and the solvers.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{GpError, Result};

/// Initial jitter relative to the mean diagonal.
pub const JITTER_START: f64 = 1e-10;
/// Number of ×10 jitter escalations attempted after the first failure.
pub const JITTER_ATTEMPTS: usize = 3;

/// A Cholesky factor plus the diagonal jitter that was needed to obtain it.
#[derive(Debug, Clone)]
pub struct JitteredCholesky {
    pub chol: Cholesky<f64, Dyn>,
    pub jitter: f64,
}

impl JitteredCholesky {
    pub fn l(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    pub fn log_det(&self) -> f64 {
        let l = self.chol.l_dirty();
        2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
    }
}

/// Plain Cholesky without jitter.
pub fn cholesky(a: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    if !a.is_square() {
        return Err(GpError::Dimension(format!("cholesky of {}×{} matrix", a.nrows(), a.ncols())));
    }
    Cholesky::new(a.clone()).ok_or_else(|| {
        let d = a.diagonal();
        GpError::Numerical(format!(
            "matrix of size {} is not positive definite (diagonal range [{:e}, {:e}])",
            a.nrows(),
            d.min(),
            d.max()
        ))
    })
}

/// Cholesky that retries with diagonal jitter 1e-10·mean(diag), escalating
/// ×10 up to three times. The jitter actually used is returned.
pub fn cholesky_with_jitter(a: &DMatrix<f64>) -> Result<JitteredCholesky> {
    if !a.is_square() {
        return Err(GpError::Dimension(format!("cholesky of {}×{} matrix", a.nrows(), a.ncols())));
    }
    let n = a.nrows();
    if let Some(chol) = Cholesky::new(a.clone()) {
        return Ok(JitteredCholesky { chol, jitter: 0.0 });
    }
    let mean_diag = if n == 0 { 0.0 } else { a.trace().abs() / n as f64 };
    let scale = if mean_diag > 0.0 { mean_diag } else { 1.0 };
    let mut jitter = JITTER_START * scale;
    for _ in 0..=JITTER_ATTEMPTS {
        let mut m = a.clone();
        for i in 0..n {
            m[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(m) {
            return Ok(JitteredCholesky { chol, jitter });
        }
        jitter *= 10.0;
    }
    Err(GpError::Numerical(format!("cholesky failed on {n}×{n} matrix after jitter up to {:e}", jitter / 10.0)))
}

/// Solves L X = B for lower-triangular L.
pub fn solve_lower(l: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    l.solve_lower_triangular(b).ok_or_else(|| GpError::Numerical("singular triangular factor".into()))
}

/// Dense Kronecker product, used only as a test oracle and for tiny grids.
pub fn kron_dense(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

/// Column-wise Euclidean norms.
pub fn column_norms(m: &DMatrix<f64>) -> Vec<f64> {
    m.column_iter().map(|c| c.norm()).collect()
}

/// Symmetrises in place as ½(A + Aᵀ).
pub fn symmetrize(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
}
