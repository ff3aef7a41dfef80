//! Pivoted-Cholesky preconditioner applied through the Woodbury identity.

use nalgebra::{Cholesky, DMatrix, Dyn};

use super::operator::SpdOperator;
use crate::error::{GpError, Result};

/// Low-rank factor L (n×r) with K ≈ LLᵀ and the Woodbury core for
/// M = LLᵀ + σ²I.
#[derive(Debug, Clone)]
pub struct PivotedCholesky {
    pub factor: DMatrix<f64>,
    pub pivots: Vec<usize>,
    noise: f64,
    core: Option<Cholesky<f64, Dyn>>,
}

/// Greedy maximum-diagonal pivoted Cholesky of K up to rank `rank`, stopping
/// early once the largest remaining diagonal is not positive.
pub fn pivoted_cholesky(op: &dyn SpdOperator, rank: usize) -> Result<PivotedCholesky> {
    let n = op.dim();
    let rank = rank.min(n);
    let mut diag = op.kernel_diag();
    let scale = diag.amax().max(f64::MIN_POSITIVE);
    let mut l = DMatrix::<f64>::zeros(n, rank);
    let mut pivots = Vec::with_capacity(rank);
    let mut used = vec![false; n];
    for k in 0..rank {
        let (i, &d) = diag
            .iter()
            .enumerate()
            .filter(|(j, _)| !used[*j])
            .max_by(|a, b| a.1.total_cmp(b.1))
            .expect("remaining pivots");
        if !(d > 1e-14 * scale) {
            break;
        }
        used[i] = true;
        pivots.push(i);
        let lii = d.sqrt();
        let row = op.kernel_rows(&[i]);
        for j in 0..n {
            if used[j] && j != i {
                continue;
            }
            let mut s = row[(0, j)];
            for m in 0..k {
                s -= l[(j, m)] * l[(i, m)];
            }
            l[(j, k)] = if j == i { lii } else { s / lii };
        }
        for j in 0..n {
            if !used[j] {
                diag[j] -= l[(j, k)] * l[(j, k)];
            }
        }
        diag[i] = 0.0;
    }
    let r = pivots.len();
    let factor = l.columns(0, r).into_owned();
    let noise = op.noise_variance();
    let core = if noise > 0.0 {
        let mut c = factor.transpose() * &factor;
        for d in 0..r {
            c[(d, d)] += noise;
        }
        Some(Cholesky::new(c).ok_or_else(|| GpError::Numerical("woodbury core is not positive definite".into()))?)
    } else {
        None
    };
    Ok(PivotedCholesky { factor, pivots, noise, core })
}

impl PivotedCholesky {
    pub fn rank(&self) -> usize {
        self.factor.ncols()
    }

    /// M⁻¹V = (V − L(σ²I + LᵀL)⁻¹LᵀV) / σ².
    pub fn apply_inverse(&self, v: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.core {
            Some(core) => {
                let t = core.solve(&(self.factor.transpose() * v));
                (v - &self.factor * t) / self.noise
            }
            None => v.clone(),
        }
    }
}
