//! Primal and dual quadratic objectives.

use nalgebra::{DMatrix, DVector};

use super::operator::SpdOperator;
use crate::error::{dim_check, Result};

/// L*(α) = ½ αᵀ(K + σ²I)α − αᵀb.
pub fn dual_objective(op: &dyn SpdOperator, alpha: &DVector<f64>, b: &DVector<f64>) -> Result<f64> {
    check(op, alpha, b)?;
    let h_alpha = op.apply(&col(alpha));
    Ok(0.5 * alpha.dot(&h_alpha.column(0)) - alpha.dot(b))
}

/// ∇L*(α) = (K + σ²I)α − b, the negative residual.
pub fn dual_gradient(op: &dyn SpdOperator, alpha: &DVector<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    check(op, alpha, b)?;
    Ok(op.apply(&col(alpha)).column(0) - b)
}

/// L(v) = ½‖b − Kv‖² + (σ²/2)‖v‖²_K.
pub fn primal_objective(op: &dyn SpdOperator, v: &DVector<f64>, b: &DVector<f64>) -> Result<f64> {
    check(op, v, b)?;
    let kv = op.apply_kernel(&col(v)).column(0).into_owned();
    Ok(0.5 * (b - &kv).norm_squared() + 0.5 * op.noise_variance() * v.dot(&kv))
}

fn col(v: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_column_slice(v.len(), 1, v.as_slice())
}

fn check(op: &dyn SpdOperator, a: &DVector<f64>, b: &DVector<f64>) -> Result<()> {
    dim_check(a.len() == op.dim() && b.len() == op.dim(), || {
        format!("vectors of length {} and {} for a {}-dim operator", a.len(), b.len(), op.dim())
    })
}
