//! Iterative Gaussian-process regression.
//!
//! The crate is organised around the regularised kernel matrix
//! `H = K_XX + σ²I`. Dense Cholesky routines in [`exact`] serve as the
//! reference; [`solvers`] provides matrix-free alternatives (conjugate
//! gradients, alternating projections, primal SGD, stochastic dual descent)
//! that [`pathwise`] turns into posterior samples and [`mll`] into
//! marginal-likelihood gradients. [`kron`] supplies a latent-Kronecker
//! operator for gridded data with missing cells.

// `!(x > 0.0)` style checks reject NaN alongside out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod exact;
pub mod features;
pub mod kernel;
pub mod kron;
pub mod linalg;
pub mod mll;
pub mod pathwise;
pub mod solvers;

pub use error::{GpError, Result};
pub use kernel::{Hyperparameters, Kernel, KernelExpr, MaternNu, ModelSpec};

/// Training inputs and targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Data {
    pub x: nalgebra::DMatrix<f64>,
    pub y: nalgebra::DVector<f64>,
}

impl Data {
    pub fn new(x: nalgebra::DMatrix<f64>, y: nalgebra::DVector<f64>) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(GpError::Dimension(format!("{} inputs but {} targets", x.nrows(), y.len())));
        }
        Ok(Data { x, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}
