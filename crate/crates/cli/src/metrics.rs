//! Test-set metrics on standardised targets.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use itergp::pathwise::{gaussian_nll, predictive_moments};

use crate::error::CliResult;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rmse: f64,
    pub nll: f64,
}

impl Metrics {
    /// The same metrics on the original target scale.
    pub fn to_raw(self, y_std: f64) -> Metrics {
        Metrics { rmse: self.rmse * y_std, nll: self.nll + y_std.ln() }
    }
}

/// RMSE of the mean and average Gaussian NLL under per-point variances.
pub fn evaluate(y: &DVector<f64>, mean: &DVector<f64>, variance: &DVector<f64>) -> CliResult<Metrics> {
    let nll = gaussian_nll(y, mean, variance)?;
    let rmse = ((y - mean).norm_squared() / y.len() as f64).sqrt();
    Ok(Metrics { rmse, nll })
}

/// Metrics from posterior function samples (one column each) plus noise.
pub fn evaluate_samples(y: &DVector<f64>, samples: &DMatrix<f64>, noise_variance: f64) -> CliResult<Metrics> {
    let m = predictive_moments(samples, noise_variance)?;
    evaluate(y, &m.mean, &m.variance)
}
