//! Posterior function samples by pathwise conditioning.
//!
//! A posterior sample is a prior sample plus a data-dependent update:
//! `f*(·) = f(·) + K_(·)X u` with `H u = y − (f_X + ε)`. The systems for all
//! samples share `H`, so they are solved as one batch together with the mean
//! system `H v = y`, and `u_j = v − ẑ_j` where `H ẑ_j = f_X + ε_j`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{dim_check, GpError, Result};
use crate::exact::prior_factor;
use crate::features::{FeatureDraws, FeatureVariant, FourierFeatureSet, DEFAULT_FEATURES};
use crate::kernel::{Kernel, ModelSpec};
use crate::solvers::{
    operator_for, solve, solve_rescaled, solve_sgd_primal_sample, DenseOperator, LinearSystemBatch, SolverConfig,
    SolverKind, SolverReport,
};
use crate::Data;

/// Default number of posterior samples.
pub const DEFAULT_NUM_SAMPLES: usize = 64;

/// Largest training set for which a materialised kernel matrix is used.
pub const DENSE_OPERATOR_LIMIT: usize = 4096;

/// How prior function samples are drawn.
#[derive(Debug, Clone, PartialEq)]
pub enum PriorSource {
    /// Random Fourier features; samples can be evaluated anywhere.
    Fourier { num_features: usize, variant: FeatureVariant },
    /// Exact joint draws over the training inputs and these test inputs;
    /// samples can only be evaluated at rows of either.
    Exact { test_inputs: DMatrix<f64> },
}

impl Default for PriorSource {
    fn default() -> Self {
        PriorSource::Fourier { num_features: DEFAULT_FEATURES, variant: FeatureVariant::SinCos }
    }
}

/// Prior draws shared by a batch of samples, one column per sample.
#[derive(Debug, Clone)]
pub enum PriorBatch {
    Features { features: Arc<FourierFeatureSet>, weights: DMatrix<f64> },
    Tabulated { points: Arc<DMatrix<f64>>, values: DMatrix<f64> },
}

impl PriorBatch {
    pub fn num_samples(&self) -> usize {
        match self {
            PriorBatch::Features { weights, .. } => weights.ncols(),
            PriorBatch::Tabulated { values, .. } => values.ncols(),
        }
    }

    /// Prior values at `x`, one column per sample.
    pub fn eval(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        match self {
            PriorBatch::Features { features, weights } => Ok(features.feature_matrix(x)? * weights),
            PriorBatch::Tabulated { points, values } => {
                let rows = lookup_rows(points, x)?;
                Ok(values.select_rows(&rows))
            }
        }
    }

    fn column(&self, j: usize) -> PriorDraw {
        match self {
            PriorBatch::Features { features, weights } => {
                PriorDraw::Features { features: features.clone(), weights: weights.column(j).into_owned() }
            }
            PriorBatch::Tabulated { points, values } => {
                PriorDraw::Tabulated { points: points.clone(), values: values.column(j).into_owned() }
            }
        }
    }
}

/// A single prior function sample.
#[derive(Debug, Clone)]
pub enum PriorDraw {
    Features { features: Arc<FourierFeatureSet>, weights: DVector<f64> },
    Tabulated { points: Arc<DMatrix<f64>>, values: DVector<f64> },
}

impl PriorDraw {
    pub fn eval(&self, x: &DMatrix<f64>) -> Result<DVector<f64>> {
        match self {
            PriorDraw::Features { features, weights } => {
                let phi = features.feature_matrix(x)?;
                Ok(DVector::from_fn(x.nrows(), |i, _| phi.row(i).transpose().dot(weights)))
            }
            PriorDraw::Tabulated { points, values } => {
                let rows = lookup_rows(points, x)?;
                Ok(DVector::from_iterator(rows.len(), rows.iter().map(|&i| values[i])))
            }
        }
    }
}

fn lookup_rows(points: &DMatrix<f64>, x: &DMatrix<f64>) -> Result<Vec<usize>> {
    dim_check(points.ncols() == x.ncols(), || {
        format!("inputs have {} columns, expected {}", x.ncols(), points.ncols())
    })?;
    (0..x.nrows())
        .map(|i| {
            (0..points.nrows())
                .find(|&r| points.row(r) == x.row(i))
                .ok_or_else(|| GpError::Unsupported("tabulated prior sample evaluated off its support".into()))
        })
        .collect()
}

/// One posterior function sample `f(·) + K_(·)X u`.
#[derive(Debug, Clone)]
pub struct PosteriorSampleRep {
    pub prior: PriorDraw,
    pub kernel: Arc<Kernel>,
    pub train_x: Arc<DMatrix<f64>>,
    /// Update weights u with H u = y − (f_X + ε).
    pub weights: DVector<f64>,
    pub noise_variance: f64,
    /// Relative residual the weights were solved to.
    pub residual: f64,
}

impl PosteriorSampleRep {
    /// Evaluates the sample; each output row depends only on its input row.
    pub fn eval(&self, x: &DMatrix<f64>) -> Result<DVector<f64>> {
        let prior = self.prior.eval(x)?;
        Ok(prior + self.update(x)?)
    }

    /// The data-dependent term K_(x)X u alone.
    pub fn update(&self, x: &DMatrix<f64>) -> Result<DVector<f64>> {
        let kxs = self.kernel.gram(x, &self.train_x)?;
        Ok(DVector::from_fn(x.nrows(), |i, _| kxs.row(i).transpose().dot(&self.weights)))
    }
}

/// A batch of posterior samples sharing prior features and training data.
#[derive(Debug, Clone)]
pub struct PosteriorSamples {
    pub prior: PriorBatch,
    pub kernel: Arc<Kernel>,
    pub train_x: Arc<DMatrix<f64>>,
    /// Mean representer weights v = H⁻¹y.
    pub mean_weights: DVector<f64>,
    /// Update weights, one column per sample.
    pub weights: DMatrix<f64>,
    pub noise_variance: f64,
    pub report: SolverReport,
}

impl PosteriorSamples {
    /// Assembles samples from solutions of H[v, ẑ₁…ẑ_s] = [y, f_X + ε₁, …].
    pub fn from_solutions(
        prior: PriorBatch,
        kernel: Arc<Kernel>,
        train_x: Arc<DMatrix<f64>>,
        solutions: &DMatrix<f64>,
        noise_variance: f64,
        report: SolverReport,
    ) -> Result<Self> {
        let s = prior.num_samples();
        dim_check(solutions.ncols() == s + 1 && solutions.nrows() == train_x.nrows(), || {
            format!("{}×{} solutions for {} samples", solutions.nrows(), solutions.ncols(), s)
        })?;
        let mean_weights = solutions.column(0).into_owned();
        let mut weights = DMatrix::zeros(train_x.nrows(), s);
        for j in 0..s {
            weights.set_column(j, &(&mean_weights - solutions.column(j + 1)));
        }
        Ok(PosteriorSamples { prior, kernel, train_x, mean_weights, weights, noise_variance, report })
    }

    pub fn len(&self) -> usize {
        self.weights.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.ncols() == 0
    }

    pub fn get(&self, j: usize) -> PosteriorSampleRep {
        let residual = self.report.residuals.get(j + 1).copied().unwrap_or(self.report.mean_residual);
        PosteriorSampleRep {
            prior: self.prior.column(j),
            kernel: self.kernel.clone(),
            train_x: self.train_x.clone(),
            weights: self.weights.column(j).into_owned(),
            noise_variance: self.noise_variance,
            residual: residual.max(self.report.mean_residual),
        }
    }

    /// All samples at `x`, one column per sample.
    pub fn eval(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let kxs = self.kernel.gram(x, &self.train_x)?;
        Ok(self.prior.eval(x)? + kxs * &self.weights)
    }

    /// Posterior mean K_(x)X v from the mean weights.
    pub fn mean(&self, x: &DMatrix<f64>) -> Result<DVector<f64>> {
        Ok(self.kernel.gram(x, &self.train_x)? * &self.mean_weights)
    }
}

/// Options for [`draw_posterior_samples`].
#[derive(Debug, Clone)]
pub struct SampleConfig {
    pub num_samples: usize,
    pub prior: PriorSource,
    pub solver: SolverKind,
    pub solver_cfg: SolverConfig,
    pub seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            num_samples: DEFAULT_NUM_SAMPLES,
            prior: PriorSource::default(),
            solver: SolverKind::Cg,
            solver_cfg: SolverConfig::default(),
            seed: 0,
        }
    }
}

fn normals(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// Draws prior function values for `s` samples at the training inputs.
fn draw_prior(
    kernel: &Kernel,
    x: &DMatrix<f64>,
    source: &PriorSource,
    s: usize,
    rng: &mut ChaCha8Rng,
) -> Result<PriorBatch> {
    match source {
        PriorSource::Fourier { num_features, variant } => {
            let seed = rand::Rng::random::<u64>(rng);
            let draws = FeatureDraws::sample(kernel, *num_features, *variant, seed)?;
            let features = Arc::new(draws.bind(kernel)?);
            let weights = normals(rng, features.feature_dim(), s);
            Ok(PriorBatch::Features { features, weights })
        }
        PriorSource::Exact { test_inputs } => {
            dim_check(test_inputs.ncols() == x.ncols(), || {
                "test inputs differ in dimension from training inputs".into()
            })?;
            let n = x.nrows();
            let mut points = DMatrix::zeros(n + test_inputs.nrows(), x.ncols());
            points.rows_mut(0, n).copy_from(x);
            points.rows_mut(n, test_inputs.nrows()).copy_from(test_inputs);
            let factor = prior_factor(kernel, &points)?;
            let values = factor.l() * normals(rng, points.nrows(), s);
            Ok(PriorBatch::Tabulated { points: Arc::new(points), values })
        }
    }
}

/// Draws `cfg.num_samples` posterior samples by pathwise conditioning.
///
/// The mean system and all sample systems are solved as one batch; SGD uses
/// the variance-reduced sample objective for the sample columns.
pub fn draw_posterior_samples(model: &ModelSpec, data: &Data, cfg: &SampleConfig) -> Result<PosteriorSamples> {
    if cfg.num_samples == 0 {
        return Err(GpError::InvalidParameter("at least one sample is required".into()));
    }
    let n = data.len();
    let s = cfg.num_samples;
    let kernel = model.bound_kernel()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let prior = draw_prior(&kernel, &data.x, &cfg.prior, s, &mut rng)?;
    let f_x = prior.eval(&data.x)?;
    let w_eps = normals(&mut rng, n, s);
    let sigma = model.noise_scale();
    let op = operator_for(model, &data.x, DENSE_OPERATOR_LIMIT)?;

    let (solutions, report) = if cfg.solver == SolverKind::Sgd {
        let y = DMatrix::from_column_slice(n, 1, data.y.as_slice());
        let mean = solve(SolverKind::Sgd, &LinearSystemBatch::new(op.as_ref(), y)?, &cfg.solver_cfg)?;
        let samples = solve_sgd_primal_sample(op.as_ref(), &f_x, &w_eps, None, &cfg.solver_cfg)?;
        let mut v = DMatrix::zeros(n, s + 1);
        v.set_column(0, &mean.v.column(0));
        v.columns_mut(1, s).copy_from(&samples.v);
        let mut report = samples.report;
        report.residuals.insert(0, mean.report.mean_residual);
        report.mean_residual = mean.report.mean_residual;
        report.probe_residual = crate::solvers::split_norms(&report.residuals).1;
        if mean.report.termination != crate::solvers::Termination::Tolerance {
            report.termination = mean.report.termination;
        }
        report.iterations += mean.report.iterations;
        report.epochs += mean.report.epochs;
        (v, report)
    } else {
        let mut rhs = DMatrix::zeros(n, s + 1);
        rhs.set_column(0, &data.y);
        rhs.columns_mut(1, s).copy_from(&(&f_x + &w_eps * sigma));
        let sol = solve_rescaled(cfg.solver, op.as_ref(), &rhs, None, &cfg.solver_cfg)?;
        (sol.v, sol.report)
    };
    PosteriorSamples::from_solutions(
        prior,
        Arc::new(kernel),
        Arc::new(data.x.clone()),
        &solutions,
        model.noise_variance(),
        report,
    )
}

/// Sample-based predictive moments.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveMoments {
    pub mean: DVector<f64>,
    /// Unbiased sample variance of the latent function.
    pub latent_variance: DVector<f64>,
    /// Latent variance plus σ².
    pub variance: DVector<f64>,
}

/// Moments of sample values (one column per sample) at a set of points.
pub fn predictive_moments(values: &DMatrix<f64>, noise_variance: f64) -> Result<PredictiveMoments> {
    let s = values.ncols();
    if s < 2 {
        return Err(GpError::InvalidParameter(format!("predictive moments need at least 2 samples, got {s}")));
    }
    let mean = values.column_mean();
    let latent_variance = DVector::from_fn(values.nrows(), |i, _| {
        let m = mean[i];
        values.row(i).iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (s - 1) as f64
    });
    let variance = latent_variance.add_scalar(noise_variance);
    Ok(PredictiveMoments { mean, latent_variance, variance })
}

/// Average Gaussian negative log predictive density.
pub fn gaussian_nll(y: &DVector<f64>, mean: &DVector<f64>, variance: &DVector<f64>) -> Result<f64> {
    dim_check(y.len() == mean.len() && y.len() == variance.len(), || "targets and moments differ in length".into())?;
    if y.is_empty() {
        return Err(GpError::InvalidParameter("no targets".into()));
    }
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    let total: f64 = (0..y.len())
        .map(|i| {
            let v = variance[i];
            let r = y[i] - mean[i];
            0.5 * (ln2pi + v.ln() + r * r / v)
        })
        .sum();
    Ok(total / y.len() as f64)
}

/// Solutions of (σ²K_ZZ + K_ZX K_XZ) W = K_ZX T for inducing inputs Z.
///
/// Column 0 of `targets` is typically y, giving v*, and the remaining
/// columns f_X + ε, giving the α* of each sample. The exact inducing prior
/// values at X are replaced by f_X.
pub fn inducing_weights(
    model: &ModelSpec,
    x: &DMatrix<f64>,
    z: &DMatrix<f64>,
    targets: &DMatrix<f64>,
    kind: SolverKind,
    cfg: &SolverConfig,
) -> Result<(DMatrix<f64>, SolverReport)> {
    dim_check(targets.nrows() == x.nrows(), || format!("{} target rows for {} inputs", targets.nrows(), x.nrows()))?;
    dim_check(z.ncols() == x.ncols(), || "inducing inputs differ in dimension".into())?;
    let kernel = model.bound_kernel()?;
    let kzz = kernel.gram(z, z)?;
    let kzx = kernel.gram(z, x)?;
    let a = &kzz * model.noise_variance() + &kzx * kzx.transpose();
    let rhs = &kzx * targets;
    let op = DenseOperator::new(a, 0.0)?;
    let sol = solve_rescaled(kind, &op, &rhs, None, cfg)?;
    Ok((sol.v, sol.report))
}

/// Inducing-point posterior samples `f(·) + K_(·)Z (v* − α*_j)`.
#[derive(Debug, Clone)]
pub struct InducingSamples {
    pub prior: PriorBatch,
    pub kernel: Arc<Kernel>,
    pub z: Arc<DMatrix<f64>>,
    pub mean_weights: DVector<f64>,
    pub weights: DMatrix<f64>,
    pub report: SolverReport,
}

impl InducingSamples {
    pub fn eval(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let kxz = self.kernel.gram(x, &self.z)?;
        Ok(self.prior.eval(x)? + kxz * &self.weights)
    }

    pub fn mean(&self, x: &DMatrix<f64>) -> Result<DVector<f64>> {
        Ok(self.kernel.gram(x, &self.z)? * &self.mean_weights)
    }
}

/// Draws inducing-point posterior samples with random-feature priors.
pub fn draw_inducing_samples(
    model: &ModelSpec,
    data: &Data,
    z: &DMatrix<f64>,
    num_features: usize,
    cfg: &SampleConfig,
) -> Result<InducingSamples> {
    let n = data.len();
    let s = cfg.num_samples;
    let kernel = model.bound_kernel()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let source = PriorSource::Fourier { num_features, variant: FeatureVariant::SinCos };
    let prior = draw_prior(&kernel, &data.x, &source, s, &mut rng)?;
    let f_x = prior.eval(&data.x)?;
    let w_eps = normals(&mut rng, n, s);
    let mut targets = DMatrix::zeros(n, s + 1);
    targets.set_column(0, &data.y);
    targets.columns_mut(1, s).copy_from(&(&f_x + &w_eps * model.noise_scale()));
    let (sol, report) = inducing_weights(model, &data.x, z, &targets, cfg.solver, &cfg.solver_cfg)?;
    let mean_weights = sol.column(0).into_owned();
    let mut weights = DMatrix::zeros(z.nrows(), s);
    for j in 0..s {
        weights.set_column(j, &(&mean_weights - sol.column(j + 1)));
    }
    Ok(InducingSamples { prior, kernel: Arc::new(kernel), z: Arc::new(z.clone()), mean_weights, weights, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exact;
    use crate::kernel::KernelExpr;
    use rand::Rng;

    fn exact_cfg(prior: PriorSource, s: usize, seed: u64) -> SampleConfig {
        SampleConfig { num_samples: s, prior, solver: SolverKind::Exact, seed, ..SampleConfig::default() }
    }

    fn instance(seed: u64, n: usize, noise: f64) -> (ModelSpec, Data) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, 1, |i, _| i as f64 * 0.7 + rng.random_range(-0.1..0.1));
        let y = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let model = ModelSpec::with_params(KernelExpr::scaled(KernelExpr::se()), 1, &[1.3, 0.8], noise).unwrap();
        (model, Data::new(x, y).unwrap())
    }

    #[test]
    fn noiseless_samples_interpolate() {
        let (model, data) = instance(0, 6, 1e-8);
        for prior in [PriorSource::Exact { test_inputs: DMatrix::zeros(0, 1) }, PriorSource::default()] {
            let samples = draw_posterior_samples(&model, &data, &exact_cfg(prior, 4, 1)).unwrap();
            assert!((samples.mean(&data.x).unwrap() - &data.y).amax() <= 1e-4);
            // samples keep a latent spread of about σ at the data
            let vals = samples.eval(&data.x).unwrap();
            for j in 0..4 {
                assert!((vals.column(j) - &data.y).amax() <= 6.0 * model.noise_scale());
            }
        }
    }

    #[test]
    fn moments_match_dense_posterior() {
        let (model, data) = instance(1, 8, 0.1);
        let xs = DMatrix::from_fn(5, 1, |i, _| -0.5 + 1.3 * i as f64);
        let post = exact::posterior(&model, &data, &xs).unwrap();
        let s = 8192;
        let cfg = exact_cfg(PriorSource::Exact { test_inputs: xs.clone() }, s, 2);
        let vals = draw_posterior_samples(&model, &data, &cfg).unwrap().eval(&xs).unwrap();
        let mean = vals.column_mean();
        for i in 0..5 {
            let se = (post.cov[(i, i)] / s as f64).sqrt();
            assert!((mean[i] - post.mean[i]).abs() <= 5.0 * se);
            for j in 0..5 {
                let c: f64 =
                    (0..s).map(|k| (vals[(i, k)] - mean[i]) * (vals[(j, k)] - mean[j])).sum::<f64>() / (s - 1) as f64;
                let se = ((post.cov[(i, i)] * post.cov[(j, j)] + post.cov[(i, j)].powi(2)) / s as f64).sqrt();
                assert!((c - post.cov[(i, j)]).abs() <= 5.0 * se, "{i} {j}");
            }
        }
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let (model, data) = instance(2, 10, 0.2);
        let cfg = SampleConfig { num_samples: 3, seed: 9, ..SampleConfig::default() };
        let a = draw_posterior_samples(&model, &data, &cfg).unwrap();
        let b = draw_posterior_samples(&model, &data, &cfg).unwrap();
        let xs = DMatrix::from_fn(7, 1, |i, _| i as f64 * 0.9);
        assert_eq!(a.eval(&xs).unwrap(), b.eval(&xs).unwrap());
    }

    #[test]
    fn single_sample_eval_is_row_local() {
        let (model, data) = instance(3, 12, 0.2);
        let samples = draw_posterior_samples(&model, &data, &exact_cfg(PriorSource::default(), 2, 3)).unwrap();
        let rep = samples.get(1);
        let a = DMatrix::from_fn(4, 1, |i, _| i as f64 * 1.1);
        let b = DMatrix::from_fn(3, 1, |i, _| 0.3 + i as f64 * 2.3);
        let mut union = DMatrix::zeros(7, 1);
        union.rows_mut(0, 4).copy_from(&a);
        union.rows_mut(4, 3).copy_from(&b);
        let all = rep.eval(&union).unwrap();
        assert_eq!(all.rows(0, 4).into_owned(), rep.eval(&a).unwrap());
        assert_eq!(all.rows(4, 3).into_owned(), rep.eval(&b).unwrap());
        // matches the batched evaluation to rounding
        assert!((samples.eval(&union).unwrap().column(1) - all).amax() < 1e-12);
    }

    #[test]
    fn far_away_samples_revert_to_prior() {
        let (model, data) = instance(4, 12, 0.2);
        let samples = draw_posterior_samples(&model, &data, &exact_cfg(PriorSource::default(), 2, 4)).unwrap();
        let rep = samples.get(0);
        let far = DMatrix::from_element(1, 1, data.x.max() + 20.0 * 1.3);
        let update = rep.update(&far).unwrap()[0];
        let kmax = rep.kernel.gram(&far, &data.x).unwrap().amax();
        assert!(kmax <= 1e-8);
        assert!(update.abs() <= rep.weights.lp_norm(1) * kmax);
        let prior = rep.prior.eval(&far).unwrap()[0];
        assert_eq!(rep.eval(&far).unwrap()[0], prior + update);
    }

    #[test]
    fn cg_and_sgd_routes_agree_with_exact() {
        let (model, data) = instance(5, 20, 0.5);
        let xs = DMatrix::from_fn(3, 1, |i, _| 2.0 * i as f64);
        let base = draw_posterior_samples(&model, &data, &exact_cfg(PriorSource::default(), 3, 5)).unwrap();
        let mut cfg = exact_cfg(PriorSource::default(), 3, 5);
        cfg.solver = SolverKind::Cg;
        cfg.solver_cfg.tol = 1e-10;
        let cg = draw_posterior_samples(&model, &data, &cfg).unwrap();
        assert!((cg.eval(&xs).unwrap() - base.eval(&xs).unwrap()).amax() < 1e-6);
        cfg.solver = SolverKind::Sgd;
        cfg.solver_cfg.tol = 1e-6;
        cfg.solver_cfg.max_iters = 20_000;
        cfg.solver_cfg.sgd.batch_size = 20;
        cfg.solver_cfg.sgd.step = 0.05;
        cfg.solver_cfg.sgd.clip = None;
        cfg.solver_cfg.sgd.regularizer = crate::solvers::RegularizerEstimate::Exact;
        let sgd = draw_posterior_samples(&model, &data, &cfg).unwrap();
        assert!((sgd.eval(&xs).unwrap() - base.eval(&xs).unwrap()).amax() < 1e-2);
    }

    #[test]
    fn identical_samples_give_noise_variance() {
        let vals = DMatrix::from_fn(3, 5, |i, _| i as f64);
        let m = predictive_moments(&vals, 0.3).unwrap();
        assert_eq!(m.mean, DVector::from_vec(vec![0.0, 1.0, 2.0]));
        assert!(m.variance.iter().all(|&v| v == 0.3));
        assert!(predictive_moments(&DMatrix::zeros(3, 1), 0.3).is_err());
    }

    #[test]
    fn moments_use_unbiased_variance() {
        let vals = DMatrix::from_row_slice(1, 4, &[1.0, 2.0, 3.0, 6.0]);
        let m = predictive_moments(&vals, 0.0).unwrap();
        assert_eq!(m.mean[0], 3.0);
        assert!((m.latent_variance[0] - 14.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn nll_of_perfect_unit_variance_predictions() {
        let y = DVector::from_vec(vec![0.3, -1.0]);
        let nll = gaussian_nll(&y, &y, &DVector::from_element(2, 1.0)).unwrap();
        assert!((nll - 0.918_938_533_204_672_7).abs() < 1e-12);
    }

    #[test]
    fn inducing_at_data_matches_exact_mean() {
        let (model, data) = instance(6, 32, 0.3);
        let xs = DMatrix::from_fn(6, 1, |i, _| 3.7 * i as f64);
        let y = DMatrix::from_column_slice(32, 1, data.y.as_slice());
        let (v, _) =
            inducing_weights(&model, &data.x, &data.x, &y, SolverKind::Exact, &SolverConfig::default()).unwrap();
        let kernel = model.bound_kernel().unwrap();
        let mean = kernel.gram(&xs, &data.x).unwrap() * v;
        let post = exact::posterior(&model, &data, &xs).unwrap();
        assert!((mean.column(0) - post.mean).amax() <= 1e-6);
    }

    #[test]
    fn inducing_zero_targets_give_zero_weights() {
        let (model, data) = instance(7, 10, 0.3);
        let z = data.x.rows(0, 3).into_owned();
        let (w, _) =
            inducing_weights(&model, &data.x, &z, &DMatrix::zeros(10, 2), SolverKind::Cg, &SolverConfig::default())
                .unwrap();
        assert_eq!(w, DMatrix::zeros(3, 2));
    }

    #[test]
    fn single_inducing_point_closed_form() {
        let (model, data) = instance(8, 15, 0.3);
        let z = DMatrix::from_element(1, 1, 2.2);
        let kernel = model.bound_kernel().unwrap();
        let kzx = kernel.gram(&z, &data.x).unwrap();
        let kzz = kernel.eval(&[2.2], &[2.2]).unwrap();
        let want = kzx.row(0).dot(&data.y.transpose()) / (model.noise_variance() * kzz + kzx.norm_squared());
        let y = DMatrix::from_column_slice(15, 1, data.y.as_slice());
        let cfg = SolverConfig { tol: 1e-12, ..SolverConfig::default() };
        let (v, _) = inducing_weights(&model, &data.x, &z, &y, SolverKind::Cg, &cfg).unwrap();
        assert!((v[(0, 0)] - want).abs() <= 1e-8);
    }

    #[test]
    fn inducing_samples_centre_on_inducing_mean() {
        let (model, data) = instance(9, 30, 0.2);
        let z = DMatrix::from_fn(10, 1, |i, _| i as f64 * 2.0);
        let cfg = SampleConfig { num_samples: 512, solver: SolverKind::Exact, seed: 3, ..SampleConfig::default() };
        let samples = draw_inducing_samples(&model, &data, &z, 1000, &cfg).unwrap();
        let xs = DMatrix::from_fn(4, 1, |i, _| 1.0 + 4.0 * i as f64);
        let vals = samples.eval(&xs).unwrap();
        let m = predictive_moments(&vals, model.noise_variance()).unwrap();
        let mean = samples.mean(&xs).unwrap();
        for i in 0..4 {
            let se = (m.latent_variance[i] / 512.0).sqrt();
            assert!((m.mean[i] - mean[i]).abs() <= 5.0 * se + 0.02);
        }
    }
}
