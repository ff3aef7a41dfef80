//! Marginal-likelihood optimisation with stochastic gradient estimates.
//!
//! The gradient of log p(y | θ) is
//! `½ vᵀ(∂H/∂θ_k)v − ½ tr(H⁻¹ ∂H/∂θ_k)` with `v = H⁻¹y`. The trace is
//! estimated from probe systems solved in the same batch as `v`:
//!
//! * standard: `z ~ N(0, I)`, term `zᵀ(∂H/∂θ_k)H⁻¹z`;
//! * pathwise: `ξ = f_X + ε ~ N(0, H)`, `ẑ = H⁻¹ξ`, term `ẑᵀ(∂H/∂θ_k)ẑ`.
//!
//! Pathwise probe solutions double as posterior-sample weights. Probe
//! randomness is stored θ-free so warm starts see the same systems at every
//! outer step.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{dim_check, GpError, Result};
use crate::exact;
use crate::features::{FeatureDraws, FeatureVariant, DEFAULT_FEATURES};
use crate::kernel::{Hyperparameters, ModelSpec, Points, DEFAULT_BLOCK_ROWS};
use crate::linalg::{cholesky, cholesky_with_jitter};
use crate::pathwise::{PosteriorSamples, PriorBatch, DENSE_OPERATOR_LIMIT};
use crate::solvers::{operator_for, solve_rescaled, Criterion, SolverConfig, SolverKind, SolverReport, Termination};
use crate::Data;

/// Default number of probe vectors.
pub const DEFAULT_PROBES: usize = 64;

/// Trace estimator family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Standard,
    Pathwise,
}

impl std::str::FromStr for EstimatorKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "standard" => Ok(EstimatorKind::Standard),
            "pathwise" => Ok(EstimatorKind::Pathwise),
            other => Err(format!("unknown estimator '{other}'")),
        }
    }
}

/// θ-free randomness behind pathwise prior samples at the training inputs.
#[derive(Debug, Clone)]
pub enum PathwisePrior {
    /// Random-feature draws and feature weights (one column per probe).
    Fourier { draws: FeatureDraws, weights: DMatrix<f64> },
    /// Standard normals mapped through the Cholesky factor of K_XX.
    Exact { normals: DMatrix<f64> },
}

/// Fixed probe randomness.
#[derive(Debug, Clone)]
pub enum ProbeSet {
    Standard { z: DMatrix<f64> },
    Pathwise { prior: PathwisePrior, noise: DMatrix<f64> },
}

fn normals(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

impl ProbeSet {
    /// `s` standard-normal probes of length `n`.
    pub fn standard(n: usize, s: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ProbeSet::Standard { z: normals(&mut rng, n, s) }
    }

    /// Pathwise probes with random-feature priors, falling back to exact
    /// joint sampling when the kernel has no feature map.
    pub fn pathwise(model: &ModelSpec, n: usize, s: usize, num_features: usize, seed: u64) -> Result<Self> {
        let kernel = model.bound_kernel()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let feature_seed = rand::Rng::random::<u64>(&mut rng);
        let prior = match FeatureDraws::sample(&kernel, num_features, FeatureVariant::SinCos, feature_seed) {
            Ok(draws) => {
                let width = draws.bind(&kernel)?.feature_dim();
                PathwisePrior::Fourier { draws, weights: normals(&mut rng, width, s) }
            }
            Err(GpError::Unsupported(_)) => PathwisePrior::Exact { normals: normals(&mut rng, n, s) },
            Err(e) => return Err(e),
        };
        Ok(ProbeSet::Pathwise { prior, noise: normals(&mut rng, n, s) })
    }

    /// Pathwise probes with exact joint prior samples.
    pub fn pathwise_exact(n: usize, s: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prior = PathwisePrior::Exact { normals: normals(&mut rng, n, s) };
        ProbeSet::Pathwise { prior, noise: normals(&mut rng, n, s) }
    }

    pub fn kind(&self) -> EstimatorKind {
        match self {
            ProbeSet::Standard { .. } => EstimatorKind::Standard,
            ProbeSet::Pathwise { .. } => EstimatorKind::Pathwise,
        }
    }

    pub fn count(&self) -> usize {
        match self {
            ProbeSet::Standard { z } => z.ncols(),
            ProbeSet::Pathwise { noise, .. } => noise.ncols(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            ProbeSet::Standard { z } => z.nrows(),
            ProbeSet::Pathwise { noise, .. } => noise.nrows(),
        }
    }

    /// Prior part of the pathwise probes at the current θ.
    pub fn prior_batch(&self, model: &ModelSpec, x: &DMatrix<f64>) -> Result<Option<PriorBatch>> {
        let ProbeSet::Pathwise { prior, .. } = self else { return Ok(None) };
        let kernel = model.bound_kernel()?;
        Ok(Some(match prior {
            PathwisePrior::Fourier { draws, weights } => {
                PriorBatch::Features { features: Arc::new(draws.bind(&kernel)?), weights: weights.clone() }
            }
            PathwisePrior::Exact { normals } => {
                let l = cholesky_with_jitter(&kernel.gram(x, x)?)?.l();
                PriorBatch::Tabulated { points: Arc::new(x.clone()), values: l * normals }
            }
        }))
    }

    /// Probe right-hand sides at the current θ: z, or ξ = f_X + σw.
    pub fn rhs(&self, model: &ModelSpec, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        dim_check(x.nrows() == self.dim(), || format!("{} inputs for probes of length {}", x.nrows(), self.dim()))?;
        match self {
            ProbeSet::Standard { z } => Ok(z.clone()),
            ProbeSet::Pathwise { noise, .. } => {
                let f = self.prior_batch(model, x)?.expect("pathwise").eval(x)?;
                Ok(f + noise * model.noise_scale())
            }
        }
    }

    /// Hash of the stored randomness, for checking it never changes.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        let feed = |m: &DMatrix<f64>, h: &mut DefaultHasher| m.iter().for_each(|v| v.to_bits().hash(h));
        match self {
            ProbeSet::Standard { z } => feed(z, &mut h),
            ProbeSet::Pathwise { prior, noise } => {
                match prior {
                    PathwisePrior::Fourier { draws, weights } => {
                        draws.seed().hash(&mut h);
                        feed(weights, &mut h);
                    }
                    PathwisePrior::Exact { normals } => feed(normals, &mut h),
                }
                feed(noise, &mut h);
            }
        }
        h.finish()
    }
}

/// Per-coordinate pieces of a gradient estimate.
#[derive(Debug, Clone)]
pub struct GradientParts {
    /// ½ vᵀ(∂H/∂θ_k)v.
    pub data_term: DVector<f64>,
    /// Per-probe trace estimates of tr(H⁻¹ ∂H/∂θ_k), parameters by probes.
    pub trace_terms: DMatrix<f64>,
    /// data_term − ½ mean(trace_terms).
    pub grad: DVector<f64>,
}

/// Assembles the gradient over constrained θ from solutions of
/// H[v, s₁…s_s] = [y, b₁…b_s], where b are the probe right-hand sides.
pub fn assemble_gradient(
    model: &ModelSpec,
    x: &DMatrix<f64>,
    kind: EstimatorKind,
    probe_rhs: &DMatrix<f64>,
    solutions: &DMatrix<f64>,
) -> Result<GradientParts> {
    let n = x.nrows();
    let s = probe_rhs.ncols();
    dim_check(solutions.nrows() == n && solutions.ncols() == s + 1 && probe_rhs.nrows() == n, || {
        "solution and probe shapes disagree".into()
    })?;
    let kernel = model.bound_kernel()?;
    let p = kernel.num_params();
    let left = match kind {
        EstimatorKind::Standard => {
            let mut u = solutions.clone();
            u.columns_mut(1, s).copy_from(probe_rhs);
            u
        }
        EstimatorKind::Pathwise => solutions.clone(),
    };
    let forms = kernel.param_grad_quadratic_forms(&Points::from_matrix(x), &left, solutions, DEFAULT_BLOCK_ROWS);
    let two_sigma = 2.0 * model.noise_scale();
    let mut data_term = DVector::zeros(p + 1);
    let mut trace_terms = DMatrix::zeros(p + 1, s);
    for k in 0..p {
        data_term[k] = 0.5 * forms[(k, 0)];
        for j in 0..s {
            trace_terms[(k, j)] = forms[(k, j + 1)];
        }
    }
    data_term[p] = 0.5 * two_sigma * solutions.column(0).norm_squared();
    for j in 0..s {
        trace_terms[(p, j)] = two_sigma * left.column(j + 1).dot(&solutions.column(j + 1));
    }
    let grad = if s > 0 { &data_term - trace_terms.column_mean() * 0.5 } else { data_term.clone() };
    Ok(GradientParts { data_term, trace_terms, grad })
}

/// A stochastic gradient estimate and the solves behind it.
#[derive(Debug, Clone)]
pub struct GradEstimate {
    pub parts: GradientParts,
    /// Solutions [v, s₁…s_s], kept for warm starts.
    pub solutions: DMatrix<f64>,
    pub report: SolverReport,
}

impl GradEstimate {
    pub fn grad(&self) -> &DVector<f64> {
        &self.parts.grad
    }

    pub fn reliable(&self) -> bool {
        self.report.termination != Termination::Divergence
    }
}

fn estimate(
    model: &ModelSpec,
    data: &Data,
    probes: &ProbeSet,
    kind: SolverKind,
    cfg: &SolverConfig,
    warm: Option<&DMatrix<f64>>,
) -> Result<GradEstimate> {
    let n = data.len();
    let s = probes.count();
    let probe_rhs = probes.rhs(model, &data.x)?;
    let mut rhs = DMatrix::zeros(n, s + 1);
    rhs.set_column(0, &data.y);
    rhs.columns_mut(1, s).copy_from(&probe_rhs);
    let op = operator_for(model, &data.x, DENSE_OPERATOR_LIMIT)?;
    let sol = solve_rescaled(kind, op.as_ref(), &rhs, warm, cfg)?;
    let parts = assemble_gradient(model, &data.x, probes.kind(), &probe_rhs, &sol.v)?;
    Ok(GradEstimate { parts, solutions: sol.v, report: sol.report })
}

/// Gradient estimate with standard Gaussian probes.
pub fn grad_estimate_standard(
    model: &ModelSpec,
    data: &Data,
    probes: &ProbeSet,
    kind: SolverKind,
    cfg: &SolverConfig,
    warm: Option<&DMatrix<f64>>,
) -> Result<GradEstimate> {
    if probes.kind() != EstimatorKind::Standard {
        return Err(GpError::InvalidParameter("standard estimator needs standard probes".into()));
    }
    estimate(model, data, probes, kind, cfg, warm)
}

/// Gradient estimate with pathwise probes; the probe solutions also give
/// posterior samples without further solves.
pub fn grad_estimate_pathwise(
    model: &ModelSpec,
    data: &Data,
    probes: &ProbeSet,
    kind: SolverKind,
    cfg: &SolverConfig,
    warm: Option<&DMatrix<f64>>,
) -> Result<(GradEstimate, PosteriorSamples)> {
    if probes.kind() != EstimatorKind::Pathwise {
        return Err(GpError::InvalidParameter("pathwise estimator needs pathwise probes".into()));
    }
    let est = estimate(model, data, probes, kind, cfg, warm)?;
    let prior = probes.prior_batch(model, &data.x)?.expect("pathwise");
    let samples = PosteriorSamples::from_solutions(
        prior,
        Arc::new(model.bound_kernel()?),
        Arc::new(data.x.clone()),
        &est.solutions,
        model.noise_variance(),
        est.report.clone(),
    )?;
    Ok((est, samples))
}

/// Monte-Carlo mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_err: f64,
}

impl McEstimate {
    pub fn from_samples(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        McEstimate { mean, std_err: (var / n).sqrt() }
    }
}

/// Expected squared H-norm distance ‖0 − H⁻¹b‖²_H = bᵀH⁻¹b from a zero
/// initialisation, for standard (b = z) or pathwise (b = ξ) probes.
pub fn initial_distance_stats(
    model: &ModelSpec,
    x: &DMatrix<f64>,
    kind: EstimatorKind,
    trials: usize,
    seed: u64,
) -> Result<McEstimate> {
    if trials < 2 {
        return Err(GpError::InvalidParameter("at least two trials are needed".into()));
    }
    let n = x.nrows();
    let chol = cholesky(&model.h_matrix(x)?)?;
    let probes = match kind {
        EstimatorKind::Standard => ProbeSet::standard(n, trials, seed),
        EstimatorKind::Pathwise => ProbeSet::pathwise_exact(n, trials, seed),
    };
    let b = probes.rhs(model, x)?;
    let sol = chol.solve(&b);
    let values: Vec<f64> = (0..trials).map(|j| b.column(j).dot(&sol.column(j))).collect();
    Ok(McEstimate::from_samples(&values))
}

/// Where the outer gradient comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientSource {
    /// Dense Cholesky gradient.
    Exact,
    Estimated(EstimatorKind),
}

/// Outer-loop settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuterConfig {
    pub steps: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub gradient: GradientSource,
    pub num_probes: usize,
    pub num_features: usize,
    pub solver: SolverKind,
    pub solver_cfg: SolverConfig,
    /// Initialise each solve at the previous step's solutions; probes are
    /// then fixed for the whole run. Without it probes are redrawn per step.
    pub warm_start: bool,
    pub seed: u64,
    /// Record the exact MLL per step (dense, small problems only).
    pub track_exact_mll: bool,
    /// Consecutive divergent solves tolerated before aborting.
    pub max_divergences: usize,
}

impl Default for OuterConfig {
    fn default() -> Self {
        OuterConfig {
            steps: 100,
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            gradient: GradientSource::Estimated(EstimatorKind::Pathwise),
            num_probes: DEFAULT_PROBES,
            num_features: DEFAULT_FEATURES,
            solver: SolverKind::Cg,
            solver_cfg: SolverConfig { criterion: Criterion::Split, ..SolverConfig::default() },
            warm_start: true,
            seed: 0,
            track_exact_mll: false,
            max_divergences: 3,
        }
    }
}

/// Adam moments over the unconstrained parameters ν.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: usize,
}

impl Adam {
    pub fn new(dim: usize) -> Self {
        Adam { m: vec![0.0; dim], v: vec![0.0; dim], t: 0 }
    }

    /// Ascent step on `params` along `grad`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], cfg: &OuterConfig) {
        self.t += 1;
        let b1t = 1.0 - cfg.beta1.powi(self.t as i32);
        let b2t = 1.0 - cfg.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * grad[i];
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
            params[i] += cfg.lr * (self.m[i] / b1t) / ((self.v[i] / b2t).sqrt() + cfg.eps);
        }
    }
}

/// Outer-loop state between steps.
#[derive(Debug, Clone)]
pub struct OuterState {
    pub hyper: Hyperparameters,
    pub adam: Adam,
    pub step: usize,
    /// Previous solutions, n × (s + 1).
    pub warm: Option<DMatrix<f64>>,
    pub consecutive_divergences: usize,
}

impl OuterState {
    pub fn new(model: &ModelSpec) -> Self {
        OuterState {
            hyper: model.hyper.clone(),
            adam: Adam::new(model.num_params()),
            step: 0,
            warm: None,
            consecutive_divergences: 0,
        }
    }
}

/// One outer step of the trajectory log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// Constrained θ at which the gradient was taken.
    pub theta: Vec<f64>,
    pub noise_variance: f64,
    pub grad: Vec<f64>,
    pub mean_residual: Option<f64>,
    pub probe_residual: Option<f64>,
    pub iterations: usize,
    pub epochs: f64,
    pub wall_time: f64,
    pub termination: Option<Termination>,
    pub skipped: bool,
    pub exact_mll: Option<f64>,
    pub probe_fingerprint: Option<u64>,
}

/// Result of [`optimize`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trajectory {
    pub records: Vec<StepRecord>,
    pub model: ModelSpec,
    pub total_iterations: usize,
    pub total_epochs: f64,
    pub skipped_steps: usize,
}

/// Maximises the log marginal likelihood with Adam over softplus-unconstrained
/// hyperparameters.
pub fn optimize(model0: &ModelSpec, data: &Data, cfg: &OuterConfig) -> Result<Trajectory> {
    optimize_with(model0, data, cfg, |_| {})
}

/// [`optimize`] with a callback invoked after every step.
pub fn optimize_with<F: FnMut(&StepRecord)>(
    model0: &ModelSpec,
    data: &Data,
    cfg: &OuterConfig,
    mut on_step: F,
) -> Result<Trajectory> {
    cfg.solver_cfg.validate()?;
    if !(cfg.lr > 0.0) {
        return Err(GpError::InvalidParameter("learning rate must be positive".into()));
    }
    let n = data.len();
    let mut state = OuterState::new(model0);
    let mut records = Vec::with_capacity(cfg.steps);
    let mut total_iterations = 0;
    let mut total_epochs = 0.0;
    let mut skipped_steps = 0;
    let mut fixed: Option<ProbeSet> = None;

    for step in 0..cfg.steps {
        let start = Instant::now();
        let model = model0.with_hyper(state.hyper.clone())?;
        let exact_mll = if cfg.track_exact_mll { Some(exact::mll(&model, data)?) } else { None };
        let mut record = StepRecord {
            step,
            theta: state.hyper.theta(),
            noise_variance: model.noise_variance(),
            grad: Vec::new(),
            mean_residual: None,
            probe_residual: None,
            iterations: 0,
            epochs: 0.0,
            wall_time: 0.0,
            termination: None,
            skipped: false,
            exact_mll,
            probe_fingerprint: None,
        };
        let grad = match cfg.gradient {
            GradientSource::Exact => Some(exact::mll_grad(&model, data)?),
            GradientSource::Estimated(kind) => {
                let probe_seed = if cfg.warm_start { cfg.seed } else { cfg.seed.wrapping_add(step as u64) };
                let probes = match (&fixed, cfg.warm_start) {
                    (Some(p), true) => p.clone(),
                    _ => {
                        let p = match kind {
                            EstimatorKind::Standard => ProbeSet::standard(n, cfg.num_probes, probe_seed),
                            EstimatorKind::Pathwise => {
                                ProbeSet::pathwise(&model, n, cfg.num_probes, cfg.num_features, probe_seed)?
                            }
                        };
                        if cfg.warm_start {
                            fixed = Some(p.clone());
                        }
                        p
                    }
                };
                record.probe_fingerprint = Some(probes.fingerprint());
                let warm = if cfg.warm_start { state.warm.as_ref() } else { None };
                let est = match estimate(&model, data, &probes, cfg.solver, &cfg.solver_cfg, warm) {
                    Ok(e) => Some(e),
                    Err(GpError::Divergence { .. }) | Err(GpError::Numerical(_)) => None,
                    Err(e) => return Err(e),
                };
                match est {
                    Some(est) => {
                        record.mean_residual = Some(est.report.mean_residual);
                        record.probe_residual = est.report.probe_residual;
                        record.iterations = est.report.iterations;
                        record.epochs = est.report.epochs;
                        record.termination = Some(est.report.termination);
                        total_iterations += est.report.iterations;
                        total_epochs += est.report.epochs;
                        let ok = est.reliable() && est.parts.grad.iter().all(|g| g.is_finite());
                        if ok {
                            state.warm = Some(est.solutions);
                            Some(est.parts.grad)
                        } else {
                            None
                        }
                    }
                    None => {
                        record.termination = Some(Termination::Divergence);
                        None
                    }
                }
            }
        };
        match grad {
            Some(g) => {
                state.consecutive_divergences = 0;
                let jac = state.hyper.jacobian_diag();
                let g_nu: Vec<f64> = g.iter().zip(&jac).map(|(a, b)| a * b).collect();
                let mut raw = state.hyper.unconstrained().to_vec();
                state.adam.step(&mut raw, &g_nu, cfg);
                state.hyper = Hyperparameters::from_unconstrained(raw)?;
                record.grad = g.iter().copied().collect();
            }
            None => {
                record.skipped = true;
                skipped_steps += 1;
                state.consecutive_divergences += 1;
                if state.consecutive_divergences >= cfg.max_divergences {
                    return Err(GpError::Divergence {
                        iterations: step + 1,
                        residual: record.probe_residual.or(record.mean_residual).unwrap_or(f64::INFINITY),
                    });
                }
            }
        }
        state.step = step + 1;
        record.wall_time = start.elapsed().as_secs_f64();
        on_step(&record);
        records.push(record);
    }
    let model = model0.with_hyper(state.hyper)?;
    Ok(Trajectory { records, model, total_iterations, total_epochs, skipped_steps })
}
