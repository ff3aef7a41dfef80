//! Primal stochastic gradient descent on the representer-weight objectives.
//!
//! Both the mean and the sample objective have the form
//! ½‖t − Kα‖² + (σ²/2)‖α − c‖²_K, with minimiser (K + σ²I)⁻¹(t + σ²c).
//! The data term is mini-batched over rows of K and the regulariser is
//! estimated with fresh random Fourier features every step.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::operator::SpdOperator;
use super::{criterion_met, finish, LinearSystemBatch, Solution, SolverConfig, Termination, DIVERGENCE_FACTOR};
use crate::error::{dim_check, GpError, Result};
use crate::features::{FeatureDraws, FeatureVariant};

/// Estimator for the regulariser gradient σ²K(α − c).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegularizerEstimate {
    /// ΦΦᵀ with `num_features` fresh random features per step; falls back
    /// to random coordinates when the operator has no stationary kernel.
    #[default]
    Features,
    /// (n/q) Σ_{j∈J} K[:, j] u_j over `num_features` random coordinates.
    Coordinates,
    /// Exact K·u (one epoch per step).
    Exact,
}

/// Solves H V = B by minimising ½‖b − Kv‖² + (σ²/2)‖v‖²_K per column.
pub fn solve_sgd_primal_mean(sys: &LinearSystemBatch<'_>, cfg: &SolverConfig) -> Result<Solution> {
    let zeros = DMatrix::zeros(sys.dim(), sys.columns());
    run(sys.op, &sys.rhs, &zeros, sys.init.as_ref(), cfg)
}

/// Minimises the variance-reduced sample objective
/// ½‖f_X − Kα‖² + (σ²/2)‖α − δ‖²_K with δ = w/σ, whose minimiser is
/// (K + σ²I)⁻¹(f_X + σw). Columns of `f_x` and `w` are independent samples.
pub fn solve_sgd_primal_sample(
    op: &dyn SpdOperator,
    f_x: &DMatrix<f64>,
    w: &DMatrix<f64>,
    init: Option<&DMatrix<f64>>,
    cfg: &SolverConfig,
) -> Result<Solution> {
    dim_check(f_x.shape() == w.shape(), || "prior values and noise draws differ in shape".into())?;
    let sigma = op.noise_variance().sqrt();
    if !(sigma > 0.0) {
        return Err(GpError::InvalidParameter("sample objective needs positive noise".into()));
    }
    run(op, f_x, &(w / sigma), init, cfg)
}

/// General form with explicit targets t and regulariser centres c.
pub fn solve_sgd_with_center(
    op: &dyn SpdOperator,
    targets: &DMatrix<f64>,
    centers: &DMatrix<f64>,
    init: Option<&DMatrix<f64>>,
    cfg: &SolverConfig,
) -> Result<Solution> {
    run(op, targets, centers, init, cfg)
}

fn regularizer(
    op: &dyn SpdOperator,
    u: &DMatrix<f64>,
    mode: RegularizerEstimate,
    q: usize,
    rng: &mut ChaCha8Rng,
) -> Result<DMatrix<f64>> {
    let n = op.dim();
    let mode = match (mode, op.kernel_context()) {
        (RegularizerEstimate::Features, None) => RegularizerEstimate::Coordinates,
        (m, _) => m,
    };
    match mode {
        RegularizerEstimate::Exact => Ok(op.apply_kernel(u)),
        RegularizerEstimate::Coordinates => {
            let idx: Vec<usize> = (0..q).map(|_| rng.random_range(0..n)).collect();
            let rows = op.kernel_rows(&idx);
            let mut sub = u.select_rows(&idx);
            sub *= n as f64 / q as f64;
            Ok(rows.tr_mul(&sub))
        }
        RegularizerEstimate::Features => {
            let (kernel, x) = op.kernel_context().expect("checked above");
            let seed = rng.random::<u64>();
            let draws = match FeatureDraws::sample(kernel, q, FeatureVariant::SinCos, seed) {
                Ok(d) => d,
                Err(GpError::Unsupported(_)) => {
                    return regularizer(op, u, RegularizerEstimate::Coordinates, q, rng);
                }
                Err(e) => return Err(e),
            };
            let phi = draws.bind(kernel)?.feature_matrix(x)?;
            Ok(&phi * (phi.transpose() * u))
        }
    }
}

fn run(
    op: &dyn SpdOperator,
    targets: &DMatrix<f64>,
    centers: &DMatrix<f64>,
    init: Option<&DMatrix<f64>>,
    cfg: &SolverConfig,
) -> Result<Solution> {
    cfg.validate()?;
    dim_check(targets.shape() == centers.shape(), || "targets and centres differ in shape".into())?;
    let start = Instant::now();
    let noise = op.noise_variance();
    let rhs = targets + centers * noise;
    let sys = LinearSystemBatch::new(op, rhs)?.with_init(init.cloned())?;
    let e0 = op.epochs();
    let n = sys.dim();
    let cols = sys.columns();
    let sgd = cfg.sgd;
    let p = sgd.batch_size.min(n);
    let full_batch = sgd.batch_size >= n;
    let refresh = cfg.refresh_every.unwrap_or((n / p).max(1)).max(1);
    let budget = cfg.max_epochs.unwrap_or(f64::INFINITY);
    let avg_start = ((1.0 - sgd.polyak_fraction) * cfg.max_iters as f64).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut v = sys.initial();
    let mut mom = DMatrix::<f64>::zeros(n, cols);
    let mut sum = DMatrix::<f64>::zeros(n, cols);
    let mut count = 0usize;
    let mut r_est = if sys.init.is_some() { &sys.rhs - op.apply(&v) } else { sys.rhs.clone() };
    let initial = r_est.norm().max(f64::MIN_POSITIVE);
    let mut rel = sys.relative_all(&r_est);
    let mut history = Vec::new();
    let mut steps = 0;
    let mut termination = Termination::Budget;
    let step_cost = p as f64 / n as f64;

    let current = |v: &DMatrix<f64>, sum: &DMatrix<f64>, count: usize| {
        if count > 0 {
            sum / count as f64
        } else {
            v.clone()
        }
    };

    if criterion_met(cfg.criterion, &rel, cfg.tol) {
        let report = finish(&sys, &v, 0, 0.0, Termination::Tolerance, start, history);
        return Ok(Solution { v, report });
    }
    while steps < cfg.max_iters {
        if op.epochs() - e0 + step_cost > budget + 1e-9 {
            break;
        }
        let look = &v + &mom * sgd.momentum;
        let idx: Vec<usize> =
            if full_batch { (0..n).collect() } else { (0..p).map(|_| rng.random_range(0..n)).collect() };
        let rows = op.kernel_rows(&idx);
        let k_look = &rows * &look;
        let mut resid = targets.select_rows(&idx) - &k_look;
        for (k, &i) in idx.iter().enumerate() {
            for c in 0..cols {
                r_est[(i, c)] = resid[(k, c)] + noise * (centers[(i, c)] - look[(i, c)]);
            }
        }
        resid *= -(n as f64) / p as f64;
        let mut grad = rows.tr_mul(&resid);
        let reg = regularizer(op, &(&look - centers), sgd.regularizer, sgd.num_features, &mut rng)?;
        grad += reg * noise;
        grad /= n as f64;
        if let Some(clip) = sgd.clip {
            for mut c in grad.column_iter_mut() {
                let norm = c.norm();
                if norm > clip {
                    c *= clip / norm;
                }
            }
        }
        mom *= sgd.momentum;
        mom -= &grad * sgd.step;
        v += &mom;
        steps += 1;
        if steps > avg_start {
            sum += &v;
            count += 1;
        }
        let est = r_est.norm();
        if !est.is_finite() || est > DIVERGENCE_FACTOR * initial {
            termination = Termination::Divergence;
            break;
        }
        if steps % refresh == 0 && op.epochs() - e0 + 1.0 <= budget + 1e-9 {
            let cur = current(&v, &sum, count);
            rel = sys.relative_all(&(&sys.rhs - op.apply(&cur)));
            if cfg.record_history {
                history.push(rel.iter().cloned().fold(0.0, f64::max));
            }
            if criterion_met(cfg.criterion, &rel, cfg.tol) {
                termination = Termination::Tolerance;
                break;
            }
        }
    }
    let out = current(&v, &sum, count);
    let epochs = op.epochs() - e0;
    let report = finish(&sys, &out, steps, epochs, termination, start, history);
    Ok(Solution { v: out, report })
}

/// Which sampling objective a gradient refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleObjective {
    /// ½‖f_X + ε − Kα‖² + (σ²/2)‖α‖²_K with ε = σw.
    NoisyTargets,
    /// ½‖f_X − Kα‖² + (σ²/2)‖α − δ‖²_K with δ = w/σ.
    ShiftedRegularizer,
}

/// Full-batch gradient of either sampling objective.
pub fn sample_objective_gradient(
    kind: SampleObjective,
    kxx: &DMatrix<f64>,
    f_x: &DVector<f64>,
    w: &DVector<f64>,
    sigma: f64,
    alpha: &DVector<f64>,
) -> DVector<f64> {
    let k_alpha = kxx * alpha;
    match kind {
        SampleObjective::NoisyTargets => {
            let t = f_x + w * sigma;
            -(kxx * (t - &k_alpha)) + k_alpha * (sigma * sigma)
        }
        SampleObjective::ShiftedRegularizer => {
            let delta = w / sigma;
            -(kxx * (f_x - &k_alpha)) + kxx * (alpha - delta) * (sigma * sigma)
        }
    }
}

/// Mini-batch gradient estimate over rows `batch`; the regulariser uses
/// ΦΦᵀ when `features` is given and the exact K otherwise.
#[allow(clippy::too_many_arguments)]
pub fn stochastic_sample_gradient(
    kind: SampleObjective,
    kxx: &DMatrix<f64>,
    f_x: &DVector<f64>,
    w: &DVector<f64>,
    sigma: f64,
    alpha: &DVector<f64>,
    batch: &[usize],
    features: Option<&DMatrix<f64>>,
) -> DVector<f64> {
    let n = kxx.nrows();
    let scale = n as f64 / batch.len() as f64;
    let mut grad = DVector::zeros(n);
    for &i in batch {
        let ki = kxx.row(i);
        let target = match kind {
            SampleObjective::NoisyTargets => f_x[i] + sigma * w[i],
            SampleObjective::ShiftedRegularizer => f_x[i],
        };
        let resid = target - ki.dot(&alpha.transpose());
        grad.axpy(-scale * resid, &ki.transpose(), 1.0);
    }
    let u = match kind {
        SampleObjective::NoisyTargets => alpha.clone(),
        SampleObjective::ShiftedRegularizer => alpha - w / sigma,
    };
    let reg = match features {
        Some(phi) => phi * (phi.transpose() * &u),
        None => kxx * &u,
    };
    grad + reg * (sigma * sigma)
}
