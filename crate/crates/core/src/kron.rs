//! Latent Kronecker structure for gridded data with missing cells.
//!
//! Grid cells are flattened row-major: cell (i, j) of the p × q grid over
//! S × T has index `i·q + j`. Observations are a sorted subset of cells, and
//! the kernel matrix over them is `P(K_SS ⊗ K_TT)Pᵀ` for the selection `P`.
//! Products with it zero-pad, apply the Kronecker product as `A C Bᵀ` on the
//! reshaped vector, and gather the observed cells.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{dim_check, GpError, Result};
use crate::features::{FeatureDraws, FeatureVariant, FourierFeatureSet};
use crate::kernel::{Kernel, KernelExpr};
use crate::linalg::cholesky_with_jitter;
use crate::solvers::{solve_rescaled, EntryCounter, SolverConfig, SolverKind, SolverReport, SpdOperator};

/// Inputs of a product grid S × T.
#[derive(Debug, Clone, PartialEq)]
pub struct ProductGrid {
    pub s: DMatrix<f64>,
    pub t: DMatrix<f64>,
}

impl ProductGrid {
    pub fn new(s: DMatrix<f64>, t: DMatrix<f64>) -> Result<Self> {
        if s.nrows() == 0 || t.nrows() == 0 {
            return Err(GpError::InvalidParameter("grid factors need at least one point".into()));
        }
        Ok(ProductGrid { s, t })
    }

    pub fn p(&self) -> usize {
        self.s.nrows()
    }

    pub fn q(&self) -> usize {
        self.t.nrows()
    }

    /// Joint inputs [s_i, t_j] for the given cells.
    pub fn cell_inputs(&self, cells: &[usize]) -> DMatrix<f64> {
        let (ds, dt) = (self.s.ncols(), self.t.ncols());
        let q = self.q();
        DMatrix::from_fn(cells.len(), ds + dt, |r, c| {
            let (i, j) = (cells[r] / q, cells[r] % q);
            if c < ds {
                self.s[(i, c)]
            } else {
                self.t[(j, c - ds)]
            }
        })
    }
}

/// Observed cells of a p × q grid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObservationMask {
    p: usize,
    q: usize,
    cells: Vec<usize>,
}

impl ObservationMask {
    pub fn new(p: usize, q: usize, cells: Vec<usize>) -> Result<Self> {
        if p == 0 || q == 0 {
            return Err(GpError::InvalidParameter("grid dimensions must be positive".into()));
        }
        if cells.is_empty() {
            return Err(GpError::InvalidParameter("mask must observe at least one cell".into()));
        }
        if cells.windows(2).any(|w| w[0] >= w[1]) || *cells.last().expect("non-empty") >= p * q {
            return Err(GpError::InvalidParameter("mask cells must be strictly increasing and inside the grid".into()));
        }
        Ok(ObservationMask { p, q, cells })
    }

    pub fn full(p: usize, q: usize) -> Result<Self> {
        ObservationMask::new(p, q, (0..p * q).collect())
    }

    /// Keeps a uniformly random subset of round((1 − γ)pq) cells, at least one.
    pub fn random(p: usize, q: usize, missing: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&missing) {
            return Err(GpError::InvalidParameter("missing ratio must lie in [0, 1)".into()));
        }
        let total = p * q;
        let keep = (((1.0 - missing) * total as f64).round() as usize).clamp(1, total.max(1));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cells = sample(&mut rng, total, keep).into_vec();
        cells.sort_unstable();
        ObservationMask::new(p, q, cells)
    }

    pub fn cells(&self) -> &[usize] {
        &self.cells
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn grid_shape(&self) -> (usize, usize) {
        (self.p, self.q)
    }

    /// γ = 1 − n / pq.
    pub fn missing_ratio(&self) -> f64 {
        1.0 - self.cells.len() as f64 / (self.p * self.q) as f64
    }

    /// Pᵀ: zero-pads observed values onto the full grid.
    pub fn scatter(&self, v: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.p * self.q, v.ncols());
        for (r, &c) in self.cells.iter().enumerate() {
            out.row_mut(c).copy_from(&v.row(r));
        }
        out
    }

    /// P: selects observed cells.
    pub fn gather(&self, v: &DMatrix<f64>) -> DMatrix<f64> {
        v.select_rows(&self.cells)
    }
}

/// (A ⊗ B)v for A: p'×p, B: q'×q and v of length pq, as vec(A C Bᵀ) with C
/// the row-major p × q reshape of v. Returns the product and the number of
/// scalar multiplications.
pub fn kron_mvm_counted(a: &DMatrix<f64>, b: &DMatrix<f64>, v: &DVector<f64>) -> Result<(DVector<f64>, u64)> {
    let (p, q) = (a.ncols(), b.ncols());
    dim_check(v.len() == p * q, || format!("vector of length {} for a {}·{} grid", v.len(), p, q))?;
    let c = DMatrix::from_row_slice(p, q, v.as_slice());
    let r = a * c * b.transpose();
    let flops = (a.nrows() * p * q + a.nrows() * q * b.nrows()) as u64;
    Ok((DVector::from_column_slice(r.transpose().as_slice()), flops))
}

/// (A ⊗ B)v without materialising the Kronecker product.
pub fn kron_mvm(a: &DMatrix<f64>, b: &DMatrix<f64>, v: &DVector<f64>) -> Result<DVector<f64>> {
    kron_mvm_counted(a, b, v).map(|(out, _)| out)
}

/// Column-wise [`kron_mvm`].
pub fn kron_mvm_batch(a: &DMatrix<f64>, b: &DMatrix<f64>, v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut out = DMatrix::zeros(a.nrows() * b.nrows(), v.ncols());
    for (j, col) in v.column_iter().enumerate() {
        out.set_column(j, &kron_mvm(a, b, &col.into_owned())?);
    }
    Ok(out)
}

/// P(K_S ⊗ K_T)Pᵀ + σ²I as a solver operator.
#[derive(Debug)]
pub struct LatentKroneckerOperator {
    ks: DMatrix<f64>,
    kt: DMatrix<f64>,
    mask: ObservationMask,
    noise: f64,
    counter: EntryCounter,
    flops: AtomicU64,
}

impl LatentKroneckerOperator {
    pub fn new(ks: DMatrix<f64>, kt: DMatrix<f64>, mask: ObservationMask, noise_variance: f64) -> Result<Self> {
        dim_check(ks.is_square() && kt.is_square(), || "factor matrices must be square".into())?;
        dim_check(mask.grid_shape() == (ks.nrows(), kt.nrows()), || {
            format!("mask grid {:?} for factors {}×{}", mask.grid_shape(), ks.nrows(), kt.nrows())
        })?;
        if !(noise_variance >= 0.0) {
            return Err(GpError::InvalidParameter("noise variance must be non-negative".into()));
        }
        Ok(LatentKroneckerOperator {
            ks,
            kt,
            mask,
            noise: noise_variance,
            counter: EntryCounter::default(),
            flops: AtomicU64::new(0),
        })
    }

    pub fn mask(&self) -> &ObservationMask {
        &self.mask
    }

    pub fn factors(&self) -> (&DMatrix<f64>, &DMatrix<f64>) {
        (&self.ks, &self.kt)
    }

    /// Scalar multiplications performed by kernel products so far.
    pub fn flops(&self) -> u64 {
        self.flops.load(Ordering::Relaxed)
    }

    pub fn reset_flops(&self) {
        self.flops.store(0, Ordering::Relaxed);
    }

    /// Scalars held: both factors plus the mask.
    pub fn storage_scalars(&self) -> usize {
        self.ks.len() + self.kt.len() + self.mask.len()
    }

    /// Projected product P(K_S ⊗ K_T)Pᵀv + σ²v for one vector.
    pub fn projected_mvm(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        dim_check(v.len() == self.mask.len(), || {
            format!("vector of length {} for {} cells", v.len(), self.mask.len())
        })?;
        let m = DMatrix::from_column_slice(v.len(), 1, v.as_slice());
        Ok(self.apply(&m).column(0).into_owned())
    }

    fn entry(&self, a: usize, b: usize) -> f64 {
        let q = self.kt.nrows();
        let (ca, cb) = (self.mask.cells[a], self.mask.cells[b]);
        self.ks[(ca / q, cb / q)] * self.kt[(ca % q, cb % q)]
    }
}

impl SpdOperator for LatentKroneckerOperator {
    fn dim(&self) -> usize {
        self.mask.len()
    }

    fn noise_variance(&self) -> f64 {
        self.noise
    }

    fn apply_kernel(&self, v: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.dim() as u64;
        self.counter.add(n * n);
        let padded = self.mask.scatter(v);
        let mut full = DMatrix::zeros(padded.nrows(), padded.ncols());
        for (j, col) in padded.column_iter().enumerate() {
            let (out, f) =
                kron_mvm_counted(&self.ks, &self.kt, &col.into_owned()).expect("shapes checked at construction");
            self.flops.fetch_add(f, Ordering::Relaxed);
            full.set_column(j, &out);
        }
        self.mask.gather(&full)
    }

    fn kernel_diag(&self) -> DVector<f64> {
        DVector::from_fn(self.dim(), |a, _| self.entry(a, a))
    }

    fn kernel_rows(&self, idx: &[usize]) -> DMatrix<f64> {
        let n = self.dim();
        self.counter.add((idx.len() * n) as u64);
        DMatrix::from_fn(idx.len(), n, |r, b| self.entry(idx[r], b))
    }

    fn counter(&self) -> &EntryCounter {
        &self.counter
    }
}

/// Dense masked product computing each kernel entry on the fly; returns the
/// product and the number of entry multiplications (n² per column).
pub fn dense_masked_mvm(
    ks: &DMatrix<f64>,
    kt: &DMatrix<f64>,
    mask: &ObservationMask,
    noise_variance: f64,
    v: &DVector<f64>,
) -> Result<(DVector<f64>, u64)> {
    let n = mask.len();
    dim_check(v.len() == n, || format!("vector of length {} for {} cells", v.len(), n))?;
    let q = kt.nrows();
    let cells = mask.cells();
    let mut out = v * noise_variance;
    for (a, &ca) in cells.iter().enumerate() {
        let (i, j) = (ca / q, ca % q);
        let mut acc = 0.0;
        for (b, &cb) in cells.iter().enumerate() {
            acc += ks[(i, cb / q)] * kt[(j, cb % q)] * v[b];
        }
        out[a] += acc;
    }
    Ok((out, (n * n) as u64))
}

/// (K_S ⊗ K_T + σ²I)⁻¹B on the full grid via per-factor eigendecompositions.
pub fn kron_eig_solve(
    ks: &DMatrix<f64>,
    kt: &DMatrix<f64>,
    noise_variance: f64,
    b: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let (p, q) = (ks.nrows(), kt.nrows());
    dim_check(ks.is_square() && kt.is_square() && b.nrows() == p * q, || "shape mismatch in Kronecker solve".into())?;
    let es = SymmetricEigen::try_new(ks.clone(), f64::EPSILON, 0)
        .ok_or_else(|| GpError::Numerical("eigendecomposition of K_S failed".into()))?;
    let et = SymmetricEigen::try_new(kt.clone(), f64::EPSILON, 0)
        .ok_or_else(|| GpError::Numerical("eigendecomposition of K_T failed".into()))?;
    let (qs_t, qt_t) = (es.eigenvectors.transpose(), et.eigenvectors.transpose());
    let mut rotated = kron_mvm_batch(&qs_t, &qt_t, b)?;
    for i in 0..p {
        for j in 0..q {
            let d = es.eigenvalues[i] * et.eigenvalues[j] + noise_variance;
            if !(d > 0.0) {
                return Err(GpError::Numerical("Kronecker system is not positive definite".into()));
            }
            rotated.row_mut(i * q + j).scale_mut(1.0 / d);
        }
    }
    kron_mvm_batch(&es.eigenvectors, &et.eigenvectors, &rotated)
}

/// Missing ratios at which dense and latent-Kronecker products cost the same.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BreakEven {
    pub time: f64,
    pub memory: f64,
}

/// γ*_time = 1 − √(1/p + 1/q), γ*_mem = 1 − √(1/p² + 1/q²), clamped at 0.
pub fn break_even(p: usize, q: usize) -> Result<BreakEven> {
    if p == 0 || q == 0 {
        return Err(GpError::InvalidParameter("grid dimensions must be positive".into()));
    }
    let (p, q) = (p as f64, q as f64);
    let time = (1.0 - (1.0 / p + 1.0 / q).sqrt()).max(0.0);
    let memory = (1.0 - (1.0 / (p * p) + 1.0 / (q * q)).sqrt()).max(0.0);
    Ok(BreakEven { time, memory })
}

/// Measured costs of one product at a given missing ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MvmCost {
    pub gamma: f64,
    pub n: usize,
    pub dense_flops: u64,
    pub latent_flops: u64,
    pub dense_bytes: u64,
    pub latent_bytes: u64,
}

impl MvmCost {
    pub fn latent_faster(&self) -> bool {
        self.latent_flops < self.dense_flops
    }

    pub fn latent_smaller(&self) -> bool {
        self.latent_bytes < self.dense_bytes
    }
}

fn se_factor(points: usize) -> DMatrix<f64> {
    let x = DMatrix::from_fn(points, 1, |i, _| i as f64 / points as f64);
    Kernel::new(&KernelExpr::se(), 1, &[0.3]).expect("valid kernel").gram(&x, &x).expect("same dimension")
}

/// Runs one product per missing ratio with both the latent-Kronecker and the
/// dense masked operator and reads their counters.
pub fn mvm_cost_sweep(p: usize, q: usize, gammas: &[f64], seed: u64) -> Result<Vec<MvmCost>> {
    let ks = se_factor(p);
    let kt = se_factor(q);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    gammas
        .iter()
        .enumerate()
        .map(|(k, &gamma)| {
            let mask = ObservationMask::random(p, q, gamma, seed.wrapping_add(k as u64))?;
            let n = mask.len();
            let v = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
            let (_, dense_flops) = dense_masked_mvm(&ks, &kt, &mask, 0.0, &v)?;
            let op = LatentKroneckerOperator::new(ks.clone(), kt.clone(), mask, 0.0)?;
            op.projected_mvm(&v)?;
            Ok(MvmCost {
                gamma,
                n,
                dense_flops,
                latent_flops: op.flops(),
                dense_bytes: 8 * (n * n) as u64,
                latent_bytes: 8 * op.storage_scalars() as u64,
            })
        })
        .collect()
}

/// First swept γ at which the latent operator stops being cheaper, if any.
pub fn crossover<F: Fn(&MvmCost) -> bool>(costs: &[MvmCost], latent_wins: F) -> Option<f64> {
    costs.iter().find(|c| !latent_wins(c)).map(|c| c.gamma)
}

/// Kernels over the two grid factors and the noise variance.
#[derive(Debug, Clone)]
pub struct LatentKroneckerModel {
    pub kernel_s: Kernel,
    pub kernel_t: Kernel,
    pub noise_variance: f64,
}

impl LatentKroneckerModel {
    /// The product kernel on concatenated inputs [s, t].
    pub fn joint_kernel(&self) -> Result<Kernel> {
        let (ds, dt) = (self.kernel_s.input_dim(), self.kernel_t.input_dim());
        let expr = KernelExpr::product(vec![self.kernel_s.expr().shifted(0, ds), self.kernel_t.expr().shifted(ds, dt)]);
        let mut theta = self.kernel_s.params().to_vec();
        theta.extend_from_slice(self.kernel_t.params());
        Kernel::new(&expr, ds + dt, &theta)
    }

    pub fn operator(&self, grid: &ProductGrid, mask: ObservationMask) -> Result<LatentKroneckerOperator> {
        let ks = self.kernel_s.gram(&grid.s, &grid.s)?;
        let kt = self.kernel_t.gram(&grid.t, &grid.t)?;
        LatentKroneckerOperator::new(ks, kt, mask, self.noise_variance)
    }
}

/// Prior sampling for latent-Kronecker posterior samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LkPrior {
    /// Exact draws on the full training grid, (L_S ⊗ L_T)u.
    Exact,
    /// Random features of the product kernel, evaluable anywhere.
    Fourier { num_features: usize },
}

#[derive(Debug, Clone)]
enum LkPriorValues {
    Grid(DMatrix<f64>),
    Features { features: Arc<FourierFeatureSet>, weights: DMatrix<f64> },
}

/// Posterior samples on a product grid.
#[derive(Debug, Clone)]
pub struct LkSamples {
    model: LatentKroneckerModel,
    grid: ProductGrid,
    mask: ObservationMask,
    prior: LkPriorValues,
    pub mean_weights: DVector<f64>,
    pub weights: DMatrix<f64>,
    pub report: SolverReport,
}

impl LkSamples {
    pub fn len(&self) -> usize {
        self.weights.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.ncols() == 0
    }

    fn update(&self, s_star: &DMatrix<f64>, t_star: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let a = self.model.kernel_s.gram(s_star, &self.grid.s)?;
        let b = self.model.kernel_t.gram(t_star, &self.grid.t)?;
        kron_mvm_batch(&a, &b, &self.mask.scatter(w))
    }

    /// Samples on the query grid S* × T* (row-major), one column per sample.
    pub fn eval_grid(&self, s_star: &DMatrix<f64>, t_star: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let prior = match &self.prior {
            LkPriorValues::Grid(values) => {
                if s_star != &self.grid.s || t_star != &self.grid.t {
                    return Err(GpError::Unsupported(
                        "exact grid prior samples exist only on the training grid".into(),
                    ));
                }
                values.clone()
            }
            LkPriorValues::Features { features, weights } => {
                let query = ProductGrid { s: s_star.clone(), t: t_star.clone() };
                let cells: Vec<usize> = (0..s_star.nrows() * t_star.nrows()).collect();
                features.feature_matrix(&query.cell_inputs(&cells))? * weights
            }
        };
        Ok(prior + self.update(s_star, t_star, &self.weights)?)
    }

    /// Posterior mean on the query grid.
    pub fn mean_grid(&self, s_star: &DMatrix<f64>, t_star: &DMatrix<f64>) -> Result<DVector<f64>> {
        let w = DMatrix::from_column_slice(self.mean_weights.len(), 1, self.mean_weights.as_slice());
        Ok(self.update(s_star, t_star, &w)?.column(0).into_owned())
    }
}

/// Options for [`lk_posterior_samples`].
#[derive(Debug, Clone)]
pub struct LkSampleConfig {
    pub num_samples: usize,
    pub prior: LkPrior,
    pub solver: SolverKind,
    pub solver_cfg: SolverConfig,
    pub seed: u64,
}

impl Default for LkSampleConfig {
    fn default() -> Self {
        LkSampleConfig {
            num_samples: 64,
            prior: LkPrior::Exact,
            solver: SolverKind::Cg,
            solver_cfg: SolverConfig::default(),
            seed: 0,
        }
    }
}

/// Pathwise posterior samples with all solves through the projected operator.
pub fn lk_posterior_samples(
    model: &LatentKroneckerModel,
    grid: &ProductGrid,
    mask: &ObservationMask,
    y: &DVector<f64>,
    cfg: &LkSampleConfig,
) -> Result<LkSamples> {
    let n = mask.len();
    let s = cfg.num_samples;
    dim_check(y.len() == n, || format!("{} targets for {} observed cells", y.len(), n))?;
    if s == 0 {
        return Err(GpError::InvalidParameter("at least one sample is required".into()));
    }
    let op = model.operator(grid, mask.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let prior = match cfg.prior {
        LkPrior::Exact => {
            let (ks, kt) = op.factors();
            let ls = cholesky_with_jitter(ks)?.l();
            let lt = cholesky_with_jitter(kt)?.l();
            let u = DMatrix::from_fn(grid.p() * grid.q(), s, |_, _| StandardNormal.sample(&mut rng));
            LkPriorValues::Grid(kron_mvm_batch(&ls, &lt, &u)?)
        }
        LkPrior::Fourier { num_features } => {
            let joint = model.joint_kernel()?;
            let seed = rand::Rng::random::<u64>(&mut rng);
            let features =
                Arc::new(FeatureDraws::sample(&joint, num_features, FeatureVariant::SinCos, seed)?.bind(&joint)?);
            let weights = DMatrix::from_fn(features.feature_dim(), s, |_, _| StandardNormal.sample(&mut rng));
            LkPriorValues::Features { features, weights }
        }
    };
    let f_obs = match &prior {
        LkPriorValues::Grid(values) => mask.gather(values),
        LkPriorValues::Features { features, weights } => {
            features.feature_matrix(&grid.cell_inputs(mask.cells()))? * weights
        }
    };
    let eps = DMatrix::from_fn(n, s, |_, _| -> f64 { StandardNormal.sample(&mut rng) }) * model.noise_variance.sqrt();
    let mut rhs = DMatrix::zeros(n, s + 1);
    rhs.set_column(0, y);
    rhs.columns_mut(1, s).copy_from(&(f_obs + eps));
    let sol = solve_rescaled(cfg.solver, &op, &rhs, None, &cfg.solver_cfg)?;
    let mean_weights = sol.v.column(0).into_owned();
    let mut weights = DMatrix::zeros(n, s);
    for j in 0..s {
        weights.set_column(j, &(&mean_weights - sol.v.column(j + 1)));
    }
    Ok(LkSamples {
        model: model.clone(),
        grid: grid.clone(),
        mask: mask.clone(),
        prior,
        mean_weights,
        weights,
        report: sol.report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exact::posterior_from_parts;
    use crate::linalg::{cholesky, kron_dense};
    use crate::solvers::{solve_cg, LinearSystemBatch};
    use proptest::prelude::*;
    use rand::Rng;

    fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        &a * a.transpose() + DMatrix::identity(n, n) * 0.1
    }

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
        DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0))
    }

    fn dense_masked(ks: &DMatrix<f64>, kt: &DMatrix<f64>, mask: &ObservationMask, noise: f64) -> DMatrix<f64> {
        let full = kron_dense(ks, kt);
        let c = mask.cells();
        DMatrix::from_fn(c.len(), c.len(), |a, b| full[(c[a], c[b])] + if a == b { noise } else { 0.0 })
    }

    #[test]
    fn identity_factors_give_identity() {
        let v = DVector::from_fn(12, |i, _| i as f64);
        assert_eq!(kron_mvm(&DMatrix::identity(3, 3), &DMatrix::identity(4, 4), &v).unwrap(), v);
    }

    #[test]
    fn matches_explicit_kronecker() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
        let b = DMatrix::from_fn(4, 4, |_, _| rng.random_range(-1.0..1.0));
        let v = random_vec(&mut rng, 12);
        let want = kron_dense(&a, &b) * &v;
        assert!((kron_mvm(&a, &b, &v).unwrap() - want).amax() < 1e-12);
    }

    #[test]
    fn rank_one_inputs_factorise() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
        let b = DMatrix::from_fn(2, 2, |_, _| rng.random_range(-1.0..1.0));
        let (x, y) = (random_vec(&mut rng, 3), random_vec(&mut rng, 2));
        let v = x.kronecker(&y);
        let want = (&a * x).kronecker(&(&b * y));
        assert!((kron_mvm(&a, &b, &v).unwrap() - want).amax() < 1e-14);
        assert!(kron_mvm(&a, &b, &random_vec(&mut rng, 5)).is_err());
    }

    #[test]
    fn full_mask_is_plain_kronecker() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (ks, kt) = (random_spd(&mut rng, 3), random_spd(&mut rng, 4));
        let op =
            LatentKroneckerOperator::new(ks.clone(), kt.clone(), ObservationMask::full(3, 4).unwrap(), 0.3).unwrap();
        let v = random_vec(&mut rng, 12);
        let want = kron_mvm(&ks, &kt, &v).unwrap() + &v * 0.3;
        assert!((op.projected_mvm(&v).unwrap() - want).amax() < 1e-12);
    }

    #[test]
    fn masked_product_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (ks, kt) = (random_spd(&mut rng, 4), random_spd(&mut rng, 5));
        let mask = ObservationMask::random(4, 5, 0.3, 7).unwrap();
        assert_eq!(mask.len(), 14);
        let dense = dense_masked(&ks, &kt, &mask, 0.2);
        let op = LatentKroneckerOperator::new(ks.clone(), kt.clone(), mask.clone(), 0.2).unwrap();
        let v = random_vec(&mut rng, 14);
        assert!((op.projected_mvm(&v).unwrap() - &dense * &v).amax() < 1e-12);
        assert!((op.to_dense() - &dense).amax() < 1e-12);
        let (d, _) = dense_masked_mvm(&ks, &kt, &mask, 0.2, &v).unwrap();
        assert!((d - &dense * &v).amax() < 1e-12);
    }

    #[test]
    fn single_cell_is_scalar() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (ks, kt) = (random_spd(&mut rng, 3), random_spd(&mut rng, 3));
        let mask = ObservationMask::new(3, 3, vec![5]).unwrap();
        let op = LatentKroneckerOperator::new(ks.clone(), kt.clone(), mask, 0.5).unwrap();
        let out = op.projected_mvm(&DVector::from_element(1, 2.0)).unwrap();
        assert!((out[0] - (ks[(1, 1)] * kt[(2, 2)] * 2.0 + 1.0)).abs() < 1e-14);
    }

    #[test]
    fn mask_validation() {
        assert!(ObservationMask::new(2, 2, vec![1, 1]).is_err());
        assert!(ObservationMask::new(2, 2, vec![4]).is_err());
        assert!(ObservationMask::new(2, 2, vec![]).is_err());
        let m = ObservationMask::random(4, 5, 0.25, 0).unwrap();
        assert!((m.missing_ratio() - 0.25).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn projected_product_sweep(p in 2usize..=8, q in 2usize..=8, g in 0usize..3, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (ks, kt) = (random_spd(&mut rng, p), random_spd(&mut rng, q));
            let mask = ObservationMask::random(p, q, [0.0, 0.25, 0.5][g], seed).unwrap();
            let dense = dense_masked(&ks, &kt, &mask, 0.1);
            let op = LatentKroneckerOperator::new(ks, kt, mask.clone(), 0.1).unwrap();
            let u = random_vec(&mut rng, mask.len());
            let v = random_vec(&mut rng, mask.len());
            let ou = op.projected_mvm(&u).unwrap();
            let ov = op.projected_mvm(&v).unwrap();
            prop_assert!((&ou - &dense * &u).amax() <= 1e-12 * dense.amax().max(1.0) * (p * q) as f64);
            prop_assert!((v.dot(&ou) - u.dot(&ov)).abs() <= 1e-10);
        }
    }

    #[test]
    fn eig_solve_limits_and_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = DMatrix::from_fn(42, 2, |_, _| rng.random_range(-1.0..1.0));
        let zero = kron_eig_solve(&DMatrix::zeros(6, 6), &DMatrix::zeros(7, 7), 2.0, &b).unwrap();
        assert!((zero - &b / 2.0).amax() < 1e-14);
        let (ks, kt) = (random_spd(&mut rng, 6), random_spd(&mut rng, 7));
        let sol = kron_eig_solve(&ks, &kt, 0.3, &b).unwrap();
        let h = kron_dense(&ks, &kt) + DMatrix::identity(42, 42) * 0.3;
        let want = cholesky(&h).unwrap().solve(&b);
        assert!((&sol - &want).amax() < 1e-8);
        let op = LatentKroneckerOperator::new(ks, kt, ObservationMask::full(6, 7).unwrap(), 0.3).unwrap();
        let cfg = SolverConfig { tol: 1e-10, ..SolverConfig::default() };
        let cg = solve_cg(&LinearSystemBatch::new(&op, b).unwrap(), &cfg).unwrap();
        assert!((cg.v - sol).amax() < 1e-6);
    }

    #[test]
    fn break_even_values() {
        assert_eq!(break_even(2, 2).unwrap().time, 0.0);
        let be = break_even(100, 100).unwrap();
        assert!((be.time - (1.0 - 0.02f64.sqrt())).abs() < 1e-12);
        assert!((be.memory - (1.0 - 0.0002f64.sqrt())).abs() < 1e-12);
        assert!((be.time - 0.858_579).abs() < 1e-6);
        assert!((be.memory - 0.985_858).abs() < 1e-6);
        assert_eq!(break_even(1, 1).unwrap(), BreakEven { time: 0.0, memory: 0.0 });
        assert!(break_even(0, 3).is_err());
    }

    #[test]
    fn flop_counters_cross_at_break_even() {
        let (p, q) = (16, 12);
        let total = p * q;
        let gammas: Vec<f64> = (0..total).map(|k| k as f64 / total as f64).collect();
        let costs = mvm_cost_sweep(p, q, &gammas, 3).unwrap();
        let star = break_even(p, q).unwrap().time;
        let cross = crossover(&costs, MvmCost::latent_faster).unwrap();
        assert!((cross - star).abs() <= 1.0 / total as f64 + 1e-12, "{cross} vs {star}");
        let c = &costs[10];
        assert_eq!(c.latent_flops, (p * p * q + p * q * q) as u64);
        assert_eq!(c.dense_flops, (c.n * c.n) as u64);
        assert_eq!(c.latent_bytes, 8 * (p * p + q * q + c.n) as u64);
    }

    fn grid_model(noise: f64) -> (LatentKroneckerModel, ProductGrid) {
        let kernel_s = Kernel::new(&KernelExpr::scaled(KernelExpr::se()), 1, &[1.2, 0.7]).unwrap();
        let kernel_t = Kernel::new(&KernelExpr::matern(crate::MaternNu::FiveHalves), 1, &[0.9]).unwrap();
        let s = DMatrix::from_fn(6, 1, |i, _| i as f64 * 0.5);
        let t = DMatrix::from_fn(6, 1, |i, _| i as f64 * 0.4);
        (LatentKroneckerModel { kernel_s, kernel_t, noise_variance: noise }, ProductGrid::new(s, t).unwrap())
    }

    fn check_moments(vals: &DMatrix<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) {
        let s = vals.ncols() as f64;
        let m = vals.column_mean();
        for i in 0..mean.len() {
            assert!((m[i] - mean[i]).abs() <= 5.0 * (cov[(i, i)] / s).sqrt() + 1e-12, "mean {i}");
            for j in 0..mean.len() {
                let c =
                    (0..vals.ncols()).map(|k| (vals[(i, k)] - m[i]) * (vals[(j, k)] - m[j])).sum::<f64>() / (s - 1.0);
                let se = ((cov[(i, i)] * cov[(j, j)] + cov[(i, j)].powi(2)) / s).sqrt();
                assert!((c - cov[(i, j)]).abs() <= 5.0 * se + 1e-12, "cov {i} {j}");
            }
        }
    }

    #[test]
    fn masked_grid_moments_match_dense() {
        let (model, grid) = grid_model(0.1);
        let mask = ObservationMask::random(6, 6, 0.4, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let y = random_vec(&mut rng, mask.len());
        let cfg = LkSampleConfig {
            num_samples: 8192,
            solver_cfg: SolverConfig { tol: 1e-10, ..SolverConfig::default() },
            seed: 13,
            ..LkSampleConfig::default()
        };
        let samples = lk_posterior_samples(&model, &grid, &mask, &y, &cfg).unwrap();
        let vals = samples.eval_grid(&grid.s, &grid.t).unwrap();
        let joint = model.joint_kernel().unwrap();
        let all: Vec<usize> = (0..36).collect();
        let xs = grid.cell_inputs(&all);
        let xo = grid.cell_inputs(mask.cells());
        let post = posterior_from_parts(
            &joint.gram(&xo, &xo).unwrap(),
            &joint.gram(&xo, &xs).unwrap(),
            &joint.gram(&xs, &xs).unwrap(),
            &y,
            0.1,
        )
        .unwrap();
        assert!((samples.mean_grid(&grid.s, &grid.t).unwrap() - &post.mean).amax() < 1e-8);
        check_moments(&vals, &post.mean, &post.cov);
    }

    #[test]
    fn full_grid_moments_match_eigen_posterior() {
        let (model, grid) = grid_model(0.2);
        let mask = ObservationMask::full(6, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let y = random_vec(&mut rng, 36);
        let cfg = LkSampleConfig {
            num_samples: 4096,
            solver_cfg: SolverConfig { tol: 1e-10, ..SolverConfig::default() },
            seed: 15,
            ..LkSampleConfig::default()
        };
        let samples = lk_posterior_samples(&model, &grid, &mask, &y, &cfg).unwrap();
        let ks = model.kernel_s.gram(&grid.s, &grid.s).unwrap();
        let kt = model.kernel_t.gram(&grid.t, &grid.t).unwrap();
        let k = kron_dense(&ks, &kt);
        let ym = DMatrix::from_column_slice(36, 1, y.as_slice());
        let mean = &k * kron_eig_solve(&ks, &kt, 0.2, &ym).unwrap();
        let cov = &k - &k * kron_eig_solve(&ks, &kt, 0.2, &k).unwrap();
        check_moments(&samples.eval_grid(&grid.s, &grid.t).unwrap(), &mean.column(0).into_owned(), &cov);
    }

    #[test]
    fn noiseless_full_grid_interpolates() {
        let (model, grid) = grid_model(1e-8);
        let mask = ObservationMask::full(6, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let y = random_vec(&mut rng, 36);
        let cfg = LkSampleConfig { num_samples: 2, solver: SolverKind::Exact, seed: 1, ..LkSampleConfig::default() };
        let samples = lk_posterior_samples(&model, &grid, &mask, &y, &cfg).unwrap();
        assert!((samples.mean_grid(&grid.s, &grid.t).unwrap() - &y).amax() <= 1e-4);
    }

    #[test]
    fn fourier_prior_evaluates_off_grid() {
        let (model, grid) = grid_model(0.1);
        let mask = ObservationMask::random(6, 6, 0.3, 1).unwrap();
        let y = DVector::zeros(mask.len());
        let cfg = LkSampleConfig {
            num_samples: 3,
            prior: LkPrior::Fourier { num_features: 200 },
            ..LkSampleConfig::default()
        };
        let samples = lk_posterior_samples(&model, &grid, &mask, &y, &cfg).unwrap();
        let s2 = DMatrix::from_fn(2, 1, |i, _| 0.25 + i as f64);
        let t3 = DMatrix::from_fn(3, 1, |i, _| 0.1 * i as f64);
        assert_eq!(samples.eval_grid(&s2, &t3).unwrap().shape(), (6, 3));
        let exact = lk_posterior_samples(
            &model,
            &grid,
            &mask,
            &y,
            &LkSampleConfig { num_samples: 2, ..LkSampleConfig::default() },
        )
        .unwrap();
        assert!(exact.eval_grid(&s2, &t3).is_err());
    }
}
