//! Dense Cholesky reference implementation.
//!
//! Everything here is O(n³) and refuses problems larger than
//! [`DEFAULT_MAX_N`] unless a larger limit is passed explicitly. These
//! routines are the oracle the iterative paths are tested against.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{dim_check, GpError, Result};
use crate::kernel::{Kernel, ModelSpec, Points};
use crate::linalg::{cholesky, cholesky_with_jitter, solve_lower, symmetrize, JitteredCholesky};
use crate::Data;

/// Largest training set the dense path accepts by default.
pub const DEFAULT_MAX_N: usize = 20_000;

fn guard(n: usize, limit: usize) -> Result<()> {
    if n > limit {
        Err(GpError::TooLarge { n, limit })
    } else {
        Ok(())
    }
}

/// Posterior mean and covariance at a set of test inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct DensePosterior {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Posterior at `xs` given training data, using the default size guard.
pub fn posterior(model: &ModelSpec, data: &Data, xs: &DMatrix<f64>) -> Result<DensePosterior> {
    posterior_limited(model, data, xs, DEFAULT_MAX_N)
}

pub fn posterior_limited(model: &ModelSpec, data: &Data, xs: &DMatrix<f64>, max_n: usize) -> Result<DensePosterior> {
    guard(data.len(), max_n)?;
    let kernel = model.bound_kernel()?;
    let kss = kernel.gram(xs, xs)?;
    if data.is_empty() {
        return Ok(DensePosterior { mean: DVector::zeros(xs.nrows()), cov: kss });
    }
    let kxx = kernel.gram(&data.x, &data.x)?;
    let kxs = kernel.gram(&data.x, xs)?;
    posterior_from_parts(&kxx, &kxs, &kss, &data.y, model.noise_variance())
}

/// Posterior from precomputed Gram blocks.
pub fn posterior_from_parts(
    kxx: &DMatrix<f64>,
    kxs: &DMatrix<f64>,
    kss: &DMatrix<f64>,
    y: &DVector<f64>,
    noise_variance: f64,
) -> Result<DensePosterior> {
    let n = kxx.nrows();
    dim_check(kxs.nrows() == n && y.len() == n && kss.nrows() == kxs.ncols(), || {
        "inconsistent posterior block shapes".into()
    })?;
    let mut h = kxx.clone();
    for i in 0..n {
        h[(i, i)] += noise_variance;
    }
    let chol = cholesky(&h)?;
    let mean = kxs.transpose() * chol.solve(y);
    let a = solve_lower(&chol.l(), kxs)?;
    let mut cov = kss - a.transpose() * &a;
    symmetrize(&mut cov);
    Ok(DensePosterior { mean, cov })
}

/// Log marginal likelihood −½yᵀH⁻¹y − ½log det H − (n/2)log 2π.
pub fn mll(model: &ModelSpec, data: &Data) -> Result<f64> {
    guard(data.len(), DEFAULT_MAX_N)?;
    mll_from_h(&model.h_matrix(&data.x)?, &data.y)
}

pub fn mll_from_h(h: &DMatrix<f64>, y: &DVector<f64>) -> Result<f64> {
    dim_check(h.nrows() == y.len(), || format!("H is {}×{}, y has {}", h.nrows(), h.ncols(), y.len()))?;
    let chol = cholesky(h)?;
    let alpha = chol.solve(y);
    let l = chol.l_dirty();
    let log_det: f64 = 2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>();
    let n = y.len() as f64;
    Ok(-0.5 * y.dot(&alpha) - 0.5 * log_det - 0.5 * n * (2.0 * std::f64::consts::PI).ln())
}

/// Gradient of the log marginal likelihood with respect to the constrained
/// θ (kernel parameters, then noise scale σ).
pub fn mll_grad(model: &ModelSpec, data: &Data) -> Result<DVector<f64>> {
    guard(data.len(), DEFAULT_MAX_N)?;
    let h = model.h_matrix(&data.x)?;
    let chol = cholesky(&h)?;
    let n = data.len();
    let alpha = chol.solve(&data.y);
    let h_inv = chol.inverse();
    // ½ Σ_ij (ααᵀ − H⁻¹)_ij ∂H_ij
    let w = &alpha * alpha.transpose() - &h_inv;
    let kernel = model.bound_kernel()?;
    let p = kernel.num_params();
    let pts = Points::from_matrix(&data.x);
    let mut grad = DVector::zeros(p + 1);
    let mut g = vec![0.0; p];
    for i in 0..n {
        for j in 0..=i {
            kernel.eval_with_grad(pts.row(i), pts.row(j), &mut g);
            let weight = if i == j { 0.5 * w[(i, i)] } else { w[(i, j)] };
            for k in 0..p {
                grad[k] += weight * g[k];
            }
        }
    }
    let sigma = model.noise_scale();
    grad[p] = sigma * w.trace();
    Ok(grad)
}

/// Draws μ + Lw with LLᵀ = Σ; returns the sample and the jitter used.
pub fn sample_affine(post: &DensePosterior, w: &DVector<f64>) -> Result<(DVector<f64>, f64)> {
    dim_check(w.len() == post.mean.len(), || format!("{} normals for {} outputs", w.len(), post.mean.len()))?;
    let f = cholesky_with_jitter(&post.cov)?;
    Ok((&post.mean + f.l() * w, f.jitter))
}

/// Column-batched [`sample_affine`].
pub fn sample_affine_batch(post: &DensePosterior, w: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    dim_check(w.nrows() == post.mean.len(), || format!("{} normals for {} outputs", w.nrows(), post.mean.len()))?;
    let f = cholesky_with_jitter(&post.cov)?;
    let mut out = f.l() * w;
    for mut c in out.column_iter_mut() {
        c += &post.mean;
    }
    Ok((out, f.jitter))
}

/// Jittered Cholesky factor of K at `x`, for exact joint prior sampling.
pub fn prior_factor(kernel: &Kernel, x: &DMatrix<f64>) -> Result<JitteredCholesky> {
    guard(x.nrows(), DEFAULT_MAX_N)?;
    cholesky_with_jitter(&kernel.gram(x, x)?)
}

/// Blocks of the joint Cholesky factor after appending new points.
#[derive(Debug, Clone)]
pub struct CholeskyExtension {
    pub l21: DMatrix<f64>,
    pub l22: DMatrix<f64>,
    pub jitter: f64,
}

/// Given L11 with L11L11ᵀ = K_XX, returns L21 = (L11⁻¹K_XX*)ᵀ and
/// L22 = chol(K_X*X* − L21L21ᵀ), so [[L11, 0], [L21, L22]] factors the joint
/// Gram matrix.
pub fn conditional_cholesky_update(
    l11: &DMatrix<f64>,
    k_xs: &DMatrix<f64>,
    k_ss: &DMatrix<f64>,
) -> Result<CholeskyExtension> {
    dim_check(l11.nrows() == k_xs.nrows() && k_ss.nrows() == k_xs.ncols() && k_ss.is_square(), || {
        "inconsistent block shapes for cholesky extension".into()
    })?;
    let l21 = solve_lower(l11, k_xs)?.transpose();
    let mut schur = k_ss - &l21 * l21.transpose();
    symmetrize(&mut schur);
    let f = cholesky_with_jitter(&schur).map_err(|e| match e {
        GpError::Numerical(msg) => GpError::Numerical(format!("schur complement not positive semi-definite: {msg}")),
        other => other,
    })?;
    Ok(CholeskyExtension { l21, l22: f.l(), jitter: f.jitter })
}

/// Eigen-decomposition of K_XX with eigenvalues sorted in decreasing order.
#[derive(Debug, Clone)]
pub struct SpectralBasis {
    pub eigenvalues: DVector<f64>,
    pub eigenvectors: DMatrix<f64>,
}

impl SpectralBasis {
    pub fn new(kxx: &DMatrix<f64>) -> Result<Self> {
        if !kxx.is_square() {
            return Err(GpError::Dimension("spectral basis needs a square matrix".into()));
        }
        let eig = SymmetricEigen::new(kxx.clone());
        let n = kxx.nrows();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let eigenvalues = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
        let mut eigenvectors = DMatrix::zeros(n, n);
        for (c, &i) in order.iter().enumerate() {
            eigenvectors.set_column(c, &eig.eigenvectors.column(i));
        }
        Ok(SpectralBasis { eigenvalues, eigenvectors })
    }

    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }
}

/// Per-direction errors |u_iᵀ(v* − v̂)| for every i, and the seminorm
/// √(Σ_{i∈I} λ_i (u_iᵀΔ)²) over `indices`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionError {
    pub per_direction: DVector<f64>,
    pub seminorm: f64,
}

pub fn spectral_projection_error(
    basis: &SpectralBasis,
    v_hat: &DVector<f64>,
    v_star: &DVector<f64>,
    indices: &[usize],
) -> Result<ProjectionError> {
    let n = basis.len();
    dim_check(v_hat.len() == n && v_star.len() == n, || "weights do not match the basis".into())?;
    if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
        return Err(GpError::InvalidParameter(format!("direction index {bad} out of range")));
    }
    let coords = basis.eigenvectors.transpose() * (v_star - v_hat);
    let per_direction = coords.map(f64::abs);
    let seminorm = indices.iter().map(|&i| basis.eigenvalues[i].max(0.0) * coords[i] * coords[i]).sum::<f64>().sqrt();
    Ok(ProjectionError { per_direction, seminorm })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{KernelExpr, MaternNu};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn instance(seed: u64, n: usize, noise: f64) -> (ModelSpec, Data) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, 2, |_, _| rng.random_range(-2.0..2.0));
        let y = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let kernel = KernelExpr::scaled(KernelExpr::matern(MaternNu::FiveHalves));
        let model = ModelSpec::with_params(kernel, 2, &[1.3, 0.8, 1.1], noise).unwrap();
        (model, Data::new(x, y).unwrap())
    }

    fn naive_inverse(h: &DMatrix<f64>) -> DMatrix<f64> {
        h.clone().try_inverse().unwrap()
    }

    #[test]
    fn empty_data_gives_prior() {
        let (model, _) = instance(0, 4, 0.1);
        let xs = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, 0.5]);
        let empty = Data::new(DMatrix::zeros(0, 2), DVector::zeros(0)).unwrap();
        let post = posterior(&model, &empty, &xs).unwrap();
        assert_eq!(post.mean, DVector::zeros(2));
        assert_eq!(post.cov, model.bound_kernel().unwrap().gram(&xs, &xs).unwrap());
    }

    #[test]
    fn huge_noise_reverts_to_prior() {
        let (model, data) = instance(1, 10, 1e8);
        let post = posterior(&model, &data, &data.x).unwrap();
        assert!(post.mean.norm() <= 1e-4 * data.y.norm());
        let kxx = model.bound_kernel().unwrap().gram(&data.x, &data.x).unwrap();
        assert!((post.cov - kxx).amax() <= 1e-4);
    }

    #[test]
    fn noiseless_single_point_interpolates() {
        let model = ModelSpec::with_params(KernelExpr::se(), 1, &[1.0], 1e-300).unwrap();
        let data = Data::new(DMatrix::from_element(1, 1, 0.3), DVector::from_element(1, 1.7)).unwrap();
        let post = posterior(&model, &data, &data.x).unwrap();
        assert!((post.mean[0] - 1.7).abs() < 1e-14);
    }

    #[test]
    fn size_guard() {
        let (model, data) = instance(2, 6, 0.1);
        assert!(matches!(posterior_limited(&model, &data, &data.x, 5), Err(GpError::TooLarge { n: 6, limit: 5 })));
    }

    #[test]
    fn mll_closed_forms() {
        let v = mll_from_h(&DMatrix::from_element(1, 1, 1.0), &DVector::from_element(1, 0.0)).unwrap();
        assert!((v + 0.918_938_533_204_672_7).abs() < 1e-12);
        let v = mll_from_h(&DMatrix::from_element(1, 1, 2.0), &DVector::from_element(1, 2.0)).unwrap();
        assert!((v + 2.265_512_123_484_645).abs() < 1e-12);
    }

    #[test]
    fn mll_matches_naive_inverse() {
        let (model, data) = instance(3, 64, 0.05);
        let h = model.h_matrix(&data.x).unwrap();
        let inv = naive_inverse(&h);
        let want = -0.5 * data.y.dot(&(&inv * &data.y))
            - 0.5 * h.determinant().ln()
            - 32.0 * (2.0 * std::f64::consts::PI).ln();
        let got = mll(&model, &data).unwrap();
        assert!((got - want).abs() <= 1e-8 * want.abs());
    }

    #[test]
    fn posterior_matches_naive_inverse() {
        let (model, data) = instance(4, 128, 0.2);
        let k = model.bound_kernel().unwrap();
        let xs = DMatrix::from_fn(7, 2, |i, j| (i as f64 * 0.37 + j as f64).sin());
        let inv = naive_inverse(&model.h_matrix(&data.x).unwrap());
        let kxs = k.gram(&data.x, &xs).unwrap();
        let mean = kxs.transpose() * &inv * &data.y;
        let cov = k.gram(&xs, &xs).unwrap() - kxs.transpose() * &inv * &kxs;
        let post = posterior(&model, &data, &xs).unwrap();
        assert!((&post.mean - &mean).norm() <= 1e-8 * mean.norm());
        assert!((&post.cov - &cov).norm() <= 1e-8 * cov.norm());
        assert_eq!(post.cov, post.cov.transpose());
    }

    #[test]
    fn mll_invariant_to_permutation() {
        let (model, data) = instance(5, 40, 0.1);
        let perm: Vec<usize> = (0..40).rev().collect();
        let x = DMatrix::from_fn(40, 2, |i, j| data.x[(perm[i], j)]);
        let y = DVector::from_fn(40, |i, _| data.y[perm[i]]);
        let a = mll(&model, &data).unwrap();
        let b = mll(&model, &Data::new(x, y).unwrap()).unwrap();
        assert!((a - b).abs() <= 1e-10 * a.abs());
    }

    #[test]
    fn mll_grad_matches_central_differences() {
        let (model, data) = instance(6, 32, 0.3);
        let grad = mll_grad(&model, &data).unwrap();
        let theta = model.hyper.theta();
        let kp = theta.len() - 1;
        let h = 1e-5;
        for k in 0..theta.len() {
            let eval = |t: &[f64]| {
                let m = ModelSpec::with_params(model.kernel.clone(), 2, &t[..kp], t[kp] * t[kp]).unwrap();
                mll(&m, &data).unwrap()
            };
            let mut plus = theta.clone();
            let mut minus = theta.clone();
            plus[k] += h;
            minus[k] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            assert!((fd - grad[k]).abs() <= 1e-5 * grad[k].abs().max(1e-3), "{k}: {fd} vs {}", grad[k]);
        }
    }

    #[test]
    fn mll_grad_special_cases() {
        let (model, mut data) = instance(7, 20, 0.4);
        let g1 = mll_grad(&model, &data).unwrap();
        let data2 = Data::new(data.x.clone(), &data.y * 2.0).unwrap();
        let g2 = mll_grad(&model, &data2).unwrap();
        data.y.fill(0.0);
        let g0 = mll_grad(&model, &data).unwrap();
        // the data-fit part quadruples, the complexity part (g0) is unchanged
        for k in 0..g1.len() {
            let fit1 = g1[k] - g0[k];
            let fit2 = g2[k] - g0[k];
            assert!((fit2 - 4.0 * fit1).abs() <= 1e-10 * fit1.abs().max(1.0));
        }
        let h_inv = naive_inverse(&model.h_matrix(&data.x).unwrap());
        let sigma = model.noise_scale();
        assert!((g0[g0.len() - 1] + sigma * h_inv.trace()).abs() < 1e-10);
    }

    #[test]
    fn affine_sampling() {
        let post = DensePosterior { mean: DVector::zeros(1), cov: DMatrix::from_element(1, 1, 4.0) };
        assert_eq!(sample_affine(&post, &DVector::from_element(1, 1.0)).unwrap().0[0], 2.0);
        let (model, data) = instance(8, 6, 0.1);
        let xs = DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 0.5, 0.5, -1.0, 0.3]);
        let post = posterior(&model, &data, &xs).unwrap();
        assert_eq!(sample_affine(&post, &DVector::zeros(3)).unwrap().0, post.mean);
    }

    #[test]
    fn affine_sample_covariance() {
        let (model, data) = instance(9, 6, 0.1);
        let xs = DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 0.5, 0.5, -1.0, 0.3]);
        let post = posterior(&model, &data, &xs).unwrap();
        let s = 8192;
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let w = DMatrix::from_fn(3, s, |_, _| rng.sample(StandardNormal));
        let (samples, _) = sample_affine_batch(&post, &w).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let p: Vec<f64> =
                    (0..s).map(|c| (samples[(i, c)] - post.mean[i]) * (samples[(j, c)] - post.mean[j])).collect();
                let m = p.iter().sum::<f64>() / s as f64;
                let sd = (p.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (s - 1) as f64).sqrt();
                assert!((m - post.cov[(i, j)]).abs() <= 5.0 * sd / (s as f64).sqrt());
            }
        }
    }

    #[test]
    fn cholesky_extension_reconstructs_joint() {
        let (model, _) = instance(11, 1, 0.1);
        let k = model.bound_kernel().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = DMatrix::from_fn(8, 2, |_, _| rng.random_range(-2.0..2.0));
        let xs = DMatrix::from_fn(4, 2, |_, _| rng.random_range(-2.0..2.0));
        let kxx = k.gram(&x, &x).unwrap();
        let l11 = cholesky(&kxx).unwrap().l();
        let ext = conditional_cholesky_update(&l11, &k.gram(&x, &xs).unwrap(), &k.gram(&xs, &xs).unwrap()).unwrap();
        let mut l = DMatrix::zeros(12, 12);
        l.view_mut((0, 0), (8, 8)).copy_from(&l11);
        l.view_mut((8, 0), (4, 8)).copy_from(&ext.l21);
        l.view_mut((8, 8), (4, 4)).copy_from(&ext.l22);
        let all = DMatrix::from_fn(12, 2, |i, j| if i < 8 { x[(i, j)] } else { xs[(i - 8, j)] });
        let joint = k.gram(&all, &all).unwrap();
        assert!((&l * l.transpose() - &joint).norm() <= 1e-8 * joint.norm());
    }

    #[test]
    fn cholesky_extension_closed_form_and_duplicates() {
        let k = Kernel::new(&KernelExpr::se(), 1, &[1.0]).unwrap();
        let x = DMatrix::from_element(1, 1, 0.0);
        let xs = DMatrix::from_element(1, 1, 1.0);
        let l11 = DMatrix::from_element(1, 1, 1.0);
        let ext = conditional_cholesky_update(&l11, &k.gram(&x, &xs).unwrap(), &k.gram(&xs, &xs).unwrap()).unwrap();
        assert!((ext.l21[(0, 0)] - (-0.5f64).exp()).abs() < 1e-15);
        assert!((ext.l22[(0, 0)] - (1.0 - (-1.0f64).exp()).sqrt()).abs() < 1e-15);
        // duplicated points: Schur complement vanishes
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = DMatrix::from_fn(5, 1, |_, _| rng.random_range(-3.0..3.0));
        let l11 = cholesky(&k.gram(&x, &x).unwrap()).unwrap().l();
        let kxx = k.gram(&x, &x).unwrap();
        let ext = conditional_cholesky_update(&l11, &kxx, &kxx).unwrap();
        assert!(ext.l22.amax() < 1e-3);
    }

    #[test]
    fn spectral_basis_properties() {
        let (model, data) = instance(14, 30, 0.1);
        let kxx = model.bound_kernel().unwrap().gram(&data.x, &data.x).unwrap();
        let b = SpectralBasis::new(&kxx).unwrap();
        let u = &b.eigenvectors;
        assert!((u.transpose() * u - DMatrix::identity(30, 30)).amax() < 1e-8);
        let rec = u * DMatrix::from_diagonal(&b.eigenvalues) * u.transpose();
        assert!((rec - &kxx).norm() <= 1e-8 * kxx.norm());
        assert!(b.eigenvalues.as_slice().windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn projection_error_cases() {
        let (model, data) = instance(15, 12, 0.1);
        let kxx = model.bound_kernel().unwrap().gram(&data.x, &data.x).unwrap();
        let b = SpectralBasis::new(&kxx).unwrap();
        let v = DVector::from_fn(12, |i, _| i as f64);
        let all: Vec<usize> = (0..12).collect();
        let same = spectral_projection_error(&b, &v, &v, &all).unwrap();
        assert_eq!(same.seminorm, 0.0);
        let shifted = &v + b.eigenvectors.column(0);
        let e = spectral_projection_error(&b, &v, &shifted, &all).unwrap();
        assert!((e.per_direction[0] - 1.0).abs() < 1e-10);
        assert!(e.per_direction.rows(1, 11).amax() < 1e-10);
        assert!((e.seminorm - b.eigenvalues[0].sqrt()).abs() < 1e-8);
        // naive loop oracle
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let a = DVector::from_fn(12, |_, _| rng.random_range(-1.0..1.0));
        let c = DVector::from_fn(12, |_, _| rng.random_range(-1.0..1.0));
        let subset = [0, 3, 7];
        let e = spectral_projection_error(&b, &a, &c, &subset).unwrap();
        let mut acc = 0.0;
        for (i, col) in b.eigenvectors.column_iter().enumerate() {
            let mut dot = 0.0;
            for r in 0..12 {
                dot += col[r] * (c[r] - a[r]);
            }
            assert!((e.per_direction[i] - dot.abs()).abs() < 1e-12);
            if subset.contains(&i) {
                acc += b.eigenvalues[i] * dot * dot;
            }
        }
        assert!((e.seminorm - acc.sqrt()).abs() < 1e-12);
    }
}
