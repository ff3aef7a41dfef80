//! Random Fourier features and feature-based prior function samples.
//!
//! Frequencies are drawn from standardised distributions once and stored, so
//! a feature set can be rebound to new hyperparameters without touching the
//! random stream. This is what keeps prior samples and probe vectors fixed
//! across outer optimisation steps.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{dim_check, GpError, Result};
use crate::kernel::{Family, Kernel, Node};

/// Default number of frequencies for prior samples.
pub const DEFAULT_FEATURES: usize = 2000;

/// Feature map construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureVariant {
    /// `√(A/m)·[cos(ωᵀx), sin(ωᵀx)]`, 2m columns.
    #[default]
    SinCos,
    /// `√(2A/m)·cos(ωᵀx + b)`, m columns.
    CosPhase,
}

#[derive(Debug, Clone)]
enum LeafDraws {
    /// Standard normals, one row per frequency.
    Gaussian { dims: Vec<usize>, z: DMatrix<f64> },
    /// Standard normals and χ² draws with 2ν degrees of freedom.
    StudentT { dims: Vec<usize>, z: DMatrix<f64>, chi2: Vec<f64>, nu: f64 },
    /// Uniforms inverted through the harmonic spectral measure.
    Harmonic { dim: usize, u: Vec<f64> },
}

/// θ-independent randomness behind a feature set.
#[derive(Debug, Clone)]
pub struct FeatureDraws {
    input_dim: usize,
    m: usize,
    variant: FeatureVariant,
    seed: u64,
    leaves: Vec<LeafDraws>,
    phases: Option<Vec<f64>>,
}

struct Flat<'a> {
    amplitude: f64,
    leaves: Vec<(&'a Family, &'a [usize], usize)>,
}

fn flatten<'a>(node: &'a Node, theta: &[f64], out: &mut Flat<'a>) {
    match node {
        Node::Leaf { family, dims, offset } => out.leaves.push((family, dims, *offset)),
        Node::Product { factors, .. } => factors.iter().for_each(|f| flatten(f, theta, out)),
        Node::Scaled { offset, inner } => {
            out.amplitude *= theta[*offset];
            flatten(inner, theta, out);
        }
    }
}

impl FeatureDraws {
    /// Draws the randomness for `m` frequencies matching the structure of `kernel`.
    pub fn sample(kernel: &Kernel, m: usize, variant: FeatureVariant, seed: u64) -> Result<Self> {
        if m == 0 {
            return Err(GpError::InvalidParameter("feature count must be positive".into()));
        }
        let mut flat = Flat { amplitude: 1.0, leaves: Vec::new() };
        flatten(kernel.root(), kernel.params(), &mut flat);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut leaves = Vec::with_capacity(flat.leaves.len());
        for (family, dims, _) in &flat.leaves {
            let draws = match family {
                Family::Se => LeafDraws::Gaussian { dims: dims.to_vec(), z: normal_matrix(&mut rng, m, dims.len()) },
                Family::Matern(nu) => {
                    let nu = nu.value();
                    let z = normal_matrix(&mut rng, m, dims.len());
                    let chi = ChiSquared::new(2.0 * nu).expect("positive degrees of freedom");
                    let chi2 = (0..m).map(|_| chi.sample(&mut rng)).collect();
                    LeafDraws::StudentT { dims: dims.to_vec(), z, chi2, nu }
                }
                Family::Periodic => {
                    if dims.len() != 1 {
                        return Err(GpError::Unsupported(
                            "random features for a periodic kernel need exactly one active dimension".into(),
                        ));
                    }
                    LeafDraws::Harmonic { dim: dims[0], u: (0..m).map(|_| rng.random::<f64>()).collect() }
                }
            };
            leaves.push(draws);
        }
        let phases = match variant {
            FeatureVariant::CosPhase => Some((0..m).map(|_| rng.random_range(0.0..2.0 * PI)).collect()),
            FeatureVariant::SinCos => None,
        };
        Ok(FeatureDraws { input_dim: kernel.input_dim(), m, variant, seed, leaves, phases })
    }

    pub fn num_frequencies(&self) -> usize {
        self.m
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn variant(&self) -> FeatureVariant {
        self.variant
    }

    /// Frequencies and amplitude at the hyperparameters of `kernel`, which
    /// must have the structure the draws were made for.
    pub fn bind(&self, kernel: &Kernel) -> Result<FourierFeatureSet> {
        let mut flat = Flat { amplitude: 1.0, leaves: Vec::new() };
        flatten(kernel.root(), kernel.params(), &mut flat);
        if flat.leaves.len() != self.leaves.len() || kernel.input_dim() != self.input_dim {
            return Err(GpError::InvalidParameter("kernel structure differs from the feature draws".into()));
        }
        let theta = kernel.params();
        let mut omega = DMatrix::zeros(self.m, self.input_dim);
        for ((family, _, offset), draws) in flat.leaves.iter().zip(&self.leaves) {
            match (family, draws) {
                (Family::Se, LeafDraws::Gaussian { dims, z }) => {
                    for (c, &d) in dims.iter().enumerate() {
                        let l = theta[offset + c];
                        for j in 0..self.m {
                            omega[(j, d)] += z[(j, c)] / l;
                        }
                    }
                }
                (Family::Matern(_), LeafDraws::StudentT { dims, z, chi2, nu }) => {
                    for j in 0..self.m {
                        let scale = (2.0 * nu / chi2[j]).sqrt();
                        for (c, &d) in dims.iter().enumerate() {
                            omega[(j, d)] += z[(j, c)] * scale / theta[offset + c];
                        }
                    }
                }
                (Family::Periodic, LeafDraws::Harmonic { dim, u }) => {
                    let (l, period) = (theta[*offset], theta[offset + 1]);
                    let cdf = harmonic_cdf(1.0 / (l * l));
                    for j in 0..self.m {
                        let k = cdf.partition_point(|&c| c < u[j]).min(cdf.len() - 1);
                        omega[(j, *dim)] += 2.0 * PI * k as f64 / period;
                    }
                }
                _ => return Err(GpError::InvalidParameter("kernel structure differs from the feature draws".into())),
            }
        }
        Ok(FourierFeatureSet {
            omega,
            amplitude: flat.amplitude,
            phases: self.phases.clone(),
            variant: self.variant,
            seed: self.seed,
        })
    }
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// Weights q_k = c_k e^{−z} I_k(z) (c_0 = 1, c_k = 2) of the periodic
/// kernel's harmonic expansion, computed by normalised backward recurrence.
pub fn harmonic_weights(z: f64) -> Vec<f64> {
    let top = (z + 20.0 * z.sqrt() + 40.0).ceil() as usize;
    let mut vals = vec![0.0; top + 2];
    vals[top + 1] = 0.0;
    vals[top] = 1e-300;
    for k in (1..=top).rev() {
        vals[k - 1] = vals[k + 1] + 2.0 * k as f64 / z * vals[k];
        if vals[k - 1] > 1e250 {
            for v in vals.iter_mut().skip(k - 1) {
                *v *= 1e-250;
            }
        }
    }
    let norm = vals[0] + 2.0 * vals[1..].iter().sum::<f64>();
    let mut q: Vec<f64> = vals[..=top].iter().map(|v| 2.0 * v / norm).collect();
    q[0] *= 0.5;
    while q.len() > 1 && *q.last().unwrap() < 1e-18 {
        q.pop();
    }
    q
}

fn harmonic_cdf(z: f64) -> Vec<f64> {
    let mut acc = 0.0;
    harmonic_weights(z)
        .into_iter()
        .map(|q| {
            acc += q;
            acc
        })
        .collect()
}

/// Frequencies bound to concrete hyperparameters.
#[derive(Debug, Clone)]
pub struct FourierFeatureSet {
    omega: DMatrix<f64>,
    amplitude: f64,
    phases: Option<Vec<f64>>,
    variant: FeatureVariant,
    seed: u64,
}

/// Draws `m` frequencies for `kernel` and binds them immediately.
pub fn sample_features(kernel: &Kernel, m: usize, variant: FeatureVariant, seed: u64) -> Result<FourierFeatureSet> {
    FeatureDraws::sample(kernel, m, variant, seed)?.bind(kernel)
}

impl FourierFeatureSet {
    /// m×d frequency matrix.
    pub fn frequencies(&self) -> &DMatrix<f64> {
        &self.omega
    }

    pub fn phases(&self) -> Option<&[f64]> {
        self.phases.as_deref()
    }

    pub fn amplitude(&self) -> f64 {
        self.amplitude
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input_dim(&self) -> usize {
        self.omega.ncols()
    }

    pub fn num_frequencies(&self) -> usize {
        self.omega.nrows()
    }

    /// Width of the feature map.
    pub fn feature_dim(&self) -> usize {
        match self.variant {
            FeatureVariant::SinCos => 2 * self.num_frequencies(),
            FeatureVariant::CosPhase => self.num_frequencies(),
        }
    }

    /// Feature matrix Φ_X with rows φ(x_i).
    pub fn feature_matrix(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        dim_check(x.ncols() == self.input_dim() || x.nrows() == 0, || {
            format!("inputs have {} columns, features expect {}", x.ncols(), self.input_dim())
        })?;
        let n = x.nrows();
        let m = self.num_frequencies();
        let width = self.feature_dim();
        let proj = x * self.omega.transpose();
        let mut data = vec![0.0; n * width];
        match self.variant {
            FeatureVariant::SinCos => {
                let c = (self.amplitude / m as f64).sqrt();
                data.par_chunks_mut(width).enumerate().for_each(|(i, row)| {
                    for j in 0..m {
                        let (s, co) = proj[(i, j)].sin_cos();
                        row[j] = c * co;
                        row[m + j] = c * s;
                    }
                });
            }
            FeatureVariant::CosPhase => {
                let c = (2.0 * self.amplitude / m as f64).sqrt();
                let b = self.phases.as_ref().expect("phases present for cos-phase features");
                data.par_chunks_mut(width).enumerate().for_each(|(i, row)| {
                    for j in 0..m {
                        row[j] = c * (proj[(i, j)] + b[j]).cos();
                    }
                });
            }
        }
        Ok(DMatrix::from_row_slice(n, width, &data))
    }
}

/// A prior function sample f(·) = μ + φ(·)ᵀw.
#[derive(Debug, Clone)]
pub struct PriorSample {
    pub features: Arc<FourierFeatureSet>,
    pub weights: DVector<f64>,
    pub mean: f64,
}

impl PriorSample {
    pub fn new(features: Arc<FourierFeatureSet>, weights: DVector<f64>) -> Result<Self> {
        dim_check(weights.len() == features.feature_dim(), || {
            format!("{} weights for {} features", weights.len(), features.feature_dim())
        })?;
        Ok(PriorSample { features, weights, mean: 0.0 })
    }

    /// Draws standard-normal weights from `rng`.
    pub fn draw<R: Rng + ?Sized>(features: Arc<FourierFeatureSet>, rng: &mut R) -> Self {
        let weights = DVector::from_fn(features.feature_dim(), |_, _| StandardNormal.sample(rng));
        PriorSample { features, weights, mean: 0.0 }
    }

    pub fn eval(&self, x: &DMatrix<f64>) -> Result<DVector<f64>> {
        let phi = self.features.feature_matrix(x)?;
        Ok((phi * &self.weights).add_scalar(self.mean))
    }
}

/// Evaluates several weight vectors (columns of `w`) sharing one feature set.
pub fn eval_prior_batch(features: &FourierFeatureSet, w: &DMatrix<f64>, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    dim_check(w.nrows() == features.feature_dim(), || {
        format!("{} weight rows for {} features", w.nrows(), features.feature_dim())
    })?;
    Ok(features.feature_matrix(x)? * w)
}
