//! Parallel Thompson sampling on a synthetic objective drawn from a
//! Matérn-3/2 prior on the unit cube.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use itergp::features::{sample_features, FeatureVariant, PriorSample};
use itergp::pathwise::{draw_posterior_samples, PosteriorSampleRep, PriorSource, SampleConfig};
use itergp::solvers::{SolverConfig, SolverKind};
use itergp::{Data, KernelExpr, MaternNu, ModelSpec};

use crate::error::{CliError, CliResult};

/// Settings for [`thompson_demo`] and its random-search baseline.
///
/// Candidate counts are scaled down for a single machine: 500 candidates
/// per sample and 4 refined starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThompsonConfig {
    pub dims: usize,
    pub initial: usize,
    pub steps: usize,
    pub batch: usize,
    pub lengthscale: f64,
    /// Frequencies in the objective's feature expansion.
    pub objective_features: usize,
    /// Frequencies in each posterior sample's prior.
    pub sample_features: usize,
    pub candidates: usize,
    pub uniform_fraction: f64,
    pub repeats: usize,
    pub adam_steps: usize,
    pub adam_lr: f64,
    /// Standard deviation of observation noise.
    pub obs_noise: f64,
    pub solver: SolverKind,
    pub solver_cfg: SolverConfig,
    pub seed: u64,
}

impl Default for ThompsonConfig {
    fn default() -> Self {
        ThompsonConfig {
            dims: 1,
            initial: 5,
            steps: 10,
            batch: 4,
            lengthscale: 0.1,
            objective_features: 2000,
            sample_features: 1000,
            candidates: 500,
            uniform_fraction: 0.1,
            repeats: 4,
            adam_steps: 100,
            adam_lr: 0.001,
            obs_noise: 0.001,
            solver: SolverKind::Cg,
            solver_cfg: SolverConfig { tol: 1e-6, ..SolverConfig::default() },
            seed: 0,
        }
    }
}

impl ThompsonConfig {
    pub fn validate(&self) -> CliResult<()> {
        if self.dims == 0 || self.dims > 4 {
            return Err(CliError::input("dims must lie in 1..=4"));
        }
        if self.initial == 0 || self.batch == 0 || self.candidates == 0 || self.repeats == 0 {
            return Err(CliError::input("initial design, batch, candidates and repeats must be positive"));
        }
        if !(self.lengthscale > 0.0 && self.obs_noise > 0.0 && self.adam_lr > 0.0) {
            return Err(CliError::input("lengthscale, noise and learning rate must be positive"));
        }
        if !(0.0..=1.0).contains(&self.uniform_fraction) {
            return Err(CliError::input("uniform fraction must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Objective evaluations used in total.
    pub fn budget(&self) -> usize {
        self.initial + self.steps * self.batch
    }

    fn model(&self) -> CliResult<ModelSpec> {
        let mut params = vec![1.0];
        params.extend(std::iter::repeat_n(self.lengthscale, self.dims));
        Ok(ModelSpec::with_params(
            KernelExpr::scaled(KernelExpr::matern(MaternNu::ThreeHalves)),
            self.dims,
            &params,
            self.obs_noise * self.obs_noise,
        )?)
    }
}

/// A fixed function drawn from the Matérn-3/2 prior.
#[derive(Debug, Clone)]
pub struct Objective {
    sample: PriorSample,
}

impl Objective {
    pub fn draw(cfg: &ThompsonConfig) -> CliResult<Self> {
        let model = cfg.model()?;
        let kernel = model.bound_kernel()?;
        let features = Arc::new(sample_features(&kernel, cfg.objective_features, FeatureVariant::SinCos, cfg.seed)?);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        Ok(Objective { sample: PriorSample::draw(features, &mut rng) })
    }

    pub fn eval(&self, x: &DMatrix<f64>) -> CliResult<DVector<f64>> {
        Ok(self.sample.eval(x)?)
    }
}

/// Best noise-free objective value after each step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub step: usize,
    pub evaluations: usize,
    pub best: f64,
    pub batch_best: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchRun {
    pub history: Vec<StepRow>,
    pub best: f64,
    pub best_x: Vec<f64>,
}

struct Observations {
    x: Vec<Vec<f64>>,
    y: Vec<f64>,
    truth: Vec<f64>,
}

impl Observations {
    fn add(&mut self, x: &DMatrix<f64>, truth: &DVector<f64>, noise: f64, rng: &mut ChaCha8Rng) {
        for i in 0..x.nrows() {
            let eps: f64 = StandardNormal.sample(rng);
            self.x.push(x.row(i).iter().copied().collect());
            self.y.push(truth[i] + noise * eps);
            self.truth.push(truth[i]);
        }
    }

    fn best(&self) -> (f64, Vec<f64>) {
        let i =
            (0..self.truth.len()).max_by(|&a, &b| self.truth[a].total_cmp(&self.truth[b])).expect("non-empty design");
        (self.truth[i], self.x[i].clone())
    }

    fn data(&self) -> CliResult<Data> {
        let d = self.x[0].len();
        let x = DMatrix::from_fn(self.x.len(), d, |i, j| self.x[i][j]);
        Ok(Data::new(x, DVector::from_column_slice(&self.y))?)
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, d: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, d, |_, _| rng.random::<f64>())
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn initial_design(cfg: &ThompsonConfig, objective: &Objective) -> CliResult<Observations> {
    let x = uniform(&mut stream(cfg.seed, 2), cfg.initial, cfg.dims);
    let truth = objective.eval(&x)?;
    let mut obs = Observations { x: Vec::new(), y: Vec::new(), truth: Vec::new() };
    obs.add(&x, &truth, cfg.obs_noise, &mut stream(cfg.seed, 3));
    Ok(obs)
}

fn record(obs: &Observations, step: usize, batch_best: Option<f64>) -> StepRow {
    StepRow { step, evaluations: obs.truth.len(), best: obs.best().0, batch_best }
}

fn finish(obs: &Observations, history: Vec<StepRow>) -> SearchRun {
    let (best, best_x) = obs.best();
    SearchRun { history, best, best_x }
}

/// Softmax weights over standardised observations.
fn exploitation_weights(y: &[f64]) -> Vec<f64> {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let std = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let z: Vec<f64> = y.iter().map(|v| if std > 0.0 { (v - mean) / std } else { 0.0 }).collect();
    let zmax = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    z.iter().map(|v| (v - zmax).exp()).collect()
}

fn candidates(
    cfg: &ThompsonConfig,
    obs: &Observations,
    weights: &WeightedIndex<f64>,
    rng: &mut ChaCha8Rng,
) -> DMatrix<f64> {
    let n_unif = (cfg.uniform_fraction * cfg.candidates as f64).round() as usize;
    let nearby = Normal::new(0.0, cfg.lengthscale / 2.0).expect("positive scale");
    let mut out = uniform(rng, cfg.candidates, cfg.dims);
    for r in n_unif..cfg.candidates {
        let centre = &obs.x[weights.sample(rng)];
        for j in 0..cfg.dims {
            out[(r, j)] = (centre[j] + nearby.sample(rng)).clamp(0.0, 1.0);
        }
    }
    out
}

/// Adam ascent on one posterior sample from several starts, with central
/// finite-difference gradients, staying inside the unit cube.
fn refine(sample: &PosteriorSampleRep, starts: DMatrix<f64>, cfg: &ThompsonConfig) -> CliResult<DMatrix<f64>> {
    const H: f64 = 1e-6;
    let (r, d) = starts.shape();
    let mut x = starts;
    let mut m: DMatrix<f64> = DMatrix::zeros(r, d);
    let mut v: DMatrix<f64> = DMatrix::zeros(r, d);
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    for t in 1..=cfg.adam_steps {
        let mut probes = DMatrix::zeros(2 * r * d, d);
        for i in 0..r {
            for j in 0..d {
                for (s, sign) in [(0, 1.0), (1, -1.0)] {
                    let row = 2 * (i * d + j) + s;
                    probes.row_mut(row).copy_from(&x.row(i));
                    probes[(row, j)] += sign * H;
                }
            }
        }
        let f = sample.eval(&probes)?;
        for i in 0..r {
            for j in 0..d {
                let k = 2 * (i * d + j);
                let g = (f[k] - f[k + 1]) / (2.0 * H);
                m[(i, j)] = b1 * m[(i, j)] + (1.0 - b1) * g;
                v[(i, j)] = b2 * v[(i, j)] + (1.0 - b2) * g * g;
                let mh = m[(i, j)] / (1.0 - b1.powi(t as i32));
                let vh = v[(i, j)] / (1.0 - b2.powi(t as i32));
                x[(i, j)] = (x[(i, j)] + cfg.adam_lr * mh / (vh.sqrt() + eps)).clamp(0.0, 1.0);
            }
        }
    }
    Ok(x)
}

fn top_rows(x: &DMatrix<f64>, values: &DVector<f64>, k: usize) -> DMatrix<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    idx.truncate(k.min(values.len()));
    x.select_rows(&idx)
}

fn acquire(
    cfg: &ThompsonConfig,
    obs: &Observations,
    sample: &PosteriorSampleRep,
    rng: &mut ChaCha8Rng,
) -> CliResult<Vec<f64>> {
    let weights = WeightedIndex::new(exploitation_weights(&obs.y)).map_err(|e| CliError::Numerical(e.to_string()))?;
    let cands = candidates(cfg, obs, &weights, rng);
    let values = sample.eval(&cands)?;
    let refined = refine(sample, top_rows(&cands, &values, cfg.repeats), cfg)?;
    let scores = sample.eval(&refined)?;
    Ok(refined.row(scores.imax()).iter().copied().collect())
}

/// Runs batched Thompson sampling and reports the running maximum of the
/// noise-free objective over all evaluated points.
pub fn thompson_demo(cfg: &ThompsonConfig) -> CliResult<SearchRun> {
    cfg.validate()?;
    let objective = Objective::draw(cfg)?;
    let model = cfg.model()?;
    let mut obs = initial_design(cfg, &objective)?;
    let mut noise_rng = stream(cfg.seed, 4);
    let mut history = vec![record(&obs, 0, None)];
    for step in 1..=cfg.steps {
        let sample_cfg = SampleConfig {
            num_samples: cfg.batch,
            prior: PriorSource::Fourier { num_features: cfg.sample_features, variant: FeatureVariant::SinCos },
            solver: cfg.solver,
            solver_cfg: cfg.solver_cfg,
            seed: cfg.seed.wrapping_mul(1_000_003).wrapping_add(step as u64),
        };
        let samples = draw_posterior_samples(&model, &obs.data()?, &sample_cfg)?;
        let mut batch = DMatrix::zeros(cfg.batch, cfg.dims);
        for j in 0..cfg.batch {
            let mut rng = stream(cfg.seed, 16 + (step * cfg.batch + j) as u64);
            let x = acquire(cfg, &obs, &samples.get(j), &mut rng)?;
            batch.row_mut(j).copy_from_slice(&x);
        }
        let truth = objective.eval(&batch)?;
        obs.add(&batch, &truth, cfg.obs_noise, &mut noise_rng);
        history.push(record(&obs, step, Some(truth.max())));
    }
    Ok(finish(&obs, history))
}

/// Uniform random search on the same objective and initial design with the
/// same number of evaluations.
pub fn random_search(cfg: &ThompsonConfig) -> CliResult<SearchRun> {
    cfg.validate()?;
    let objective = Objective::draw(cfg)?;
    let mut obs = initial_design(cfg, &objective)?;
    let mut rng = stream(cfg.seed, 5);
    let mut history = vec![record(&obs, 0, None)];
    for step in 1..=cfg.steps {
        let batch = uniform(&mut rng, cfg.batch, cfg.dims);
        let truth = objective.eval(&batch)?;
        obs.add(&batch, &truth, cfg.obs_noise, &mut rng);
        history.push(record(&obs, step, Some(truth.max())));
    }
    Ok(finish(&obs, history))
}
