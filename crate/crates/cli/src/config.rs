//! Fully resolved run configurations. Every run writes its `RunConfig` to
//! `config.json` in the output directory, and `itergp rerun` replays it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use itergp::mll::OuterConfig;
use itergp::solvers::{SolverConfig, SolverKind};
use itergp::{KernelExpr, MaternNu, ModelSpec};

use crate::error::{CliError, CliResult};
use crate::thompson::ThompsonConfig;

/// Model JSON: a kernel expression plus constrained hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub kernel: KernelExpr,
    pub params: ModelParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Kernel parameters in layout order (signal variance, lengthscales, period).
    pub kernel: Vec<f64>,
    pub noise_variance: f64,
    /// Parameter names, informational only.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub names: Vec<String>,
}

impl ModelFile {
    /// A scaled stationary kernel with unit signal variance and lengthscales.
    pub fn default_for(kind: BaseKernel, input_dim: usize, noise_variance: f64) -> CliResult<Self> {
        let kernel = KernelExpr::scaled(kind.expr());
        let p = kernel.param_count(input_dim)?;
        let model = ModelSpec::with_params(kernel, input_dim, &vec![1.0; p], noise_variance)?;
        Ok(ModelFile::from_model(&model))
    }

    pub fn from_model(model: &ModelSpec) -> Self {
        let theta = model.hyper.theta();
        let names = model.param_names();
        ModelFile {
            kernel: model.kernel.clone(),
            params: ModelParams {
                kernel: theta[..theta.len() - 1].to_vec(),
                noise_variance: model.noise_variance(),
                names: names[..names.len() - 1].to_vec(),
            },
        }
    }

    pub fn to_model(&self, input_dim: usize) -> CliResult<ModelSpec> {
        Ok(ModelSpec::with_params(self.kernel.clone(), input_dim, &self.params.kernel, self.params.noise_variance)?)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
    }
}

/// Stationary base kernels selectable from the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseKernel {
    Se,
    Matern12,
    Matern32,
    Matern52,
}

impl BaseKernel {
    pub fn expr(self) -> KernelExpr {
        match self {
            BaseKernel::Se => KernelExpr::se(),
            BaseKernel::Matern12 => KernelExpr::matern(MaternNu::Half),
            BaseKernel::Matern32 => KernelExpr::matern(MaternNu::ThreeHalves),
            BaseKernel::Matern52 => KernelExpr::matern(MaternNu::FiveHalves),
        }
    }
}

impl std::str::FromStr for BaseKernel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "se" => Ok(BaseKernel::Se),
            "matern12" => Ok(BaseKernel::Matern12),
            "matern32" => Ok(BaseKernel::Matern32),
            "matern52" => Ok(BaseKernel::Matern52),
            other => Err(format!("unknown kernel '{other}'")),
        }
    }
}

/// A CSV file split into standardised train and test sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSource {
    pub path: PathBuf,
    pub target: String,
    pub train_fraction: f64,
    pub split_seed: u64,
}

/// Solver choice with its full configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverSettings {
    pub kind: SolverKind,
    pub config: SolverConfig,
}

/// Pathwise sampling settings for prediction and evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingSettings {
    pub num_samples: usize,
    pub num_features: usize,
    pub solver: SolverSettings,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub data: DataSource,
    pub init: ModelFile,
    pub outer: OuterConfig,
    pub evaluation: SamplingSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictConfig {
    pub data: DataSource,
    pub model: ModelFile,
    pub sampling: SamplingSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleCmdConfig {
    pub data: DataSource,
    pub model: ModelFile,
    /// Query inputs on the raw feature scale; the test split when absent.
    pub query: Option<PathBuf>,
    pub sampling: SamplingSettings,
}

/// Training data for a solver comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum CompareData {
    Csv(DataSource),
    /// Inputs uniform on [0, 1]^d, targets from the model's prior via features.
    Synthetic {
        n: usize,
        dims: usize,
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareConfig {
    pub data: CompareData,
    pub model: Option<ModelFile>,
    pub solvers: Vec<SolverKind>,
    pub solver_cfg: SolverConfig,
    /// Pathwise probe systems solved alongside y.
    pub num_probes: usize,
    pub num_features: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub p: usize,
    pub q: usize,
    pub gammas: Vec<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThompsonCmdConfig {
    pub demo: ThompsonConfig,
    /// Also run uniform random search with the same budget.
    pub baseline: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
#[allow(clippy::large_enum_variant)]
pub enum Command {
    Fit(FitConfig),
    Predict(PredictConfig),
    Sample(SampleCmdConfig),
    SolverCompare(CompareConfig),
    BenchMvm(BenchConfig),
    ThompsonDemo(ThompsonCmdConfig),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Fit(_) => "fit",
            Command::Predict(_) => "predict",
            Command::Sample(_) => "sample",
            Command::SolverCompare(_) => "solver-compare",
            Command::BenchMvm(_) => "bench-mvm",
            Command::ThompsonDemo(_) => "thompson-demo",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(flatten)]
    pub command: Command,
    pub out_dir: PathBuf,
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
    }
}
