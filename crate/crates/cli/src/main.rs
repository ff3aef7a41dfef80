use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use itergp::mll::{EstimatorKind, GradientSource, OuterConfig};
use itergp::solvers::{Criterion, SolverConfig, SolverKind};
use itergp_cli::config::{
    BaseKernel, BenchConfig, Command, CompareConfig, CompareData, DataSource, FitConfig, ModelFile, PredictConfig,
    RunConfig, SampleCmdConfig, SamplingSettings, SolverSettings, ThompsonCmdConfig,
};
use itergp_cli::thompson::ThompsonConfig;
use itergp_cli::{run, CliError, CliResult};

#[derive(Parser)]
#[command(name = "itergp", version, about = "Iterative Gaussian-process regression")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Optimise hyperparameters on the training split and evaluate on the test split.
    Fit(FitArgs),
    /// Predictive moments on the test split.
    Predict(PredictArgs),
    /// Posterior function samples at query points.
    Sample(SampleArgs),
    /// Solve the same batch with several solvers.
    SolverCompare(CompareArgs),
    /// Dense versus latent-Kronecker matvec cost over missing ratios.
    BenchMvm(BenchArgs),
    /// Parallel Thompson sampling on a synthetic objective.
    ThompsonDemo(ThompsonArgs),
    /// Replay a run from its config.json.
    Rerun {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; defaults to the one in the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct DataArgs {
    /// CSV file with a header row.
    #[arg(long)]
    data: PathBuf,
    /// Name of the target column.
    #[arg(long)]
    target: String,
    #[arg(long, default_value_t = 0.9)]
    train_fraction: f64,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
}

impl DataArgs {
    fn source(&self) -> DataSource {
        DataSource {
            path: self.data.clone(),
            target: self.target.clone(),
            train_fraction: self.train_fraction,
            split_seed: self.split_seed,
        }
    }
}

#[derive(Args)]
struct SolverArgs {
    /// cg, ap, sgd, sdd or exact.
    #[arg(long, default_value = "cg")]
    solver: SolverKind,
    /// Relative residual tolerance.
    #[arg(long, default_value_t = 0.01)]
    tol: f64,
    /// Epoch budget per solve.
    #[arg(long)]
    max_epochs: Option<f64>,
    #[arg(long, default_value_t = 100_000)]
    max_iters: usize,
    /// AP block size.
    #[arg(long)]
    block_size: Option<usize>,
    /// SGD and SDD batch size.
    #[arg(long)]
    batch_size: Option<usize>,
    /// SGD and SDD normalised step size.
    #[arg(long)]
    step: Option<f64>,
    /// Pivoted-Cholesky preconditioner rank for CG.
    #[arg(long, default_value_t = 0)]
    precond_rank: usize,
    #[arg(long, default_value_t = 0)]
    solver_seed: u64,
}

impl SolverArgs {
    fn config(&self) -> SolverConfig {
        let mut c = SolverConfig {
            tol: self.tol,
            max_epochs: self.max_epochs,
            max_iters: self.max_iters,
            seed: self.solver_seed,
            ..SolverConfig::default()
        };
        c.cg.precond_rank = self.precond_rank;
        if let Some(b) = self.block_size {
            c.ap.block_size = b;
        }
        if let Some(b) = self.batch_size {
            c.sgd.batch_size = b;
            c.sdd.batch_size = b;
        }
        if let Some(s) = self.step {
            c.sgd.step = s;
            c.sdd.step = s;
        }
        c
    }

    fn settings(&self) -> SolverSettings {
        SolverSettings { kind: self.solver, config: self.config() }
    }
}

#[derive(Args)]
struct SamplingArgs {
    /// Posterior samples drawn for predictive moments.
    #[arg(long, default_value_t = 64)]
    samples: usize,
    /// Random Fourier frequencies per prior sample.
    #[arg(long, default_value_t = 2000)]
    features: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    solver: SolverArgs,
    /// Initial model JSON; otherwise a scaled --kernel with unit parameters.
    #[arg(long)]
    model: Option<PathBuf>,
    /// se, matern12, matern32 or matern52.
    #[arg(long, default_value = "se")]
    kernel: BaseKernel,
    #[arg(long, default_value_t = 0.1)]
    init_noise: f64,
    #[arg(long, default_value_t = 100)]
    steps: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    /// pathwise, standard or exact.
    #[arg(long, default_value = "pathwise")]
    gradient: String,
    #[arg(long, default_value_t = 64)]
    probes: usize,
    #[arg(long, default_value_t = 2000)]
    features: usize,
    /// Start every solve from zero and redraw probes each step.
    #[arg(long)]
    no_warm_start: bool,
    /// Record the exact log marginal likelihood per step (small n only).
    #[arg(long)]
    track_mll: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Posterior samples used for test metrics.
    #[arg(long, default_value_t = 64)]
    eval_samples: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    solver: SolverArgs,
    #[command(flatten)]
    sampling: SamplingArgs,
    /// Model JSON, e.g. the model.json written by fit.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SampleArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    solver: SolverArgs,
    #[command(flatten)]
    sampling: SamplingArgs,
    #[arg(long)]
    model: PathBuf,
    /// CSV of query inputs with the training feature columns.
    #[arg(long)]
    query: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    /// CSV file; a synthetic problem is generated when absent.
    #[arg(long, requires = "target")]
    data: Option<PathBuf>,
    #[arg(long)]
    target: Option<String>,
    #[arg(long, default_value_t = 0.9)]
    train_fraction: f64,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    #[arg(long, default_value_t = 512)]
    synthetic_n: usize,
    #[arg(long, default_value_t = 2)]
    dims: usize,
    #[arg(long)]
    model: Option<PathBuf>,
    /// Comma-separated solvers.
    #[arg(long, value_delimiter = ',', default_value = "cg,ap,sgd,sdd")]
    solvers: Vec<SolverKind>,
    #[command(flatten)]
    solver: SolverArgs,
    #[arg(long, default_value_t = 8)]
    probes: usize,
    #[arg(long, default_value_t = 2000)]
    features: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    p: usize,
    #[arg(long)]
    q: usize,
    /// Spacing of the missing-ratio grid on [0, 1).
    #[arg(long, default_value_t = 0.01)]
    gamma_step: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ThompsonArgs {
    #[arg(long, default_value_t = 1)]
    dims: usize,
    #[arg(long, default_value_t = 5)]
    initial: usize,
    #[arg(long, default_value_t = 10)]
    steps: usize,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long, default_value_t = 0.1)]
    lengthscale: f64,
    #[arg(long, default_value_t = 500)]
    candidates: usize,
    #[arg(long, default_value_t = 4)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also run uniform random search with the same budget.
    #[arg(long)]
    baseline: bool,
    #[arg(long)]
    out: PathBuf,
}

fn load_model(path: &Path) -> CliResult<ModelFile> {
    ModelFile::load(path)
}

fn sampling(args: &SamplingArgs, solver: &SolverArgs) -> SamplingSettings {
    SamplingSettings {
        num_samples: args.samples,
        num_features: args.features,
        solver: solver.settings(),
        seed: args.seed,
    }
}

fn resolve(cmd: Cmd) -> CliResult<RunConfig> {
    Ok(match cmd {
        Cmd::Fit(a) => {
            let dims = itergp_cli::data::read_table(&a.data.data)?.names.len().saturating_sub(1);
            let init = match &a.model {
                Some(p) => load_model(p)?,
                None => ModelFile::default_for(a.kernel, dims.max(1), a.init_noise)?,
            };
            let gradient = match a.gradient.as_str() {
                "exact" => GradientSource::Exact,
                other => GradientSource::Estimated(other.parse::<EstimatorKind>().map_err(CliError::input)?),
            };
            let outer = OuterConfig {
                steps: a.steps,
                lr: a.lr,
                gradient,
                num_probes: a.probes,
                num_features: a.features,
                solver: a.solver.solver,
                solver_cfg: SolverConfig { criterion: Criterion::Split, ..a.solver.config() },
                warm_start: !a.no_warm_start,
                seed: a.seed,
                track_exact_mll: a.track_mll,
                ..OuterConfig::default()
            };
            let evaluation = SamplingSettings {
                num_samples: a.eval_samples,
                num_features: a.features,
                solver: a.solver.settings(),
                seed: a.seed,
            };
            RunConfig {
                command: Command::Fit(FitConfig { data: a.data.source(), init, outer, evaluation }),
                out_dir: a.out,
            }
        }
        Cmd::Predict(a) => RunConfig {
            command: Command::Predict(PredictConfig {
                data: a.data.source(),
                model: load_model(&a.model)?,
                sampling: sampling(&a.sampling, &a.solver),
            }),
            out_dir: a.out,
        },
        Cmd::Sample(a) => RunConfig {
            command: Command::Sample(SampleCmdConfig {
                data: a.data.source(),
                model: load_model(&a.model)?,
                query: a.query,
                sampling: sampling(&a.sampling, &a.solver),
            }),
            out_dir: a.out,
        },
        Cmd::SolverCompare(a) => {
            let data = match (a.data, a.target) {
                (Some(path), Some(target)) => CompareData::Csv(DataSource {
                    path,
                    target,
                    train_fraction: a.train_fraction,
                    split_seed: a.split_seed,
                }),
                _ => CompareData::Synthetic { n: a.synthetic_n, dims: a.dims, seed: a.seed },
            };
            let model = a.model.as_deref().map(load_model).transpose()?;
            RunConfig {
                command: Command::SolverCompare(CompareConfig {
                    data,
                    model,
                    solvers: a.solvers,
                    solver_cfg: a.solver.config(),
                    num_probes: a.probes,
                    num_features: a.features,
                    seed: a.seed,
                }),
                out_dir: a.out,
            }
        }
        Cmd::BenchMvm(a) => {
            if !(a.gamma_step > 0.0 && a.gamma_step < 1.0) {
                return Err(CliError::input("gamma step must lie in (0, 1)"));
            }
            let count = (1.0 / a.gamma_step).ceil() as usize;
            let gammas = (0..count).map(|k| k as f64 * a.gamma_step).filter(|g| *g < 1.0).collect();
            RunConfig {
                command: Command::BenchMvm(BenchConfig { p: a.p, q: a.q, gammas, seed: a.seed }),
                out_dir: a.out,
            }
        }
        Cmd::ThompsonDemo(a) => {
            let demo = ThompsonConfig {
                dims: a.dims,
                initial: a.initial,
                steps: a.steps,
                batch: a.batch,
                lengthscale: a.lengthscale,
                candidates: a.candidates,
                repeats: a.repeats,
                seed: a.seed,
                ..ThompsonConfig::default()
            };
            RunConfig {
                command: Command::ThompsonDemo(ThompsonCmdConfig { demo, baseline: a.baseline }),
                out_dir: a.out,
            }
        }
        Cmd::Rerun { config, out } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            cfg
        }
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = resolve(cli.command).and_then(|cfg| run(&cfg));
    match result {
        Ok(summary) => {
            println!("{}", serde_json::to_string_pretty(&summary).expect("summary serialises"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
