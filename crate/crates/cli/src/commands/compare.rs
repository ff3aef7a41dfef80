use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::json;

use itergp::features::{sample_features, FeatureVariant, PriorSample};
use itergp::mll::ProbeSet;
use itergp::pathwise::DENSE_OPERATOR_LIMIT;
use itergp::solvers::{operator_for, solve_rescaled, SolverKind, Termination};
use itergp::{Data, KernelExpr, ModelSpec};

use super::Outputs;
use crate::config::{BaseKernel, CompareConfig, CompareData, ModelFile};
use crate::data::ingest;
use crate::error::CliResult;
use crate::output::{cell, write_csv, write_json};

/// Outcome of one solver on the shared batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub solver: SolverKind,
    pub iterations: usize,
    pub epochs: f64,
    pub mean_residual: f64,
    pub probe_residual: Option<f64>,
    pub termination: Termination,
    /// Largest column-wise relative error against a dense solve, when affordable.
    pub rel_error: Option<f64>,
}

fn synthetic(model: &ModelSpec, n: usize, dims: usize, seed: u64) -> CliResult<Data> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = DMatrix::from_fn(n, dims, |_, _| rng.random::<f64>());
    let kernel = model.bound_kernel()?;
    let features = std::sync::Arc::new(sample_features(&kernel, 2000, FeatureVariant::SinCos, seed)?);
    let f = PriorSample::draw(features, &mut rng).eval(&x)?;
    let sigma = model.noise_scale();
    let y = DVector::from_fn(n, |i, _| {
        let e: f64 = StandardNormal.sample(&mut rng);
        f[i] + sigma * e
    });
    Ok(Data::new(x, y)?)
}

/// Solves [y, probes] with each listed solver and compares against Cholesky.
pub fn solver_compare(cfg: &CompareConfig, out: &Path) -> CliResult<Outputs> {
    let (model, data) = match &cfg.data {
        CompareData::Csv(d) => {
            let (train, _) = ingest(&d.path, &d.target, d.train_fraction, d.split_seed)?;
            let dims = train.x.ncols();
            let file = match &cfg.model {
                Some(m) => m.clone(),
                None => ModelFile::default_for(BaseKernel::Se, dims, 0.1)?,
            };
            (file.to_model(dims)?, train.to_data()?)
        }
        CompareData::Synthetic { n, dims, seed } => {
            let model = match &cfg.model {
                Some(m) => m.to_model(*dims)?,
                None => {
                    let mut params = vec![1.0];
                    params.extend(std::iter::repeat_n(0.3, *dims));
                    ModelSpec::with_params(KernelExpr::scaled(KernelExpr::se()), *dims, &params, 0.01)?
                }
            };
            let data = synthetic(&model, *n, *dims, *seed)?;
            (model, data)
        }
    };
    let n = data.len();
    let probes = ProbeSet::pathwise(&model, n, cfg.num_probes, cfg.num_features, cfg.seed)?;
    let mut rhs = DMatrix::zeros(n, cfg.num_probes + 1);
    rhs.set_column(0, &data.y);
    if cfg.num_probes > 0 {
        rhs.columns_mut(1, cfg.num_probes).copy_from(&probes.rhs(&model, &data.x)?);
    }
    let op = operator_for(&model, &data.x, DENSE_OPERATOR_LIMIT)?;
    let reference = if n <= DENSE_OPERATOR_LIMIT {
        Some(itergp::linalg::cholesky(&model.h_matrix(&data.x)?)?.solve(&rhs))
    } else {
        None
    };
    let mut rows = Vec::new();
    let mut times = Vec::new();
    for &kind in &cfg.solvers {
        op.counter().reset();
        let sol = solve_rescaled(kind, op.as_ref(), &rhs, None, &cfg.solver_cfg)?;
        let rel_error = reference.as_ref().map(|r| {
            (0..r.ncols())
                .map(|j| (sol.v.column(j) - r.column(j)).norm() / r.column(j).norm().max(f64::MIN_POSITIVE))
                .fold(0.0, f64::max)
        });
        let rep = &sol.report;
        times.push(rep.wall_time);
        rows.push(CompareRow {
            solver: kind,
            iterations: rep.iterations,
            epochs: rep.epochs,
            mean_residual: rep.mean_residual,
            probe_residual: rep.probe_residual,
            termination: rep.termination,
            rel_error,
        });
    }
    let opt = |v: Option<f64>| v.map(cell).unwrap_or_default();
    let name =
        |k: SolverKind| serde_json::to_value(k).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
    let header = ["solver", "iterations", "epochs", "mean_residual", "probe_residual", "termination", "rel_error"];
    write_csv(
        &out.join("compare.csv"),
        &header.map(String::from),
        rows.iter().map(|r| {
            let term =
                serde_json::to_value(r.termination).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
            vec![
                name(r.solver),
                r.iterations.to_string(),
                cell(r.epochs),
                cell(r.mean_residual),
                opt(r.probe_residual),
                term,
                opt(r.rel_error),
            ]
        }),
    )?;
    write_csv(
        &out.join("timing.csv"),
        &["solver".into(), "wall_time".into()],
        rows.iter().zip(&times).map(|(r, t)| vec![name(r.solver), cell(*t)]),
    )?;
    let summary = json!({ "n": n, "num_probes": cfg.num_probes, "rows": rows });
    write_json(&out.join("compare.json"), &summary)?;
    Ok((vec!["compare.csv".into(), "compare.json".into(), "timing.csv".into()], summary))
}
