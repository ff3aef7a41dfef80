use std::path::Path;

use serde::Serialize;
use serde_json::json;

use itergp::mll::optimize;
use itergp::solvers::Termination;

use super::{posterior_samples, Outputs};
use crate::config::{FitConfig, ModelFile};
use crate::data::ingest;
use crate::metrics::evaluate_samples;
use crate::output::{cell, write_csv, write_json, write_jsonl};

/// One outer step without timing, so trajectories are reproducible bitwise.
#[derive(Debug, Serialize)]
struct TrajectoryRow<'a> {
    step: usize,
    theta: &'a [f64],
    noise_variance: f64,
    grad: &'a [f64],
    mean_residual: Option<f64>,
    probe_residual: Option<f64>,
    iterations: usize,
    epochs: f64,
    termination: Option<Termination>,
    skipped: bool,
    exact_mll: Option<f64>,
}

pub fn fit(cfg: &FitConfig, out: &Path) -> crate::error::CliResult<Outputs> {
    let d = &cfg.data;
    let (train, test) = ingest(&d.path, &d.target, d.train_fraction, d.split_seed)?;
    let data = train.to_data()?;
    let model0 = cfg.init.to_model(train.x.ncols())?;
    let traj = optimize(&model0, &data, &cfg.outer)?;

    write_json(&out.join("model.json"), &ModelFile::from_model(&traj.model))?;
    let rows: Vec<TrajectoryRow> = traj
        .records
        .iter()
        .map(|r| TrajectoryRow {
            step: r.step,
            theta: &r.theta,
            noise_variance: r.noise_variance,
            grad: &r.grad,
            mean_residual: r.mean_residual,
            probe_residual: r.probe_residual,
            iterations: r.iterations,
            epochs: r.epochs,
            termination: r.termination,
            skipped: r.skipped,
            exact_mll: r.exact_mll,
        })
        .collect();
    write_jsonl(&out.join("trajectory.jsonl"), &rows)?;
    write_csv(
        &out.join("timing.csv"),
        &["step".into(), "wall_time".into()],
        traj.records.iter().map(|r| vec![r.step.to_string(), cell(r.wall_time)]),
    )?;

    let metrics = if test.is_empty() {
        serde_json::Value::Null
    } else {
        let samples = posterior_samples(&traj.model, &data, &test.x, &cfg.evaluation)?;
        let m = evaluate_samples(&test.y, &samples.eval(&test.x)?, traj.model.noise_variance())?;
        let y_std = train.stats.as_ref().map_or(1.0, |s| s.y_std);
        json!({ "standardized": m, "raw": m.to_raw(y_std) })
    };
    let summary = json!({
        "train_size": train.len(),
        "test_size": test.len(),
        "total_iterations": traj.total_iterations,
        "total_epochs": traj.total_epochs,
        "skipped_steps": traj.skipped_steps,
        "test": metrics,
    });
    write_json(&out.join("metrics.json"), &summary)?;
    let files = ["model.json", "trajectory.jsonl", "metrics.json", "timing.csv"].map(String::from).to_vec();
    Ok((files, summary))
}
