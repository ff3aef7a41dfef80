use std::path::Path;

use nalgebra::DMatrix;
use serde_json::json;

use itergp::pathwise::predictive_moments;

use super::{posterior_samples, report_json, Outputs};
use crate::config::{PredictConfig, SampleCmdConfig};
use crate::data::{ingest, read_table};
use crate::error::{CliError, CliResult};
use crate::metrics::evaluate;
use crate::output::{cell, write_csv, write_json};

/// Predictive moments on the test split, on both scales.
pub fn predict(cfg: &PredictConfig, out: &Path) -> CliResult<Outputs> {
    let d = &cfg.data;
    let (train, test) = ingest(&d.path, &d.target, d.train_fraction, d.split_seed)?;
    if test.is_empty() {
        return Err(CliError::input("the split leaves no test rows to predict"));
    }
    let model = cfg.model.to_model(train.x.ncols())?;
    let samples = posterior_samples(&model, &train.to_data()?, &test.x, &cfg.sampling)?;
    let moments = predictive_moments(&samples.eval(&test.x)?, model.noise_variance())?;
    let stats = train.stats.clone().expect("ingest standardises");
    let mean_raw = stats.unapply_y(&moments.mean);
    let target_raw = stats.unapply_y(&test.y);
    let header = ["row", "mean", "latent_variance", "variance", "target", "mean_raw", "sd_raw", "target_raw"];
    write_csv(
        &out.join("predictions.csv"),
        &header.map(String::from),
        (0..test.len()).map(|i| {
            vec![
                i.to_string(),
                cell(moments.mean[i]),
                cell(moments.latent_variance[i]),
                cell(moments.variance[i]),
                cell(test.y[i]),
                cell(mean_raw[i]),
                cell(moments.variance[i].sqrt() * stats.y_std),
                cell(target_raw[i]),
            ]
        }),
    )?;
    let m = evaluate(&test.y, &moments.mean, &moments.variance)?;
    let summary = json!({
        "test_size": test.len(),
        "standardized": m,
        "raw": m.to_raw(stats.y_std),
        "solver": report_json(&samples.report),
    });
    write_json(&out.join("metrics.json"), &summary)?;
    Ok((vec!["predictions.csv".into(), "metrics.json".into()], summary))
}

/// Posterior function samples at query points, on the standardised scale.
pub fn sample(cfg: &SampleCmdConfig, out: &Path) -> CliResult<Outputs> {
    let d = &cfg.data;
    let (train, test) = ingest(&d.path, &d.target, d.train_fraction, d.split_seed)?;
    let stats = train.stats.clone().expect("ingest standardises");
    let (raw_x, xs) = match &cfg.query {
        Some(path) => {
            let raw = read_table(path)?.select(&train.feature_names)?;
            let xs = stats.apply_x(&raw);
            (raw, xs)
        }
        None => {
            let raw = DMatrix::from_fn(test.x.nrows(), test.x.ncols(), |i, j| {
                test.x[(i, j)] * stats.x_std[j] + stats.x_mean[j]
            });
            (raw, test.x.clone())
        }
    };
    if xs.nrows() == 0 {
        return Err(CliError::input("no query points"));
    }
    let model = cfg.model.to_model(train.x.ncols())?;
    let samples = posterior_samples(&model, &train.to_data()?, &xs, &cfg.sampling)?;
    let values = samples.eval(&xs)?;
    let mut header = train.feature_names.clone();
    header.extend((0..values.ncols()).map(|j| format!("sample_{j}")));
    write_csv(
        &out.join("samples.csv"),
        &header,
        (0..xs.nrows()).map(|i| raw_x.row(i).iter().chain(values.row(i).iter()).map(|v| cell(*v)).collect()),
    )?;
    let summary =
        json!({ "query_points": xs.nrows(), "num_samples": values.ncols(), "solver": report_json(&samples.report) });
    write_json(&out.join("summary.json"), &summary)?;
    Ok((vec!["samples.csv".into(), "summary.json".into()], summary))
}
