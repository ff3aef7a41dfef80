use std::path::Path;

use serde_json::json;

use itergp::kron::{break_even, crossover, mvm_cost_sweep, MvmCost};

use super::Outputs;
use crate::config::BenchConfig;
use crate::error::{CliError, CliResult};
use crate::output::{cell, write_csv, write_json};

/// Sweeps the missing ratio and records dense versus latent-Kronecker costs.
pub fn bench_mvm(cfg: &BenchConfig, out: &Path) -> CliResult<Outputs> {
    if cfg.gammas.iter().any(|g| !(0.0..1.0).contains(g)) {
        return Err(CliError::input("missing ratios must lie in [0, 1)"));
    }
    let costs = mvm_cost_sweep(cfg.p, cfg.q, &cfg.gammas, cfg.seed)?;
    let header =
        ["gamma", "n", "dense_flops", "latent_flops", "dense_bytes", "latent_bytes", "latent_faster", "latent_smaller"];
    write_csv(
        &out.join("bench.csv"),
        &header.map(String::from),
        costs.iter().map(|c| {
            vec![
                cell(c.gamma),
                c.n.to_string(),
                c.dense_flops.to_string(),
                c.latent_flops.to_string(),
                c.dense_bytes.to_string(),
                c.latent_bytes.to_string(),
                c.latent_faster().to_string(),
                c.latent_smaller().to_string(),
            ]
        }),
    )?;
    let summary = json!({
        "p": cfg.p,
        "q": cfg.q,
        "break_even": break_even(cfg.p, cfg.q)?,
        "time_crossover": crossover(&costs, MvmCost::latent_faster),
        "memory_crossover": crossover(&costs, MvmCost::latent_smaller),
    });
    write_json(&out.join("summary.json"), &summary)?;
    Ok((vec!["bench.csv".into(), "summary.json".into()], summary))
}
