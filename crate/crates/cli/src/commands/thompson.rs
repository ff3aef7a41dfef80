use std::path::Path;

use serde_json::json;

use super::Outputs;
use crate::config::ThompsonCmdConfig;
use crate::error::CliResult;
use crate::output::{cell, write_csv, write_json};
use crate::thompson::{random_search, thompson_demo as run_demo};

pub fn thompson_demo(cfg: &ThompsonCmdConfig, out: &Path) -> CliResult<Outputs> {
    let run = run_demo(&cfg.demo)?;
    let baseline = if cfg.baseline { Some(random_search(&cfg.demo)?) } else { None };
    let mut header: Vec<String> = ["step", "evaluations", "best", "batch_best"].map(String::from).to_vec();
    if baseline.is_some() {
        header.push("random_best".into());
    }
    write_csv(
        &out.join("history.csv"),
        &header,
        run.history.iter().enumerate().map(|(i, r)| {
            let mut row = vec![
                r.step.to_string(),
                r.evaluations.to_string(),
                cell(r.best),
                r.batch_best.map(cell).unwrap_or_default(),
            ];
            if let Some(b) = &baseline {
                row.push(cell(b.history[i].best));
            }
            row
        }),
    )?;
    let summary = json!({
        "budget": cfg.demo.budget(),
        "best": run.best,
        "best_x": run.best_x,
        "random_best": baseline.as_ref().map(|b| b.best),
    });
    write_json(&out.join("summary.json"), &summary)?;
    Ok((vec!["history.csv".into(), "summary.json".into()], summary))
}
