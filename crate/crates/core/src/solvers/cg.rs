//! Batched (preconditioned) conjugate gradients.

use std::time::Instant;

use nalgebra::DMatrix;

use super::precond::{pivoted_cholesky, PivotedCholesky};
use super::{criterion_met, finish, LinearSystemBatch, Solution, SolverConfig, Termination, DIVERGENCE_FACTOR};
use crate::error::Result;

/// Search directions of a traced single-column run.
#[derive(Debug, Clone)]
pub struct CgTrace {
    pub directions: Vec<nalgebra::DVector<f64>>,
}

/// Conjugate gradients with per-column step sizes; columns that reach the
/// tolerance are frozen and drop out of subsequent products.
pub fn solve_cg(sys: &LinearSystemBatch<'_>, cfg: &SolverConfig) -> Result<Solution> {
    run(sys, cfg, None)
}

/// [`solve_cg`] that also records the search directions of column 0.
pub fn solve_cg_traced(sys: &LinearSystemBatch<'_>, cfg: &SolverConfig) -> Result<(Solution, CgTrace)> {
    let mut trace = CgTrace { directions: Vec::new() };
    let sol = run(sys, cfg, Some(&mut trace))?;
    Ok((sol, trace))
}

fn run(sys: &LinearSystemBatch<'_>, cfg: &SolverConfig, mut trace: Option<&mut CgTrace>) -> Result<Solution> {
    cfg.validate()?;
    let start = Instant::now();
    let op = sys.op;
    let e0 = op.epochs();
    let cols = sys.columns();
    let budget = cfg.max_epochs.unwrap_or(f64::INFINITY);
    let precond: Option<PivotedCholesky> =
        if cfg.cg.precond_rank > 0 { Some(pivoted_cholesky(op, cfg.cg.precond_rank)?) } else { None };
    let apply_m = |r: &DMatrix<f64>| match &precond {
        Some(p) => p.apply_inverse(r),
        None => r.clone(),
    };

    let mut x = sys.initial();
    let mut r = if sys.init.is_some() { &sys.rhs - op.apply(&x) } else { sys.rhs.clone() };
    let mut rel = sys.relative_all(&r);
    let initial: Vec<f64> = r.column_iter().map(|c| c.norm()).collect();
    let mut active: Vec<bool> = rel.iter().map(|&v| v > cfg.tol).collect();
    let mut z = apply_m(&r);
    let mut p = z.clone();
    let mut rz: Vec<f64> = (0..cols).map(|j| r.column(j).dot(&z.column(j))).collect();
    let mut history = Vec::new();
    let mut iterations = 0;
    let mut termination = Termination::Budget;

    loop {
        if criterion_met(cfg.criterion, &rel, cfg.tol) {
            termination = Termination::Tolerance;
            break;
        }
        if iterations >= cfg.max_iters || op.epochs() - e0 + 1.0 > budget + 1e-9 {
            break;
        }
        let idx: Vec<usize> = (0..cols).filter(|&j| active[j]).collect();
        if idx.is_empty() {
            termination = Termination::Tolerance;
            break;
        }
        if let Some(t) = trace.as_deref_mut() {
            if active[0] {
                t.directions.push(p.column(0).into_owned());
            }
        }
        let p_act = p.select_columns(&idx);
        let hp = op.apply(&p_act);
        iterations += 1;
        let mut diverged = false;
        for (c, &j) in idx.iter().enumerate() {
            let php = p_act.column(c).dot(&hp.column(c));
            if !(php > 0.0) || !php.is_finite() {
                // zero curvature means the residual already vanished for this column
                if php == 0.0 {
                    active[j] = false;
                    continue;
                }
                diverged = true;
                break;
            }
            let alpha = rz[j] / php;
            x.column_mut(j).axpy(alpha, &p_act.column(c), 1.0);
            r.column_mut(j).axpy(-alpha, &hp.column(c), 1.0);
            let rn = r.column(j).norm();
            if !rn.is_finite() || rn > DIVERGENCE_FACTOR * initial[j].max(f64::MIN_POSITIVE) {
                diverged = true;
                break;
            }
            rel[j] = sys.relative(j, rn);
        }
        if diverged {
            termination = Termination::Divergence;
            break;
        }
        if cfg.record_history {
            history.push(rel.iter().cloned().fold(0.0, f64::max));
        }
        let r_act = r.select_columns(&idx);
        let z_act = apply_m(&r_act);
        for (c, &j) in idx.iter().enumerate() {
            let rz_new = r_act.column(c).dot(&z_act.column(c));
            let beta = if rz[j] != 0.0 { rz_new / rz[j] } else { 0.0 };
            rz[j] = rz_new;
            z.set_column(j, &z_act.column(c));
            let pj = z_act.column(c) + p.column(j) * beta;
            p.set_column(j, &pj);
            if rel[j] <= cfg.tol {
                active[j] = false;
            }
        }
    }
    let epochs = op.epochs() - e0;
    let report = finish(sys, &x, iterations, epochs, termination, start, history);
    Ok(Solution { v: x, report })
}
