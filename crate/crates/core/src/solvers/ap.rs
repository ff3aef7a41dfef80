//! Alternating projections over contiguous index blocks.

use std::time::Instant;

use nalgebra::{Cholesky, Dyn};

use super::{criterion_met, finish, LinearSystemBatch, Solution, SolverConfig, Termination, DIVERGENCE_FACTOR};
use crate::error::{GpError, Result};

/// Repeatedly picks the block whose residual has the largest Frobenius norm
/// across all columns, solves its diagonal subsystem exactly with a cached
/// Cholesky factor and updates the running residual with H[:, block].
pub fn solve_ap(sys: &LinearSystemBatch<'_>, cfg: &SolverConfig) -> Result<Solution> {
    cfg.validate()?;
    let start = Instant::now();
    let op = sys.op;
    let e0 = op.epochs();
    let n = sys.dim();
    let bs = cfg.ap.block_size.min(n.max(1));
    let blocks: Vec<(usize, usize)> = (0..n).step_by(bs).map(|s| (s, (s + bs).min(n))).collect();
    let mut factors: Vec<Option<Cholesky<f64, Dyn>>> = vec![None; blocks.len()];
    let budget = cfg.max_epochs.unwrap_or(f64::INFINITY);
    let noise = op.noise_variance();

    let mut v = sys.initial();
    let mut r = if sys.init.is_some() { &sys.rhs - op.apply(&v) } else { sys.rhs.clone() };
    let initial = r.norm().max(f64::MIN_POSITIVE);
    let mut rel = sys.relative_all(&r);
    let mut history = Vec::new();
    let mut iterations = 0;
    let mut termination = Termination::Budget;

    loop {
        if criterion_met(cfg.criterion, &rel, cfg.tol) {
            termination = Termination::Tolerance;
            break;
        }
        let (best, _) = blocks
            .iter()
            .enumerate()
            .map(|(i, &(s, e))| (i, r.rows(s, e - s).norm_squared()))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .expect("at least one block");
        let (s, e) = blocks[best];
        let cost = ((e - s) * n) as f64 / (n * n) as f64;
        if iterations >= cfg.max_iters || op.epochs() - e0 + cost > budget + 1e-9 {
            break;
        }
        let idx: Vec<usize> = (s..e).collect();
        let mut h_cols = op.kernel_columns(&idx);
        for (c, &i) in idx.iter().enumerate() {
            h_cols[(i, c)] += noise;
        }
        if factors[best].is_none() {
            let block = h_cols.rows(s, e - s).into_owned();
            factors[best] = Some(
                Cholesky::new(block).ok_or_else(|| GpError::Numerical(format!("cholesky of block {s}..{e} failed")))?,
            );
        }
        let d = factors[best].as_ref().expect("cached").solve(&r.rows(s, e - s).into_owned());
        let mut vb = v.rows_mut(s, e - s);
        vb += &d;
        r.gemm(-1.0, &h_cols, &d, 1.0);
        iterations += 1;
        let rn = r.norm();
        if !rn.is_finite() || rn > DIVERGENCE_FACTOR * initial {
            termination = Termination::Divergence;
            break;
        }
        rel = sys.relative_all(&r);
        if cfg.record_history {
            history.push(rel.iter().cloned().fold(0.0, f64::max));
        }
    }
    let epochs = op.epochs() - e0;
    let report = finish(sys, &v, iterations, epochs, termination, start, history);
    Ok(Solution { v, report })
}
