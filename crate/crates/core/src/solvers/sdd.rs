//! Stochastic dual descent with random coordinates, Nesterov momentum and
//! geometric iterate averaging.

use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{criterion_met, finish, LinearSystemBatch, Solution, SolverConfig, Termination, DIVERGENCE_FACTOR};
use crate::error::Result;

/// Minimises L*(α) = ½‖α‖²_H − αᵀb column-wise.
///
/// Each step samples `batch_size` coordinates i.i.d. uniformly, forms
/// g = (n/b) Σ_{i∈I} (h_iᵀ(α + ρv) − b_i) e_i, then updates v ← ρv − βg,
/// α ← α + v and ᾱ ← rα + (1 − r)ᾱ with β = step / n. The averaged iterate ᾱ
/// is returned. A sparse residual estimate at sampled coordinates guards
/// against divergence; a batch of at least n uses every coordinate once. The
/// exact residual of ᾱ is refreshed every
/// `refresh_every` steps (n / b by default) and decides termination.
pub fn solve_sdd(sys: &LinearSystemBatch<'_>, cfg: &SolverConfig) -> Result<Solution> {
    cfg.validate()?;
    let start = Instant::now();
    let op = sys.op;
    let e0 = op.epochs();
    let n = sys.dim();
    let cols = sys.columns();
    let b = cfg.sdd.batch_size;
    let rho = cfg.sdd.momentum;
    let beta = cfg.sdd.step / n as f64;
    let avg = cfg.sdd.averaging.unwrap_or((100.0 / cfg.max_iters.max(1) as f64).min(1.0));
    let refresh = cfg.refresh_every.unwrap_or((n / b).max(1)).max(1);
    let budget = cfg.max_epochs.unwrap_or(f64::INFINITY);
    let noise = op.noise_variance();
    // a batch covering every coordinate is taken literally, giving exact gradient descent
    let full_batch = b >= n;
    let b = b.min(n);
    let scale = n as f64 / b as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut alpha = sys.initial();
    let mut vel = DMatrix::<f64>::zeros(n, cols);
    let mut avg_alpha = alpha.clone();
    let mut r_est = if sys.init.is_some() { &sys.rhs - op.apply(&alpha) } else { sys.rhs.clone() };
    let initial = r_est.norm().max(f64::MIN_POSITIVE);
    let mut rel = sys.relative_all(&r_est);
    let mut history = Vec::new();
    let mut steps = 0;
    let mut termination = Termination::Budget;
    let step_cost = b as f64 / n as f64;

    if criterion_met(cfg.criterion, &rel, cfg.tol) {
        let report = finish(sys, &avg_alpha, 0, 0.0, Termination::Tolerance, start, history);
        return Ok(Solution { v: avg_alpha, report });
    }
    while steps < cfg.max_iters {
        if op.epochs() - e0 + step_cost > budget + 1e-9 {
            break;
        }
        let idx: Vec<usize> =
            if full_batch { (0..n).collect() } else { (0..b).map(|_| rng.random_range(0..n)).collect() };
        let look = &alpha + &vel * rho;
        let rows = op.kernel_rows(&idx);
        let mut g = &rows * &look;
        for (k, &i) in idx.iter().enumerate() {
            for c in 0..cols {
                g[(k, c)] += noise * look[(i, c)] - sys.rhs[(i, c)];
            }
        }
        vel *= rho;
        for (k, &i) in idx.iter().enumerate() {
            for c in 0..cols {
                vel[(i, c)] -= beta * scale * g[(k, c)];
                r_est[(i, c)] = -g[(k, c)];
            }
        }
        alpha += &vel;
        avg_alpha *= 1.0 - avg;
        avg_alpha += &alpha * avg;
        steps += 1;

        let est = r_est.norm();
        if !est.is_finite() || est > DIVERGENCE_FACTOR * initial {
            termination = Termination::Divergence;
            break;
        }
        if steps % refresh == 0 {
            if op.epochs() - e0 + 1.0 > budget + 1e-9 {
                if cfg.record_history {
                    history.push(est / initial);
                }
                continue;
            }
            let exact = &sys.rhs - op.apply(&avg_alpha);
            rel = sys.relative_all(&exact);
            if cfg.record_history {
                history.push(rel.iter().cloned().fold(0.0, f64::max));
            }
            if criterion_met(cfg.criterion, &rel, cfg.tol) {
                termination = Termination::Tolerance;
                break;
            }
        }
    }
    let epochs = op.epochs() - e0;
    let report = finish(sys, &avg_alpha, steps, epochs, termination, start, history);
    Ok(Solution { v: avg_alpha, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solvers::testing::*;
    use crate::solvers::{DenseOperator, SpdOperator};
    use rand::Rng;

    #[test]
    fn full_batch_without_momentum_is_gradient_descent() {
        let op = spd_with_spectrum(0, &[4.0, 3.0, 2.0, 1.0, 0.5, 0.3, 0.2, 0.1], 0.1);
        let h = op.to_dense();
        let lmax = h.symmetric_eigenvalues().max();
        let b = random_rhs(1, 8, 1);
        let want = dense_solution(&op, &b);
        let run = |beta: f64, steps: usize| {
            let mut cfg = SolverConfig {
                tol: 1e-300,
                max_iters: steps,
                refresh_every: Some(usize::MAX),
                ..SolverConfig::default()
            };
            cfg.sdd =
                crate::solvers::SddConfig { batch_size: 8, step: beta * 8.0, momentum: 0.0, averaging: Some(1.0) };
            solve_sdd(&LinearSystemBatch::new(&op, b.clone()).unwrap(), &cfg).unwrap().v
        };
        // identical to the deterministic recursion α ← α − β(Hα − b)
        let beta = 1.9 / lmax;
        let mut a = DMatrix::zeros(8, 1);
        for _ in 0..50 {
            a -= (&h * &a - &b) * beta;
        }
        assert!((run(beta, 50) - &a).amax() < 1e-12);
        assert!((run(beta, 5_000) - &want).norm() <= 1e-8 * want.norm());
        assert!((run(2.1 / lmax, 3_000) - &want).norm() > 1.0);
    }

    #[test]
    fn gradient_estimate_vanishes_at_solution() {
        let op = spd_with_spectrum(2, &[3.0, 2.0, 1.0, 0.5, 0.1], 0.2);
        let b = random_rhs(3, 5, 1);
        let star = dense_solution(&op, &b);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let i = rng.random_range(0..5);
            let row = op.kernel_rows(&[i]);
            let gi = (&row * &star)[(0, 0)] + op.noise_variance() * star[(i, 0)] - b[(i, 0)];
            assert!(gi.abs() < 1e-12);
        }
    }

    #[test]
    fn converges_on_random_instance() {
        let spectrum: Vec<f64> = (0..128).map(|i| 30.0 * 0.9f64.powi(i)).collect();
        let op = spd_with_spectrum(5, &spectrum, 0.5);
        let b = random_rhs(6, 128, 2);
        let mut cfg = SolverConfig { tol: 1e-6, max_iters: 100_000, ..SolverConfig::default() };
        cfg.sdd.batch_size = 16;
        cfg.sdd.step = 0.3 * 128.0 / 30.5;
        let sol = solve_sdd(&LinearSystemBatch::new(&op, b.clone()).unwrap(), &cfg).unwrap();
        let want = dense_solution(&op, &b);
        let k = op.kernel_matrix();
        for j in 0..2 {
            let d = sol.v.column(j) - want.column(j);
            let w = want.column(j);
            let err = (d.dot(&(k * &d))).sqrt() / (w.dot(&(k * w))).sqrt();
            assert!(err <= 1e-3, "column {j}: {err}");
        }
        assert_eq!(sol.report.termination, Termination::Tolerance);
    }

    #[test]
    fn epochs_follow_batch_over_n() {
        let spectrum: Vec<f64> = (0..64).map(|i| 1.0 + i as f64 * 0.1).collect();
        let op = DenseOperator::new(spd_with_spectrum(7, &spectrum, 0.0).kernel_matrix().clone(), 1.0).unwrap();
        let b = random_rhs(8, 64, 1);
        let mut cfg = SolverConfig { tol: 1e-30, max_iters: 10, refresh_every: Some(1_000), ..SolverConfig::default() };
        cfg.sdd.batch_size = 8;
        cfg.sdd.step = 0.1;
        let sol = solve_sdd(&LinearSystemBatch::new(&op, b).unwrap(), &cfg).unwrap();
        assert_eq!(sol.report.iterations, 10);
        assert!((sol.report.epochs - 10.0 * 8.0 / 64.0).abs() < 1e-12);
    }

    #[test]
    fn diverges_with_huge_step() {
        let spectrum: Vec<f64> = (0..32).map(|i| 10.0 + i as f64).collect();
        let op = spd_with_spectrum(9, &spectrum, 0.1);
        let b = random_rhs(10, 32, 1);
        let mut cfg = SolverConfig { tol: 1e-8, max_iters: 10_000, ..SolverConfig::default() };
        cfg.sdd.batch_size = 32;
        cfg.sdd.step = 1e4;
        let sol = solve_sdd(&LinearSystemBatch::new(&op, b).unwrap(), &cfg).unwrap();
        assert_eq!(sol.report.termination, Termination::Divergence);
    }
}
