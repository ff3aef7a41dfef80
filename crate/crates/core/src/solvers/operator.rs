//! Operators exposing `H = K + σ²I` to the solvers.

use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{dim_check, Result};
use crate::kernel::{Kernel, ModelSpec, Points, DEFAULT_BLOCK_ROWS};

/// Counts kernel-matrix entries touched, for epoch accounting.
#[derive(Debug, Default)]
pub struct EntryCounter(AtomicU64);

impl EntryCounter {
    pub fn add(&self, entries: u64) {
        self.0.fetch_add(entries, Ordering::Relaxed);
    }

    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.0.store(0, Ordering::Relaxed);
    }
}

/// Symmetric positive-definite operator of the form K + σ²I.
///
/// Every access to K is recorded by [`SpdOperator::counter`]; one epoch is
/// n² entries. A full matrix product counts n² entries regardless of how
/// many columns it is applied to.
pub trait SpdOperator: Send + Sync {
    fn dim(&self) -> usize;

    fn noise_variance(&self) -> f64;

    /// K·V without the noise term.
    fn apply_kernel(&self, v: &DMatrix<f64>) -> DMatrix<f64>;

    /// Diagonal of K.
    fn kernel_diag(&self) -> DVector<f64>;

    /// Rows K[idx, :].
    fn kernel_rows(&self, idx: &[usize]) -> DMatrix<f64>;

    /// Columns K[:, idx], counted like the equivalent rows.
    fn kernel_columns(&self, idx: &[usize]) -> DMatrix<f64> {
        self.kernel_rows(idx).transpose()
    }

    fn counter(&self) -> &EntryCounter;

    /// Kernel and training inputs, when the operator is backed by a stationary
    /// kernel; used to draw random features.
    fn kernel_context(&self) -> Option<(&Kernel, &DMatrix<f64>)> {
        None
    }

    /// (K + σ²I)·V.
    fn apply(&self, v: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = self.apply_kernel(v);
        out += v * self.noise_variance();
        out
    }

    /// Epochs consumed so far.
    fn epochs(&self) -> f64 {
        let n = self.dim() as f64;
        self.counter().get() as f64 / (n * n).max(1.0)
    }

    /// Dense H, for small problems.
    fn to_dense(&self) -> DMatrix<f64> {
        let idx: Vec<usize> = (0..self.dim()).collect();
        let mut h = self.kernel_rows(&idx);
        for i in 0..self.dim() {
            h[(i, i)] += self.noise_variance();
        }
        h
    }
}

/// Operator over a materialised kernel matrix.
#[derive(Debug)]
pub struct DenseOperator {
    k: DMatrix<f64>,
    noise: f64,
    counter: EntryCounter,
    context: Option<(Kernel, DMatrix<f64>)>,
}

impl DenseOperator {
    /// From an explicit PSD matrix K and noise variance σ² ≥ 0.
    pub fn new(k: DMatrix<f64>, noise_variance: f64) -> Result<Self> {
        dim_check(k.is_square(), || format!("operator matrix is {}×{}", k.nrows(), k.ncols()))?;
        Ok(DenseOperator { k, noise: noise_variance, counter: EntryCounter::default(), context: None })
    }

    /// K_XX + σ²I for a model at inputs `x`.
    pub fn from_model(model: &ModelSpec, x: &DMatrix<f64>) -> Result<Self> {
        let kernel = model.bound_kernel()?;
        let k = kernel.gram(x, x)?;
        Ok(DenseOperator {
            k,
            noise: model.noise_variance(),
            counter: EntryCounter::default(),
            context: Some((kernel, x.clone())),
        })
    }

    pub fn kernel_matrix(&self) -> &DMatrix<f64> {
        &self.k
    }
}

impl SpdOperator for DenseOperator {
    fn dim(&self) -> usize {
        self.k.nrows()
    }

    fn noise_variance(&self) -> f64 {
        self.noise
    }

    fn apply_kernel(&self, v: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.dim() as u64;
        self.counter.add(n * n);
        &self.k * v
    }

    fn kernel_diag(&self) -> DVector<f64> {
        self.k.diagonal()
    }

    fn kernel_rows(&self, idx: &[usize]) -> DMatrix<f64> {
        self.counter.add((idx.len() * self.dim()) as u64);
        if idx.len() == self.dim() && idx.iter().enumerate().all(|(a, &b)| a == b) {
            return self.k.clone();
        }
        self.k.select_rows(idx)
    }

    fn kernel_columns(&self, idx: &[usize]) -> DMatrix<f64> {
        self.counter.add((idx.len() * self.dim()) as u64);
        self.k.select_columns(idx)
    }

    fn counter(&self) -> &EntryCounter {
        &self.counter
    }

    fn kernel_context(&self) -> Option<(&Kernel, &DMatrix<f64>)> {
        self.context.as_ref().map(|(k, x)| (k, x))
    }

    fn to_dense(&self) -> DMatrix<f64> {
        let mut h = self.k.clone();
        for i in 0..self.dim() {
            h[(i, i)] += self.noise;
        }
        h
    }
}

/// Matrix-free operator that regenerates kernel rows in blocks on every
/// product, using O(block_rows · n) memory.
#[derive(Debug)]
pub struct KernelOperator {
    kernel: Kernel,
    x: DMatrix<f64>,
    points: Points,
    noise: f64,
    block_rows: usize,
    counter: EntryCounter,
}

impl KernelOperator {
    pub fn new(model: &ModelSpec, x: &DMatrix<f64>) -> Result<Self> {
        Self::with_block_rows(model, x, DEFAULT_BLOCK_ROWS)
    }

    pub fn with_block_rows(model: &ModelSpec, x: &DMatrix<f64>, block_rows: usize) -> Result<Self> {
        let kernel = model.bound_kernel()?;
        dim_check(x.ncols() == kernel.input_dim(), || {
            format!("inputs have {} columns, kernel expects {}", x.ncols(), kernel.input_dim())
        })?;
        Ok(KernelOperator {
            points: Points::from_matrix(x),
            x: x.clone(),
            kernel,
            noise: model.noise_variance(),
            block_rows: block_rows.max(1),
            counter: EntryCounter::default(),
        })
    }
}

impl SpdOperator for KernelOperator {
    fn dim(&self) -> usize {
        self.points.len()
    }

    fn noise_variance(&self) -> f64 {
        self.noise
    }

    fn apply_kernel(&self, v: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.dim();
        self.counter.add((n * n) as u64);
        let starts: Vec<usize> = (0..n).step_by(self.block_rows).collect();
        let parts: Vec<(usize, DMatrix<f64>)> = starts
            .par_iter()
            .map(|&s| {
                let e = (s + self.block_rows).min(n);
                let mut block = DMatrix::zeros(e - s, n);
                for r in s..e {
                    let x = self.points.row(r);
                    for j in 0..n {
                        block[(r - s, j)] = self.kernel.eval_unchecked(x, self.points.row(j));
                    }
                }
                (s, block * v)
            })
            .collect();
        let mut out = DMatrix::zeros(n, v.ncols());
        for (s, part) in parts {
            out.rows_mut(s, part.nrows()).copy_from(&part);
        }
        out
    }

    fn kernel_diag(&self) -> DVector<f64> {
        self.kernel.diag(&self.points)
    }

    fn kernel_rows(&self, idx: &[usize]) -> DMatrix<f64> {
        let n = self.dim();
        self.counter.add((idx.len() * n) as u64);
        let mut data = vec![0.0; idx.len() * n];
        data.par_chunks_mut(n.max(1)).zip(idx.par_iter()).for_each(|(row, &i)| {
            let x = self.points.row(i);
            for (j, o) in row.iter_mut().enumerate() {
                *o = self.kernel.eval_unchecked(x, self.points.row(j));
            }
        });
        DMatrix::from_row_slice(idx.len(), n, &data)
    }

    fn counter(&self) -> &EntryCounter {
        &self.counter
    }

    fn kernel_context(&self) -> Option<(&Kernel, &DMatrix<f64>)> {
        Some((&self.kernel, &self.x))
    }
}

/// Picks a dense operator up to `dense_limit` points and a matrix-free one beyond.
pub fn operator_for(model: &ModelSpec, x: &DMatrix<f64>, dense_limit: usize) -> Result<Box<dyn SpdOperator>> {
    if x.nrows() <= dense_limit {
        Ok(Box::new(DenseOperator::from_model(model, x)?))
    } else {
        Ok(Box::new(KernelOperator::new(model, x)?))
    }
}
