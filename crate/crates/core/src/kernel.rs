//! Covariance functions, hyperparameters and Gram matrices.
//!
//! A [`KernelExpr`] describes the structure of a covariance function. Its
//! numeric parameters live separately in [`Hyperparameters`], laid out in a
//! flat vector by a depth-first walk of the expression followed by the noise
//! scale. [`Kernel`] binds an expression to concrete (constrained) values and
//! does all the evaluation work.

use std::f64::consts::PI;
use std::fmt;
use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{dim_check, GpError, Result};

/// Default number of rows produced per block by lazy Gram evaluation.
pub const DEFAULT_BLOCK_ROWS: usize = 1024;

/// Smoothness of a Matérn kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub enum MaternNu {
    Half,
    ThreeHalves,
    FiveHalves,
}

impl MaternNu {
    pub fn value(self) -> f64 {
        match self {
            MaternNu::Half => 0.5,
            MaternNu::ThreeHalves => 1.5,
            MaternNu::FiveHalves => 2.5,
        }
    }

    /// Profile k(r) for the scaled distance r = ‖(x − x′)/ℓ‖.
    pub fn profile(self, r: f64) -> f64 {
        match self {
            MaternNu::Half => (-r).exp(),
            MaternNu::ThreeHalves => {
                let a = 3f64.sqrt() * r;
                (1.0 + a) * (-a).exp()
            }
            MaternNu::FiveHalves => {
                let a = 5f64.sqrt() * r;
                (1.0 + a + 5.0 * r * r / 3.0) * (-a).exp()
            }
        }
    }

    /// −k′(r)/r, finite at every r > 0 for ν ≥ 3/2.
    fn neg_slope_over_r(self, r: f64) -> f64 {
        match self {
            MaternNu::Half => {
                if r > 0.0 {
                    (-r).exp() / r
                } else {
                    0.0
                }
            }
            MaternNu::ThreeHalves => 3.0 * (-(3f64.sqrt()) * r).exp(),
            MaternNu::FiveHalves => {
                let a = 5f64.sqrt() * r;
                5.0 / 3.0 * (1.0 + a) * (-a).exp()
            }
        }
    }
}

impl TryFrom<f64> for MaternNu {
    type Error = String;

    fn try_from(v: f64) -> std::result::Result<Self, Self::Error> {
        if v == 0.5 {
            Ok(MaternNu::Half)
        } else if v == 1.5 {
            Ok(MaternNu::ThreeHalves)
        } else if v == 2.5 {
            Ok(MaternNu::FiveHalves)
        } else {
            Err(format!("unsupported Matérn smoothness {v}; expected 0.5, 1.5 or 2.5"))
        }
    }
}

impl From<MaternNu> for f64 {
    fn from(nu: MaternNu) -> f64 {
        nu.value()
    }
}

/// Structure of a covariance function.
///
/// Leaves optionally restrict themselves to a subset of input dimensions,
/// which is how product kernels over product spaces (`k_S(s,s′)·k_T(t,t′)`)
/// are expressed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum KernelExpr {
    SquaredExponential {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        dims: Option<Vec<usize>>,
    },
    Matern {
        nu: MaternNu,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        dims: Option<Vec<usize>>,
    },
    Periodic {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        dims: Option<Vec<usize>>,
    },
    Product {
        factors: Vec<KernelExpr>,
    },
    Scaled {
        inner: Box<KernelExpr>,
    },
}

impl KernelExpr {
    pub fn se() -> Self {
        KernelExpr::SquaredExponential { dims: None }
    }

    pub fn matern(nu: MaternNu) -> Self {
        KernelExpr::Matern { nu, dims: None }
    }

    pub fn periodic() -> Self {
        KernelExpr::Periodic { dims: None }
    }

    pub fn product(factors: Vec<KernelExpr>) -> Self {
        KernelExpr::Product { factors }
    }

    pub fn scaled(inner: KernelExpr) -> Self {
        KernelExpr::Scaled { inner: Box::new(inner) }
    }

    /// Restricts a leaf to the given input dimensions. No-op on composites.
    pub fn on_dims(self, active: Vec<usize>) -> Self {
        match self {
            KernelExpr::SquaredExponential { .. } => KernelExpr::SquaredExponential { dims: Some(active) },
            KernelExpr::Matern { nu, .. } => KernelExpr::Matern { nu, dims: Some(active) },
            KernelExpr::Periodic { .. } => KernelExpr::Periodic { dims: Some(active) },
            other => other,
        }
    }

    /// Shifts every explicit or implicit leaf dimension by `offset`, treating
    /// implicit leaves as spanning `0..width`.
    pub fn shifted(&self, offset: usize, width: usize) -> Self {
        let shift = |dims: &Option<Vec<usize>>| -> Option<Vec<usize>> {
            Some(match dims {
                Some(d) => d.iter().map(|i| i + offset).collect(),
                None => (offset..offset + width).collect(),
            })
        };
        match self {
            KernelExpr::SquaredExponential { dims } => KernelExpr::SquaredExponential { dims: shift(dims) },
            KernelExpr::Matern { nu, dims } => KernelExpr::Matern { nu: *nu, dims: shift(dims) },
            KernelExpr::Periodic { dims } => KernelExpr::Periodic { dims: shift(dims) },
            KernelExpr::Product { factors } => {
                KernelExpr::Product { factors: factors.iter().map(|f| f.shifted(offset, width)).collect() }
            }
            KernelExpr::Scaled { inner } => KernelExpr::Scaled { inner: Box::new(inner.shifted(offset, width)) },
        }
    }

    pub fn is_stationary(&self) -> bool {
        match self {
            KernelExpr::Product { factors } => factors.iter().all(|f| f.is_stationary()),
            KernelExpr::Scaled { inner } => inner.is_stationary(),
            _ => true,
        }
    }

    /// Number of kernel parameters (excluding noise) for `input_dim` inputs.
    pub fn param_count(&self, input_dim: usize) -> Result<usize> {
        Ok(compile(self, input_dim, &mut 0)?.count())
    }

    /// Human-readable names in layout order.
    pub fn param_names(&self, input_dim: usize) -> Result<Vec<String>> {
        let mut names = Vec::new();
        collect_names(self, input_dim, "", &mut names)?;
        Ok(names)
    }

    /// Index of the first signal-variance parameter, if any.
    pub fn signal_variance_index(&self, input_dim: usize) -> Result<Option<usize>> {
        Ok(self.param_names(input_dim)?.iter().position(|n| n.ends_with("variance")))
    }
}

fn active_dims(dims: &Option<Vec<usize>>, input_dim: usize) -> Result<Vec<usize>> {
    match dims {
        None => Ok((0..input_dim).collect()),
        Some(d) => {
            if d.is_empty() {
                return Err(GpError::InvalidParameter("kernel leaf with empty dims".into()));
            }
            if let Some(bad) = d.iter().find(|&&i| i >= input_dim) {
                return Err(GpError::Dimension(format!(
                    "kernel dim {bad} out of range for {input_dim}-dimensional inputs"
                )));
            }
            Ok(d.clone())
        }
    }
}

fn collect_names(expr: &KernelExpr, input_dim: usize, prefix: &str, out: &mut Vec<String>) -> Result<()> {
    match expr {
        KernelExpr::SquaredExponential { dims } | KernelExpr::Matern { dims, .. } => {
            let tag = if matches!(expr, KernelExpr::SquaredExponential { .. }) { "se" } else { "matern" };
            for d in active_dims(dims, input_dim)? {
                out.push(format!("{prefix}{tag}.lengthscale[{d}]"));
            }
        }
        KernelExpr::Periodic { dims } => {
            active_dims(dims, input_dim)?;
            out.push(format!("{prefix}periodic.lengthscale"));
            out.push(format!("{prefix}periodic.period"));
        }
        KernelExpr::Product { factors } => {
            for (i, f) in factors.iter().enumerate() {
                collect_names(f, input_dim, &format!("{prefix}product[{i}]."), out)?;
            }
        }
        KernelExpr::Scaled { inner } => {
            out.push(format!("{prefix}signal_variance"));
            collect_names(inner, input_dim, prefix, out)?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Family {
    Se,
    Matern(MaternNu),
    Periodic,
}

/// Expression tree with resolved dimensions and parameter offsets.
#[derive(Debug, Clone)]
pub(crate) enum Node {
    Leaf { family: Family, dims: Vec<usize>, offset: usize },
    Product { factors: Vec<Node>, offset: usize, count: usize },
    Scaled { offset: usize, inner: Box<Node> },
}

impl Node {
    fn count(&self) -> usize {
        match self {
            Node::Leaf { family: Family::Periodic, .. } => 2,
            Node::Leaf { dims, .. } => dims.len(),
            Node::Product { count, .. } => *count,
            Node::Scaled { inner, .. } => 1 + inner.count(),
        }
    }

    fn offset(&self) -> usize {
        match self {
            Node::Leaf { offset, .. } | Node::Product { offset, .. } | Node::Scaled { offset, .. } => *offset,
        }
    }
}

fn compile(expr: &KernelExpr, input_dim: usize, next: &mut usize) -> Result<Node> {
    let offset = *next;
    let node = match expr {
        KernelExpr::SquaredExponential { dims } => {
            let dims = active_dims(dims, input_dim)?;
            *next += dims.len();
            Node::Leaf { family: Family::Se, dims, offset }
        }
        KernelExpr::Matern { nu, dims } => {
            let dims = active_dims(dims, input_dim)?;
            *next += dims.len();
            Node::Leaf { family: Family::Matern(*nu), dims, offset }
        }
        KernelExpr::Periodic { dims } => {
            let dims = active_dims(dims, input_dim)?;
            *next += 2;
            Node::Leaf { family: Family::Periodic, dims, offset }
        }
        KernelExpr::Product { factors } => {
            if factors.is_empty() {
                return Err(GpError::InvalidParameter("product kernel without factors".into()));
            }
            let factors = factors.iter().map(|f| compile(f, input_dim, next)).collect::<Result<Vec<_>>>()?;
            Node::Product { factors, offset, count: *next - offset }
        }
        KernelExpr::Scaled { inner } => {
            *next += 1;
            Node::Scaled { offset, inner: Box::new(compile(inner, input_dim, next)?) }
        }
    };
    Ok(node)
}

fn leaf_value(family: Family, dims: &[usize], p: &[f64], x: &[f64], y: &[f64]) -> f64 {
    match family {
        Family::Se => {
            let r2: f64 = dims
                .iter()
                .zip(p)
                .map(|(&d, &l)| {
                    let t = (x[d] - y[d]) / l;
                    t * t
                })
                .sum();
            (-0.5 * r2).exp()
        }
        Family::Matern(nu) => {
            let r2: f64 = dims
                .iter()
                .zip(p)
                .map(|(&d, &l)| {
                    let t = (x[d] - y[d]) / l;
                    t * t
                })
                .sum();
            nu.profile(r2.sqrt())
        }
        Family::Periodic => {
            let dist = dims.iter().map(|&d| (x[d] - y[d]).powi(2)).sum::<f64>().sqrt();
            let (l, period) = (p[0], p[1]);
            let s = (PI * dist / period).sin();
            (-2.0 * s * s / (l * l)).exp()
        }
    }
}

/// Value plus partial derivatives w.r.t. the leaf's own parameters.
fn leaf_value_grad(family: Family, dims: &[usize], p: &[f64], x: &[f64], y: &[f64], g: &mut [f64]) -> f64 {
    match family {
        Family::Se => {
            let k = leaf_value(family, dims, p, x, y);
            for (i, (&d, &l)) in dims.iter().zip(p).enumerate() {
                let delta = x[d] - y[d];
                g[i] = k * delta * delta / (l * l * l);
            }
            k
        }
        Family::Matern(nu) => {
            let r2: f64 = dims
                .iter()
                .zip(p)
                .map(|(&d, &l)| {
                    let t = (x[d] - y[d]) / l;
                    t * t
                })
                .sum();
            let r = r2.sqrt();
            let c = if r > 0.0 { nu.neg_slope_over_r(r) } else { 0.0 };
            for (i, (&d, &l)) in dims.iter().zip(p).enumerate() {
                let delta = x[d] - y[d];
                g[i] = c * delta * delta / (l * l * l);
            }
            nu.profile(r)
        }
        Family::Periodic => {
            let dist = dims.iter().map(|&d| (x[d] - y[d]).powi(2)).sum::<f64>().sqrt();
            let (l, period) = (p[0], p[1]);
            let u = PI * dist / period;
            let s2 = u.sin().powi(2);
            let k = (-2.0 * s2 / (l * l)).exp();
            g[0] = k * 4.0 * s2 / (l * l * l);
            g[1] = k * 2.0 * (2.0 * u).sin() * PI * dist / (l * l * period * period);
            k
        }
    }
}

/// Value plus gradient w.r.t. the first argument.
fn leaf_input_grad(family: Family, dims: &[usize], p: &[f64], x: &[f64], y: &[f64], g: &mut [f64]) -> f64 {
    match family {
        Family::Se => {
            let k = leaf_value(family, dims, p, x, y);
            for (&d, &l) in dims.iter().zip(p) {
                g[d] += -k * (x[d] - y[d]) / (l * l);
            }
            k
        }
        Family::Matern(nu) => {
            let r = dims.iter().zip(p).map(|(&d, &l)| ((x[d] - y[d]) / l).powi(2)).sum::<f64>().sqrt();
            if r > 0.0 {
                let c = nu.neg_slope_over_r(r);
                for (&d, &l) in dims.iter().zip(p) {
                    g[d] += -c * (x[d] - y[d]) / (l * l);
                }
            }
            nu.profile(r)
        }
        Family::Periodic => {
            let dist = dims.iter().map(|&d| (x[d] - y[d]).powi(2)).sum::<f64>().sqrt();
            let (l, period) = (p[0], p[1]);
            let u = PI * dist / period;
            let k = (-2.0 * u.sin().powi(2) / (l * l)).exp();
            if dist > 0.0 {
                let dk_ddist = -k * 2.0 / (l * l) * (2.0 * u).sin() * PI / period;
                for &d in dims {
                    g[d] += dk_ddist * (x[d] - y[d]) / dist;
                }
            }
            k
        }
    }
}

fn node_value(node: &Node, theta: &[f64], x: &[f64], y: &[f64]) -> f64 {
    match node {
        Node::Leaf { family, dims, offset } => {
            let n = if *family == Family::Periodic { 2 } else { dims.len() };
            leaf_value(*family, dims, &theta[*offset..*offset + n], x, y)
        }
        Node::Product { factors, .. } => factors.iter().map(|f| node_value(f, theta, x, y)).product(),
        Node::Scaled { offset, inner } => theta[*offset] * node_value(inner, theta, x, y),
    }
}

/// Writes ∂k/∂θ for the node's parameter range into `g` (indexed globally).
fn node_value_grad(node: &Node, theta: &[f64], x: &[f64], y: &[f64], g: &mut [f64]) -> f64 {
    match node {
        Node::Leaf { family, dims, offset } => {
            let n = if *family == Family::Periodic { 2 } else { dims.len() };
            leaf_value_grad(*family, dims, &theta[*offset..*offset + n], x, y, &mut g[*offset..*offset + n])
        }
        Node::Product { factors, .. } => {
            let values: Vec<f64> = factors.iter().map(|f| node_value_grad(f, theta, x, y, g)).collect();
            // prefix/suffix products avoid dividing by factor values that may be zero
            let m = values.len();
            let mut suffix = vec![1.0; m + 1];
            for i in (0..m).rev() {
                suffix[i] = suffix[i + 1] * values[i];
            }
            let mut prefix = 1.0;
            for (i, f) in factors.iter().enumerate() {
                let others = prefix * suffix[i + 1];
                let range = f.offset()..f.offset() + f.count();
                for gi in &mut g[range] {
                    *gi *= others;
                }
                prefix *= values[i];
            }
            prefix
        }
        Node::Scaled { offset, inner } => {
            let a = theta[*offset];
            let v = node_value_grad(inner, theta, x, y, g);
            let range = inner.offset()..inner.offset() + inner.count();
            for gi in &mut g[range] {
                *gi *= a;
            }
            g[*offset] = v;
            a * v
        }
    }
}

fn node_input_grad(node: &Node, theta: &[f64], x: &[f64], y: &[f64], g: &mut [f64]) -> f64 {
    match node {
        Node::Leaf { family, dims, offset } => {
            let n = if *family == Family::Periodic { 2 } else { dims.len() };
            leaf_input_grad(*family, dims, &theta[*offset..*offset + n], x, y, g)
        }
        Node::Product { factors, .. } => {
            let d = g.len();
            let mut parts = Vec::with_capacity(factors.len());
            for f in factors {
                let mut gf = vec![0.0; d];
                let v = node_input_grad(f, theta, x, y, &mut gf);
                parts.push((v, gf));
            }
            let m = parts.len();
            let mut suffix = vec![1.0; m + 1];
            for i in (0..m).rev() {
                suffix[i] = suffix[i + 1] * parts[i].0;
            }
            let mut prefix = 1.0;
            for (i, (v, gf)) in parts.iter().enumerate() {
                let others = prefix * suffix[i + 1];
                for (gi, gfi) in g.iter_mut().zip(gf) {
                    *gi += others * gfi;
                }
                prefix *= v;
            }
            prefix
        }
        Node::Scaled { offset, inner } => {
            let a = theta[*offset];
            let mut gi = vec![0.0; g.len()];
            let v = node_input_grad(inner, theta, x, y, &mut gi);
            for (o, i) in g.iter_mut().zip(gi) {
                *o += a * i;
            }
            a * v
        }
    }
}

/// Row-major copy of an n×d point matrix, so rows are contiguous slices.
#[derive(Debug, Clone)]
pub struct Points {
    data: Vec<f64>,
    n: usize,
    d: usize,
}

impl Points {
    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        let (n, d) = m.shape();
        let mut data = Vec::with_capacity(n * d);
        for i in 0..n {
            for j in 0..d {
                data.push(m[(i, j)]);
            }
        }
        Points { data, n, d }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }
}

/// A kernel expression bound to constrained parameter values.
#[derive(Clone)]
pub struct Kernel {
    expr: KernelExpr,
    root: Node,
    input_dim: usize,
    theta: Vec<f64>,
}

impl fmt::Debug for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Kernel")
            .field("expr", &self.expr)
            .field("input_dim", &self.input_dim)
            .field("theta", &self.theta)
            .finish()
    }
}

impl Kernel {
    pub fn new(expr: &KernelExpr, input_dim: usize, theta: &[f64]) -> Result<Self> {
        let root = compile(expr, input_dim, &mut 0)?;
        if root.count() != theta.len() {
            return Err(GpError::InvalidParameter(format!(
                "kernel expects {} parameters, got {}",
                root.count(),
                theta.len()
            )));
        }
        if let Some(bad) = theta.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
            return Err(GpError::InvalidParameter(format!("kernel parameter {bad} is not strictly positive")));
        }
        Ok(Kernel { expr: expr.clone(), root, input_dim, theta: theta.to_vec() })
    }

    pub fn expr(&self) -> &KernelExpr {
        &self.expr
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn params(&self) -> &[f64] {
        &self.theta
    }

    pub fn num_params(&self) -> usize {
        self.theta.len()
    }

    pub(crate) fn root(&self) -> &Node {
        &self.root
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        dim_check(x.len() == self.input_dim && y.len() == self.input_dim, || {
            format!("points of length {} and {} for {}-d kernel", x.len(), y.len(), self.input_dim)
        })?;
        Ok(self.eval_unchecked(x, y))
    }

    #[inline]
    pub(crate) fn eval_unchecked(&self, x: &[f64], y: &[f64]) -> f64 {
        node_value(&self.root, &self.theta, x, y)
    }

    /// k(x, y) and ∂k/∂θ for every kernel parameter.
    pub fn eval_with_grad(&self, x: &[f64], y: &[f64], grad: &mut [f64]) -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        node_value_grad(&self.root, &self.theta, x, y, grad)
    }

    /// k(x, y) and ∂k/∂x.
    pub fn eval_with_input_grad(&self, x: &[f64], y: &[f64], grad: &mut [f64]) -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        node_input_grad(&self.root, &self.theta, x, y, grad)
    }

    fn check_points(&self, m: &DMatrix<f64>) -> Result<()> {
        dim_check(m.ncols() == self.input_dim || m.nrows() == 0, || {
            format!("inputs have {} columns, kernel expects {}", m.ncols(), self.input_dim)
        })
    }

    /// Cross-covariance matrix with entry (i, j) = k(a_i, b_j).
    pub fn gram(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_points(a)?;
        self.check_points(b)?;
        let (pa, pb) = (Points::from_matrix(a), Points::from_matrix(b));
        Ok(self.gram_points(&pa, &pb, 0..pa.len()))
    }

    /// Rows `rows` of the cross-covariance between point sets.
    pub fn gram_points(&self, a: &Points, b: &Points, rows: Range<usize>) -> DMatrix<f64> {
        let m = b.len();
        let nr = rows.len();
        let mut data = vec![0.0; nr * m];
        if m > 0 {
            data.par_chunks_mut(m).enumerate().for_each(|(r, out)| {
                let x = a.row(rows.start + r);
                for (j, o) in out.iter_mut().enumerate() {
                    *o = self.eval_unchecked(x, b.row(j));
                }
            });
        }
        DMatrix::from_row_slice(nr, m, &data)
    }

    /// Diagonal k(x_i, x_i).
    pub fn diag(&self, a: &Points) -> DVector<f64> {
        DVector::from_iterator(a.len(), (0..a.len()).map(|i| self.eval_unchecked(a.row(i), a.row(i))))
    }

    /// Visits the symmetric Gram matrix of `a` in row blocks of at most `block_rows`.
    pub fn for_each_row_block<F>(&self, a: &Points, block_rows: usize, mut f: F)
    where
        F: FnMut(Range<usize>, DMatrix<f64>),
    {
        let n = a.len();
        let step = block_rows.max(1);
        let mut start = 0;
        while start < n {
            let end = (start + step).min(n);
            f(start..end, self.gram_points(a, a, start..end));
            start = end;
        }
    }

    /// ∂K/∂θ_k over `a`, materialized. Intended for small problems and tests.
    pub fn gram_param_grad(&self, a: &DMatrix<f64>, k: usize) -> Result<DMatrix<f64>> {
        self.check_points(a)?;
        if k >= self.num_params() {
            return Err(GpError::InvalidParameter(format!(
                "parameter index {k} out of range ({} kernel parameters)",
                self.num_params()
            )));
        }
        let pa = Points::from_matrix(a);
        let n = pa.len();
        let p = self.num_params();
        let mut out = DMatrix::zeros(n, n);
        let mut g = vec![0.0; p];
        for i in 0..n {
            for j in 0..=i {
                self.eval_with_grad(pa.row(i), pa.row(j), &mut g);
                out[(i, j)] = g[k];
                out[(j, i)] = g[k];
            }
        }
        Ok(out)
    }

    /// Quadratic forms u_cᵀ (∂K/∂θ_k) v_c for every kernel parameter k and
    /// column c, contracting row blocks so ∂K is never held in full.
    pub fn param_grad_quadratic_forms(
        &self,
        a: &Points,
        u: &DMatrix<f64>,
        v: &DMatrix<f64>,
        block_rows: usize,
    ) -> DMatrix<f64> {
        let n = a.len();
        let p = self.num_params();
        let cols = u.ncols();
        let step = block_rows.max(1);
        let starts: Vec<usize> = (0..n).step_by(step).collect();
        let partials: Vec<DMatrix<f64>> = starts
            .par_iter()
            .map(|&start| {
                let end = (start + step).min(n);
                let rows = end - start;
                let mut blocks: Vec<DMatrix<f64>> = (0..p).map(|_| DMatrix::zeros(rows, n)).collect();
                let mut g = vec![0.0; p];
                for r in 0..rows {
                    let x = a.row(start + r);
                    for j in 0..n {
                        self.eval_with_grad(x, a.row(j), &mut g);
                        for (blk, gk) in blocks.iter_mut().zip(&g) {
                            blk[(r, j)] = *gk;
                        }
                    }
                }
                let u_rows = u.rows(start, rows);
                let mut acc = DMatrix::zeros(p, cols);
                for (k, blk) in blocks.iter().enumerate() {
                    let w = blk * v;
                    for c in 0..cols {
                        acc[(k, c)] = u_rows.column(c).dot(&w.column(c));
                    }
                }
                acc
            })
            .collect();
        let mut total = DMatrix::zeros(p, cols);
        for part in partials {
            total += part;
        }
        total
    }
}

/// Numerically stable softplus log(1 + eˣ).
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for y > 0.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y + (-(-y).exp_m1()).ln()
    } else {
        y.exp_m1().ln()
    }
}

/// d softplus / dx, the logistic sigmoid.
pub fn softplus_grad(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Model hyperparameters in unconstrained form: kernel parameters in layout
/// order followed by the noise scale σ, each mapped through softplus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    unconstrained: Vec<f64>,
}

impl Hyperparameters {
    pub fn from_unconstrained(raw: Vec<f64>) -> Result<Self> {
        if raw.is_empty() || raw.iter().any(|v| !v.is_finite()) {
            return Err(GpError::InvalidParameter("unconstrained parameters must be finite and non-empty".into()));
        }
        Ok(Hyperparameters { unconstrained: raw })
    }

    /// From strictly positive kernel parameters and a noise variance σ².
    pub fn from_constrained(kernel: &[f64], noise_variance: f64) -> Result<Self> {
        if let Some(bad) =
            kernel.iter().chain(std::iter::once(&noise_variance)).find(|v| !(**v > 0.0) || !v.is_finite())
        {
            return Err(GpError::InvalidParameter(format!("hyperparameter {bad} must be strictly positive")));
        }
        let mut raw: Vec<f64> = kernel.iter().map(|&v| softplus_inv(v)).collect();
        raw.push(softplus_inv(noise_variance.sqrt()));
        Ok(Hyperparameters { unconstrained: raw })
    }

    pub fn unconstrained(&self) -> &[f64] {
        &self.unconstrained
    }

    pub fn len(&self) -> usize {
        self.unconstrained.len()
    }

    pub fn is_empty(&self) -> bool {
        self.unconstrained.is_empty()
    }

    /// Constrained θ: kernel parameters followed by the noise scale σ.
    pub fn theta(&self) -> Vec<f64> {
        self.unconstrained.iter().map(|&v| softplus(v)).collect()
    }

    pub fn kernel_params(&self) -> Vec<f64> {
        let t = self.theta();
        t[..t.len() - 1].to_vec()
    }

    pub fn noise_scale(&self) -> f64 {
        softplus(*self.unconstrained.last().expect("non-empty"))
    }

    pub fn noise_variance(&self) -> f64 {
        self.noise_scale().powi(2)
    }

    /// dθ/dν elementwise.
    pub fn jacobian_diag(&self) -> Vec<f64> {
        self.unconstrained.iter().map(|&v| softplus_grad(v)).collect()
    }
}

/// Kernel structure, input dimensionality and hyperparameters of a
/// zero-mean GP regression model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kernel: KernelExpr,
    pub input_dim: usize,
    pub hyper: Hyperparameters,
}

impl ModelSpec {
    /// All constrained hyperparameters initialised at 1.
    pub fn new(kernel: KernelExpr, input_dim: usize) -> Result<Self> {
        let p = kernel.param_count(input_dim)?;
        let hyper = Hyperparameters::from_constrained(&vec![1.0; p], 1.0)?;
        Ok(ModelSpec { kernel, input_dim, hyper })
    }

    pub fn with_params(
        kernel: KernelExpr,
        input_dim: usize,
        kernel_params: &[f64],
        noise_variance: f64,
    ) -> Result<Self> {
        let p = kernel.param_count(input_dim)?;
        if p != kernel_params.len() {
            return Err(GpError::InvalidParameter(format!(
                "kernel expects {p} parameters, got {}",
                kernel_params.len()
            )));
        }
        let hyper = Hyperparameters::from_constrained(kernel_params, noise_variance)?;
        Ok(ModelSpec { kernel, input_dim, hyper })
    }

    pub fn with_hyper(&self, hyper: Hyperparameters) -> Result<Self> {
        if hyper.len() != self.hyper.len() {
            return Err(GpError::InvalidParameter("hyperparameter vector length changed".into()));
        }
        Ok(ModelSpec { kernel: self.kernel.clone(), input_dim: self.input_dim, hyper })
    }

    pub fn bound_kernel(&self) -> Result<Kernel> {
        Kernel::new(&self.kernel, self.input_dim, &self.hyper.kernel_params())
    }

    pub fn noise_variance(&self) -> f64 {
        self.hyper.noise_variance()
    }

    pub fn noise_scale(&self) -> f64 {
        self.hyper.noise_scale()
    }

    /// Total number of hyperparameters, noise included.
    pub fn num_params(&self) -> usize {
        self.hyper.len()
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = self.kernel.param_names(self.input_dim).unwrap_or_default();
        names.push("noise_scale".into());
        names
    }

    /// Materialized ∂H/∂θ_k with H = K + σ²I; the last index is the noise
    /// scale σ, for which the derivative is 2σI.
    pub fn grad_h(&self, x: &DMatrix<f64>, k: usize) -> Result<DMatrix<f64>> {
        let kernel = self.bound_kernel()?;
        let p = kernel.num_params();
        if k == p {
            let n = x.nrows();
            Ok(DMatrix::identity(n, n) * (2.0 * self.noise_scale()))
        } else if k < p {
            kernel.gram_param_grad(x, k)
        } else {
            Err(GpError::InvalidParameter(format!("parameter index {k} out of range ({} total)", p + 1)))
        }
    }

    /// Materialized H = K_XX + σ²I.
    pub fn h_matrix(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let mut h = self.bound_kernel()?.gram(x, x)?;
        let s2 = self.noise_variance();
        for i in 0..h.nrows() {
            h[(i, i)] += s2;
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(rng: &mut ChaCha8Rng, n: usize, d: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, d, |_, _| rng.random_range(-1.5..1.5))
    }

    fn all_kernels() -> Vec<(KernelExpr, Vec<f64>)> {
        vec![
            (KernelExpr::se(), vec![0.7, 1.3]),
            (KernelExpr::matern(MaternNu::Half), vec![0.9, 0.6]),
            (KernelExpr::matern(MaternNu::ThreeHalves), vec![0.8, 1.1]),
            (KernelExpr::matern(MaternNu::FiveHalves), vec![1.2, 0.5]),
            (KernelExpr::periodic(), vec![0.9, 1.7]),
            (
                KernelExpr::scaled(KernelExpr::product(vec![
                    KernelExpr::se().on_dims(vec![0]),
                    KernelExpr::matern(MaternNu::ThreeHalves).on_dims(vec![1]),
                ])),
                vec![1.6, 0.8, 0.7],
            ),
            (
                KernelExpr::product(vec![KernelExpr::se(), KernelExpr::periodic().on_dims(vec![0])]),
                vec![1.1, 0.9, 0.8, 1.4],
            ),
        ]
    }

    #[test]
    fn closed_form_values() {
        let se = Kernel::new(&KernelExpr::se(), 1, &[1.0]).unwrap();
        assert_eq!(se.eval(&[0.3], &[0.3]).unwrap(), 1.0);
        assert!((se.eval(&[0.0], &[1.0]).unwrap() - (-0.5f64).exp()).abs() < 1e-15);
        let m12 = Kernel::new(&KernelExpr::matern(MaternNu::Half), 1, &[1.0]).unwrap();
        assert!((m12.eval(&[0.0], &[1.0]).unwrap() - (-1.0f64).exp()).abs() < 1e-15);
        let scaled = Kernel::new(&KernelExpr::scaled(KernelExpr::se()), 2, &[2.5, 1.0, 1.0]).unwrap();
        assert!((scaled.eval(&[0.1, 0.2], &[0.1, 0.2]).unwrap() - 2.5).abs() < 1e-15);
    }

    /// Matérn via the general Bessel form, with K_ν from the integral
    /// K_ν(z) = ∫₀^∞ exp(−z cosh t) cosh(νt) dt evaluated by composite
    /// Simpson quadrature.
    fn matern_bessel_oracle(nu: f64, d: f64, l: f64) -> f64 {
        fn gamma(x: f64) -> f64 {
            // Γ(1/2)=√π, Γ(3/2)=√π/2, Γ(5/2)=3√π/4
            let sp = std::f64::consts::PI.sqrt();
            if x == 0.5 {
                sp
            } else if x == 1.5 {
                sp / 2.0
            } else {
                assert_eq!(x, 2.5);
                3.0 * sp / 4.0
            }
        }
        let z = (2.0 * nu).sqrt() * d / l;
        let upper = 12.0;
        let steps = 200_000;
        let h = upper / steps as f64;
        let f = |t: f64| (-z * t.cosh()).exp() * (nu * t).cosh();
        let mut s = f(0.0) + f(upper);
        for i in 1..steps {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * f(i as f64 * h);
        }
        let bessel_k = s * h / 3.0;
        2f64.powf(1.0 - nu) / gamma(nu) * z.powf(nu) * bessel_k
    }

    #[test]
    fn matern_closed_forms_match_bessel_oracle() {
        for (nu, tag) in [(0.5, MaternNu::Half), (1.5, MaternNu::ThreeHalves), (2.5, MaternNu::FiveHalves)] {
            for d in [0.5, 1.0, 2.3] {
                let closed = tag.profile(d);
                let oracle = matern_bessel_oracle(nu, d, 1.0);
                assert!((closed - oracle).abs() < 1e-10, "nu={nu} d={d}: {closed} vs {oracle}");
            }
        }
        // frozen value for ν=5/2, ℓ=1, d=0.5 from the Bessel oracle
        let k = Kernel::new(&KernelExpr::matern(MaternNu::FiveHalves), 1, &[1.0]).unwrap();
        assert!((k.eval(&[0.0], &[0.5]).unwrap() - 0.828_649_142_418_125).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let k = Kernel::new(&KernelExpr::se(), 2, &[1.0, 1.0]).unwrap();
        assert!(matches!(k.eval(&[0.0], &[0.0, 1.0]), Err(GpError::Dimension(_))));
        let a = DMatrix::zeros(3, 3);
        assert!(k.gram(&a, &a).is_err());
        assert!(Kernel::new(&KernelExpr::se(), 2, &[1.0]).is_err());
        assert!(KernelExpr::se().on_dims(vec![4]).param_count(2).is_err());
    }

    #[test]
    fn gram_matches_entrywise_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (expr, theta) in all_kernels() {
            let k = Kernel::new(&expr, 2, &theta).unwrap();
            let a = random_points(&mut rng, 5, 2);
            let b = random_points(&mut rng, 4, 2);
            let g = k.gram(&a, &b).unwrap();
            for i in 0..5 {
                for j in 0..4 {
                    let xi: Vec<f64> = a.row(i).iter().copied().collect();
                    let yj: Vec<f64> = b.row(j).iter().copied().collect();
                    assert_eq!(g[(i, j)], k.eval(&xi, &yj).unwrap());
                }
            }
        }
        let k = Kernel::new(&KernelExpr::scaled(KernelExpr::se()), 1, &[3.0, 1.0]).unwrap();
        let one = DMatrix::from_element(1, 1, 0.4);
        assert_eq!(k.gram(&one, &one).unwrap()[(0, 0)], 3.0);
    }

    #[test]
    fn gram_is_symmetric_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_points(&mut rng, 32, 3);
        let kernels = [
            (KernelExpr::se(), vec![0.6, 1.0, 1.4]),
            (KernelExpr::matern(MaternNu::Half), vec![0.6, 1.0, 1.4]),
            (
                KernelExpr::product(vec![
                    KernelExpr::se().on_dims(vec![0, 1]),
                    KernelExpr::matern(MaternNu::FiveHalves).on_dims(vec![2]),
                ]),
                vec![0.5, 0.9, 0.7],
            ),
        ];
        for (expr, theta) in kernels {
            let k = Kernel::new(&expr, 3, &theta).unwrap();
            let g = k.gram(&x, &x).unwrap();
            assert_eq!(g, g.transpose());
            let min_eig = g.symmetric_eigenvalues().min();
            assert!(min_eig >= -1e-8, "min eigenvalue {min_eig}");
        }
        // periodic on one dimension
        let x1 = random_points(&mut rng, 32, 1);
        let k = Kernel::new(&KernelExpr::periodic(), 1, &[0.8, 1.3]).unwrap();
        assert!(k.gram(&x1, &x1).unwrap().symmetric_eigenvalues().min() >= -1e-8);
    }

    #[test]
    fn symmetry_and_stationarity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (expr, theta) in all_kernels() {
            let k = Kernel::new(&expr, 2, &theta).unwrap();
            for _ in 0..1000 {
                let x = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
                let y = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
                let c = [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
                let kxy = k.eval(&x, &y).unwrap();
                assert!((kxy - k.eval(&y, &x).unwrap()).abs() <= 1e-14);
                let shifted = k.eval(&[x[0] + c[0], x[1] + c[1]], &[y[0] + c[0], y[1] + c[1]]).unwrap();
                assert!((kxy - shifted).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn matern_approaches_se_as_nu_grows() {
        // exp(-d) and exp(-d²/2) coincide at d = 2ℓ, so the grid uses midpoints
        for i in 1..=30 {
            let d = 3.0 * (i as f64 - 0.5) / 30.0;
            let se = (-0.5 * d * d).exp();
            let far = (MaternNu::Half.profile(d) - se).abs();
            let near = (MaternNu::FiveHalves.profile(d) - se).abs();
            assert!(near < far, "d={d}");
        }
    }

    fn central_difference_check(model: &ModelSpec, x: &DMatrix<f64>) {
        let h = 1e-5;
        let theta = model.hyper.theta();
        let kp = theta.len() - 1;
        for k in 0..theta.len() {
            let mut plus = theta.clone();
            let mut minus = theta.clone();
            plus[k] += h;
            minus[k] -= h;
            let build = |t: &[f64]| {
                ModelSpec::with_params(model.kernel.clone(), model.input_dim, &t[..kp], t[kp] * t[kp])
                    .unwrap()
                    .h_matrix(x)
                    .unwrap()
            };
            let fd = (build(&plus) - build(&minus)) / (2.0 * h);
            let analytic = model.grad_h(x, k).unwrap();
            let err = (&fd - &analytic).norm();
            assert!(err <= 1e-5 * analytic.norm().max(1e-12), "param {k}: error {err}, norm {}", analytic.norm());
        }
    }

    #[test]
    fn grad_h_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_points(&mut rng, 16, 2);
        for (expr, theta) in all_kernels() {
            let model = ModelSpec::with_params(expr, 2, &theta, 0.3).unwrap();
            central_difference_check(&model, &x);
        }
    }

    #[test]
    fn grad_h_noise_is_two_sigma_identity() {
        let model = ModelSpec::with_params(KernelExpr::se(), 1, &[1.0], 0.25).unwrap();
        let x = DMatrix::from_column_slice(3, 1, &[0.0, 1.0, 2.0]);
        let g = model.grad_h(&x, 1).unwrap();
        assert!((g - DMatrix::identity(3, 3) * 1.0).norm() < 1e-12);
        assert!(model.grad_h(&x, 2).is_err());
    }

    #[test]
    fn product_gradient_on_two_by_two_grid() {
        // k((s,t),(s',t')) = k_S(s,s')·k_T(t,t'); ∂/∂ℓ_S equals (∂K_S/∂ℓ_S)[s,s']·K_T[t,t']
        let expr = KernelExpr::product(vec![
            KernelExpr::se().on_dims(vec![0]),
            KernelExpr::matern(MaternNu::ThreeHalves).on_dims(vec![1]),
        ]);
        let (ls, lt) = (0.7, 1.3);
        let k = Kernel::new(&expr, 2, &[ls, lt]).unwrap();
        let s = [0.0, 0.9];
        let t = [0.2, 1.0];
        let pts: Vec<[f64; 2]> = s.iter().flat_map(|&si| t.iter().map(move |&ti| [si, ti])).collect();
        let x = DMatrix::from_fn(4, 2, |i, j| pts[i][j]);
        let dk = k.gram_param_grad(&x, 0).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let ds = pts[i][0] - pts[j][0];
                let dks = (-0.5 * ds * ds / (ls * ls)).exp() * ds * ds / ls.powi(3);
                let kt = MaternNu::ThreeHalves.profile((pts[i][1] - pts[j][1]).abs() / lt);
                assert!((dk[(i, j)] - dks * kt).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (expr, theta) in all_kernels() {
            let k = Kernel::new(&expr, 2, &theta).unwrap();
            for _ in 0..20 {
                let x = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
                let y = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
                let mut g = [0.0; 2];
                k.eval_with_input_grad(&x, &y, &mut g);
                for d in 0..2 {
                    let h = 1e-6;
                    let mut xp = x;
                    let mut xm = x;
                    xp[d] += h;
                    xm[d] -= h;
                    let fd = (k.eval(&xp, &y).unwrap() - k.eval(&xm, &y).unwrap()) / (2.0 * h);
                    assert!((fd - g[d]).abs() < 1e-6, "{expr:?} dim {d}: {fd} vs {}", g[d]);
                }
            }
        }
    }

    #[test]
    fn quadratic_forms_match_materialized_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_points(&mut rng, 23, 2);
        let (expr, theta) = all_kernels().remove(5);
        let k = Kernel::new(&expr, 2, &theta).unwrap();
        let u = DMatrix::from_fn(23, 3, |_, _| rng.random_range(-1.0..1.0));
        let v = DMatrix::from_fn(23, 3, |_, _| rng.random_range(-1.0..1.0));
        let q = k.param_grad_quadratic_forms(&Points::from_matrix(&x), &u, &v, 7);
        for p in 0..k.num_params() {
            let dk = k.gram_param_grad(&x, p).unwrap();
            for c in 0..3 {
                let want = u.column(c).dot(&(&dk * v.column(c)));
                assert!((q[(p, c)] - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn row_blocks_cover_the_gram_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_points(&mut rng, 10, 2);
        let k = Kernel::new(&KernelExpr::se(), 2, &[1.0, 0.5]).unwrap();
        let full = k.gram(&x, &x).unwrap();
        let mut seen = DMatrix::zeros(10, 10);
        k.for_each_row_block(&Points::from_matrix(&x), 3, |rows, block| {
            seen.rows_mut(rows.start, rows.len()).copy_from(&block);
        });
        assert_eq!(seen, full);
    }

    #[test]
    fn json_round_trip() {
        let expr = KernelExpr::scaled(KernelExpr::product(vec![
            KernelExpr::matern(MaternNu::ThreeHalves).on_dims(vec![0]),
            KernelExpr::periodic().on_dims(vec![1]),
        ]));
        let s = serde_json::to_string(&expr).unwrap();
        assert!(s.contains("\"type\":\"product\""));
        assert!(s.contains("\"nu\":1.5"));
        let back: KernelExpr = serde_json::from_str(&s).unwrap();
        assert_eq!(back, expr);
        assert!(serde_json::from_str::<KernelExpr>(r#"{"type":"matern","nu":0.7}"#).is_err());
    }

    #[test]
    fn names_follow_layout() {
        let expr = KernelExpr::scaled(KernelExpr::product(vec![
            KernelExpr::se().on_dims(vec![1]),
            KernelExpr::periodic().on_dims(vec![0]),
        ]));
        let names = expr.param_names(2).unwrap();
        assert_eq!(names.len(), expr.param_count(2).unwrap());
        assert_eq!(names[0], "signal_variance");
        assert_eq!(expr.signal_variance_index(2).unwrap(), Some(0));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softplus_round_trip(v in 1e-6f64..1e6) {
                let back = softplus(softplus_inv(v));
                prop_assert!((back - v).abs() <= 1e-12 * v.max(1.0));
            }

            #[test]
            fn hyperparameters_round_trip(ls in 1e-3f64..50.0, noise in 1e-6f64..10.0) {
                let h = Hyperparameters::from_constrained(&[ls], noise).unwrap();
                prop_assert!((h.kernel_params()[0] - ls).abs() <= 1e-12 * ls.max(1.0));
                prop_assert!((h.noise_variance() - noise).abs() <= 1e-12 * noise.max(1.0));
                prop_assert!(h.theta().iter().all(|v| *v > 0.0));
            }
        }
    }
}
