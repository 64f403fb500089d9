use std::collections::HashMap;
use std::hash::{DefaultHasher, Hash, Hasher};

use super::matrix::gemm_into;
use super::{Matrix, ParamId, ParameterStore, Scalar};
use crate::error::{Error, Result};

/// Epsilon added to variances by [`Graph::context_norm`] and [`Graph::layer_norm`].
pub const NORM_EPS: f64 = 1e-5;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// A differentiable primitive defined outside this module.
///
/// `backward` returns one gradient per input, shaped like that input.
pub trait CustomOp<T: Scalar> {
    fn name(&self) -> &'static str;
    fn backward(
        &self,
        inputs: &[&Matrix<T>],
        output: &Matrix<T>,
        grad: &Matrix<T>,
    ) -> Result<Vec<Matrix<T>>>;
}

enum Op<T: Scalar> {
    Leaf,
    Param,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRow(Var, Var),
    MulRow(Var, Var),
    BroadcastRows(Var),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Recip(Var),
    SoftmaxRows(Var),
    ContextNorm { x: Var, inv_std: Vec<T> },
    LayerNorm { x: Var, inv_std: Vec<T> },
    MeanRows(Var),
    MaxRows { x: Var, argmax: Vec<usize> },
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    Reshape(Var),
    Transpose(Var),
    GatherRows { x: Var, index: Vec<usize> },
    Sum(Var),
    Mean(Var),
    WeightedBce { logits: Var, targets: Vec<T>, weights: Vec<T> },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp<T>> },
}

struct Node<T: Scalar> {
    value: Matrix<T>,
    op: Op<T>,
}

/// Reverse-mode computation graph over [`Matrix`] values.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and backward is a single reverse sweep.
pub struct Graph<'s, T: Scalar> {
    store: &'s ParameterStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
    kink_margin: f64,
    /// Hash of every discrete decision taken so far, when tracking.
    branches: Option<u64>,
}

/// Gradients of one scalar output with respect to the graph's leaves.
pub struct Gradients<T> {
    leaf_grads: Vec<Option<Matrix<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for an input or parameter node; `None` if unreachable.
    pub fn wrt(&self, v: Var) -> Option<&Matrix<T>> {
        self.leaf_grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Matrix<T>)> {
        self.params
            .iter()
            .filter_map(|&(id, v)| self.wrt(v).map(|g| (id, g)))
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Matrix<T>>, m: Matrix<T>) -> Result<()> {
    match slot {
        Some(s) => s.add_assign(&m),
        None => {
            *slot = Some(m);
            Ok(())
        }
    }
}

fn check_finite<T: Scalar>(m: &Matrix<T>, op: &'static str) -> Result<()> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
    }
}

fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let u = c * (x + T::of(0.044715) * x * x * x);
    T::of(0.5) * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let k = T::of(0.044715);
    let th = (c * (x + k * x * x * x)).tanh();
    let half = T::of(0.5);
    half * (T::one() + th) + half * x * (T::one() - th * th) * c * (T::one() + T::of(3.0) * k * x * x)
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<'s, T: Scalar> Graph<'s, T> {
    pub fn new(store: &'s ParameterStore<T>) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            kink_margin: f64::INFINITY,
            branches: None,
        }
    }

    /// Records rectifier active sets, max-pool winners and caller-registered
    /// selections so two evaluations can be compared for a change of branch.
    pub fn with_branch_tracking(mut self) -> Self {
        self.branches = Some(0);
        self
    }

    /// `None` unless tracking was enabled.
    pub fn branch_signature(&self) -> Option<u64> {
        self.branches
    }

    pub fn note_branch(&mut self, decision: impl Hash) {
        if let Some(b) = self.branches.as_mut() {
            let mut h = DefaultHasher::new();
            b.hash(&mut h);
            decision.hash(&mut h);
            *b = h.finish();
        }
    }

    pub fn store(&self) -> &'s ParameterStore<T> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    /// Smallest distance of any rectifier input to zero, or of any max-pool
    /// winner to its runner-up, seen so far. Finite differences are only
    /// trustworthy when this is comfortably larger than the probe step.
    pub fn kink_margin(&self) -> f64 {
        self.kink_margin
    }

    /// Lets callers register their own non-smooth decisions (e.g. neighbor
    /// selection) under the same margin.
    pub fn note_kink(&mut self, margin: f64) {
        self.kink_margin = self.kink_margin.min(margin);
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>, name: &'static str) -> Result<Var> {
        check_finite(&value, name)?;
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn shape_err(op: &'static str, detail: String) -> Error {
        Error::Shape { op, detail }
    }

    pub fn input(&mut self, value: Matrix<T>) -> Result<Var> {
        self.push(value, Op::Leaf, "input")
    }

    /// Copies the current value of `v` into a fresh leaf; no gradient flows back.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let value = self.value(v).clone();
        self.input(value)
    }

    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.param_vars.get(&id) {
            return Ok(v);
        }
        let value = self.store.value(id).clone();
        let v = self.push(value, Op::Param, "param")?;
        self.param_vars.insert(id, v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) * op(b)` where `op` transposes when the flag is set.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let value = super::matrix::matmul(self.value(a), ta, self.value(b), tb)?;
        self.push(value, Op::MatMul { a, b, ta, tb }, "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push(value, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.push(value, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push(value, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let value = self.value(a).scale(s);
        self.push(value, Op::Scale(a, s), "scale")
    }

    fn check_row(&self, a: Var, row: Var, op: &'static str) -> Result<()> {
        let (ra, ca) = self.value(a).shape();
        let (rr, cr) = self.value(row).shape();
        if rr != 1 || cr != ca {
            return Err(Self::shape_err(op, format!("{ra}x{ca} with row {rr}x{cr}")));
        }
        Ok(())
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.check_row(a, row, "add_row")?;
        let r = self.value(row).data().to_vec();
        let mut value = self.value(a).clone();
        for i in 0..value.rows() {
            for (v, &b) in value.row_mut(i).iter_mut().zip(&r) {
                *v += b;
            }
        }
        self.push(value, Op::AddRow(a, row), "add_row")
    }

    /// Multiplies every row of `a` elementwise by a `1 x c` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.check_row(a, row, "mul_row")?;
        let r = self.value(row).data().to_vec();
        let mut value = self.value(a).clone();
        for i in 0..value.rows() {
            for (v, &b) in value.row_mut(i).iter_mut().zip(&r) {
                *v *= b;
            }
        }
        self.push(value, Op::MulRow(a, row), "mul_row")
    }

    /// Repeats a `1 x c` row `n` times.
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let m = self.value(a);
        if m.rows() != 1 {
            return Err(Self::shape_err("broadcast_rows", format!("{:?}", m.shape())));
        }
        let value = Matrix::new(n, m.cols(), m.data().repeat(n))?;
        self.push(value, Op::BroadcastRows(a), "broadcast_rows")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let margin = x.data().iter().fold(f64::INFINITY, |m, v| m.min(v.f64().abs()));
        let value = x.map(|v| if v > T::zero() { v } else { T::zero() });
        if self.branches.is_some() {
            let active: Vec<bool> = x.data().iter().map(|&v| v > T::zero()).collect();
            self.note_branch(active);
        }
        self.note_kink(margin);
        self.push(value, Op::Relu(a), "relu")
    }

    /// Tanh-approximated Gaussian error linear unit.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(gelu);
        self.push(value, Op::Gelu(a), "gelu")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(sigmoid);
        self.push(value, Op::Sigmoid(a), "sigmoid")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|v| v.tanh());
        self.push(value, Op::Tanh(a), "tanh")
    }

    pub fn recip(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|v| T::one() / v);
        self.push(value, Op::Recip(a), "recip")
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let value = softmax_rows(self.value(a))?;
        self.push(value, Op::SoftmaxRows(a), "softmax_rows")
    }

    /// Standardizes every column across the rows (mean 0, variance 1).
    pub fn context_norm(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (n, c) = x.shape();
        if n < 2 {
            return Err(Error::TooFewRows {
                op: "context_norm",
                need: 2,
                got: n,
            });
        }
        let nt = T::of(n as f64);
        let mut mean = vec![T::zero(); c];
        for i in 0..n {
            for (m, &v) in mean.iter_mut().zip(x.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= nt);
        let mut var = vec![T::zero(); c];
        for i in 0..n {
            for ((s, &v), &m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let eps = T::of(NORM_EPS);
        let inv_std: Vec<T> = var.iter().map(|&s| T::one() / (s / nt + eps).sqrt()).collect();
        let value = Matrix::from_fn(n, c, |i, j| (x.get(i, j) - mean[j]) * inv_std[j]);
        self.push(value, Op::ContextNorm { x: a, inv_std }, "context_norm")
    }

    /// Standardizes every row across its columns.
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (n, c) = x.shape();
        let ct = T::of(c as f64);
        let eps = T::of(NORM_EPS);
        let mut inv_std = Vec::with_capacity(n);
        let mut value = Matrix::zeros(n, c);
        for i in 0..n {
            let row = x.row(i);
            let mean = row.iter().copied().sum::<T>() / ct;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / ct;
            let s = T::one() / (var + eps).sqrt();
            inv_std.push(s);
            for (o, &v) in value.row_mut(i).iter_mut().zip(row) {
                *o = (v - mean) * s;
            }
        }
        self.push(value, Op::LayerNorm { x: a, inv_std }, "layer_norm")
    }

    /// Mean over rows, giving `1 x c`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let n = T::of(x.rows() as f64);
        let value = x.col_sums().map(|v| v / n);
        self.push(value, Op::MeanRows(a), "mean_rows")
    }

    /// Max over rows, giving `1 x c`. Ties go to the lowest row index.
    pub fn max_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (n, c) = x.shape();
        if n == 0 {
            return Err(Error::TooFewRows {
                op: "max_rows",
                need: 1,
                got: 0,
            });
        }
        let mut argmax = vec![0usize; c];
        let mut best = x.row(0).to_vec();
        let mut second = vec![T::neg_infinity(); c];
        for i in 1..n {
            for j in 0..c {
                let v = x.get(i, j);
                if v > best[j] {
                    second[j] = best[j];
                    best[j] = v;
                    argmax[j] = i;
                } else if v > second[j] {
                    second[j] = v;
                }
            }
        }
        if n > 1 {
            let margin = best
                .iter()
                .zip(&second)
                .fold(f64::INFINITY, |m, (&b, &s)| m.min((b - s).f64()));
            self.note_kink(margin);
        }
        self.note_branch(&argmax);
        let value = Matrix::row_vector(best);
        self.push(value, Op::MaxRows { x: a, argmax }, "max_rows")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Self::shape_err("concat_cols", "no inputs".into()));
        };
        let n = self.value(first).rows();
        if parts.iter().any(|&p| self.value(p).rows() != n) {
            return Err(Self::shape_err("concat_cols", "row counts differ".into()));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let value = Matrix::new(n, total, data)?;
        self.push(value, Op::ConcatCols(parts.to_vec()), "concat_cols")
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let x = self.value(a);
        if start > end || end > x.cols() {
            return Err(Self::shape_err(
                "slice_cols",
                format!("{start}..{end} of {} columns", x.cols()),
            ));
        }
        let value = Matrix::from_fn(x.rows(), end - start, |i, j| x.get(i, start + j));
        self.push(value, Op::SliceCols { x: a, start }, "slice_cols")
    }

    /// Reinterprets the row-major buffer with a new shape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let value = self.value(a).clone().reshape(rows, cols)?;
        self.push(value, Op::Reshape(a), "reshape")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a), "transpose")
    }

    /// Output row `i` is row `index[i]` of `a`.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let x = self.value(a);
        if let Some(&bad) = index.iter().find(|&&i| i >= x.rows()) {
            return Err(Self::shape_err(
                "gather_rows",
                format!("index {bad} out of {} rows", x.rows()),
            ));
        }
        let value = x.gather_rows(index);
        self.push(
            value,
            Op::GatherRows {
                x: a,
                index: index.to_vec(),
            },
            "gather_rows",
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Matrix::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let value = Matrix::scalar(x.sum() / T::of(x.len().max(1) as f64));
        self.push(value, Op::Mean(a), "mean")
    }

    /// `mean_i weights_i * BCE(sigmoid(logits_i), targets_i)`, computed from logits.
    pub fn weighted_bce(&mut self, logits: Var, targets: &[T], weights: &[T]) -> Result<Var> {
        let x = self.value(logits);
        if x.len() != targets.len() || x.len() != weights.len() {
            return Err(Self::shape_err(
                "weighted_bce",
                format!("{} logits, {} targets, {} weights", x.len(), targets.len(), weights.len()),
            ));
        }
        let n = T::of(x.len().max(1) as f64);
        let total: T = x
            .data()
            .iter()
            .zip(targets)
            .zip(weights)
            .map(|((&z, &y), &w)| {
                let softplus = z.max(T::zero()) + (T::one() + (-z.abs()).exp()).ln();
                w * (softplus - y * z)
            })
            .sum();
        let value = Matrix::scalar(total / n);
        self.push(
            value,
            Op::WeightedBce {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
            "weighted_bce",
        )
    }

    /// Registers an externally computed value together with its backward rule.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        value: Matrix<T>,
        op: Box<dyn CustomOp<T>>,
    ) -> Result<Var> {
        let name = op.name();
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            name,
        )
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        let out = self.value(output);
        if out.shape() != (1, 1) {
            return Err(Error::NotScalar {
                rows: out.rows(),
                cols: out.cols(),
            });
        }
        let mut grads: Vec<Option<Matrix<T>>> = Vec::with_capacity(output.0 + 1);
        grads.resize_with(output.0 + 1, || None);
        grads[output.0] = Some(Matrix::scalar(T::one()));

        for i in (0..=output.0).rev() {
            let (lower, upper) = grads.split_at_mut(i);
            let node = &self.nodes[i];
            let keep = matches!(node.op, Op::Leaf | Op::Param);
            let Some(g) = upper[0].as_ref() else { continue };
            self.backward_node(node, g, lower)?;
            if !keep {
                upper[0] = None;
            }
        }

        let params = self.param_vars.iter().map(|(&id, &v)| (id, v)).collect();
        Ok(Gradients {
            leaf_grads: grads,
            params,
        })
    }

    fn backward_node(&self, node: &Node<T>, g: &Matrix<T>, lower: &mut [Option<Matrix<T>>]) -> Result<()> {
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let slot = lower[a.0].get_or_insert_with(|| Matrix::zeros(av.rows(), av.cols()));
                if *ta {
                    gemm_into(T::one(), bv, *tb, g, true, T::one(), slot);
                } else {
                    gemm_into(T::one(), g, false, bv, !*tb, T::one(), slot);
                }
                let slot = lower[b.0].get_or_insert_with(|| Matrix::zeros(bv.rows(), bv.cols()));
                if *tb {
                    gemm_into(T::one(), g, true, av, *ta, T::one(), slot);
                } else {
                    gemm_into(T::one(), av, !*ta, g, false, T::one(), slot);
                }
            }
            Op::Add(a, b) => {
                accumulate(&mut lower[a.0], g.clone())?;
                accumulate(&mut lower[b.0], g.clone())?;
            }
            Op::Sub(a, b) => {
                accumulate(&mut lower[a.0], g.clone())?;
                accumulate(&mut lower[b.0], g.scale(-T::one()))?;
            }
            Op::Mul(a, b) => {
                let ga = g.zip_map(self.value(*b), |x, y| x * y)?;
                let gb = g.zip_map(self.value(*a), |x, y| x * y)?;
                accumulate(&mut lower[a.0], ga)?;
                accumulate(&mut lower[b.0], gb)?;
            }
            Op::Scale(a, s) => accumulate(&mut lower[a.0], g.scale(*s))?,
            Op::AddRow(a, row) => {
                accumulate(&mut lower[a.0], g.clone())?;
                accumulate(&mut lower[row.0], g.col_sums())?;
            }
            Op::MulRow(a, row) => {
                let r = self.value(*row);
                let x = self.value(*a);
                let ga = Matrix::from_fn(g.rows(), g.cols(), |i, j| g.get(i, j) * r.get(0, j));
                let gr = g.zip_map(x, |p, q| p * q)?.col_sums();
                accumulate(&mut lower[a.0], ga)?;
                accumulate(&mut lower[row.0], gr)?;
            }
            Op::BroadcastRows(a) => accumulate(&mut lower[a.0], g.col_sums())?,
            Op::Relu(a) => {
                let ga = g.zip_map(y, |d, v| if v > T::zero() { d } else { T::zero() })?;
                accumulate(&mut lower[a.0], ga)?;
            }
            Op::Gelu(a) => {
                let ga = g.zip_map(self.value(*a), |d, x| d * gelu_grad(x))?;
                accumulate(&mut lower[a.0], ga)?;
            }
            Op::Sigmoid(a) => {
                let ga = g.zip_map(y, |d, s| d * s * (T::one() - s))?;
                accumulate(&mut lower[a.0], ga)?;
            }
            Op::Tanh(a) => {
                let ga = g.zip_map(y, |d, t| d * (T::one() - t * t))?;
                accumulate(&mut lower[a.0], ga)?;
            }
            Op::Recip(a) => {
                let ga = g.zip_map(y, |d, r| -d * r * r)?;
                accumulate(&mut lower[a.0], ga)?;
            }
            Op::SoftmaxRows(a) => {
                let mut ga = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for ((o, &p), &q) in ga.row_mut(i).iter_mut().zip(yr).zip(gr) {
                        *o = p * (q - dot);
                    }
                }
                accumulate(&mut lower[a.0], ga)?;
            }
            Op::ContextNorm { x, inv_std } => {
                let (n, c) = y.shape();
                let nt = T::of(n as f64);
                let mut mean_g = vec![T::zero(); c];
                let mut mean_gy = vec![T::zero(); c];
                for i in 0..n {
                    for j in 0..c {
                        mean_g[j] += g.get(i, j);
                        mean_gy[j] += g.get(i, j) * y.get(i, j);
                    }
                }
                for j in 0..c {
                    mean_g[j] /= nt;
                    mean_gy[j] /= nt;
                }
                let ga = Matrix::from_fn(n, c, |i, j| {
                    inv_std[j] * (g.get(i, j) - mean_g[j] - y.get(i, j) * mean_gy[j])
                });
                accumulate(&mut lower[x.0], ga)?;
            }
            Op::LayerNorm { x, inv_std } => {
                let (n, c) = y.shape();
                let ct = T::of(c as f64);
                let mut ga = Matrix::zeros(n, c);
                for (i, &s) in inv_std.iter().enumerate().take(n) {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let mg = gr.iter().copied().sum::<T>() / ct;
                    let mgy = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum::<T>() / ct;
                    for ((o, &p), &q) in ga.row_mut(i).iter_mut().zip(yr).zip(gr) {
                        *o = s * (q - mg - p * mgy);
                    }
                }
                accumulate(&mut lower[x.0], ga)?;
            }
            Op::MeanRows(a) => {
                let n = self.value(*a).rows();
                let scale = T::one() / T::of(n as f64);
                let row: Vec<T> = g.data().iter().map(|&v| v * scale).collect();
                accumulate(&mut lower[a.0], Matrix::new(n, row.len(), row.repeat(n))?)?;
            }
            Op::MaxRows { x, argmax } => {
                let xv = self.value(*x);
                let mut ga = Matrix::zeros(xv.rows(), xv.cols());
                for (j, &i) in argmax.iter().enumerate() {
                    ga.set(i, j, g.get(0, j));
                }
                accumulate(&mut lower[x.0], ga)?;
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    let gp = Matrix::from_fn(g.rows(), w, |i, j| g.get(i, offset + j));
                    accumulate(&mut lower[p.0], gp)?;
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let mut ga = Matrix::zeros(xv.rows(), xv.cols());
                for i in 0..g.rows() {
                    ga.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                }
                accumulate(&mut lower[x.0], ga)?;
            }
            Op::Reshape(a) => {
                let (r, c) = self.value(*a).shape();
                accumulate(&mut lower[a.0], g.clone().reshape(r, c)?)?;
            }
            Op::Transpose(a) => accumulate(&mut lower[a.0], g.transpose())?,
            Op::GatherRows { x, index } => {
                let xv = self.value(*x);
                let mut ga = Matrix::zeros(xv.rows(), xv.cols());
                for (r, &src) in index.iter().enumerate() {
                    for (o, &v) in ga.row_mut(src).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                accumulate(&mut lower[x.0], ga)?;
            }
            Op::Sum(a) => {
                let (r, c) = self.value(*a).shape();
                accumulate(&mut lower[a.0], Matrix::filled(r, c, g.get(0, 0)))?;
            }
            Op::Mean(a) => {
                let (r, c) = self.value(*a).shape();
                let v = g.get(0, 0) / T::of((r * c).max(1) as f64);
                accumulate(&mut lower[a.0], Matrix::filled(r, c, v))?;
            }
            Op::WeightedBce {
                logits,
                targets,
                weights,
            } => {
                let x = self.value(*logits);
                let n = T::of(x.len().max(1) as f64);
                let scale = g.get(0, 0) / n;
                let data = x
                    .data()
                    .iter()
                    .zip(targets)
                    .zip(weights)
                    .map(|((&z, &t), &w)| scale * w * (sigmoid(z) - t))
                    .collect();
                accumulate(&mut lower[logits.0], Matrix::new(x.rows(), x.cols(), data)?)?;
            }
            Op::Custom { inputs, op } => {
                let values: Vec<&Matrix<T>> = inputs.iter().map(|&v| self.value(v)).collect();
                let gs = op.backward(&values, y, g)?;
                if gs.len() != inputs.len() {
                    return Err(Self::shape_err(op.name(), "wrong gradient count".into()));
                }
                for (v, gv) in inputs.iter().zip(gs) {
                    self.value(*v).same_shape(&gv, op.name())?;
                    accumulate(&mut lower[v.0], gv)?;
                }
            }
        }
        Ok(())
    }
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows<T: Scalar>(m: &Matrix<T>) -> Result<Matrix<T>> {
    check_finite(m, "softmax_rows")?;
    let mut out = m.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Ok(out)
}
