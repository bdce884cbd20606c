use std::collections::BTreeMap;

use super::kernels::{matmul_nn, matmul_nt, matmul_tn};
use super::{ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Denominator floor used by [`Graph::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Vec<T>,
        rstd: Vec<T>,
        floored: Vec<bool>,
    },
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    FillRows {
        x: Var,
        fill: Var,
        rows: Vec<usize>,
    },
    Sum(Var),
    L1 {
        pred: Var,
        target: Tensor<T>,
        rows: Vec<usize>,
    },
    /// Scalar-valued op whose gradient w.r.t. its input was computed eagerly.
    ScalarWithGrad {
        x: Var,
        local: Tensor<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Reverse-mode tape. Nodes are appended in evaluation order, so every
/// node's inputs precede it.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Bookkeeping from one [`Graph::backward`] pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BackwardStats {
    /// Nodes whose vector-Jacobian product was evaluated.
    pub visited: usize,
    /// Largest number of times any single node was visited.
    pub max_visits_per_node: u32,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    pub stats: BackwardStats,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss w.r.t. `v`. `None` for nodes that do not
    /// require gradients; zeros for disconnected gradient-requiring leaves.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Collects gradients for a set of bound parameters, keyed by name.
    pub fn for_params(&self, bound: &BoundParams) -> ParamSet<T> {
        bound
            .iter()
            .filter_map(|(name, v)| self.get(v).map(|g| (name.to_string(), g.clone())))
            .collect()
    }
}

/// Parameter names mapped to their leaf nodes on a graph.
#[derive(Clone, Debug, Default)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    /// Leaf for `name`. Panics if the parameter was never bound, which
    /// means the parameter set does not match its configuration.
    pub fn get(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some(&v) => v,
            None => panic!("parameter `{name}` is not bound"),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }
}

impl FromIterator<(String, Var)> for BoundParams {
    fn from_iter<I: IntoIterator<Item = (String, Var)>>(iter: I) -> Self {
        Self {
            vars: iter.into_iter().collect(),
        }
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(
        &mut self,
        name: &'static str,
        value: Tensor<T>,
        op: Op<T>,
        inputs: &[Var],
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let rg = inputs.iter().any(|&v| self.nodes[v.0].requires_grad);
        Ok(self.push(value, op, rg))
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Registers every tensor in `params` as a leaf.
    pub fn bind(&mut self, params: &ParamSet<T>, trainable: bool) -> BoundParams {
        let vars = params
            .iter()
            .map(|(name, t)| {
                let v = if trainable {
                    self.param(t.clone())
                } else {
                    self.constant(t.clone())
                };
                (name.clone(), v)
            })
            .collect();
        BoundParams { vars }
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(shape_err(op, s, &[]));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_nn(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        let t = Tensor::from_parts(vec![m, n], out);
        self.push_checked("matmul", t, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul_nt")?;
        let (n, k2) = self.matrix_dims(b, "matmul_nt")?;
        if k != k2 {
            return Err(shape_err("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_nt(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        let t = Tensor::from_parts(vec![m, n], out);
        self.push_checked("matmul_nt", t, Op::MatMulNt(a, b), &[a, b])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).transpose()?;
        self.push_checked("transpose", t, Op::Transpose(x), &[x])
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (va, vb) = (self.value(a), self.value(b));
        Tensor::from_parts(
            va.shape().to_vec(),
            va.data()
                .iter()
                .zip(vb.data())
                .map(|(&x, &y)| f(x, y))
                .collect(),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let t = self.zip_with(a, b, |x, y| x + y);
        self.push_checked("add", t, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let t = self.zip_with(a, b, |x, y| x - y);
        self.push_checked("sub", t, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let t = self.zip_with(a, b, |x, y| x * y);
        self.push_checked("mul", t, Op::Mul(a, b), &[a, b])
    }

    /// Adds a vector of length `cols` to every row of a matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.matrix_dims(x, "add_bias")?;
        if self.shape(bias) != [n] {
            return Err(shape_err("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data().to_vec();
        let mut t = self.value(x).clone();
        for row in t.data_mut().chunks_mut(n) {
            add_into(row, &b);
        }
        self.push_checked("add_bias", t, Op::AddBias(x, bias), &[x, bias])
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let t = self.value(x).map(|v| v * c);
        self.push_checked("scale", t, Op::Scale(x, c), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| v.max(T::zero()));
        self.push_checked("relu", t, Op::Relu(x), &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let (c, a, half) = (T::lit(GELU_C), T::lit(GELU_A), T::lit(0.5));
        let t = self
            .value(x)
            .map(|v| half * v * (T::one() + (c * (v + a * v * v * v)).tanh()));
        self.push_checked("gelu", t, Op::Gelu(x), &[x])
    }

    /// Normalizes each row to zero mean and unit variance, then applies a
    /// learnable gain and bias. The variance is floored at `LAYER_NORM_EPS`
    /// so constant rows map to the bias instead of dividing by zero.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(x, "layer_norm")?;
        if self.shape(gain) != [n] || self.shape(bias) != [n] {
            return Err(shape_err("layer_norm", self.shape(x), self.shape(gain)));
        }
        let inv_n = T::one() / T::lit(n as f64);
        let eps = T::lit(LAYER_NORM_EPS);
        let xv = self.value(x).data();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut normed = vec![T::zero(); m * n];
        let mut rstd = vec![T::zero(); m];
        let mut floored = vec![false; m];
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mean = row.iter().copied().sum::<T>() * inv_n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
            floored[i] = var < eps;
            let r = T::one() / var.max(eps).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] - mean) * r;
                normed[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::from_parts(vec![m, n], out);
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            normed,
            rstd,
            floored,
        };
        self.push_checked("layer_norm", t, op, &[x, gain, bias])
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (_, n) = self.matrix_dims(x, "softmax_rows")?;
        let mut t = self.value(x).clone();
        for row in t.data_mut().chunks_mut(n) {
            softmax_in_place(row);
        }
        self.push_checked("softmax_rows", t, Op::SoftmaxRows(x), &[x])
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (_, n) = self.matrix_dims(x, "log_softmax_rows")?;
        let mut t = self.value(x).clone();
        for row in t.data_mut().chunks_mut(n) {
            let lse = log_sum_exp(row);
            for v in row.iter_mut() {
                *v = *v - lse;
            }
        }
        self.push_checked("log_softmax_rows", t, Op::LogSoftmaxRows(x), &[x])
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.matrix_dims(x, "slice_cols")?;
        if len == 0 || start + len > n {
            return Err(shape_err("slice_cols", self.shape(x), &[start, len]));
        }
        let src = self.value(x).data();
        let data = (0..m)
            .flat_map(|i| src[i * n + start..i * n + start + len].iter().copied())
            .collect();
        let t = Tensor::from_parts(vec![m, len], data);
        self.push_checked("slice_cols", t, Op::SliceCols { x, start }, &[x])
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Contract("concat_cols of nothing".into()));
        };
        let (m, _) = self.matrix_dims(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.matrix_dims(p, "concat_cols")?;
            if pm != m {
                return Err(shape_err("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let t = Tensor::from_parts(vec![m, total], data);
        self.push_checked("concat_cols", t, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Replaces the listed rows of `x` by the vector `fill`.
    pub fn fill_rows(&mut self, x: Var, rows: &[usize], fill: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(x, "fill_rows")?;
        if self.shape(fill) != [n] || rows.iter().any(|&r| r >= m) {
            return Err(shape_err("fill_rows", self.shape(x), self.shape(fill)));
        }
        let f = self.value(fill).data().to_vec();
        let mut t = self.value(x).clone();
        for &r in rows {
            t.data_mut()[r * n..(r + 1) * n].copy_from_slice(&f);
        }
        let op = Op::FillRows {
            x,
            fill,
            rows: rows.to_vec(),
        };
        self.push_checked("fill_rows", t, op, &[x, fill])
    }

    /// Sum of all entries as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum();
        self.push_checked("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = T::lit(self.value(x).numel() as f64);
        let s = self.sum(x)?;
        self.scale(s, T::one() / n)
    }

    /// Mean absolute error between `pred` and the constant `target`,
    /// restricted to the listed rows and averaged over rows × columns.
    /// An empty row set yields a constant zero.
    pub fn l1_loss(&mut self, pred: Var, target: &Tensor<T>, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.matrix_dims(pred, "l1_loss")?;
        if target.shape() != self.shape(pred) || rows.iter().any(|&r| r >= m) {
            return Err(shape_err("l1_loss", self.shape(pred), target.shape()));
        }
        if rows.is_empty() {
            return Ok(self.constant(Tensor::scalar(T::zero())));
        }
        let p = self.value(pred).data();
        let tg = target.data();
        let total: T = rows
            .iter()
            .flat_map(|&r| (r * n..(r + 1) * n).map(move |k| (p[k] - tg[k]).abs()))
            .sum();
        let loss = total / T::lit((rows.len() * n) as f64);
        let op = Op::L1 {
            pred,
            target: target.clone(),
            rows: rows.to_vec(),
        };
        self.push_checked("l1_loss", Tensor::scalar(loss), op, &[pred])
    }

    /// Records a scalar op whose gradient w.r.t. `x` has already been
    /// computed (used by losses with closed-form vector-Jacobian products).
    pub fn scalar_with_grad(
        &mut self,
        name: &'static str,
        x: Var,
        value: T,
        local_grad: Tensor<T>,
    ) -> Result<Var> {
        if local_grad.shape() != self.shape(x) {
            return Err(shape_err(name, self.shape(x), local_grad.shape()));
        }
        let op = Op::ScalarWithGrad {
            x,
            local: local_grad,
        };
        self.push_checked(name, Tensor::scalar(value), op, &[x])
    }

    /// Propagates d(loss)/d(node) for every gradient-requiring node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut visits = vec![0u32; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            visits[idx] += 1;
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        // Gradient-requiring leaves that the loss never reached get zeros.
        for (idx, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && grads[idx].is_none() && matches!(node.op, Op::Leaf) {
                grads[idx] = Some(Tensor::zeros(node.value.shape()));
            }
            if !node.requires_grad {
                grads[idx] = None;
            }
        }
        let stats = BackwardStats {
            visited: visits.iter().filter(|&&v| v > 0).count(),
            max_visits_per_node: visits.iter().copied().max().unwrap_or(0),
        };
        Ok(Gradients { grads, stats })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => add_into(existing.data_mut(), g.data()),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.requires_grad(*a) {
                    let mut da = vec![T::zero(); m * k];
                    matmul_nt(gd, self.value(*b).data(), &mut da, m, n, k);
                    self.accumulate(grads, *a, Tensor::from_parts(vec![m, k], da));
                }
                if self.requires_grad(*b) {
                    let mut db = vec![T::zero(); k * n];
                    matmul_tn(self.value(*a).data(), gd, &mut db, m, k, n);
                    self.accumulate(grads, *b, Tensor::from_parts(vec![k, n], db));
                }
            }
            Op::MatMulNt(a, b) => {
                // c[m×n] = a[m×k] · b[n×k]ᵀ
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[0];
                if self.requires_grad(*a) {
                    let mut da = vec![T::zero(); m * k];
                    matmul_nn(gd, self.value(*b).data(), &mut da, m, n, k);
                    self.accumulate(grads, *a, Tensor::from_parts(vec![m, k], da));
                }
                if self.requires_grad(*b) {
                    let mut db = vec![T::zero(); n * k];
                    matmul_tn(gd, self.value(*a).data(), &mut db, m, n, k);
                    self.accumulate(grads, *b, Tensor::from_parts(vec![n, k], db));
                }
            }
            Op::Transpose(x) => {
                let gt = g.transpose().expect("transpose of matrix gradient");
                self.accumulate(grads, *x, gt);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let shape = g.shape().to_vec();
                if self.requires_grad(*a) {
                    let d = gd.iter().zip(vb).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *a, Tensor::from_parts(shape.clone(), d));
                }
                if self.requires_grad(*b) {
                    let d = gd.iter().zip(va).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *b, Tensor::from_parts(shape, d));
                }
            }
            Op::AddBias(x, bias) => {
                self.accumulate(grads, *x, g.clone());
                if self.requires_grad(*bias) {
                    let n = g.cols();
                    let mut db = vec![T::zero(); n];
                    for row in gd.chunks(n) {
                        add_into(&mut db, row);
                    }
                    self.accumulate(grads, *bias, Tensor::from_parts(vec![n], db));
                }
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.accumulate(grads, *x, g.map(|v| v * c));
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let d = gd
                    .iter()
                    .zip(xv)
                    .map(|(&gv, &v)| if v > T::zero() { gv } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, Tensor::from_parts(g.shape().to_vec(), d));
            }
            Op::Gelu(x) => {
                let (c, a, half) = (T::lit(GELU_C), T::lit(GELU_A), T::lit(0.5));
                let three = T::lit(3.0);
                let xv = self.value(*x).data();
                let d = gd
                    .iter()
                    .zip(xv)
                    .map(|(&gv, &v)| {
                        let th = (c * (v + a * v * v * v)).tanh();
                        let dinner = c * (T::one() + three * a * v * v);
                        gv * (half * (T::one() + th) + half * v * (T::one() - th * th) * dinner)
                    })
                    .collect();
                self.accumulate(grads, *x, Tensor::from_parts(g.shape().to_vec(), d));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                rstd,
                floored,
            } => {
                let n = g.cols();
                let m = g.rows();
                let gv = self.value(*gain).data();
                if self.requires_grad(*x) {
                    let inv_n = T::one() / T::lit(n as f64);
                    let mut dx = vec![T::zero(); m * n];
                    for i in 0..m {
                        let gr = &gd[i * n..(i + 1) * n];
                        let hr = &normed[i * n..(i + 1) * n];
                        let dh: Vec<T> = gr.iter().zip(gv).map(|(&a, &b)| a * b).collect();
                        let mean_dh = dh.iter().copied().sum::<T>() * inv_n;
                        let mean_dh_h = dh.iter().zip(hr).map(|(&a, &b)| a * b).sum::<T>() * inv_n;
                        // A floored variance has a constant scale, so the
                        // projection onto the normalized row vanishes.
                        for j in 0..n {
                            let proj = if floored[i] {
                                T::zero()
                            } else {
                                hr[j] * mean_dh_h
                            };
                            dx[i * n + j] = rstd[i] * (dh[j] - mean_dh - proj);
                        }
                    }
                    self.accumulate(grads, *x, Tensor::from_parts(vec![m, n], dx));
                }
                if self.requires_grad(*gain) {
                    let mut dg = vec![T::zero(); n];
                    for (k, (&gr, &h)) in gd.iter().zip(normed).enumerate() {
                        dg[k % n] = dg[k % n] + gr * h;
                    }
                    self.accumulate(grads, *gain, Tensor::from_parts(vec![n], dg));
                }
                if self.requires_grad(*bias) {
                    let mut db = vec![T::zero(); n];
                    for row in gd.chunks(n) {
                        add_into(&mut db, row);
                    }
                    self.accumulate(grads, *bias, Tensor::from_parts(vec![n], db));
                }
            }
            Op::SoftmaxRows(x) => {
                let n = g.cols();
                let y = node.value.data();
                let mut dx = vec![T::zero(); y.len()];
                for ((dr, yr), gr) in dx.chunks_mut(n).zip(y.chunks(n)).zip(gd.chunks(n)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(g.shape().to_vec(), dx));
            }
            Op::LogSoftmaxRows(x) => {
                let n = g.cols();
                let y = node.value.data();
                let mut dx = vec![T::zero(); y.len()];
                for ((dr, yr), gr) in dx.chunks_mut(n).zip(y.chunks(n)).zip(gd.chunks(n)) {
                    let gsum: T = gr.iter().copied().sum();
                    for j in 0..n {
                        dr[j] = gr[j] - yr[j].exp() * gsum;
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(g.shape().to_vec(), dx));
            }
            Op::SliceCols { x, start } => {
                let (m, n) = (self.shape(*x)[0], self.shape(*x)[1]);
                let len = g.cols();
                let mut dx = vec![T::zero(); m * n];
                for i in 0..m {
                    dx[i * n + start..i * n + start + len]
                        .copy_from_slice(&gd[i * len..(i + 1) * len]);
                }
                self.accumulate(grads, *x, Tensor::from_parts(vec![m, n], dx));
            }
            Op::ConcatCols(parts) => {
                let m = g.rows();
                let total = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    if self.requires_grad(p) {
                        let mut dp = Vec::with_capacity(m * w);
                        for i in 0..m {
                            dp.extend_from_slice(&gd[i * total + offset..i * total + offset + w]);
                        }
                        self.accumulate(grads, p, Tensor::from_parts(vec![m, w], dp));
                    }
                    offset += w;
                }
            }
            Op::FillRows { x, fill, rows } => {
                let n = g.cols();
                if self.requires_grad(*x) {
                    let mut dx = g.clone();
                    for &r in rows {
                        dx.data_mut()[r * n..(r + 1) * n].fill(T::zero());
                    }
                    self.accumulate(grads, *x, dx);
                }
                if self.requires_grad(*fill) {
                    let mut df = vec![T::zero(); n];
                    for &r in rows {
                        add_into(&mut df, &gd[r * n..(r + 1) * n]);
                    }
                    self.accumulate(grads, *fill, Tensor::from_parts(vec![n], df));
                }
            }
            Op::Sum(x) => {
                let s = g.item();
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), s));
            }
            Op::L1 { pred, target, rows } => {
                let n = target.cols();
                let scale = g.item() / T::lit((rows.len() * n) as f64);
                let p = self.value(*pred).data();
                let tg = target.data();
                let mut dp = vec![T::zero(); p.len()];
                for &r in rows {
                    for k in r * n..(r + 1) * n {
                        let diff = p[k] - tg[k];
                        dp[k] = if diff > T::zero() {
                            scale
                        } else if diff < T::zero() {
                            -scale
                        } else {
                            T::zero()
                        };
                    }
                }
                self.accumulate(
                    grads,
                    *pred,
                    Tensor::from_parts(target.shape().to_vec(), dp),
                );
            }
            Op::ScalarWithGrad { x, local } => {
                let s = g.item();
                self.accumulate(grads, *x, local.map(|v| v * s));
            }
        }
    }
}

/// Numerically stable `log Σ exp(row)`.
pub fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return max;
    }
    max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln()
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}
