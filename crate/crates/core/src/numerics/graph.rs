//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as it is evaluated. Nodes are appended
//! in evaluation order, so reverse insertion order is a valid topological
//! order for the backward sweep. Parameter leaves borrow their values from a
//! [`ParamStore`]; the store is only mutated once the graph is dropped, when
//! the returned [`Gradients`] are accumulated into it.

use std::borrow::Cow;
use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::tensor::{matmul_nt_into, matmul_tn_into, transpose_into, Tensor};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Sigmoid(Var),
    Gelu(Var),
    Square(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    Mean(Var),
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    param_leaves: HashMap<ParamId, Var>,
}

/// Result of a backward sweep.
pub struct Gradients {
    nodes: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Vec<f64>)>,
}

impl Gradients {
    /// Gradient with respect to a leaf created by [`Graph::input`].
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.nodes.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .map(|(_, g)| g.as_slice())
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params.iter().map(|(id, g)| (*id, g.as_slice()))
    }

    /// Scales every parameter gradient in place.
    pub fn scale(&mut self, factor: f64) {
        for (_, g) in &mut self.params {
            g.iter_mut().for_each(|v| *v *= factor);
        }
    }
}

fn shape2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        s => Err(Error::dim(op, format!("expected a matrix, got shape {s:?}"))),
    }
}

fn check_nan(t: &Tensor, op: &'static str) -> Result<()> {
    if t.has_nan() {
        Err(Error::NonFinite { op })
    } else {
        Ok(())
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op, inputs: &[Var], name: &'static str) -> Result<Var> {
        check_nan(&value, name)?;
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(Cow::Owned(value), op, rg))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A constant that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, false)
    }

    pub fn constant_ref(&mut self, value: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, false)
    }

    /// A free leaf; when `requires_grad` is set its gradient is reported by
    /// [`Gradients::wrt`].
    pub fn input(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, requires_grad)
    }

    /// Leaf bound to a stored parameter. Frozen parameters do not require a
    /// gradient, so nothing is propagated into them.
    pub fn param(&mut self, store: &'a ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_leaves.get(&id) {
            return v;
        }
        let v = self.push(
            Cow::Borrowed(store.value(id)),
            Op::Param(id),
            store.is_trainable(id),
        );
        self.param_leaves.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push_op(out, Op::MatMul(a, b), &[a, b], "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        self.push_op(out, Op::Transpose(a), &[a], "transpose")
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("shape preserved")
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
            .expect("shape preserved")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.zip_with(a, b, |x, y| x + y);
        self.push_op(out, Op::Add(a, b), &[a, b], "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.zip_with(a, b, |x, y| x - y);
        self.push_op(out, Op::Sub(a, b), &[a, b], "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.zip_with(a, b, |x, y| x * y);
        self.push_op(out, Op::Mul(a, b), &[a, b], "mul")
    }

    /// Adds a length-n vector to every row of an m×n matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, n) = shape2(self.value(x), "add_bias")?;
        if self.value(bias).numel() != n {
            return Err(Error::dim(
                "add_bias",
                format!("bias of {} values for {n} columns", self.value(bias).numel()),
            ));
        }
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, bv) in row.iter_mut().zip(&b) {
                *o += bv;
            }
        }
        self.push_op(out, Op::AddBias(x, bias), &[x, bias], "add_bias")
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let out = self.map(x, |v| v * factor);
        self.push_op(out, Op::Scale(x, factor), &[x], "scale")
    }

    /// Multiplies `x` by the single value held in `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::dim(
                "scale_by",
                format!("scale factor has shape {:?}", self.value(s).shape()),
            ));
        }
        let factor = self.value(s).item();
        let out = self.map(x, |v| v * factor);
        self.push_op(out, Op::ScaleBy(x, s), &[x, s], "scale_by")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.map(x, sigmoid);
        self.push_op(out, Op::Sigmoid(x), &[x], "sigmoid")
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.map(x, gelu);
        self.push_op(out, Op::Gelu(x), &[x], "gelu")
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let out = self.map(x, |v| v * v);
        self.push_op(out, Op::Square(x), &[x], "square")
    }

    /// Row-wise softmax of `x + mask`. Mask entries are `0` or `-inf`; masked
    /// entries come out as exactly zero.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&Tensor>) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = shape2(t, "softmax_rows")?;
        if let Some(mask) = mask {
            if mask.shape() != t.shape() {
                return Err(Error::dim(
                    "softmax_rows",
                    format!("mask {:?} for input {:?}", mask.shape(), t.shape()),
                ));
            }
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &t.data()[i * n..(i + 1) * n];
            let z = |j: usize| match mask {
                Some(mk) => row[j] + mk.data()[i * n + j],
                None => row[j],
            };
            let max = (0..n).map(z).fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::DegenerateRow { row: i });
            }
            let o = &mut out[i * n..(i + 1) * n];
            let mut sum = 0.0;
            for (j, oj) in o.iter_mut().enumerate() {
                *oj = (z(j) - max).exp();
                sum += *oj;
            }
            o.iter_mut().for_each(|v| *v /= sum);
        }
        let out = Tensor::new(vec![m, n], out)?;
        self.push_op(out, Op::Softmax(x), &[x], "softmax_rows")
    }

    /// Per-row normalisation to zero mean and unit (population) variance,
    /// followed by an elementwise affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = shape2(t, "layer_norm")?;
        if self.value(gain).numel() != n || self.value(bias).numel() != n {
            return Err(Error::dim(
                "layer_norm",
                format!(
                    "gain/bias of {}/{} values for width {n}",
                    self.value(gain).numel(),
                    self.value(bias).numel()
                ),
            ));
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &t.data()[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = inv;
            for j in 0..n {
                let h = (row[j] - mean) * inv;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::new(vec![m, n], out)?;
        self.push_op(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
            "layer_norm",
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat_rows", "no inputs"))?;
        let n = shape2(self.value(*first), "concat_rows")?.1;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (m, c) = shape2(self.value(p), "concat_rows")?;
            if c != n {
                return Err(Error::dim("concat_rows", format!("width {c} vs {n}")));
            }
            rows += m;
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::new(vec![rows, n], data)?;
        self.push_op(out, Op::ConcatRows(parts.to_vec()), parts, "concat_rows")
    }

    /// Rows `start..start + len`.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = shape2(self.value(x), "slice_rows")?;
        if start + len > m {
            return Err(Error::dim(
                "slice_rows",
                format!("rows {start}..{} of {m}", start + len),
            ));
        }
        let data = self.value(x).data()[start * n..(start + len) * n].to_vec();
        let out = Tensor::new(vec![len, n], data)?;
        self.push_op(out, Op::SliceRows(x, start), &[x], "slice_rows")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat_cols", "no inputs"))?;
        let m = shape2(self.value(*first), "concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = shape2(self.value(p), "concat_cols")?;
            if r != m {
                return Err(Error::dim("concat_cols", format!("height {r} vs {m}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let out = Tensor::new(vec![m, total], data)?;
        self.push_op(out, Op::ConcatCols(parts.to_vec()), parts, "concat_cols")
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = shape2(self.value(x), "slice_cols")?;
        if start + len > n {
            return Err(Error::dim(
                "slice_cols",
                format!("columns {start}..{} of {n}", start + len),
            ));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        let out = Tensor::new(vec![m, len], data)?;
        self.push_op(out, Op::SliceCols(x, start), &[x], "slice_cols")
    }

    /// Selects rows of a table by index (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (m, n) = shape2(self.value(table), "gather_rows")?;
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * n);
        for &id in ids {
            if id >= m {
                return Err(Error::dim("gather_rows", format!("index {id} of {m} rows")));
            }
            data.extend_from_slice(&src[id * n..(id + 1) * n]);
        }
        let out = Tensor::new(vec![ids.len(), n], data)?;
        self.push_op(out, Op::GatherRows(table, ids.to_vec()), &[table], "gather_rows")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.numel() == 0 {
            return Err(Error::dim("mean", "empty tensor"));
        }
        let out = Tensor::scalar(t.data().iter().sum::<f64>() / t.numel() as f64);
        self.push_op(out, Op::Mean(x), &[x], "mean")
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: Tensor) -> Result<Var> {
        let t = self.constant(target);
        let diff = self.sub(pred, t)?;
        let sq = self.square(diff)?;
        self.mean(sq)
    }

    /// Reverse sweep from a scalar.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        let mut params = Vec::new();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { nodes: grads, params });
        }
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => grads[i] = Some(gout),
                Op::Param(id) => params.push((*id, gout)),
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k) = (ta.shape()[0], ta.shape()[1]);
                    let n = tb.shape()[1];
                    self.accumulate(&mut grads, *a, |ga| matmul_nt_into(&gout, tb.data(), ga, m, n, k));
                    self.accumulate(&mut grads, *b, |gb| matmul_tn_into(ta.data(), &gout, gb, m, k, n));
                }
                Op::Transpose(a) => {
                    let (m, n) = (node.value.shape()[0], node.value.shape()[1]);
                    self.accumulate(&mut grads, *a, |ga| {
                        let mut t = vec![0.0; m * n];
                        transpose_into(&gout, &mut t, m, n);
                        ga.iter_mut().zip(&t).for_each(|(g, v)| *g += v);
                    });
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, *a, |g| add_into(g, &gout));
                    self.accumulate(&mut grads, *b, |g| add_into(g, &gout));
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut grads, *a, |g| add_into(g, &gout));
                    self.accumulate(&mut grads, *b, |g| {
                        g.iter_mut().zip(&gout).for_each(|(g, v)| *g -= v)
                    });
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                    self.accumulate(&mut grads, *a, |g| {
                        for j in 0..g.len() {
                            g[j] += gout[j] * tb[j];
                        }
                    });
                    self.accumulate(&mut grads, *b, |g| {
                        for j in 0..g.len() {
                            g[j] += gout[j] * ta[j];
                        }
                    });
                }
                Op::AddBias(x, bias) => {
                    self.accumulate(&mut grads, *x, |g| add_into(g, &gout));
                    let n = self.value(*bias).numel();
                    self.accumulate(&mut grads, *bias, |g| {
                        for row in gout.chunks(n) {
                            add_into(g, row);
                        }
                    });
                }
                Op::Scale(x, c) => {
                    self.accumulate(&mut grads, *x, |g| {
                        g.iter_mut().zip(&gout).for_each(|(g, v)| *g += c * v)
                    });
                }
                Op::ScaleBy(x, s) => {
                    let factor = self.value(*s).item();
                    let tx = self.value(*x).data();
                    self.accumulate(&mut grads, *x, |g| {
                        g.iter_mut().zip(&gout).for_each(|(g, v)| *g += factor * v)
                    });
                    self.accumulate(&mut grads, *s, |g| {
                        g[0] += gout.iter().zip(tx).map(|(a, b)| a * b).sum::<f64>()
                    });
                }
                Op::Sigmoid(x) => {
                    let y = node.value.data();
                    self.accumulate(&mut grads, *x, |g| {
                        for j in 0..g.len() {
                            g[j] += gout[j] * y[j] * (1.0 - y[j]);
                        }
                    });
                }
                Op::Gelu(x) => {
                    let tx = self.value(*x).data();
                    self.accumulate(&mut grads, *x, |g| {
                        for j in 0..g.len() {
                            g[j] += gout[j] * gelu_grad(tx[j]);
                        }
                    });
                }
                Op::Square(x) => {
                    let tx = self.value(*x).data();
                    self.accumulate(&mut grads, *x, |g| {
                        for j in 0..g.len() {
                            g[j] += 2.0 * tx[j] * gout[j];
                        }
                    });
                }
                Op::Softmax(x) => {
                    let y = node.value.data();
                    let n = node.value.cols();
                    self.accumulate(&mut grads, *x, |g| {
                        for ((gr, yr), dr) in g.chunks_mut(n).zip(y.chunks(n)).zip(gout.chunks(n)) {
                            let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                            for j in 0..n {
                                gr[j] += yr[j] * (dr[j] - dot);
                            }
                        }
                    });
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let n = node.value.cols();
                    let gvals = self.value(*gain).data();
                    self.accumulate(&mut grads, *x, |g| {
                        let mut dxhat = vec![0.0; n];
                        for (i, (gr, dr)) in g.chunks_mut(n).zip(gout.chunks(n)).enumerate() {
                            let xh = &xhat[i * n..(i + 1) * n];
                            for j in 0..n {
                                dxhat[j] = dr[j] * gvals[j];
                            }
                            let sum_d: f64 = dxhat.iter().sum();
                            let sum_dx: f64 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum();
                            let scale = inv_std[i] / n as f64;
                            for j in 0..n {
                                gr[j] += scale * (n as f64 * dxhat[j] - sum_d - xh[j] * sum_dx);
                            }
                        }
                    });
                    self.accumulate(&mut grads, *gain, |g| {
                        for (dr, xr) in gout.chunks(n).zip(xhat.chunks(n)) {
                            for j in 0..n {
                                g[j] += dr[j] * xr[j];
                            }
                        }
                    });
                    self.accumulate(&mut grads, *bias, |g| {
                        for dr in gout.chunks(n) {
                            add_into(g, dr);
                        }
                    });
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.value(p).numel();
                        let slice = &gout[offset..offset + len];
                        self.accumulate(&mut grads, p, |g| add_into(g, slice));
                        offset += len;
                    }
                }
                Op::SliceRows(x, start) => {
                    let n = node.value.cols();
                    let off = start * n;
                    self.accumulate(&mut grads, *x, |g| add_into(&mut g[off..off + gout.len()], &gout));
                }
                Op::ConcatCols(parts) => {
                    let total = node.value.cols();
                    let mut col = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        self.accumulate(&mut grads, p, |g| {
                            for (i, gr) in g.chunks_mut(w).enumerate() {
                                add_into(gr, &gout[i * total + col..i * total + col + w]);
                            }
                        });
                        col += w;
                    }
                }
                Op::SliceCols(x, start) => {
                    let len = node.value.cols();
                    let n = self.value(*x).cols();
                    self.accumulate(&mut grads, *x, |g| {
                        for (i, dr) in gout.chunks(len).enumerate() {
                            add_into(&mut g[i * n + start..i * n + start + len], dr);
                        }
                    });
                }
                Op::GatherRows(table, ids) => {
                    let n = node.value.cols();
                    self.accumulate(&mut grads, *table, |g| {
                        for (r, &id) in ids.iter().enumerate() {
                            add_into(&mut g[id * n..(id + 1) * n], &gout[r * n..(r + 1) * n]);
                        }
                    });
                }
                Op::Mean(x) => {
                    let c = gout[0] / self.value(*x).numel() as f64;
                    self.accumulate(&mut grads, *x, |g| g.iter_mut().for_each(|v| *v += c));
                }
            }
        }
        params.sort_by_key(|(id, _)| *id);
        Ok(Gradients { nodes: grads, params })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
        f(slot);
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn softmax_symmetric_and_masked_rows() {
        let mut g = Graph::new();
        let x = g.constant(t(&[&[0.0, 0.0], &[5.0, 1.0]]));
        let mask = t(&[&[0.0, 0.0], &[0.0, f64::NEG_INFINITY]]);
        let y = g.softmax_rows(x, Some(&mask)).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5, 1.0, 0.0]);
    }

    #[test]
    fn softmax_matches_exp_normalise() {
        let mut g = Graph::new();
        let x = g.constant(t(&[&[1.0, 2.0, 3.0]]));
        let y = g.softmax_rows(x, None).unwrap();
        let z: f64 = (1..=3).map(|k| (k as f64).exp()).sum();
        for (j, v) in g.value(y).data().iter().enumerate() {
            assert!((v - ((j + 1) as f64).exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn fully_masked_row_is_an_error() {
        let mut g = Graph::new();
        let x = g.constant(t(&[&[1.0, 2.0]]));
        let mask = Tensor::full(&[1, 2], f64::NEG_INFINITY);
        assert!(matches!(
            g.softmax_rows(x, Some(&mask)),
            Err(Error::DegenerateRow { row: 0 })
        ));
    }

    #[test]
    fn layer_norm_cases() {
        let mut g = Graph::new();
        let gain = g.constant(Tensor::full(&[3], 1.0));
        let bias = g.constant(Tensor::zeros(&[3]));
        let x = g.constant(t(&[&[2.5, 2.5, 2.5]]));
        let y = g.layer_norm(x, gain, bias).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.0]);

        let gain = g.constant(Tensor::full(&[2], 1.0));
        let bias = g.constant(Tensor::zeros(&[2]));
        let x = g.constant(t(&[&[1.0, -1.0]]));
        let y = g.layer_norm(x, gain, bias).unwrap();
        // variance 1 plus epsilon
        let expect = 1.0 / (1.0 + LAYER_NORM_EPS).sqrt();
        assert!((g.value(y).data()[0] - expect).abs() < 1e-15);
        assert!((g.value(y).data()[0] - 1.0).abs() < 1e-5);
        assert!((g.value(y).data()[1] + 1.0).abs() < 1e-5);
    }

    #[test]
    fn non_scalar_backward_is_rejected() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[2, 2]), true);
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn nan_is_detected() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![f64::INFINITY]));
        let z = g.constant(Tensor::vector(vec![0.0]));
        assert!(matches!(g.mul(x, z), Err(Error::NonFinite { op: "mul" })));
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut store = ParamStore::new();
        let w = store.add("w", t(&[&[2.0]]), false).unwrap();
        let v = store.add("v", t(&[&[3.0]]), true).unwrap();
        let grads = {
            let mut g = Graph::new();
            let a = g.param(&store, w);
            let b = g.param(&store, v);
            let y = g.matmul(a, b).unwrap();
            let l = g.mean(y).unwrap();
            g.backward(l).unwrap()
        };
        assert!(grads.param(w).is_none());
        assert_eq!(grads.param(v).unwrap(), &[2.0]);
        store.accumulate(&grads);
        assert_eq!(store.grad(w).data(), &[0.0]);
        assert_eq!(store.grad(v).data(), &[2.0]);
    }

    #[test]
    fn repeated_param_leaf_is_shared() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::vector(vec![3.0]), true).unwrap();
        let mut g = Graph::new();
        let a = g.param(&store, w);
        let b = g.param(&store, w);
        assert_eq!(a, b);
        let y = g.mul(a, b).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.param(w).unwrap(), &[6.0]);
    }
}
