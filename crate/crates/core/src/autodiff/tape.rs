// SPDX-License-Identifier: MIT OR Apache-2.0

use super::tensor::{axis_split, Tensor};
use crate::error::{Error, Result};
use crate::rng;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Exp(Var),
    Ln(Var),
    Tanh(Var),
    Relu(Var),
    Power(Var, f64),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        axis: usize,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Sum {
        x: Var,
        axis: usize,
    },
    Mean {
        x: Var,
        axis: usize,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Recorder for reverse-mode differentiation.
///
/// Operations are appended in execution order, so the node list is
/// topologically sorted by construction. [`Tape::backward`] walks it once in
/// reverse and can run only once per tape.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
    relu_pattern: Vec<bool>,
    kink_margin: f64,
}

#[derive(Debug, Clone, Copy)]
enum Broadcast {
    Same,
    Right,
    Left,
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
            relu_pattern: Vec::new(),
            kink_margin: f64::INFINITY,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input tensor.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Records an input tensor that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward root with respect to a leaf created
    /// with `requires_grad = true`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Sign pattern of every relu input seen so far (true = active).
    pub fn relu_pattern(&self) -> &[bool] {
        &self.relu_pattern
    }

    /// Smallest distance of any relu input to its breakpoint.
    pub fn kink_margin(&self) -> f64 {
        self.kink_margin
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, op_name: &'static str, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Result<Var> {
        if self.consumed {
            return Err(Error::Tape("cannot record on a consumed tape".into()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(Tensor::from_parts(shape, data), op, requires_grad))
    }

    fn broadcast_kind(&self, op: &'static str, a: Var, b: Var) -> Result<Broadcast> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa == sb {
            return Ok(Broadcast::Same);
        }
        let nb: usize = sb.iter().product();
        let na: usize = sa.iter().product();
        if nb == 1 || (sb.len() <= sa.len() && sa.ends_with(sb)) {
            return Ok(Broadcast::Right);
        }
        if na == 1 || (sa.len() <= sb.len() && sb.ends_with(sa)) {
            return Ok(Broadcast::Left);
        }
        Err(Error::shape(op, format!("cannot broadcast {sa:?} with {sb:?}")))
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let kind = self.broadcast_kind(name, a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let (shape, data) = match kind {
            Broadcast::Same => (
                va.shape().to_vec(),
                va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect(),
            ),
            Broadcast::Right => {
                let n = vb.numel();
                (
                    va.shape().to_vec(),
                    va.data().iter().enumerate().map(|(i, &x)| f(x, vb.data()[i % n])).collect(),
                )
            }
            Broadcast::Left => {
                let n = va.numel();
                (
                    vb.shape().to_vec(),
                    vb.data().iter().enumerate().map(|(i, &y)| f(va.data()[i % n], y)).collect(),
                )
            }
        };
        self.record(name, shape, data, op, &[a, b])
    }

    /// Elementwise sum; the smaller operand may broadcast along leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(b).data().iter().any(|&v| v == 0.0) {
            return Err(Error::domain("div", "division by zero"));
        }
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let v = self.value(x);
        let data = v.data().iter().map(|&e| e * c).collect();
        let shape = v.shape().to_vec();
        self.record("scale", shape, data, Op::Scale(x, c), &[x])
    }

    /// Rank-2 matrix product `[m × k] · [k × n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        self.record("matmul", vec![m, n], out, Op::MatMul(a, b), &[a, b])
    }

    /// Rank-2 transpose.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::shape("transpose", format!("need rank 2, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let out = transpose_raw(self.value(x).data(), r, c);
        self.record("transpose", vec![c, r], out, Op::Transpose(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(x).numel() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape(x)),
            ));
        }
        let data = self.value(x).data().to_vec();
        self.record("reshape", shape.to_vec(), data, Op::Reshape(x), &[x])
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let v = self.value(x);
        let data = v.data().iter().map(|&e| f(e)).collect();
        let shape = v.shape().to_vec();
        self.record(name, shape, data, op, &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, f64::exp, Op::Exp(x))
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v <= 0.0) {
            return Err(Error::domain("ln", "logarithm of a non-positive value"));
        }
        self.unary("ln", x, f64::ln, Op::Ln(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary("tanh", x, f64::tanh, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let data = self.nodes[x.0].value.data();
        let margin = data.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
        self.relu_pattern.extend(data.iter().map(|&v| v > 0.0));
        self.kink_margin = self.kink_margin.min(margin);
        self.unary("relu", x, |v| v.max(0.0), Op::Relu(x))
    }

    /// Elementwise `x^p` for a constant exponent.
    pub fn power(&mut self, x: Var, p: f64) -> Result<Var> {
        let integral = p.fract() == 0.0;
        for &v in self.value(x).data() {
            if v < 0.0 && !integral {
                return Err(Error::domain("power", "fractional power of a negative value"));
            }
            if v == 0.0 && p < 1.0 && p != 0.0 {
                return Err(Error::domain("power", "power below one at zero is not differentiable"));
            }
        }
        self.unary("power", x, |v| v.powf(p), Op::Power(x, p))
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        if axis >= self.shape(x).len() {
            return Err(Error::shape(op, format!("axis {axis} out of range for {:?}", self.shape(x))));
        }
        Ok(())
    }

    /// Softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", x, axis)?;
        let v = self.value(x);
        let shape = v.shape().to_vec();
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = v.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let max = (0..len).map(|k| src[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for k in 0..len {
                    let e = (src[idx(k)] - max).exp();
                    out[idx(k)] = e;
                    total += e;
                }
                for k in 0..len {
                    out[idx(k)] /= total;
                }
            }
        }
        self.record("softmax", shape, out, Op::Softmax { x, axis }, &[x])
    }

    /// Normalisation to zero mean and unit (biased) variance along `axis`,
    /// without the affine part.
    pub fn layer_norm(&mut self, x: Var, axis: usize, eps: f64) -> Result<Var> {
        self.check_axis("layer_norm", x, axis)?;
        if !(eps > 0.0) {
            return Err(Error::domain("layer_norm", "eps must be positive"));
        }
        let v = self.value(x);
        let shape = v.shape().to_vec();
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = v.data();
        let mut normalized = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let mean = (0..len).map(|k| src[idx(k)]).sum::<f64>() / len as f64;
                let var = (0..len).map(|k| (src[idx(k)] - mean).powi(2)).sum::<f64>() / len as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[o * inner + i] = is;
                for k in 0..len {
                    normalized[idx(k)] = (src[idx(k)] - mean) * is;
                }
            }
        }
        let out = normalized.clone();
        self.record(
            "layer_norm",
            shape,
            out,
            Op::LayerNorm {
                x,
                axis,
                normalized,
                inv_std,
            },
            &[x],
        )
    }

    /// Gathers rows of a `[vocab × dim]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(Error::shape("embedding", format!("table must be rank 2, got {s:?}")));
        }
        let (rows, dim) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&id| id >= rows) {
            return Err(Error::shape("embedding", format!("id {bad} out of range for {rows} rows")));
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            out.extend_from_slice(t.row(id));
        }
        self.record(
            "embedding",
            vec![ids.len(), dim],
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        self.check_axis("concat", first, axis)?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", format!("{base:?} vs {s:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis];
                let chunk = len * inner;
                out.extend_from_slice(&self.value(v).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        self.record(
            "concat",
            shape,
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        )
    }

    /// The half-open range `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.check_axis("slice", x, axis)?;
        let shape = self.shape(x).to_vec();
        if start > end || end > shape[axis] {
            return Err(Error::shape("slice", format!("range {start}..{end} on extent {}", shape[axis])));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            out.extend_from_slice(&src[(o * len + start) * inner..(o * len + end) * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = end - start;
        self.record("slice", new_shape, out, Op::Slice { x, axis, start }, &[x])
    }

    fn reduce(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let name = if mean { "mean" } else { "sum" };
        self.check_axis(name, x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = axis_split(&shape, axis);
        if mean && len == 0 {
            return Err(Error::domain("mean", "mean over an empty axis"));
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += src[(o * len + k) * inner + i];
                }
            }
        }
        if mean {
            out.iter_mut().for_each(|v| *v /= len as f64);
        }
        let mut new_shape = shape;
        new_shape.remove(axis);
        let op = if mean { Op::Mean { x, axis } } else { Op::Sum { x, axis } };
        self.record(name, new_shape, out, op, &[x])
    }

    /// Sum along `axis`, dropping it.
    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, axis, false)
    }

    /// Mean along `axis`, dropping it.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, axis, true)
    }

    /// Sum of every element, as a scalar.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let flat = self.reshape(x, &[n])?;
        self.sum(flat, 0)
    }

    /// Inverted dropout. Element `i` is kept when the counter-based uniform
    /// draw `(seed, i)` is at least `p`; kept elements are scaled by
    /// `1 / (1 - p)`. With `train_mode == false` or `p == 0` the input is
    /// returned unchanged.
    pub fn dropout(&mut self, x: Var, p: f64, seed: u64, train_mode: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::domain("dropout", format!("p must be in [0, 1), got {p}")));
        }
        if !train_mode || p == 0.0 {
            return Ok(x);
        }
        let keep_scale = 1.0 / (1.0 - p);
        let v = self.value(x);
        let mask: Vec<f64> = (0..v.numel())
            .map(|i| if rng::uniform_at(seed, i as u64) >= p { keep_scale } else { 0.0 })
            .collect();
        let data = v.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let shape = v.shape().to_vec();
        self.record("dropout", shape, data, Op::Dropout { x, mask }, &[x])
    }

    /// Propagates gradients from a scalar `root` to every leaf created with
    /// `requires_grad = true`. A tape supports exactly one backward pass.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Tape("backward already ran on this tape".into()));
        }
        if self.nodes.is_empty() {
            return Err(Error::Tape("empty tape".into()));
        }
        if self.value(root).numel() != 1 {
            return Err(Error::Tape(format!(
                "backward root must be scalar, shape is {:?}",
                self.shape(root)
            )));
        }
        if !self.requires_grad(root) {
            return Err(Error::Tape("root does not depend on any differentiable leaf".into()));
        }
        self.consumed = true;

        let mut adj: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        adj[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                let shape = self.nodes[i].value.shape().to_vec();
                self.nodes[i].grad = Some(Tensor::from_parts(shape, g));
                continue;
            }
            let node = &self.nodes[i];
            let acc = |adj: &mut Vec<Option<Vec<f64>>>, v: Var, delta: Vec<f64>| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut adj[v.0] {
                    Some(existing) => existing.iter_mut().zip(delta).for_each(|(e, d)| *e += d),
                    slot => *slot = Some(delta),
                }
            };
            match &node.op {
                Op::Leaf => unreachable!("leaves handled above"),
                Op::Add(a, b) => {
                    let (ga, gb) = self.split_broadcast(*a, *b, &g, |g, _, _| (g, g));
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::Sub(a, b) => {
                    let (ga, gb) = self.split_broadcast(*a, *b, &g, |g, _, _| (g, -g));
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::Mul(a, b) => {
                    let (ga, gb) = self.split_broadcast(*a, *b, &g, |g, x, y| (g * y, g * x));
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::Div(a, b) => {
                    let (ga, gb) = self.split_broadcast(*a, *b, &g, |g, x, y| (g / y, -g * x / (y * y)));
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::Scale(x, c) => acc(&mut adj, *x, g.iter().map(|v| v * c).collect()),
                Op::MatMul(a, b) => {
                    let (sa, sb) = (self.shape(*a), self.shape(*b));
                    let (m, k, n) = (sa[0], sa[1], sb[1]);
                    let va = self.value(*a).data();
                    let vb = self.value(*b).data();
                    if self.requires_grad(*a) {
                        let bt = transpose_raw(vb, k, n);
                        acc(&mut adj, *a, matmul_raw(&g, &bt, m, n, k));
                    }
                    if self.requires_grad(*b) {
                        let at = transpose_raw(va, m, k);
                        acc(&mut adj, *b, matmul_raw(&at, &g, k, m, n));
                    }
                }
                Op::Transpose(x) => {
                    let s = node.value.shape();
                    acc(&mut adj, *x, transpose_raw(&g, s[0], s[1]));
                }
                Op::Reshape(x) => acc(&mut adj, *x, g),
                Op::Exp(x) => {
                    let y = node.value.data();
                    acc(&mut adj, *x, g.iter().zip(y).map(|(g, y)| g * y).collect());
                }
                Op::Ln(x) => {
                    let xv = self.value(*x).data();
                    acc(&mut adj, *x, g.iter().zip(xv).map(|(g, x)| g / x).collect());
                }
                Op::Tanh(x) => {
                    let y = node.value.data();
                    acc(&mut adj, *x, g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect());
                }
                Op::Relu(x) => {
                    let xv = self.value(*x).data();
                    acc(
                        &mut adj,
                        *x,
                        g.iter().zip(xv).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect(),
                    );
                }
                Op::Power(x, p) => {
                    let xv = self.value(*x).data();
                    let p = *p;
                    let grad = g
                        .iter()
                        .zip(xv)
                        .map(|(g, &x)| if p == 0.0 { 0.0 } else { g * p * x.powf(p - 1.0) })
                        .collect();
                    acc(&mut adj, *x, grad);
                }
                Op::Softmax { x, axis } => {
                    let y = node.value.data();
                    let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                    let mut gx = vec![0.0; y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |k: usize| (o * len + k) * inner + i;
                            let dot: f64 = (0..len).map(|k| g[idx(k)] * y[idx(k)]).sum();
                            for k in 0..len {
                                gx[idx(k)] = y[idx(k)] * (g[idx(k)] - dot);
                            }
                        }
                    }
                    acc(&mut adj, *x, gx);
                }
                Op::LayerNorm {
                    x,
                    axis,
                    normalized,
                    inv_std,
                } => {
                    let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                    let mut gx = vec![0.0; g.len()];
                    let n = len as f64;
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |k: usize| (o * len + k) * inner + i;
                            let mean_g: f64 = (0..len).map(|k| g[idx(k)]).sum::<f64>() / n;
                            let mean_gx: f64 =
                                (0..len).map(|k| g[idx(k)] * normalized[idx(k)]).sum::<f64>() / n;
                            let is = inv_std[o * inner + i];
                            for k in 0..len {
                                gx[idx(k)] = is * (g[idx(k)] - mean_g - normalized[idx(k)] * mean_gx);
                            }
                        }
                    }
                    acc(&mut adj, *x, gx);
                }
                Op::Embedding { table, ids } => {
                    let ts = self.shape(*table);
                    let dim = ts[1];
                    let mut gt = vec![0.0; ts[0] * dim];
                    for (r, &id) in ids.iter().enumerate() {
                        for d in 0..dim {
                            gt[id * dim + d] += g[r * dim + d];
                        }
                    }
                    acc(&mut adj, *table, gt);
                }
                Op::Concat { inputs, axis } => {
                    let (outer, total, inner) = axis_split(node.value.shape(), *axis);
                    let mut offset = 0;
                    for &v in inputs {
                        let len = self.shape(v)[*axis];
                        let mut part = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            part.extend_from_slice(&g[base..base + len * inner]);
                        }
                        acc(&mut adj, v, part);
                        offset += len;
                    }
                }
                Op::Slice { x, axis, start } => {
                    let xs = self.shape(*x);
                    let (outer, len, inner) = axis_split(xs, *axis);
                    let width = node.value.shape()[*axis];
                    let mut gx = vec![0.0; outer * len * inner];
                    for o in 0..outer {
                        let dst = (o * len + start) * inner;
                        let src = o * width * inner;
                        gx[dst..dst + width * inner].copy_from_slice(&g[src..src + width * inner]);
                    }
                    acc(&mut adj, *x, gx);
                }
                Op::Sum { x, axis } | Op::Mean { x, axis } => {
                    let xs = self.shape(*x);
                    let (outer, len, inner) = axis_split(xs, *axis);
                    let factor = if matches!(node.op, Op::Mean { .. }) { 1.0 / len as f64 } else { 1.0 };
                    let mut gx = vec![0.0; outer * len * inner];
                    for o in 0..outer {
                        for k in 0..len {
                            for i in 0..inner {
                                gx[(o * len + k) * inner + i] = g[o * inner + i] * factor;
                            }
                        }
                    }
                    acc(&mut adj, *x, gx);
                }
                Op::Dropout { x, mask } => {
                    acc(&mut adj, *x, g.iter().zip(mask).map(|(g, m)| g * m).collect());
                }
            }
        }
        Ok(())
    }

    /// Distributes an upstream gradient over two broadcast operands.
    fn split_broadcast(
        &self,
        a: Var,
        b: Var,
        g: &[f64],
        rule: impl Fn(f64, f64, f64) -> (f64, f64),
    ) -> (Vec<f64>, Vec<f64>) {
        let va = self.value(a).data();
        let vb = self.value(b).data();
        let (na, nb) = (va.len(), vb.len());
        let mut ga = vec![0.0; na];
        let mut gb = vec![0.0; nb];
        for (i, &gi) in g.iter().enumerate() {
            let (ia, ib) = (i % na, i % nb);
            let (da, db) = rule(gi, va[ia], vb[ib]);
            ga[ia] += da;
            gb[ib] += db;
        }
        (ga, gb)
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

fn transpose_raw(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}
