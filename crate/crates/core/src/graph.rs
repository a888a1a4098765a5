//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is a tape: every primitive appends a node holding its output
//! value and whatever it needs for the backward rule. Nodes can only refer to
//! earlier nodes, so construction order is a topological order and
//! [`Graph::backward`] walks it in reverse exactly once.

use crate::error::{Error, Result};
use crate::kernels::{gemm, Layout};
use crate::par;
use crate::tensor::{axis_extents, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_EPS: f64 = 1e-5;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel statistics of one batch-norm forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
struct MatMulPlan {
    batches: usize,
    m: usize,
    k: usize,
    n: usize,
    a_batched: bool,
    b_batched: bool,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, plan: MatMulPlan },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: f64 },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize },
    Sum { a: Var, axis: usize },
    Exp { a: Var },
    Tanh { a: Var },
    Relu { a: Var },
    Softmax { a: Var, axis: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    BatchNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64>, batch_stats: bool },
    Reshape { a: Var },
    Transpose { a: Var },
    Expand { a: Var, n: usize },
    Norm { a: Var },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } | Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } => {
                vec![*a, *b]
            }
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::LayerNorm { x, gain, bias, .. } | Op::BatchNorm { x, gain, bias, .. } => {
                vec![*x, *gain, *bias]
            }
            Op::Scale { a, .. }
            | Op::Slice { a, .. }
            | Op::Sum { a, .. }
            | Op::Exp { a }
            | Op::Tanh { a }
            | Op::Relu { a }
            | Op::Softmax { a, .. }
            | Op::Reshape { a }
            | Op::Transpose { a }
            | Op::Expand { a, .. }
            | Op::Norm { a } => vec![*a],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Computation graph recording one forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a leaf. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
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

    /// Gradient buffer of `v` after [`backward`](Self::backward). `None` for
    /// constants and for nodes the loss does not depend on.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        self.grad(v)
            .map(|g| Tensor::new(self.shape(v).to_vec(), g.to_vec()).expect("grad shape"))
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    // ── primitives ──────────────────────────────────────────────────────

    /// Matrix product over the last two axes. Leading axes are batch axes;
    /// either operand may be a plain matrix broadcast across the other's
    /// batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape(
                "matmul",
                format!("operands must have rank >= 2, got {sa:?} and {sb:?}"),
            ));
        }
        let (la, ma) = sa.split_at(sa.len() - 2);
        let (lb, mb) = sb.split_at(sb.len() - 2);
        let (m, k, k2, n) = (ma[0], ma[1], mb[0], mb[1]);
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner axes differ: {sa:?} (axis {}) vs {sb:?} (axis {})", sa.len() - 1, sb.len() - 2),
            ));
        }
        let (plan, lead) = if lb.is_empty() {
            let rows = la.iter().product::<usize>() * m;
            (
                MatMulPlan { batches: 1, m: rows, k, n, a_batched: false, b_batched: false },
                la.to_vec(),
            )
        } else if la.is_empty() {
            let batches = lb.iter().product();
            (
                MatMulPlan { batches, m, k, n, a_batched: false, b_batched: true },
                lb.to_vec(),
            )
        } else if la == lb {
            let batches = la.iter().product();
            (
                MatMulPlan { batches, m, k, n, a_batched: true, b_batched: true },
                la.to_vec(),
            )
        } else {
            return Err(Error::shape(
                "matmul",
                format!("batch axes differ: {la:?} vs {lb:?}"),
            ));
        };
        let mut shape = lead;
        shape.extend([m, n]);
        let mut out = vec![0.0; plan.batches * plan.m * plan.n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            let (pm, pk, pn) = (plan.m, plan.k, plan.n);
            par::for_each_chunk_mut(&mut out, pm * pn, |bi, c| {
                let ao = if plan.a_batched { bi * pm * pk } else { 0 };
                let bo = if plan.b_batched { bi * pk * pn } else { 0 };
                gemm(
                    pm,
                    pk,
                    pn,
                    &av[ao..ao + pm * pk],
                    Layout::Normal,
                    &bv[bo..bo + pk * pn],
                    Layout::Normal,
                    c,
                    false,
                );
            });
        }
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul { a, b, plan }))
    }

    fn broadcast_check(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let ok = sa == sb
            || (sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb)
            || sb == [1];
        if ok {
            Ok(())
        } else {
            Err(Error::shape(
                op,
                format!("{sb:?} does not broadcast over the leading axes of {sa:?}"),
            ))
        }
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.broadcast_check(op, a, b)?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let bn = bv.len();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bv[i % bn]))
            .collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    /// `a + b`, where `b` may broadcast over leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub { a, b }))
    }

    /// Elementwise product with the same broadcasting rule as [`add`](Self::add).
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let v = self.value(a);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|x| x * factor).collect())
            .expect("same shape");
        self.push(t, Op::Scale { a, factor })
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            let conforms = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !conforms {
                return Err(Error::shape(
                    "concat",
                    format!("{s:?} does not match {base:?} outside axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_extents(&base, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for v in inputs {
                let len = self.shape(*v)[axis] * inner;
                out.extend_from_slice(&self.value(*v).data()[o * len..(o + 1) * len]);
            }
        }
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    /// The sub-range `start..start + len` of `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape(
                "slice",
                format!("range {start}..{} invalid on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, alen, inner) = axis_extents(&shape, axis);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let off = (o * alen + start) * inner;
            out.extend_from_slice(&src[off..off + len * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        Ok(self.push(Tensor::new(oshape, out)?, Op::Slice { a, axis, start }))
    }

    /// Splits `axis` into consecutive pieces of the given sizes.
    pub fn split(&mut self, a: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let shape = self.shape(a);
        if axis >= shape.len() || sizes.iter().sum::<usize>() != shape[axis] {
            return Err(Error::shape(
                "split",
                format!("sizes {sizes:?} do not partition axis {axis} of {shape:?}"),
            ));
        }
        let mut start = 0;
        sizes
            .iter()
            .map(|&len| {
                let v = self.slice(a, axis, start, len);
                start += len;
                v
            })
            .collect()
    }

    /// Sums out `axis`. Reducing a rank-1 tensor yields shape `[1]`.
    pub fn sum(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("sum", format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = axis_extents(&shape, axis);
        let src = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let row = &src[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (acc, x) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += x;
                }
            }
        }
        let mut oshape: Vec<usize> = shape.clone();
        oshape.remove(axis);
        if oshape.is_empty() {
            oshape.push(1);
        }
        Ok(self.push(Tensor::new(oshape, out)?, Op::Sum { a, axis }))
    }

    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        let len = *self
            .shape(a)
            .get(axis)
            .ok_or_else(|| Error::shape("mean", format!("axis {axis} out of range")))?;
        let s = self.sum(a, axis)?;
        Ok(self.scale(s, 1.0 / len as f64))
    }

    /// Sum of every element, shape `[1]`.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        let flat = self.reshape(a, &[n])?;
        self.sum(flat, 0)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let v = self.value(a);
        Tensor::new(v.shape().to_vec(), v.data().iter().map(|&x| f(x)).collect())
            .expect("same shape")
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.unary(a, f64::exp);
        self.push(t, Op::Exp { a })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.unary(a, f64::tanh);
        self.push(t, Op::Tanh { a })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.unary(a, |x| if x > 0.0 { x } else { 0.0 });
        self.push(t, Op::Relu { a })
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = axis_extents(&shape, axis);
        let src = self.value(a).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |l: usize| (o * len + l) * inner + i;
                let max = (0..len).map(|l| src[idx(l)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for l in 0..len {
                    let e = (src[idx(l)] - max).exp();
                    out[idx(l)] = e;
                    total += e;
                }
                for l in 0..len {
                    out[idx(l)] /= total;
                }
            }
        }
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { a, axis }))
    }

    /// Normalizes over the last axis with learnable `gain` and `bias`
    /// (population variance, epsilon [`LAYER_NORM_EPS`]).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().expect("rank >= 1");
        for (name, p) in [("gain", gain), ("bias", bias)] {
            if self.shape(p) != [n] {
                return Err(Error::shape(
                    "layer_norm",
                    format!("{name} shape {:?} must be [{n}] to match last axis of {shape:?}", self.shape(p)),
                ));
            }
        }
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = src.len() / n;
        let mut xhat = vec![0.0; src.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm { x, gain, bias, xhat, rstd },
        ))
    }

    /// Batch normalization over every axis but the last (the channel axis).
    ///
    /// With `running = None` the batch's own statistics are used and returned;
    /// with `Some((mean, var))` those fixed statistics are used instead.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        running: Option<(&[f64], &[f64])>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().expect("rank >= 1");
        for (name, p) in [("gain", gain), ("bias", bias)] {
            if self.shape(p) != [c] {
                return Err(Error::shape(
                    "batch_norm",
                    format!("{name} shape {:?} must be [{c}] to match last axis of {shape:?}", self.shape(p)),
                ));
            }
        }
        if let Some((m, v)) = running {
            if m.len() != c || v.len() != c {
                return Err(Error::shape("batch_norm", format!("running statistics must have {c} channels")));
            }
        }
        let src = self.value(x).data();
        let rows = src.len() / c;
        let (mean, var, stats) = match running {
            Some((m, v)) => (m.to_vec(), v.to_vec(), None),
            None => {
                let mut mean = vec![0.0; c];
                for r in 0..rows {
                    for (acc, v) in mean.iter_mut().zip(&src[r * c..(r + 1) * c]) {
                        *acc += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= rows as f64);
                let mut var = vec![0.0; c];
                for r in 0..rows {
                    for j in 0..c {
                        let d = src[r * c + j] - mean[j];
                        var[j] += d * d;
                    }
                }
                var.iter_mut().for_each(|v| *v /= rows as f64);
                let stats = BatchStats { mean: mean.clone(), var: var.clone() };
                (mean, var, Some(stats))
            }
        };
        let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + BATCH_NORM_EPS).sqrt()).collect();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; src.len()];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            for j in 0..c {
                let h = (src[r * c + j] - mean[j]) * rstd[j];
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + b[j];
            }
        }
        let batch_stats = stats.is_some();
        let v = self.push(
            Tensor::new(shape, out)?,
            Op::BatchNorm { x, gain, bias, xhat, rstd, batch_stats },
        );
        Ok((v, stats))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape).map_err(|_| {
            Error::shape("reshape", format!("cannot view {:?} as {shape:?}", self.shape(a)))
        })?;
        Ok(self.push(t, Op::Reshape { a }))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape("transpose", format!("rank {} < 2", shape.len())));
        }
        let (r, c) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let src = self.value(a).data();
        let mut out = vec![0.0; src.len()];
        for (blk_out, blk_in) in out.chunks_mut(r * c).zip(src.chunks(r * c)) {
            for i in 0..r {
                for j in 0..c {
                    blk_out[j * r + i] = blk_in[i * c + j];
                }
            }
        }
        let mut oshape = shape;
        let len = oshape.len();
        oshape.swap(len - 1, len - 2);
        Ok(self.push(Tensor::new(oshape, out)?, Op::Transpose { a }))
    }

    /// Repeats `a` along a new trailing axis of length `n`.
    pub fn expand(&mut self, a: Var, n: usize) -> Result<Var> {
        if n == 0 {
            return Err(Error::shape("expand", "new axis must be non-empty"));
        }
        let v = self.value(a);
        let mut shape = v.shape().to_vec();
        shape.push(n);
        let data = v
            .data()
            .iter()
            .flat_map(|&x| std::iter::repeat_n(x, n))
            .collect();
        Ok(self.push(Tensor::new(shape, data)?, Op::Expand { a, n }))
    }

    /// Euclidean norm over the last axis, which is removed.
    pub fn norm(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let n = *v.shape().last().expect("rank >= 1");
        let data: Vec<f64> = v
            .data()
            .chunks(n)
            .map(|row| row.iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        let mut shape = v.shape()[..v.rank() - 1].to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        let t = Tensor::new(shape, data).expect("shape");
        self.push(t, Op::Norm { a })
    }

    /// `x · weight + bias` over the last axis of `x`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, weight)?;
        match bias {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Backpropagates from the scalar `loss`, filling gradient buffers on
    /// every node that requires a gradient and influences the loss.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Contract(
                "backward already ran on this graph; build a new graph per forward pass".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "loss must be a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let (before, after) = grads.split_at_mut(i);
            let Some(g) = after[0].as_deref() else { continue };
            let node = &self.nodes[i];
            self.backprop_node(node, g, before);
        }
        self.grads = grads;
        self.backward_done = true;
        Ok(())
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, plan } => {
                let p = *plan;
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let (m, k, n) = (p.m, p.k, p.n);
                if let Some(da) = self.slot(grads, *a) {
                    if p.a_batched {
                        par::for_each_chunk_mut(da, m * k, |bi, da_b| {
                            let bo = if p.b_batched { bi * k * n } else { 0 };
                            gemm(m, n, k, &g[bi * m * n..(bi + 1) * m * n], Layout::Normal,
                                 &bv[bo..bo + k * n], Layout::Transposed, da_b, true);
                        });
                    } else {
                        for bi in 0..p.batches {
                            let bo = if p.b_batched { bi * k * n } else { 0 };
                            gemm(m, n, k, &g[bi * m * n..(bi + 1) * m * n], Layout::Normal,
                                 &bv[bo..bo + k * n], Layout::Transposed, da, true);
                        }
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    if p.b_batched {
                        par::for_each_chunk_mut(db, k * n, |bi, db_b| {
                            let ao = if p.a_batched { bi * m * k } else { 0 };
                            gemm(k, m, n, &av[ao..ao + m * k], Layout::Transposed,
                                 &g[bi * m * n..(bi + 1) * m * n], Layout::Normal, db_b, true);
                        });
                    } else {
                        for bi in 0..p.batches {
                            let ao = if p.a_batched { bi * m * k } else { 0 };
                            gemm(k, m, n, &av[ao..ao + m * k], Layout::Transposed,
                                 &g[bi * m * n..(bi + 1) * m * n], Layout::Normal, db, true);
                        }
                    }
                }
            }
            Op::Add { a, b } | Op::Sub { a, b } => {
                let sign = if matches!(node.op, Op::Sub { .. }) { -1.0 } else { 1.0 };
                if let Some(da) = self.slot(grads, *a) {
                    da.iter_mut().zip(g).for_each(|(d, x)| *d += x);
                }
                if let Some(db) = self.slot(grads, *b) {
                    let bn = db.len();
                    for (i, x) in g.iter().enumerate() {
                        db[i % bn] += sign * x;
                    }
                }
            }
            Op::Mul { a, b } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let bn = bv.len();
                if let Some(da) = self.slot(grads, *a) {
                    for (i, d) in da.iter_mut().enumerate() {
                        *d += g[i] * bv[i % bn];
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    for (i, x) in g.iter().enumerate() {
                        db[i % bn] += x * av[i];
                    }
                }
            }
            Op::Scale { a, factor } => {
                if let Some(da) = self.slot(grads, *a) {
                    da.iter_mut().zip(g).for_each(|(d, x)| *d += factor * x);
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = axis_extents(node.value.shape(), *axis);
                let mut offset = 0;
                for v in inputs {
                    let len = self.shape(*v)[*axis];
                    if let Some(dv) = self.slot(grads, *v) {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            let dst = &mut dv[o * len * inner..(o + 1) * len * inner];
                            dst.iter_mut().zip(src).for_each(|(d, x)| *d += x);
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice { a, axis, start } => {
                let full = self.shape(*a).to_vec();
                let (outer, alen, inner) = axis_extents(&full, *axis);
                let len = node.value.shape()[*axis];
                if let Some(da) = self.slot(grads, *a) {
                    for o in 0..outer {
                        let dst = &mut da[(o * alen + start) * inner..(o * alen + start + len) * inner];
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        dst.iter_mut().zip(src).for_each(|(d, x)| *d += x);
                    }
                }
            }
            Op::Sum { a, axis } => {
                let (outer, len, inner) = axis_extents(self.shape(*a), *axis);
                if let Some(da) = self.slot(grads, *a) {
                    for o in 0..outer {
                        for l in 0..len {
                            let dst = &mut da[(o * len + l) * inner..(o * len + l + 1) * inner];
                            dst.iter_mut()
                                .zip(&g[o * inner..(o + 1) * inner])
                                .for_each(|(d, x)| *d += x);
                        }
                    }
                }
            }
            Op::Exp { a } => {
                if let Some(da) = self.slot(grads, *a) {
                    for i in 0..da.len() {
                        da[i] += g[i] * out[i];
                    }
                }
            }
            Op::Tanh { a } => {
                if let Some(da) = self.slot(grads, *a) {
                    for i in 0..da.len() {
                        da[i] += g[i] * (1.0 - out[i] * out[i]);
                    }
                }
            }
            Op::Relu { a } => {
                let av = self.value(*a).data();
                if let Some(da) = self.slot(grads, *a) {
                    for i in 0..da.len() {
                        if av[i] > 0.0 {
                            da[i] += g[i];
                        }
                    }
                }
            }
            Op::Softmax { a, axis } => {
                let (outer, len, inner) = axis_extents(node.value.shape(), *axis);
                if let Some(da) = self.slot(grads, *a) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |l: usize| (o * len + l) * inner + i;
                            let dot: f64 = (0..len).map(|l| g[idx(l)] * out[idx(l)]).sum();
                            for l in 0..len {
                                da[idx(l)] += out[idx(l)] * (g[idx(l)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let n = self.shape(*gain)[0];
                let rows = xhat.len() / n;
                let gv = self.value(*gain).data();
                if let Some(dx) = self.slot(grads, *x) {
                    for r in 0..rows {
                        let gr = &g[r * n..(r + 1) * n];
                        let hr = &xhat[r * n..(r + 1) * n];
                        let mut sum_d = 0.0;
                        let mut sum_dh = 0.0;
                        for j in 0..n {
                            let d = gr[j] * gv[j];
                            sum_d += d;
                            sum_dh += d * hr[j];
                        }
                        let (md, mdh) = (sum_d / n as f64, sum_dh / n as f64);
                        for j in 0..n {
                            dx[r * n + j] += rstd[r] * (gr[j] * gv[j] - md - hr[j] * mdh);
                        }
                    }
                }
                self.affine_param_grads(grads, *gain, *bias, g, xhat, n);
            }
            Op::BatchNorm { x, gain, bias, xhat, rstd, batch_stats } => {
                let c = self.shape(*gain)[0];
                let rows = xhat.len() / c;
                let gv = self.value(*gain).data();
                if let Some(dx) = self.slot(grads, *x) {
                    if *batch_stats {
                        let mut sum_d = vec![0.0; c];
                        let mut sum_dh = vec![0.0; c];
                        for r in 0..rows {
                            for j in 0..c {
                                let d = g[r * c + j] * gv[j];
                                sum_d[j] += d;
                                sum_dh[j] += d * xhat[r * c + j];
                            }
                        }
                        let nr = rows as f64;
                        for r in 0..rows {
                            for j in 0..c {
                                let d = g[r * c + j] * gv[j];
                                dx[r * c + j] += rstd[j] * (d - sum_d[j] / nr - xhat[r * c + j] * sum_dh[j] / nr);
                            }
                        }
                    } else {
                        for r in 0..rows {
                            for j in 0..c {
                                dx[r * c + j] += g[r * c + j] * gv[j] * rstd[j];
                            }
                        }
                    }
                }
                self.affine_param_grads(grads, *gain, *bias, g, xhat, c);
            }
            Op::Reshape { a } => {
                if let Some(da) = self.slot(grads, *a) {
                    da.iter_mut().zip(g).for_each(|(d, x)| *d += x);
                }
            }
            Op::Transpose { a } => {
                let s = self.shape(*a);
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                if let Some(da) = self.slot(grads, *a) {
                    for (blk_d, blk_g) in da.chunks_mut(r * c).zip(g.chunks(r * c)) {
                        for i in 0..r {
                            for j in 0..c {
                                blk_d[i * c + j] += blk_g[j * r + i];
                            }
                        }
                    }
                }
            }
            Op::Expand { a, n } => {
                if let Some(da) = self.slot(grads, *a) {
                    for (d, row) in da.iter_mut().zip(g.chunks(*n)) {
                        *d += row.iter().sum::<f64>();
                    }
                }
            }
            Op::Norm { a } => {
                let av = self.value(*a).data();
                let n = *self.shape(*a).last().expect("rank");
                if let Some(da) = self.slot(grads, *a) {
                    for (r, (&nrm, &gr)) in out.iter().zip(g).enumerate() {
                        if nrm > 0.0 {
                            for j in 0..n {
                                da[r * n + j] += gr * av[r * n + j] / nrm;
                            }
                        }
                    }
                }
            }
        }
    }

    fn affine_param_grads(
        &self,
        grads: &mut [Option<Vec<f64>>],
        gain: Var,
        bias: Var,
        g: &[f64],
        xhat: &[f64],
        n: usize,
    ) {
        if let Some(dg) = self.slot(grads, gain) {
            for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                for j in 0..n {
                    dg[j] += gr[j] * hr[j];
                }
            }
        }
        if let Some(db) = self.slot(grads, bias) {
            for gr in g.chunks(n) {
                for j in 0..n {
                    db[j] += gr[j];
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[5.0, 5.0, 5.0]));
        let y = g.softmax(x, 0).unwrap();
        for v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn identity_matmul_is_noop() {
        let mut g = Graph::new();
        let x_data: Vec<f64> = (0..12).map(|i| i as f64 * 0.25 - 1.0).collect();
        let i3 = g.constant(Tensor::eye(3));
        let x = g.constant(t(&[3, 4], &x_data));
        let y = g.matmul(i3, x).unwrap();
        assert_eq!(g.value(y).data(), &x_data[..]);
    }

    #[test]
    fn layer_norm_hand_values() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let gain = g.constant(Tensor::ones(&[3]));
        let bias = g.constant(Tensor::zeros(&[3]));
        let y = g.layer_norm(x, gain, bias).unwrap();
        // (x - 2) / sqrt(2/3 + 1e-5)
        let expect = [-1.2247, 0.0, 1.2247];
        for (v, e) in g.value(y).data().iter().zip(expect) {
            assert!((v - e).abs() < 1e-3, "{v} vs {e}");
        }
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.param(t(&[2, 2], &[1.0, -2.0, 3.0, 0.5]));
        let s = g.sum_all(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn grad_of_square() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum_all(sq).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn grad_of_softmax_sum_vanishes() {
        let mut g = Graph::new();
        let x = g.param(t(&[4], &[0.3, -1.7, 2.2, 0.0]));
        let y = g.softmax(x, 0).unwrap();
        let s = g.sum_all(y).unwrap();
        g.backward(s).unwrap();
        for d in g.grad(x).unwrap() {
            assert!(d.abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_accumulate_over_consumers() {
        let data = [0.5, -1.0, 2.0];
        let mut g1 = Graph::new();
        let x1 = g1.param(t(&[3], &data));
        let s1 = g1.sum_all(x1).unwrap();
        g1.backward(s1).unwrap();

        let mut g2 = Graph::new();
        let x2 = g2.param(t(&[3], &data));
        let a = g2.sum_all(x2).unwrap();
        let b = g2.sum_all(x2).unwrap();
        let s2 = g2.add(a, b).unwrap();
        g2.backward(s2).unwrap();
        for (one, two) in g1.grad(x1).unwrap().iter().zip(g2.grad(x2).unwrap()) {
            assert_eq!(2.0 * one, *two);
        }
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(t(&[2], &[1.0, 2.0]));
        let x = g.param(t(&[2], &[3.0, 4.0]));
        let y = g.mul(c, x).unwrap();
        let s = g.sum_all(y).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(x).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn backward_contract_errors() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let y = g.exp(x);
        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
        let s = g.sum_all(y).unwrap();
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::Contract(_))));
    }

    #[test]
    fn shape_errors_name_the_primitive() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        match g.matmul(a, b) {
            Err(Error::Shape { op, .. }) => assert_eq!(op, "matmul"),
            other => panic!("expected shape error, got {other:?}"),
        }
        let c = g.constant(Tensor::zeros(&[2]));
        assert!(matches!(g.add(a, c), Err(Error::Shape { op: "add", .. })));
        assert!(matches!(g.softmax(a, 2), Err(Error::Shape { op: "softmax", .. })));
    }

    #[test]
    fn broadcasting_matmul_over_batches() {
        let mut g = Graph::new();
        let w = g.constant(t(&[2, 2], &[0.0, 1.0, 1.0, 0.0]));
        let x = g.constant(t(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = g.matmul(x, w).unwrap();
        assert_eq!(g.shape(y), &[2, 1, 2]);
        assert_eq!(g.value(y).data(), &[2.0, 1.0, 4.0, 3.0]);
        // Left operand broadcast: each batch column vector is swapped.
        let cols = g.value(x).clone().reshape(&[2, 2, 1]).unwrap();
        let cols = g.constant(cols);
        let z = g.matmul(w, cols).unwrap();
        assert_eq!(g.shape(z), &[2, 2, 1]);
        assert_eq!(g.value(z).data(), &[2.0, 1.0, 4.0, 3.0]);
    }
}
