//! Reverse-mode gradient tape.
//!
//! Every differentiable operation is a method on [`Tape`] that computes its
//! value eagerly and appends a node. [`Tape::backward`] consumes the tape and
//! replays the nodes in exact reverse order, accumulating gradients for every
//! node that requires them.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{shape_err, Error, Result};
use crate::geometry::ConvGeometry;
use crate::kernels;
use crate::tensor::{axis_split, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a tensor recorded on a particular tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Relu(usize),
    Gelu(usize),
    Exp(usize),
    Log(usize),
    Sum(usize),
    Mean(usize),
    SumAxis { x: usize },
    Softmax { x: usize, axis: usize },
    Reshape(usize),
    Transpose(usize),
    Narrow { x: usize, axis: usize, start: usize },
    Concat { parts: Vec<usize>, axis: usize },
    Broadcast { x: usize, map: Vec<usize> },
    Matmul(usize, usize),
    Conv2d { x: usize, k: usize, g: ConvGeometry },
    Depthwise { x: usize, k: usize, g: ConvGeometry },
    LayerNorm { x: usize, gamma: usize, beta: usize, rstd: Vec<f64> },
    Upsample(usize),
    Gather { x: usize, indices: Vec<usize> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Relu(..) => "relu",
            Op::Gelu(..) => "gelu",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumAxis { .. } => "sum_axis",
            Op::Softmax { .. } => "softmax",
            Op::Reshape(..) => "reshape",
            Op::Transpose(..) => "transpose",
            Op::Narrow { .. } => "narrow",
            Op::Concat { .. } => "concat",
            Op::Broadcast { .. } => "broadcast",
            Op::Matmul(..) => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::Depthwise { .. } => "depthwise_conv2d",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Upsample(..) => "bilinear_upsample",
            Op::Gather { .. } => "gather",
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::Matmul(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Relu(x)
            | Op::Gelu(x)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Reshape(x)
            | Op::Transpose(x)
            | Op::Upsample(x) => vec![*x],
            Op::SumAxis { x, .. }
            | Op::Softmax { x, .. }
            | Op::Narrow { x, .. }
            | Op::Broadcast { x, .. }
            | Op::Gather { x, .. } => vec![*x],
            Op::Concat { parts, .. } => parts.clone(),
            Op::Conv2d { x, k, .. } | Op::Depthwise { x, k, .. } => vec![*x, *k],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// An ordered record of executed operations.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Names of the recorded operations in execution order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::ForeignVar);
        }
        Ok(v.idx)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable from another tape");
        &self.nodes[v.idx].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.value(v);
        self.nodes[v.idx].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        let name = op.name();
        let value = value.check_finite(name)?;
        let requires_grad = op.inputs().iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        })
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        let value = value.check_finite("leaf")?;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Ok(Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        })
    }

    /// Leaf that requires a gradient.
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    fn same_shape(&self, op: &'static str, a: usize, b: usize) -> Result<()> {
        let (sa, sb) = (self.nodes[a].value.shape(), self.nodes[b].value.shape());
        if sa != sb {
            return Err(shape_err(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        self.same_shape(op.name(), ia, ib)?;
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push(value, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a.idx, b.idx), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a.idx, b.idx), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a.idx, b.idx), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Div(a.idx, b.idx), |x, y| x / y)
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let i = self.idx(x)?;
        let value = self.nodes[i].value.map(f);
        self.push(value, op)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.map(x, Op::Scale(x.idx, s), |v| v * s)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        self.map(x, Op::AddScalar(x.idx), |v| v + s)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Relu(x.idx), |v| v.max(0.0))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Gelu(x.idx), kernels::gelu)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Exp(x.idx), f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Log(x.idx), f64::ln)
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let i = self.idx(x)?;
        let value = Tensor::scalar(self.nodes[i].value.sum());
        self.push(value, Op::Sum(i))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let i = self.idx(x)?;
        let v = &self.nodes[i].value;
        let value = Tensor::scalar(v.sum() / v.len() as f64);
        self.push(value, Op::Mean(i))
    }

    /// Sum along `axis`, keeping it with extent 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let i = self.idx(x)?;
        let v = &self.nodes[i].value;
        if axis >= v.rank() {
            return Err(shape_err("sum_axis", format!("axis {axis} for shape {:?}", v.shape())));
        }
        let (outer, n, inner) = axis_split(v.shape(), axis);
        let d = v.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                for k in 0..inner {
                    out[o * inner + k] += d[(o * n + j) * inner + k];
                }
            }
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = 1;
        let value = Tensor::new(shape, out)?;
        self.push(value, Op::SumAxis { x: i })
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let i = self.idx(x)?;
        let value = kernels::softmax(&self.nodes[i].value, axis)?;
        self.push(value, Op::Softmax { x: i, axis })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let i = self.idx(x)?;
        let value = self.nodes[i].value.clone().reshape(shape)?;
        self.push(value, Op::Reshape(i))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let i = self.idx(x)?;
        self.nodes[i].value.expect_rank("transpose", 2)?;
        let value = kernels::transpose(&self.nodes[i].value);
        self.push(value, Op::Transpose(i))
    }

    /// Slice `len` entries along `axis` starting at `start`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let i = self.idx(x)?;
        let v = &self.nodes[i].value;
        if axis >= v.rank() || len == 0 || start + len > v.shape()[axis] {
            return Err(shape_err(
                "narrow",
                format!("range {start}..{} on axis {axis} of {:?}", start + len, v.shape()),
            ));
        }
        let (outer, n, inner) = axis_split(v.shape(), axis);
        let d = v.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = len;
        let value = Tensor::new(shape, out)?;
        self.push(value, Op::Narrow { x: i, axis, start })
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(shape_err("concat", "no inputs"));
        }
        let idxs = parts.iter().map(|&p| self.idx(p)).collect::<Result<Vec<_>>>()?;
        let first = self.nodes[idxs[0]].value.shape().to_vec();
        if axis >= first.len() {
            return Err(shape_err("concat", format!("axis {axis} for shape {first:?}")));
        }
        let mut total = 0;
        for &i in &idxs {
            let s = self.nodes[i].value.shape();
            let compatible = s.len() == first.len()
                && s.iter().enumerate().all(|(ax, &e)| ax == axis || e == first[ax]);
            if !compatible {
                return Err(shape_err("concat", format!("{s:?} vs {first:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &i in &idxs {
                let v = &self.nodes[i].value;
                let n = v.shape()[axis];
                out.extend_from_slice(&v.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        self.push(value, Op::Concat { parts: idxs, axis })
    }

    /// Repeats extent-1 axes of `x` to reach `shape` (same rank).
    pub fn broadcast(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let i = self.idx(x)?;
        let v = &self.nodes[i].value;
        let map = kernels::broadcast_index_map(v.shape(), shape)?;
        let d = v.data();
        let value = Tensor::new(shape.to_vec(), map.iter().map(|&s| d[s]).collect())?;
        self.push(value, Op::Broadcast { x: i, map })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let value = kernels::matmul(&self.nodes[ia].value, &self.nodes[ib].value)?;
        self.push(value, Op::Matmul(ia, ib))
    }

    pub fn conv2d(&mut self, x: Var, kernel: Var, g: &ConvGeometry) -> Result<Var> {
        let (ix, ik) = (self.idx(x)?, self.idx(kernel)?);
        let value = kernels::conv2d(&self.nodes[ix].value, &self.nodes[ik].value, g)?;
        self.push(value, Op::Conv2d { x: ix, k: ik, g: *g })
    }

    pub fn depthwise_conv2d(&mut self, x: Var, kernel: Var, g: &ConvGeometry) -> Result<Var> {
        let (ix, ik) = (self.idx(x)?, self.idx(kernel)?);
        let value = kernels::depthwise_conv2d(&self.nodes[ix].value, &self.nodes[ik].value, g)?;
        self.push(value, Op::Depthwise { x: ix, k: ik, g: *g })
    }

    /// Per-channel dilated convolution followed by 1x1 channel mixing with
    /// `pw: [C_out, C]`.
    pub fn depthwise_separable_conv(
        &mut self,
        x: Var,
        dw: Var,
        pw: Var,
        g: &ConvGeometry,
    ) -> Result<Var> {
        let pw_shape = self.value(pw).shape().to_vec();
        if pw_shape.len() != 2 || pw_shape[1] != self.value(dw).shape()[0] {
            return Err(shape_err(
                "depthwise_separable_conv",
                format!(
                    "pointwise kernel {pw_shape:?} does not match depthwise kernel {:?}",
                    self.value(dw).shape()
                ),
            ));
        }
        let y = self.depthwise_conv2d(x, dw, g)?;
        let s = self.value(y).shape().to_vec();
        let flat = self.reshape(y, &[s[0], s[1] * s[2]])?;
        let mixed = self.matmul(pw, flat)?;
        self.reshape(mixed, &[pw_shape[0], s[1], s[2]])
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (ix, ig, ib) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let (value, rstd) = kernels::layer_norm(
            &self.nodes[ix].value,
            &self.nodes[ig].value,
            &self.nodes[ib].value,
        )?;
        self.push(
            value,
            Op::LayerNorm {
                x: ix,
                gamma: ig,
                beta: ib,
                rstd,
            },
        )
    }

    /// Bilinear resize of `[C, H, W]` (align-corners-false).
    pub fn bilinear_upsample(&mut self, x: Var, h_out: usize, w_out: usize) -> Result<Var> {
        let i = self.idx(x)?;
        let value = kernels::bilinear_upsample(&self.nodes[i].value, h_out, w_out)?;
        self.push(value, Op::Upsample(i))
    }

    /// Picks flat elements of `x`, producing a rank-1 tensor.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let i = self.idx(x)?;
        let v = &self.nodes[i].value;
        if indices.is_empty() || indices.iter().any(|&j| j >= v.len()) {
            return Err(shape_err("gather", format!("indices out of range for {:?}", v.shape())));
        }
        let value = Tensor::new(
            vec![indices.len()],
            indices.iter().map(|&j| v.data()[j]).collect(),
        )?;
        self.push(
            value,
            Op::Gather {
                x: i,
                indices: indices.to_vec(),
            },
        )
    }

    /// Adds a bias along the last axis of a rank-2 tensor.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let b = self.reshape(bias, &[1, shape[shape.len() - 1]])?;
        let b = self.broadcast(b, &shape)?;
        self.add(x, b)
    }

    /// Consumes the tape and returns gradients of the scalar `loss`.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let li = self.idx(loss)?;
        let loss_value = &self.nodes[li].value;
        if !loss_value.is_scalar() {
            return Err(Error::NotScalar(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut visited = Vec::new();
        if self.nodes[li].requires_grad {
            grads[li] = Some(Tensor::full(loss_value.shape(), 1.0));
        }
        for i in (0..=li).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            visited.push(i);
            for (input, gi) in self.input_grads(i, &g) {
                if !self.nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(gi.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(gi),
                }
            }
        }
        for (node, slot) in self.nodes.iter().zip(grads.iter_mut()) {
            if matches!(node.op, Op::Leaf) && node.requires_grad && slot.is_none() {
                *slot = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients {
            tape: self.id,
            grads,
            visited,
        })
    }

    fn input_grads(&self, i: usize, g: &Tensor) -> Vec<(usize, Tensor)> {
        let node = &self.nodes[i];
        let val = |j: usize| &self.nodes[j].value;
        let needs = |j: usize| self.nodes[j].requires_grad;
        let zip = |a: &Tensor, b: &Tensor, f: &dyn Fn(f64, f64) -> f64| {
            Tensor::new(
                a.shape().to_vec(),
                a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
            )
            .expect("shape")
        };
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
            Op::Mul(a, b) => vec![
                (*a, zip(g, val(*b), &|gv, bv| gv * bv)),
                (*b, zip(g, val(*a), &|gv, av| gv * av)),
            ],
            Op::Div(a, b) => {
                let ga = zip(g, val(*b), &|gv, bv| gv / bv);
                let gb = zip(&zip(g, val(*a), &|gv, av| gv * av), val(*b), &|t, bv| {
                    -t / (bv * bv)
                });
                vec![(*a, ga), (*b, gb)]
            }
            Op::Scale(x, s) => vec![(*x, g.map(|v| v * s))],
            Op::AddScalar(x) => vec![(*x, g.clone())],
            Op::Relu(x) => vec![(*x, zip(g, val(*x), &|gv, xv| if xv > 0.0 { gv } else { 0.0 }))],
            Op::Gelu(x) => vec![(*x, zip(g, val(*x), &|gv, xv| gv * kernels::gelu_grad(xv)))],
            Op::Exp(x) => vec![(*x, zip(g, &node.value, &|gv, yv| gv * yv))],
            Op::Log(x) => vec![(*x, zip(g, val(*x), &|gv, xv| gv / xv))],
            Op::Sum(x) => vec![(*x, Tensor::full(val(*x).shape(), g.item()))],
            Op::Mean(x) => {
                let n = val(*x).len() as f64;
                vec![(*x, Tensor::full(val(*x).shape(), g.item() / n))]
            }
            Op::SumAxis { x, .. } => {
                let map = kernels::broadcast_index_map(g.shape(), val(*x).shape()).expect("shape");
                let gd = g.data();
                let data = map.iter().map(|&s| gd[s]).collect();
                vec![(*x, Tensor::new(val(*x).shape().to_vec(), data).expect("shape"))]
            }
            Op::Softmax { x, axis } => vec![(*x, kernels::softmax_backward(&node.value, g, *axis))],
            Op::Reshape(x) => vec![(*x, g.clone().reshape(val(*x).shape()).expect("shape"))],
            Op::Transpose(x) => vec![(*x, kernels::transpose(g))],
            Op::Narrow { x, axis, start } => {
                let shape = val(*x).shape();
                let (outer, n, inner) = axis_split(shape, *axis);
                let len = g.shape()[*axis];
                let mut gx = vec![0.0; val(*x).len()];
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    let src = o * len * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                vec![(*x, Tensor::new(shape.to_vec(), gx).expect("shape"))]
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = axis_split(g.shape(), *axis);
                let mut offset = 0;
                let mut out = Vec::with_capacity(parts.len());
                for &p in parts {
                    let shape = val(p).shape();
                    let n = shape[*axis];
                    let mut gp = Vec::with_capacity(val(p).len());
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        gp.extend_from_slice(&g.data()[base..base + n * inner]);
                    }
                    offset += n;
                    out.push((p, Tensor::new(shape.to_vec(), gp).expect("shape")));
                }
                out
            }
            Op::Broadcast { x, map } => {
                let mut gx = vec![0.0; val(*x).len()];
                for (&src, &gv) in map.iter().zip(g.data()) {
                    gx[src] += gv;
                }
                vec![(*x, Tensor::new(val(*x).shape().to_vec(), gx).expect("shape"))]
            }
            Op::Matmul(a, b) => {
                let mut out = Vec::with_capacity(2);
                if needs(*a) {
                    let bt = kernels::transpose(val(*b));
                    out.push((*a, kernels::matmul(g, &bt).expect("shape")));
                }
                if needs(*b) {
                    let at = kernels::transpose(val(*a));
                    out.push((*b, kernels::matmul(&at, g).expect("shape")));
                }
                out
            }
            Op::Conv2d { x, k, g: geom } => {
                let (gx, gk) = kernels::conv2d_backward(val(*x), val(*k), geom, g);
                vec![(*x, gx), (*k, gk)]
            }
            Op::Depthwise { x, k, g: geom } => {
                let (gx, gk) = kernels::depthwise_conv2d_backward(val(*x), val(*k), geom, g);
                vec![(*x, gx), (*k, gk)]
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                rstd,
            } => {
                let (gx, gg, gb) = kernels::layer_norm_backward(val(*x), val(*gamma), rstd, g);
                vec![(*x, gx), (*gamma, gg), (*beta, gb)]
            }
            Op::Upsample(x) => {
                vec![(*x, kernels::bilinear_upsample_backward(val(*x).shape(), g))]
            }
            Op::Gather { x, indices } => {
                let mut gx = vec![0.0; val(*x).len()];
                for (&j, &gv) in indices.iter().zip(g.data()) {
                    gx[j] += gv;
                }
                vec![(*x, Tensor::new(val(*x).shape().to_vec(), gx).expect("shape"))]
            }
        }
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
    visited: Vec<usize>,
}

impl Gradients {
    /// Gradient for `v`. Every leaf that requires a gradient has one (zeros
    /// when the loss does not depend on it).
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.idx).and_then(Option::as_ref)
    }

    /// Gradient for `v`, or zeros of `shape` when the loss does not reach it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    /// Tape positions of the non-leaf nodes visited, in visiting order.
    pub fn visit_order(&self) -> &[usize] {
        &self.visited
    }
}
