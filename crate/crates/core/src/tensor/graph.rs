//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every primitive applied during a forward pass. Nodes
//! are appended in evaluation order, so walking the tape backwards visits
//! each node after all of its consumers. Parameters enter the tape as
//! leaves tagged with their [`ParamId`]; [`Graph::backward`] adds the leaf
//! gradients into the owning [`ParamStore`], accumulating across calls until
//! the caller zeroes them.

use std::str::FromStr;

use super::{ParamId, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

/// Target id excluded from cross-entropy means.
pub const IGNORE_INDEX: usize = usize::MAX;

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    MatMul,
    Add,
    Mul,
    EmbeddingLookup { ids: Vec<usize>, shape: Vec<usize> },
    LayerNorm { eps: f64 },
    Softmax,
    Gelu,
    Reshape(Vec<usize>),
    Transpose(usize, usize),
    Concat(usize),
    Slice { axis: usize, start: usize, end: usize },
    Scale(f64),
    Sum,
    CrossEntropy { targets: Vec<usize>, ignore: usize },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::MatMul => "matmul",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::EmbeddingLookup { .. } => "embedding_lookup",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax => "softmax",
            Op::Gelu => "gelu",
            Op::Reshape(_) => "reshape",
            Op::Transpose(..) => "transpose",
            Op::Concat(_) => "concat",
            Op::Slice { .. } => "slice",
            Op::Scale(_) => "scale",
            Op::Sum => "sum",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }

    /// Builds an op from its string id plus attributes.
    pub fn from_name(op_id: &str, attrs: &Attrs) -> Result<Op> {
        let kind = OpKind::from_str(op_id)?;
        let need = |what: &str| Error::Input(format!("op `{op_id}` requires attribute `{what}`"));
        Ok(match kind {
            OpKind::MatMul => Op::MatMul,
            OpKind::Add => Op::Add,
            OpKind::Mul => Op::Mul,
            OpKind::EmbeddingLookup => Op::EmbeddingLookup {
                ids: attrs.ids.clone().ok_or_else(|| need("ids"))?,
                shape: attrs
                    .shape
                    .clone()
                    .unwrap_or_else(|| vec![attrs.ids.as_ref().map_or(0, Vec::len)]),
            },
            OpKind::LayerNorm => Op::LayerNorm {
                eps: attrs.eps.unwrap_or(LAYER_NORM_EPS),
            },
            OpKind::Softmax => Op::Softmax,
            OpKind::Gelu => Op::Gelu,
            OpKind::Reshape => Op::Reshape(attrs.shape.clone().ok_or_else(|| need("shape"))?),
            OpKind::Transpose => {
                let (a, b) = attrs.axes.ok_or_else(|| need("axes"))?;
                Op::Transpose(a, b)
            }
            OpKind::Concat => Op::Concat(attrs.axis.ok_or_else(|| need("axis"))?),
            OpKind::Slice => Op::Slice {
                axis: attrs.axis.ok_or_else(|| need("axis"))?,
                start: attrs.start.ok_or_else(|| need("start"))?,
                end: attrs.end.ok_or_else(|| need("end"))?,
            },
            OpKind::Scale => Op::Scale(attrs.factor.ok_or_else(|| need("factor"))?),
            OpKind::Sum => Op::Sum,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum OpKind {
    MatMul,
    Add,
    Mul,
    EmbeddingLookup,
    LayerNorm,
    Softmax,
    Gelu,
    Reshape,
    Transpose,
    Concat,
    Slice,
    Scale,
    Sum,
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "matmul" => OpKind::MatMul,
            "add" => OpKind::Add,
            "mul" => OpKind::Mul,
            "embedding_lookup" => OpKind::EmbeddingLookup,
            "layer_norm" => OpKind::LayerNorm,
            "softmax" => OpKind::Softmax,
            "gelu" => OpKind::Gelu,
            "reshape" => OpKind::Reshape,
            "transpose" => OpKind::Transpose,
            "concat" => OpKind::Concat,
            "slice" => OpKind::Slice,
            "scale" => OpKind::Scale,
            "sum" => OpKind::Sum,
            other => return Err(Error::UnsupportedOp(other.to_string())),
        })
    }
}

/// Optional attributes for [`Graph::apply_primitive`].
#[derive(Debug, Clone, Default)]
pub struct Attrs {
    pub ids: Option<Vec<usize>>,
    pub shape: Option<Vec<usize>>,
    pub axes: Option<(usize, usize)>,
    pub axis: Option<usize>,
    pub start: Option<usize>,
    pub end: Option<usize>,
    pub factor: Option<f64>,
    pub eps: Option<f64>,
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Option<Op>,
    inputs: Vec<usize>,
    requires_grad: bool,
    param: Option<ParamId>,
    saved: Vec<T>,
}

/// Computation tape. One graph per forward pass; not shared across threads.
#[derive(Debug)]
pub struct Graph<T = f32> {
    nodes: Vec<Node<T>>,
    record: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            record: true,
        }
    }

    /// A graph that never tracks gradients.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            record: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    fn push_leaf(&mut self, t: &Tensor<T>, requires_grad: bool, param: Option<ParamId>) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            op: None,
            inputs: Vec::new(),
            requires_grad: requires_grad && self.record,
            param,
            saved: Vec::new(),
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf holding a copy of parameter `id`; its gradient flows back to the store.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let p = store.get(id);
        let rg = p.tensor.requires_grad();
        self.push_leaf(&p.tensor, rg, Some(id))
    }

    pub fn constant(&mut self, t: &Tensor<T>) -> Var {
        self.push_leaf(t, false, None)
    }

    /// Applies a primitive by string id, e.g. `"matmul"` or `"softmax"`.
    pub fn apply_primitive(&mut self, op_id: &str, inputs: &[Var], attrs: &Attrs) -> Result<Var> {
        let op = Op::from_name(op_id, attrs)?;
        self.apply(op, inputs)
    }

    pub fn apply(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        let arity_ok = match &op {
            Op::MatMul | Op::Add | Op::Mul => inputs.len() == 2,
            Op::LayerNorm { .. } => inputs.len() == 3,
            Op::Concat(_) => !inputs.is_empty(),
            _ => inputs.len() == 1,
        };
        if !arity_ok {
            return Err(Error::dim(op.name(), format!("wrong arity {}", inputs.len())));
        }
        let (shape, value, saved) = self.forward(&op, inputs)?;
        let requires_grad = self.record && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            shape,
            value,
            op: Some(op),
            inputs: inputs.iter().map(|v| v.0).collect(),
            requires_grad,
            param: None,
            saved: if requires_grad { saved } else { Vec::new() },
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::MatMul, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Add, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Mul, &[a, b])
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize], shape: &[usize]) -> Result<Var> {
        self.apply(
            Op::EmbeddingLookup {
                ids: ids.to_vec(),
                shape: shape.to_vec(),
            },
            &[table],
        )
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        self.apply(
            Op::LayerNorm {
                eps: LAYER_NORM_EPS,
            },
            &[x, gamma, beta],
        )
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Softmax, &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Gelu, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.apply(Op::Reshape(shape.to_vec()), &[x])
    }

    pub fn transpose(&mut self, x: Var, a: usize, b: usize) -> Result<Var> {
        self.apply(Op::Transpose(a, b), &[x])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        self.apply(Op::Concat(axis), xs)
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.apply(Op::Slice { axis, start, end }, &[x])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.apply(Op::Scale(factor), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Sum, &[x])
    }

    /// Mean negative log-likelihood of `targets` under `logits[.., vocab]`,
    /// skipping positions whose target equals `ignore`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore: usize) -> Result<Var> {
        self.apply(
            Op::CrossEntropy {
                targets: targets.to_vec(),
                ignore,
            },
            &[logits],
        )
    }

    fn forward(&self, op: &Op, inputs: &[Var]) -> Result<(Vec<usize>, Vec<T>, Vec<T>)> {
        let node = |i: usize| &self.nodes[inputs[i].0];
        match op {
            Op::MatMul => {
                let (a, b) = (node(0), node(1));
                let plan = MatMulPlan::new(&a.shape, &b.shape)?;
                let mut out = vec![T::zero(); plan.out_numel()];
                plan.forward(&a.value, &b.value, &mut out);
                Ok((plan.out_shape, out, Vec::new()))
            }
            Op::Add | Op::Mul => {
                let (a, b) = (node(0), node(1));
                let out_shape = broadcast_shape(op.name(), &a.shape, &b.shape)?;
                let ia = broadcast_map(&a.shape, &out_shape);
                let ib = broadcast_map(&b.shape, &out_shape);
                let n: usize = out_shape.iter().product();
                let out = (0..n)
                    .map(|i| {
                        let x = a.value[ia.at(i)];
                        let y = b.value[ib.at(i)];
                        if matches!(op, Op::Add) {
                            x + y
                        } else {
                            x * y
                        }
                    })
                    .collect();
                Ok((out_shape, out, Vec::new()))
            }
            Op::EmbeddingLookup { ids, shape } => {
                let t = node(0);
                if t.shape.len() != 2 {
                    return Err(Error::dim(
                        "embedding_lookup",
                        format!("table must be rank 2, got {:?}", t.shape),
                    ));
                }
                if shape.iter().product::<usize>() != ids.len() {
                    return Err(Error::dim(
                        "embedding_lookup",
                        format!("{} ids do not fill shape {shape:?}", ids.len()),
                    ));
                }
                let (vocab, dim) = (t.shape[0], t.shape[1]);
                let mut out = Vec::with_capacity(ids.len() * dim);
                for &id in ids {
                    if id >= vocab {
                        return Err(Error::Index(format!(
                            "embedding id {id} out of range for table of {vocab} rows"
                        )));
                    }
                    out.extend_from_slice(&t.value[id * dim..(id + 1) * dim]);
                }
                let mut out_shape = shape.clone();
                out_shape.push(dim);
                Ok((out_shape, out, Vec::new()))
            }
            Op::LayerNorm { eps } => {
                let (x, g, b) = (node(0), node(1), node(2));
                let d = *x.shape.last().ok_or_else(|| Error::dim("layer_norm", "rank 0 input"))?;
                if g.shape != [d] || b.shape != [d] {
                    return Err(Error::dim(
                        "layer_norm",
                        format!("x {:?}, gamma {:?}, beta {:?}", x.shape, g.shape, b.shape),
                    ));
                }
                let rows = x.value.len() / d.max(1);
                let mut out = vec![T::zero(); x.value.len()];
                let mut saved = Vec::with_capacity(rows * 2);
                let eps = T::of(*eps);
                let inv_d = T::one() / T::of(d as f64);
                for r in 0..rows {
                    let row = &x.value[r * d..(r + 1) * d];
                    let mean = row.iter().copied().sum::<T>() * inv_d;
                    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
                    let rstd = T::one() / (var + eps).sqrt();
                    for j in 0..d {
                        out[r * d + j] = (row[j] - mean) * rstd * g.value[j] + b.value[j];
                    }
                    saved.push(mean);
                    saved.push(rstd);
                }
                Ok((x.shape.clone(), out, saved))
            }
            Op::Softmax => {
                let x = node(0);
                let d = *x.shape.last().ok_or_else(|| Error::dim("softmax", "rank 0 input"))?;
                let mut out = x.value.clone();
                for row in out.chunks_mut(d.max(1)) {
                    softmax_in_place(row);
                }
                Ok((x.shape.clone(), out, Vec::new()))
            }
            Op::Gelu => {
                let x = node(0);
                Ok((x.shape.clone(), x.value.iter().map(|&v| gelu(v)).collect(), Vec::new()))
            }
            Op::Reshape(shape) => {
                let x = node(0);
                if shape.iter().product::<usize>() != x.value.len() {
                    return Err(Error::dim(
                        "reshape",
                        format!("cannot reshape {:?} into {shape:?}", x.shape),
                    ));
                }
                Ok((shape.clone(), x.value.clone(), Vec::new()))
            }
            Op::Transpose(a, b) => {
                let x = node(0);
                if *a >= x.shape.len() || *b >= x.shape.len() {
                    return Err(Error::dim(
                        "transpose",
                        format!("axes ({a}, {b}) invalid for shape {:?}", x.shape),
                    ));
                }
                let mut out_shape = x.shape.clone();
                out_shape.swap(*a, *b);
                let out = swap_axes(&x.value, &x.shape, *a, *b);
                Ok((out_shape, out, Vec::new()))
            }
            Op::Concat(axis) => {
                let first = node(0);
                let rank = first.shape.len();
                if *axis >= rank {
                    return Err(Error::dim("concat", format!("axis {axis} invalid for rank {rank}")));
                }
                let mut total = 0;
                for i in 0..inputs.len() {
                    let s = &node(i).shape;
                    let compatible = s.len() == rank
                        && s.iter().zip(&first.shape).enumerate().all(|(k, (x, y))| k == *axis || x == y);
                    if !compatible {
                        return Err(Error::dim(
                            "concat",
                            format!("shape {s:?} incompatible with {:?} on axis {axis}", first.shape),
                        ));
                    }
                    total += s[*axis];
                }
                let outer: usize = first.shape[..*axis].iter().product();
                let inner: usize = first.shape[axis + 1..].iter().product();
                let mut out = Vec::with_capacity(outer * total * inner);
                for o in 0..outer {
                    for i in 0..inputs.len() {
                        let n = node(i);
                        let chunk = n.shape[*axis] * inner;
                        out.extend_from_slice(&n.value[o * chunk..(o + 1) * chunk]);
                    }
                }
                let mut out_shape = first.shape.clone();
                out_shape[*axis] = total;
                Ok((out_shape, out, Vec::new()))
            }
            Op::Slice { axis, start, end } => {
                let x = node(0);
                if *axis >= x.shape.len() || start >= end || *end > x.shape[*axis] {
                    return Err(Error::dim(
                        "slice",
                        format!("range {start}..{end} on axis {axis} invalid for {:?}", x.shape),
                    ));
                }
                let outer: usize = x.shape[..*axis].iter().product();
                let inner: usize = x.shape[axis + 1..].iter().product();
                let len = x.shape[*axis];
                let mut out = Vec::with_capacity(outer * (end - start) * inner);
                for o in 0..outer {
                    let base = o * len * inner;
                    out.extend_from_slice(&x.value[base + start * inner..base + end * inner]);
                }
                let mut out_shape = x.shape.clone();
                out_shape[*axis] = end - start;
                Ok((out_shape, out, Vec::new()))
            }
            Op::Scale(c) => {
                let x = node(0);
                let c = T::of(*c);
                Ok((x.shape.clone(), x.value.iter().map(|&v| v * c).collect(), Vec::new()))
            }
            Op::Sum => {
                let x = node(0);
                Ok((vec![], vec![x.value.iter().copied().sum()], Vec::new()))
            }
            Op::CrossEntropy { targets, ignore } => {
                let x = node(0);
                let v = *x.shape.last().ok_or_else(|| Error::dim("cross_entropy", "rank 0 logits"))?;
                let rows = x.value.len() / v.max(1);
                if targets.len() != rows {
                    return Err(Error::dim(
                        "cross_entropy",
                        format!("{} targets for logits {:?}", targets.len(), x.shape),
                    ));
                }
                let mut probs = x.value.clone();
                let mut total = T::zero();
                let mut count = 0usize;
                for (r, &t) in targets.iter().enumerate() {
                    if t == *ignore {
                        continue;
                    }
                    if t >= v {
                        return Err(Error::Index(format!("target id {t} out of range for vocab {v}")));
                    }
                    let row = &mut probs[r * v..(r + 1) * v];
                    let lse = log_sum_exp(row);
                    total += lse - row[t];
                    softmax_in_place(row);
                    count += 1;
                }
                if count == 0 {
                    return Err(Error::UndefinedMean);
                }
                let mean = total / T::of(count as f64);
                probs.push(T::of(count as f64));
                Ok((vec![], vec![mean], probs))
            }
        }
    }

    /// Back-propagates from the scalar `loss`, adding gradients into every
    /// reachable parameter in `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::Rank(root.shape.clone()));
        }
        if !root.requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                None => {
                    if let Some(pid) = node.param {
                        store.get_mut(pid).tensor.accumulate_grad(&g);
                    }
                }
                Some(op) => self.backprop(op, node, &g, &mut grads),
            }
        }
        Ok(())
    }

    fn backprop(&self, op: &Op, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let input = |k: usize| &self.nodes[node.inputs[k]];
        let wants = |k: usize| self.nodes[node.inputs[k]].requires_grad;
        match op {
            Op::MatMul => {
                let (a, b) = (input(0), input(1));
                let plan = MatMulPlan::new(&a.shape, &b.shape).expect("validated in forward");
                if wants(0) {
                    let ga = grad_slot(grads, node.inputs[0], a.value.len());
                    plan.backward_a(g, &b.value, ga);
                }
                if wants(1) {
                    let gb = grad_slot(grads, node.inputs[1], b.value.len());
                    plan.backward_b(&a.value, g, gb);
                }
            }
            Op::Add | Op::Mul => {
                let (a, b) = (input(0), input(1));
                let ia = broadcast_map(&a.shape, &node.shape);
                let ib = broadcast_map(&b.shape, &node.shape);
                let is_mul = matches!(op, Op::Mul);
                if wants(0) {
                    let ga = grad_slot(grads, node.inputs[0], a.value.len());
                    for (i, &gi) in g.iter().enumerate() {
                        ga[ia.at(i)] += if is_mul { gi * b.value[ib.at(i)] } else { gi };
                    }
                }
                if wants(1) {
                    let gb = grad_slot(grads, node.inputs[1], b.value.len());
                    for (i, &gi) in g.iter().enumerate() {
                        gb[ib.at(i)] += if is_mul { gi * a.value[ia.at(i)] } else { gi };
                    }
                }
            }
            Op::EmbeddingLookup { ids, .. } => {
                let t = input(0);
                let dim = t.shape[1];
                let gt = grad_slot(grads, node.inputs[0], t.value.len());
                for (row, &id) in ids.iter().enumerate() {
                    let dst = &mut gt[id * dim..(id + 1) * dim];
                    for (d, s) in dst.iter_mut().zip(&g[row * dim..(row + 1) * dim]) {
                        *d += *s;
                    }
                }
            }
            Op::LayerNorm { .. } => {
                let (x, gamma) = (input(0), input(1));
                let d = gamma.value.len();
                let rows = x.value.len() / d;
                let inv_d = T::one() / T::of(d as f64);
                let mut gx = if wants(0) { vec![T::zero(); x.value.len()] } else { Vec::new() };
                let mut ggamma = vec![T::zero(); d];
                let mut gbeta = vec![T::zero(); d];
                let mut dxhat = vec![T::zero(); d];
                for r in 0..rows {
                    let mean = node.saved[2 * r];
                    let rstd = node.saved[2 * r + 1];
                    let xr = &x.value[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let mut sum_dxhat = T::zero();
                    let mut sum_dxhat_xhat = T::zero();
                    for j in 0..d {
                        let xhat = (xr[j] - mean) * rstd;
                        ggamma[j] += gr[j] * xhat;
                        gbeta[j] += gr[j];
                        dxhat[j] = gr[j] * gamma.value[j];
                        sum_dxhat += dxhat[j];
                        sum_dxhat_xhat += dxhat[j] * xhat;
                    }
                    if wants(0) {
                        for j in 0..d {
                            let xhat = (xr[j] - mean) * rstd;
                            gx[r * d + j] =
                                rstd * (dxhat[j] - inv_d * sum_dxhat - xhat * inv_d * sum_dxhat_xhat);
                        }
                    }
                }
                if wants(0) {
                    add_into(grad_slot(grads, node.inputs[0], x.value.len()), &gx);
                }
                if wants(1) {
                    add_into(grad_slot(grads, node.inputs[1], d), &ggamma);
                }
                if wants(2) {
                    add_into(grad_slot(grads, node.inputs[2], d), &gbeta);
                }
            }
            Op::Softmax => {
                let d = *node.shape.last().unwrap_or(&1);
                let gx = grad_slot(grads, node.inputs[0], node.value.len());
                for ((y, gy), gx) in node
                    .value
                    .chunks(d)
                    .zip(g.chunks(d))
                    .zip(gx.chunks_mut(d))
                {
                    let dot: T = y.iter().zip(gy).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        gx[j] += y[j] * (gy[j] - dot);
                    }
                }
            }
            Op::Gelu => {
                let x = input(0);
                let gx = grad_slot(grads, node.inputs[0], x.value.len());
                for ((d, &xv), &gv) in gx.iter_mut().zip(&x.value).zip(g) {
                    *d += gv * gelu_grad(xv);
                }
            }
            Op::Reshape(_) => {
                add_into(grad_slot(grads, node.inputs[0], g.len()), g);
            }
            Op::Transpose(a, b) => {
                let back = swap_axes(g, &node.shape, *a, *b);
                add_into(grad_slot(grads, node.inputs[0], g.len()), &back);
            }
            Op::Concat(axis) => {
                let outer: usize = node.shape[..*axis].iter().product();
                let inner: usize = node.shape[axis + 1..].iter().product();
                let total = node.shape[*axis];
                let mut offset = 0;
                for k in 0..node.inputs.len() {
                    let len = input(k).shape[*axis];
                    if wants(k) {
                        let n = input(k).value.len();
                        let gk = grad_slot(grads, node.inputs[k], n);
                        for o in 0..outer {
                            let src = o * total * inner + offset * inner;
                            let dst = o * len * inner;
                            add_into(&mut gk[dst..dst + len * inner], &g[src..src + len * inner]);
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice { axis, start, end } => {
                let x = input(0);
                let outer: usize = x.shape[..*axis].iter().product();
                let inner: usize = x.shape[axis + 1..].iter().product();
                let len = x.shape[*axis];
                let width = (end - start) * inner;
                let gx = grad_slot(grads, node.inputs[0], x.value.len());
                for o in 0..outer {
                    let dst = o * len * inner + start * inner;
                    add_into(&mut gx[dst..dst + width], &g[o * width..(o + 1) * width]);
                }
            }
            Op::Scale(c) => {
                let c = T::of(*c);
                let gx = grad_slot(grads, node.inputs[0], g.len());
                gx.iter_mut().zip(g).for_each(|(d, &s)| *d += s * c);
            }
            Op::Sum => {
                let n = input(0).value.len();
                let gx = grad_slot(grads, node.inputs[0], n);
                gx.iter_mut().for_each(|d| *d += g[0]);
            }
            Op::CrossEntropy { targets, ignore } => {
                let x = input(0);
                let v = *x.shape.last().expect("validated in forward");
                let count = *node.saved.last().expect("count saved");
                let scale = g[0] / count;
                let gx = grad_slot(grads, node.inputs[0], x.value.len());
                for (r, &t) in targets.iter().enumerate() {
                    if t == *ignore {
                        continue;
                    }
                    let p = &node.saved[r * v..(r + 1) * v];
                    let row = &mut gx[r * v..(r + 1) * v];
                    for j in 0..v {
                        row[j] += scale * p[j];
                    }
                    row[t] -= scale;
                }
            }
        }
    }
}

fn grad_slot<T: Real>(grads: &mut [Option<Vec<T>>], i: usize, n: usize) -> &mut Vec<T> {
    grads[i].get_or_insert_with(|| vec![T::zero(); n])
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln()
}

fn softmax_in_place<T: Real>(row: &mut [T]) {
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

const GELU_C: f64 = 0.044_715;

fn gelu<T: Real>(x: T) -> T {
    let k = T::of((2.0 / std::f64::consts::PI).sqrt());
    let inner = k * (x + T::of(GELU_C) * x * x * x);
    T::of(0.5) * x * (T::one() + inner.tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let k = T::of((2.0 / std::f64::consts::PI).sqrt());
    let c = T::of(GELU_C);
    let t = (k * (x + c * x * x * x)).tanh();
    let half = T::of(0.5);
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + T::of(3.0) * c * x * x)
}

fn swap_axes<T: Real>(src: &[T], shape: &[usize], a: usize, b: usize) -> Vec<T> {
    if a == b {
        return src.to_vec();
    }
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let mut out_shape = shape.to_vec();
    out_shape.swap(a, b);
    // Input stride for each output axis.
    let mut strides = in_strides.clone();
    strides.swap(a, b);
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..src.len() {
        out.push(src[offset]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    out
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::dim(op, format!("cannot broadcast {a:?} with {b:?}"))),
        };
    }
    Ok(out)
}

/// Maps each flat output index to the flat index of a broadcast input.
enum BroadcastMap {
    Identity,
    Modulo(usize),
    Table(Vec<usize>),
}

impl BroadcastMap {
    #[inline]
    fn at(&self, i: usize) -> usize {
        match self {
            BroadcastMap::Identity => i,
            BroadcastMap::Modulo(n) => i % n,
            BroadcastMap::Table(t) => t[i],
        }
    }
}

fn broadcast_map(input: &[usize], out: &[usize]) -> BroadcastMap {
    let n_in: usize = input.iter().product();
    let n_out: usize = out.iter().product();
    if n_in == n_out {
        return BroadcastMap::Identity;
    }
    let rank = out.len();
    let pad = rank - input.len();
    // Pure suffix broadcast (e.g. a bias row): input matches the trailing dims.
    let k = input.len();
    if input.iter().zip(&out[pad..]).all(|(x, y)| x == y) && k <= rank {
        return BroadcastMap::Modulo(n_in.max(1));
    }
    let mut strides = vec![0usize; rank];
    let mut s = 1;
    for i in (0..k).rev() {
        strides[pad + i] = if input[i] == 1 { 0 } else { s };
        s *= input[i];
    }
    let mut table = Vec::with_capacity(n_out);
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..n_out {
        table.push(offset);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += strides[ax];
            if idx[ax] < out[ax] {
                break;
            }
            offset -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    BroadcastMap::Table(table)
}

/// Shapes for `[.., m, k] x [k, n]` (shared right operand) or
/// `[.., m, k] x [.., k, n]` (matching batch dims).
struct MatMulPlan {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    shared_rhs: bool,
    out_shape: Vec<usize>,
}

impl MatMulPlan {
    fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        let bad = || Error::dim("matmul", format!("incompatible shapes {a:?} and {b:?}"));
        if a.len() < 2 || b.len() < 2 {
            return Err(bad());
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (kb, n) = (b[b.len() - 2], b[b.len() - 1]);
        if k != kb {
            return Err(bad());
        }
        let lead = &a[..a.len() - 2];
        let shared_rhs = b.len() == 2;
        if !shared_rhs && b[..b.len() - 2] != *lead {
            return Err(bad());
        }
        let mut out_shape = lead.to_vec();
        out_shape.extend([m, n]);
        Ok(Self {
            batch: lead.iter().product(),
            m,
            k,
            n,
            shared_rhs,
            out_shape,
        })
    }

    fn out_numel(&self) -> usize {
        self.batch * self.m * self.n
    }

    fn forward<T: Real>(&self, a: &[T], b: &[T], c: &mut [T]) {
        let (m, k, n) = (self.m, self.k, self.n);
        if self.shared_rhs {
            gemm(self.batch * m, k, n, a, (k, 1), b, (n, 1), c, (n, 1), T::zero());
        } else {
            for i in 0..self.batch {
                gemm(
                    m,
                    k,
                    n,
                    &a[i * m * k..(i + 1) * m * k],
                    (k, 1),
                    &b[i * k * n..(i + 1) * k * n],
                    (n, 1),
                    &mut c[i * m * n..(i + 1) * m * n],
                    (n, 1),
                    T::zero(),
                );
            }
        }
    }

    /// dA += dC Bᵀ
    fn backward_a<T: Real>(&self, gc: &[T], b: &[T], ga: &mut [T]) {
        let (m, k, n) = (self.m, self.k, self.n);
        if self.shared_rhs {
            gemm(self.batch * m, n, k, gc, (n, 1), b, (1, n), ga, (k, 1), T::one());
        } else {
            for i in 0..self.batch {
                gemm(
                    m,
                    n,
                    k,
                    &gc[i * m * n..(i + 1) * m * n],
                    (n, 1),
                    &b[i * k * n..(i + 1) * k * n],
                    (1, n),
                    &mut ga[i * m * k..(i + 1) * m * k],
                    (k, 1),
                    T::one(),
                );
            }
        }
    }

    /// dB += Aᵀ dC
    fn backward_b<T: Real>(&self, a: &[T], gc: &[T], gb: &mut [T]) {
        let (m, k, n) = (self.m, self.k, self.n);
        if self.shared_rhs {
            gemm(k, self.batch * m, n, a, (1, k), gc, (n, 1), gb, (n, 1), T::one());
        } else {
            for i in 0..self.batch {
                gemm(
                    k,
                    m,
                    n,
                    &a[i * m * k..(i + 1) * m * k],
                    (1, k),
                    &gc[i * m * n..(i + 1) * m * n],
                    (n, 1),
                    &mut gb[i * k * n..(i + 1) * k * n],
                    (n, 1),
                    T::one(),
                );
            }
        }
    }
}

/// Safe wrapper over [`Real::gemm`]; strides are `(row, col)`.
#[allow(clippy::too_many_arguments)]
fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    sa: (usize, usize),
    b: &[T],
    sb: (usize, usize),
    c: &mut [T],
    sc: (usize, usize),
    beta: T,
) {
    if m == 0 || n == 0 {
        return;
    }
    let extent = |rows: usize, cols: usize, s: (usize, usize)| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * s.0 + (cols - 1) * s.1 + 1
        }
    };
    assert!(extent(m, k, sa) <= a.len());
    assert!(extent(k, n, sb) <= b.len());
    assert!(extent(m, n, sc) <= c.len());
    // SAFETY: the asserts above keep every strided access in bounds.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            beta,
            c.as_mut_ptr(),
            sc.0 as isize,
            sc.1 as isize,
        );
    }
}
