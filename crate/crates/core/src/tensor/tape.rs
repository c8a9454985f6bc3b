use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;

use super::kernels::{self, MatmulDims};
use super::{numel, Float, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Backward rule of a user-defined op: `(inputs, output, output_grad)` to
/// one gradient per input.
pub type BackwardFn<T> = Box<dyn Fn(&[&Tensor<T>], &Tensor<T>, &Tensor<T>) -> Vec<Tensor<T>>>;

enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    MatMul(usize, usize, MatmulDims),
    Permute(usize, Vec<usize>),
    Reshape(usize),
    Slice {
        src: usize,
        axis: usize,
        start: usize,
    },
    Concat {
        srcs: Vec<usize>,
        axis: usize,
    },
    IndexSelect {
        src: usize,
        axis: usize,
        index: Vec<usize>,
    },
    Softmax(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        normed: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(usize),
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        pad: usize,
        probs: Vec<T>,
        count: usize,
    },
    Sum(usize),
    Mean(usize),
    Custom {
        inputs: Vec<usize>,
        backward: BackwardFn<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records differentiable computations for one forward pass.
///
/// A tape is confined to a single thread. Build a fresh tape per step; it
/// owns every intermediate value until it is dropped.
pub struct Tape<T: Float> {
    nodes: RefCell<Vec<Node<T>>>,
    bound: RefCell<HashMap<ParamId, usize>>,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// A value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Float> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Float> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            bound: RefCell::new(HashMap::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// A value that receives no gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    /// A free input that receives a gradient.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a stored parameter, reusing the node if already bound.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var<'_, T> {
        if let Some(&node) = self.bound.borrow().get(&id) {
            return Var { tape: self, id: node };
        }
        let var = self.leaf(store.get(id).clone());
        self.bound.borrow_mut().insert(id, var.id);
        var
    }

    pub fn concat(&self, parts: &[Var<'_, T>], axis: usize) -> Result<Var<'_, T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let nodes = self.nodes.borrow();
        let base = nodes[first.id].value.shape().to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", &base, &[axis]));
        }
        let mut out_shape = base.clone();
        out_shape[axis] = 0;
        for p in parts {
            let s = nodes[p.id].value.shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            out_shape[axis] += s[axis];
        }
        let (outer, _, inner) = kernels::split_axis(&out_shape, axis);
        let mut data = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for p in parts {
                let v = &nodes[p.id].value;
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let srcs: Vec<usize> = parts.iter().map(|p| p.id).collect();
        drop(nodes);
        let rg = self.requires(&srcs);
        let value = Tensor::new(&out_shape, data)?;
        Ok(self.push(value, Op::Concat { srcs, axis }, rg))
    }

    /// Records an op with a caller-supplied backward rule.
    pub fn custom<'t>(
        &'t self,
        inputs: &[Var<'t, T>],
        value: Tensor<T>,
        backward: BackwardFn<T>,
    ) -> Var<'t, T> {
        let ids: Vec<usize> = inputs.iter().map(|v| v.id).collect();
        let rg = self.requires(&ids);
        self.push(value, Op::Custom { inputs: ids, backward }, rg)
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[output.id];
        if root.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[output.id] = Some(vec![T::one()]);

        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let contributions = backward_node(&nodes, node, &g);
            // only leaf gradients are kept; intermediates are freed as we go
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
            }
            for (parent, pg) in contributions {
                if !nodes[parent].requires_grad {
                    continue;
                }
                match &mut grads[parent] {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(&pg) {
                            *a += *v;
                        }
                    }
                    slot @ None => *slot = Some(pg),
                }
            }
        }

        let grads = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, n)| g.map(|g| Tensor::new(n.value.shape(), g).expect("gradient shape")))
            .collect();
        Ok(Gradients {
            grads,
            bound: self.bound.borrow().clone(),
        })
    }
}

fn backward_node<T: Float>(nodes: &[Node<T>], node: &Node<T>, g: &[T]) -> Vec<(usize, Vec<T>)> {
    let val = |i: usize| &nodes[i].value;
    let needs = |i: usize| nodes[i].requires_grad;
    let out_shape = node.value.shape();
    match &node.op {
        Op::Leaf => vec![],
        Op::Add(a, b) | Op::Sub(a, b) => {
            let mut out = Vec::new();
            if needs(*a) {
                out.push((*a, kernels::reduce_to_shape(g, out_shape, val(*a).shape())));
            }
            if needs(*b) {
                let mut gb = kernels::reduce_to_shape(g, out_shape, val(*b).shape());
                if matches!(node.op, Op::Sub(..)) {
                    gb.iter_mut().for_each(|v| *v = -*v);
                }
                out.push((*b, gb));
            }
            out
        }
        Op::Mul(a, b) => {
            let mut out = Vec::new();
            for (this, other) in [(*a, *b), (*b, *a)] {
                if needs(this) {
                    let (prod, _) = kernels::binary("mul", g, out_shape, val(other).data(), val(other).shape(), |x, y| x * y)
                        .expect("broadcast checked in forward");
                    out.push((this, kernels::reduce_to_shape(&prod, out_shape, val(this).shape())));
                }
            }
            out
        }
        Op::Scale(a, c) => vec![(*a, g.iter().map(|&v| v * *c).collect())],
        Op::MatMul(a, b, dims) => {
            let (ga, gb) = kernels::matmul_backward(val(*a).data(), val(*b).data(), g, dims, needs(*a), needs(*b));
            ga.map(|v| (*a, v)).into_iter().chain(gb.map(|v| (*b, v))).collect()
        }
        Op::Permute(a, perm) => {
            let (ga, _) = kernels::permute(g, out_shape, &kernels::inverse_permutation(perm));
            vec![(*a, ga)]
        }
        Op::Reshape(a) => vec![(*a, g.to_vec())],
        Op::Slice { src, axis, start } => {
            let src_shape = val(*src).shape();
            let (outer, len, inner) = kernels::split_axis(src_shape, *axis);
            let taken = out_shape[*axis];
            let mut gs = vec![T::zero(); numel(src_shape)];
            for o in 0..outer {
                let dst = o * len * inner + start * inner;
                gs[dst..dst + taken * inner].copy_from_slice(&g[o * taken * inner..(o + 1) * taken * inner]);
            }
            vec![(*src, gs)]
        }
        Op::Concat { srcs, axis } => {
            let (outer, _, inner) = kernels::split_axis(out_shape, *axis);
            let mut parts: Vec<Vec<T>> = srcs.iter().map(|&s| Vec::with_capacity(val(s).len())).collect();
            let mut offset = 0;
            for _ in 0..outer {
                for (k, &s) in srcs.iter().enumerate() {
                    let chunk = val(s).shape()[*axis] * inner;
                    parts[k].extend_from_slice(&g[offset..offset + chunk]);
                    offset += chunk;
                }
            }
            srcs.iter().copied().zip(parts).collect()
        }
        Op::IndexSelect { src, axis, index } => {
            let src_shape = val(*src).shape();
            let (outer, len, inner) = kernels::split_axis(src_shape, *axis);
            let mut gs = vec![T::zero(); numel(src_shape)];
            for o in 0..outer {
                for (j, &ix) in index.iter().enumerate() {
                    let from = (o * index.len() + j) * inner;
                    let to = (o * len + ix) * inner;
                    for t in 0..inner {
                        gs[to + t] += g[from + t];
                    }
                }
            }
            vec![(*src, gs)]
        }
        Op::Softmax(a) => {
            let y = node.value.data();
            let n = *out_shape.last().unwrap_or(&1);
            let mut ga = vec![T::zero(); y.len()];
            for ((gr, yr), out) in g.chunks(n).zip(y.chunks(n)).zip(ga.chunks_mut(n)) {
                let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                for ((o, &gi), &yi) in out.iter_mut().zip(gr).zip(yr) {
                    *o = yi * (gi - dot);
                }
            }
            vec![(*a, ga)]
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            normed,
            rstd,
        } => {
            let d = *out_shape.last().unwrap_or(&1);
            let gam = val(*gamma).data();
            let mut out = Vec::new();
            if needs(*x) {
                let mut gx = vec![T::zero(); g.len()];
                let df = T::from_f64(d as f64);
                for (r, ((gr, xr), outr)) in g.chunks(d).zip(normed.chunks(d)).zip(gx.chunks_mut(d)).enumerate() {
                    let mut sum_dx = T::zero();
                    let mut sum_dx_x = T::zero();
                    for j in 0..d {
                        let dxh = gr[j] * gam[j];
                        sum_dx += dxh;
                        sum_dx_x += dxh * xr[j];
                    }
                    for j in 0..d {
                        let dxh = gr[j] * gam[j];
                        outr[j] = rstd[r] / df * (df * dxh - sum_dx - xr[j] * sum_dx_x);
                    }
                }
                out.push((*x, gx));
            }
            if needs(*gamma) {
                let mut gg = vec![T::zero(); d];
                for (gr, xr) in g.chunks(d).zip(normed.chunks(d)) {
                    for j in 0..d {
                        gg[j] += gr[j] * xr[j];
                    }
                }
                out.push((*gamma, gg));
            }
            if needs(*beta) {
                let mut gb = vec![T::zero(); d];
                for gr in g.chunks(d) {
                    for j in 0..d {
                        gb[j] += gr[j];
                    }
                }
                out.push((*beta, gb));
            }
            out
        }
        Op::Gelu(a) => {
            let x = val(*a).data();
            vec![(*a, g.iter().zip(x).map(|(&gi, &xi)| gi * kernels::gelu_grad(xi)).collect())]
        }
        Op::Embedding { table, ids } => {
            let t = val(*table);
            let d = t.shape()[1];
            let mut gt = vec![T::zero(); t.len()];
            for (row, &id) in ids.iter().enumerate() {
                for j in 0..d {
                    gt[id * d + j] += g[row * d + j];
                }
            }
            vec![(*table, gt)]
        }
        Op::CrossEntropy {
            logits,
            targets,
            pad,
            probs,
            count,
        } => {
            let v = *val(*logits).shape().last().unwrap_or(&1);
            let scale = g[0] / T::from_f64(*count as f64);
            let mut gl = vec![T::zero(); probs.len()];
            for (r, &t) in targets.iter().enumerate() {
                if t == *pad {
                    continue;
                }
                for j in 0..v {
                    gl[r * v + j] = probs[r * v + j] * scale;
                }
                gl[r * v + t] -= scale;
            }
            vec![(*logits, gl)]
        }
        Op::Sum(a) => vec![(*a, vec![g[0]; val(*a).len()])],
        Op::Mean(a) => {
            let n = val(*a).len();
            vec![(*a, vec![g[0] / T::from_f64(n as f64); n])]
        }
        Op::Custom { inputs, backward } => {
            let ins: Vec<&Tensor<T>> = inputs.iter().map(|&i| val(i)).collect();
            let gt = Tensor::new(out_shape, g.to_vec()).expect("gradient shape");
            let grads = backward(&ins, &node.value, &gt);
            inputs.iter().copied().zip(grads.into_iter().map(Tensor::into_data)).collect()
        }
    }
}

impl<'t, T: Float> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// A copy of the recorded value.
    pub fn value(&self) -> Tensor<T> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor<T>) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    fn unary(&self, value: Tensor<T>, op: Op<T>) -> Var<'t, T> {
        let rg = self.tape.requires(&[self.id]);
        self.tape.push(value, op, rg)
    }

    fn binary_op(
        &self,
        other: Var<'t, T>,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var<'t, T>> {
        let (data, shape) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            kernels::binary(name, a.data(), a.shape(), b.data(), b.shape(), f)?
        };
        let rg = self.tape.requires(&[self.id, other.id]);
        Ok(self.tape.push(Tensor::new(&shape, data)?, op, rg))
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary_op(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary_op(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary_op(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn scale(&self, c: T) -> Var<'t, T> {
        let value = self.with_value(|v| Tensor::from_fn(v.shape(), |i| v.data()[i] * c));
        self.unary(value, Op::Scale(self.id, c))
    }

    /// `[..., m, k] @ [k, n]` or batched `[..., m, k] @ [..., k, n]`.
    pub fn matmul(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (data, dims) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            let dims = kernels::matmul_dims(a.shape(), b.shape())?;
            (kernels::matmul(a.data(), b.data(), &dims), dims)
        };
        let value = Tensor::new(&dims.out_shape, data)?;
        let rg = self.tape.requires(&[self.id, other.id]);
        Ok(self.tape.push(value, Op::MatMul(self.id, other.id, dims), rg))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Var<'t, T>> {
        let shape = self.shape();
        let mut seen = vec![false; shape.len()];
        let valid = perm.len() == shape.len()
            && perm.iter().all(|&p| p < shape.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(Error::shape("permute", &shape, perm));
        }
        let (data, out_shape) = self.with_value(|v| kernels::permute(v.data(), v.shape(), perm));
        Ok(self.unary(Tensor::new(&out_shape, data)?, Op::Permute(self.id, perm.to_vec())))
    }

    /// Swaps two axes.
    pub fn transpose(&self, i: usize, j: usize) -> Result<Var<'t, T>> {
        let rank = self.shape().len();
        if i >= rank || j >= rank {
            return Err(Error::shape("transpose", &self.shape(), &[i, j]));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(i, j);
        self.permute(&perm)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, T>> {
        let value = self.value().reshape(shape)?;
        Ok(self.unary(value, Op::Reshape(self.id)))
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t, T>> {
        let value = self.with_value(|v| {
            let shape = v.shape();
            if axis >= shape.len() || start + len > shape[axis] {
                return Err(Error::shape("slice", shape, &[axis, start, len]));
            }
            let (outer, n, inner) = kernels::split_axis(shape, axis);
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let from = (o * n + start) * inner;
                data.extend_from_slice(&v.data()[from..from + len * inner]);
            }
            let mut out_shape = shape.to_vec();
            out_shape[axis] = len;
            Tensor::new(&out_shape, data)
        })?;
        Ok(self.unary(value, Op::Slice { src: self.id, axis, start }))
    }

    /// Gathers entries `index` along `axis`; repeated indices are allowed.
    pub fn index_select(&self, axis: usize, index: &[usize]) -> Result<Var<'t, T>> {
        let value = self.with_value(|v| {
            let shape = v.shape();
            if axis >= shape.len() || index.iter().any(|&i| i >= shape[axis]) {
                return Err(Error::shape("index_select", shape, &[axis]));
            }
            let (outer, n, inner) = kernels::split_axis(shape, axis);
            let mut data = Vec::with_capacity(outer * index.len() * inner);
            for o in 0..outer {
                for &i in index {
                    let from = (o * n + i) * inner;
                    data.extend_from_slice(&v.data()[from..from + inner]);
                }
            }
            let mut out_shape = shape.to_vec();
            out_shape[axis] = index.len();
            Tensor::new(&out_shape, data)
        })?;
        Ok(self.unary(
            value,
            Op::IndexSelect {
                src: self.id,
                axis,
                index: index.to_vec(),
            },
        ))
    }

    /// Softmax over the last axis. `-inf` entries get zero weight; a row of
    /// only `-inf` is a caller bug and yields NaN.
    pub fn softmax(&self) -> Result<Var<'t, T>> {
        let value = self.with_value(|v| {
            let n = *v.shape().last().ok_or_else(|| Error::shape("softmax", v.shape(), &[]))?;
            let mut out = v.data().to_vec();
            for row in out.chunks_mut(n.max(1)) {
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for x in row.iter_mut() {
                    *x = (*x - max).exp();
                    sum += *x;
                }
                for x in row.iter_mut() {
                    *x = *x / sum;
                }
            }
            Tensor::new(v.shape(), out)
        })?;
        Ok(self.unary(value, Op::Softmax(self.id)))
    }

    /// Normalizes the last axis, then applies `gamma * x + beta`.
    pub fn layer_norm(&self, gamma: Var<'t, T>, beta: Var<'t, T>, eps: f64) -> Result<Var<'t, T>> {
        let (value, normed, rstd) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            let d = *x.shape().last().ok_or_else(|| Error::shape("layer_norm", x.shape(), &[]))?;
            let (g, b) = (&nodes[gamma.id].value, &nodes[beta.id].value);
            if g.shape() != [d] || b.shape() != [d] {
                return Err(Error::shape("layer_norm", x.shape(), g.shape()));
            }
            let df = T::from_f64(d as f64);
            let eps = T::from_f64(eps);
            let rows = x.len() / d.max(1);
            let mut normed = Vec::with_capacity(x.len());
            let mut rstd = Vec::with_capacity(rows);
            let mut out = Vec::with_capacity(x.len());
            for row in x.data().chunks(d) {
                let mean = row.iter().copied().sum::<T>() / df;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / df;
                let r = T::one() / (var + eps).sqrt();
                rstd.push(r);
                for (j, &v) in row.iter().enumerate() {
                    let n = (v - mean) * r;
                    normed.push(n);
                    out.push(n * g.data()[j] + b.data()[j]);
                }
            }
            (Tensor::new(x.shape(), out)?, normed, rstd)
        };
        let rg = self.tape.requires(&[self.id, gamma.id, beta.id]);
        Ok(self.tape.push(
            value,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                normed,
                rstd,
            },
            rg,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Var<'t, T> {
        let value = self.with_value(|v| Tensor::from_fn(v.shape(), |i| kernels::gelu(v.data()[i])));
        self.unary(value, Op::Gelu(self.id))
    }

    /// Rows of this `[vocab, dim]` table selected by `ids`, shape `[len, dim]`.
    pub fn embedding(&self, ids: &[usize]) -> Result<Var<'t, T>> {
        let value = self.with_value(|t| {
            let shape = t.shape();
            if shape.len() != 2 {
                return Err(Error::shape("embedding", shape, &[ids.len()]));
            }
            let (vocab, d) = (shape[0], shape[1]);
            let mut data = Vec::with_capacity(ids.len() * d);
            for &id in ids {
                if id >= vocab {
                    return Err(Error::Contract(format!("embedding id {id} >= vocab {vocab}")));
                }
                data.extend_from_slice(&t.data()[id * d..(id + 1) * d]);
            }
            Tensor::new(&[ids.len(), d], data)
        })?;
        Ok(self.unary(
            value,
            Op::Embedding {
                table: self.id,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Mean negative log-likelihood of `targets` under these `[.., vocab]`
    /// logits, skipping positions whose target is `pad`.
    pub fn cross_entropy(&self, targets: &[usize], pad: usize) -> Result<Var<'t, T>> {
        let (loss, probs, count) = self.with_value(|l| {
            let v = *l.shape().last().ok_or_else(|| Error::shape("cross_entropy", l.shape(), &[]))?;
            if l.len() != targets.len() * v {
                return Err(Error::shape("cross_entropy", l.shape(), &[targets.len()]));
            }
            let mut probs = vec![T::zero(); l.len()];
            let mut total = 0.0f64;
            let mut count = 0usize;
            for (r, (row, &t)) in l.data().chunks(v).zip(targets).enumerate() {
                if t >= v {
                    return Err(Error::Contract(format!("target {t} outside vocab {v}")));
                }
                if t == pad {
                    continue;
                }
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let sum: T = row.iter().map(|&x| (x - max).exp()).sum();
                for (j, &x) in row.iter().enumerate() {
                    probs[r * v + j] = (x - max).exp() / sum;
                }
                total += (sum.ln() + max - row[t]).as_f64();
                count += 1;
            }
            if count == 0 {
                return Err(Error::Numeric("cross-entropy over an all-padding batch is undefined".into()));
            }
            Ok((total / count as f64, probs, count))
        })?;
        Ok(self.unary(
            Tensor::scalar(T::from_f64(loss)),
            Op::CrossEntropy {
                logits: self.id,
                targets: targets.to_vec(),
                pad,
                probs,
                count,
            },
        ))
    }

    pub fn sum(&self) -> Var<'t, T> {
        let s = self.with_value(|v| v.data().iter().copied().sum::<T>());
        self.unary(Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'t, T> {
        let s = self.with_value(|v| v.data().iter().copied().sum::<T>() / T::from_f64(v.len() as f64));
        self.unary(Tensor::scalar(s), Op::Mean(self.id))
    }
}

/// Gradients produced by [`Tape::backward`].
///
/// Only leaves (parameters, [`Tape::leaf`] inputs) keep their gradients.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    bound: HashMap<ParamId, usize>,
}

impl<T: Float> Gradients<T> {
    pub fn wrt(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads[var.id].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.bound.get(&id).and_then(|&n| self.grads[n].as_ref())
    }

    /// Gradients of every bound parameter, in parameter order.
    pub fn params(&self) -> Vec<(ParamId, &Tensor<T>)> {
        let mut out: Vec<_> = self
            .bound
            .iter()
            .filter_map(|(&p, &n)| self.grads[n].as_ref().map(|g| (p, g)))
            .collect();
        out.sort_by_key(|(p, _)| *p);
        out
    }
}
