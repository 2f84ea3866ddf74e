use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::shape::{broadcast_shapes, broadcast_strides, for_each_broadcast, numel, strides};
use super::{invalid, Result, Tensor, TensorError};
use crate::scalar::Scalar;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MatMul(usize, usize),
    Reshape(usize),
    Permute(usize, Vec<usize>),
    Concat(Vec<usize>, usize),
    Slice {
        x: usize,
        axis: usize,
        start: usize,
    },
    Pad {
        x: usize,
        axis: usize,
        before: usize,
    },
    Gather {
        x: usize,
        axis: usize,
        index: Vec<usize>,
    },
    Softmax(usize),
    Relu(usize),
    Tanh(usize),
    Sigmoid(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<S>,
        inv_std: Vec<S>,
    },
    Scale(usize, S),
    Sum(usize),
    Mean(usize),
    SumAxis {
        x: usize,
        axis: usize,
    },
}

impl<S> Op<S> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::MatMul(..) => "matmul",
            Op::Reshape(..) => "reshape",
            Op::Permute(..) => "permute",
            Op::Concat(..) => "concat",
            Op::Slice { .. } => "slice",
            Op::Pad { .. } => "pad",
            Op::Gather { .. } => "gather",
            Op::Softmax(..) => "softmax",
            Op::Relu(..) => "relu",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Scale(..) => "scale",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumAxis { .. } => "sum_axis",
        }
    }

    fn operands(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Concat(xs, _) => xs.clone(),
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Reshape(x)
            | Op::Permute(x, _)
            | Op::Softmax(x)
            | Op::Relu(x)
            | Op::Tanh(x)
            | Op::Sigmoid(x)
            | Op::Scale(x, _)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Slice { x, .. }
            | Op::Pad { x, .. }
            | Op::Gather { x, .. }
            | Op::SumAxis { x, .. } => vec![*x],
        }
    }
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
    grad: Option<Tensor<S>>,
}

/// Tape of executed primitives. Nodes are appended in execution order, so every
/// operand precedes its result and backward is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    checked: bool,
    bindings: HashMap<(u64, usize, bool), Var>,
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            checked: false,
            bindings: HashMap::new(),
        }
    }

    /// A graph that rejects any primitive whose operands contain NaN or infinity.
    pub fn checked() -> Self {
        Self {
            checked: true,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Result<Var> {
        if self.checked && !value.is_finite() {
            return Err(TensorError::NonFinite { op: "leaf" });
        }
        Ok(self.push_raw(value, Op::Leaf, requires_grad))
    }

    /// Leaf that takes part in differentiation.
    pub fn variable(&mut self, value: Tensor<S>) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Binds a trainable parameter as a gradient-tracking leaf. Repeated binds of
    /// the same parameter return the same node so contributions accumulate.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        self.bind(store, id, true)
    }

    /// Binds a parameter as a constant; no gradient is recorded for it.
    pub fn frozen(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        self.bind(store, id, false)
    }

    fn bind(&mut self, store: &ParamStore<S>, id: ParamId, trainable: bool) -> Var {
        let key = (store.uid(), id.index(), trainable);
        if let Some(&v) = self.bindings.get(&key) {
            return v;
        }
        let v = self.push_raw(store.value(id).clone(), Op::Leaf, trainable);
        self.bindings.insert(key, v);
        v
    }

    /// Adds the gradients of every trainable binding of `store` into the store's accumulators.
    pub fn write_grads(&self, store: &mut ParamStore<S>) {
        for (&(uid, idx, trainable), v) in &self.bindings {
            if uid != store.uid() || !trainable {
                continue;
            }
            if let Some(g) = &self.nodes[v.0].grad {
                store.accumulate_grad(ParamId::from_index(idx), g);
            }
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<S>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    pub fn operands(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.operands().into_iter().map(Var).collect()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push_raw(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>) -> Var {
        let rg = op.operands().iter().any(|&i| self.nodes[i].requires_grad);
        self.push_raw(value, op, rg)
    }

    fn check(&self, op: &'static str, vars: &[Var]) -> Result<()> {
        if self.checked && vars.iter().any(|v| !self.nodes[v.0].value.is_finite()) {
            return Err(TensorError::NonFinite { op });
        }
        Ok(())
    }

    fn val(&self, v: Var) -> &[S] {
        self.nodes[v.0].value.data()
    }

    // ---- elementwise binary ----

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(S, S) -> S) -> Result<Tensor<S>> {
        self.check(name, &[a, b])?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out = broadcast_shapes(&sa, &sb).ok_or(TensorError::ShapeMismatch {
            op: name,
            lhs: sa.clone(),
            rhs: sb.clone(),
        })?;
        let (va, vb) = (self.val(a), self.val(b));
        let data = if sa == sb {
            va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let mut data = vec![S::zero(); numel(&out)];
            let (ta, tb) = (broadcast_strides(&sa, &out), broadcast_strides(&sb, &out));
            for_each_broadcast(&out, &ta, &tb, |o, ia, ib| data[o] = f(va[ia], vb[ib]));
            data
        };
        Tensor::new(&out, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a.0, b.0)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a.0, b.0)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a.0, b.0)))
    }

    // ---- matmul ----

    /// Matrix product over the last two axes, broadcasting leading (batch) axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check("matmul", &[a, b])?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (n, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, m) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(mismatch());
        }
        let plan = MatmulPlan::new(&sa[..sa.len() - 2], &sb[..sb.len() - 2], n, k, m).ok_or_else(mismatch)?;
        let mut out = vec![S::zero(); numel(&plan.batch) * n * m];
        let (va, vb) = (self.val(a), self.val(b));
        plan.for_each(|oc, oa, ob| {
            let c = &mut out[oc..oc + n * m];
            let am = &va[oa..oa + n * k];
            let bm = &vb[ob..ob + k * m];
            for i in 0..n {
                let crow = &mut c[i * m..(i + 1) * m];
                for p in 0..k {
                    let x = am[i * k + p];
                    if x == S::zero() {
                        continue;
                    }
                    let brow = &bm[p * m..(p + 1) * m];
                    for (cv, &bv) in crow.iter_mut().zip(brow) {
                        *cv += x * bv;
                    }
                }
            }
        });
        let mut shape = plan.batch.clone();
        shape.extend([n, m]);
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::MatMul(a.0, b.0)))
    }

    // ---- shape ops ----

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(x.0)))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let mut seen = vec![false; s.len()];
        if axes.len() != s.len() || axes.iter().any(|&a| a >= s.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(invalid("permute", format!("axes {axes:?} are not a permutation for shape {s:?}")));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| s[a]).collect();
        let st = strides(&s);
        let ps: Vec<usize> = axes.iter().map(|&a| st[a]).collect();
        let zero = vec![0; s.len()];
        let src = self.val(x);
        let mut data = vec![S::zero(); src.len()];
        for_each_broadcast(&out_shape, &ps, &zero, |o, i, _| data[o] = src[i]);
        let t = Tensor::new(&out_shape, data)?;
        Ok(self.push(t, Op::Permute(x.0, axes.to_vec())))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| invalid("concat", "no operands"))?;
        self.check("concat", xs)?;
        let s0 = self.shape(*first).to_vec();
        if axis >= s0.len() {
            return Err(invalid("concat", format!("axis {axis} out of range for {s0:?}")));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let ok = s.len() == s0.len() && s.iter().zip(&s0).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: s0.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer = numel(&s0[..axis]);
        let inner = numel(&s0[axis + 1..]);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let chunk = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.val(v)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = s0;
        shape[axis] = total;
        let t = Tensor::new(&shape, data)?;
        Ok(self.push(t, Op::Concat(xs.iter().map(|v| v.0).collect(), axis)))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(invalid("slice", format!("[{start}, {}) on axis {axis} of {s:?}", start + len)));
        }
        let outer = numel(&s[..axis]);
        let inner = numel(&s[axis + 1..]);
        let src = self.val(x);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let t = Tensor::new(&shape, data)?;
        Ok(self.push(t, Op::Slice { x: x.0, axis, start }))
    }

    /// Zero padding along one axis.
    pub fn pad(&mut self, x: Var, axis: usize, before: usize, after: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(invalid("pad", format!("axis {axis} out of range for {s:?}")));
        }
        let outer = numel(&s[..axis]);
        let inner = numel(&s[axis + 1..]);
        let n = s[axis];
        let m = n + before + after;
        let src = self.val(x);
        let mut data = vec![S::zero(); outer * m * inner];
        for o in 0..outer {
            let dst = (o * m + before) * inner;
            data[dst..dst + n * inner].copy_from_slice(&src[o * n * inner..(o + 1) * n * inner]);
        }
        let mut shape = s;
        shape[axis] = m;
        let t = Tensor::new(&shape, data)?;
        Ok(self.push(t, Op::Pad { x: x.0, axis, before }))
    }

    /// Selects positions `index` along `axis`; repeated indices are allowed.
    pub fn gather(&mut self, x: Var, axis: usize, index: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || index.is_empty() || index.iter().any(|&i| i >= s[axis]) {
            return Err(invalid("gather", format!("index {index:?} on axis {axis} of {s:?}")));
        }
        let outer = numel(&s[..axis]);
        let inner = numel(&s[axis + 1..]);
        let src = self.val(x);
        let mut data = Vec::with_capacity(outer * index.len() * inner);
        for o in 0..outer {
            for &k in index {
                let base = (o * s[axis] + k) * inner;
                data.extend_from_slice(&src[base..base + inner]);
            }
        }
        let mut shape = s;
        shape[axis] = index.len();
        let t = Tensor::new(&shape, data)?;
        Ok(self.push(
            t,
            Op::Gather {
                x: x.0,
                axis,
                index: index.to_vec(),
            },
        ))
    }

    // ---- nonlinearities ----

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(S) -> S) -> Result<Tensor<S>> {
        self.check(name, &[x])?;
        Ok(self.value(x).map(f))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.unary("relu", x, |v| v.max(S::zero()))?;
        Ok(self.push(t, Op::Relu(x.0)))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let t = self.unary("tanh", x, |v| v.tanh())?;
        Ok(self.push(t, Op::Tanh(x.0)))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let t = self.unary("sigmoid", x, sigmoid)?;
        Ok(self.push(t, Op::Sigmoid(x.0)))
    }

    pub fn scale(&mut self, x: Var, c: S) -> Result<Var> {
        let t = self.unary("scale", x, |v| v * c)?;
        Ok(self.push(t, Op::Scale(x.0, c)))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.check("softmax", &[x])?;
        let src = self.value(x);
        let d = *src.shape().last().expect("tensor rank >= 1");
        let mut data = src.data().to_vec();
        for row in data.chunks_mut(d) {
            let mx = row.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
            let mut z = S::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let t = Tensor::new(src.shape(), data)?;
        Ok(self.push(t, Op::Softmax(x.0)))
    }

    /// Layer normalization over the last axis with learnable `gain` and `bias` of that extent.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: S) -> Result<Var> {
        self.check("layer_norm", &[x, gain, bias])?;
        let s = self.shape(x).to_vec();
        let d = *s.last().expect("tensor rank >= 1");
        for p in [gain, bias] {
            if self.shape(p) != [d] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: s.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let (g, b) = (self.val(gain), self.val(bias));
        let src = self.val(x);
        let rows = src.len() / d;
        let dn = S::of(d as f64);
        let mut xhat = vec![S::zero(); src.len()];
        let mut inv_std = vec![S::zero(); rows];
        let mut out = vec![S::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<S>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / dn;
            let is = S::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(&s, out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                xhat,
                inv_std,
            },
        ))
    }

    // ---- reductions ----

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check("sum", &[x])?;
        let s = self.val(x).iter().copied().sum::<S>();
        Ok(self.push(Tensor::scalar(s), Op::Sum(x.0)))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.check("mean", &[x])?;
        let v = self.val(x);
        let s = v.iter().copied().sum::<S>() / S::of(v.len() as f64);
        Ok(self.push(Tensor::scalar(s), Op::Mean(x.0)))
    }

    /// Sums out `axis`, dropping it from the shape (rank-1 inputs give shape `[1]`).
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check("sum_axis", &[x])?;
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(invalid("sum_axis", format!("axis {axis} out of range for {s:?}")));
        }
        let outer = numel(&s[..axis]);
        let inner = numel(&s[axis + 1..]);
        let n = s[axis];
        let src = self.val(x);
        let mut data = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let base = (o * n + k) * inner;
                for i in 0..inner {
                    data[o * inner + i] += src[base + i];
                }
            }
        }
        let mut shape: Vec<usize> = s.iter().enumerate().filter(|&(i, _)| i != axis).map(|(_, &d)| d).collect();
        if shape.is_empty() {
            shape.push(1);
        }
        let t = Tensor::new(&shape, data)?;
        Ok(self.push(t, Op::SumAxis { x: x.0, axis }))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| invalid("mean_axis", format!("axis {axis} out of range")))?;
        let s = self.sum_axis(x, axis)?;
        self.scale(s, S::one() / S::of(n as f64))
    }

    // ---- backward ----

    /// Accumulates d(root)/d(leaf) into every gradient-tracking leaf that reaches `root`.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let rv = &self.nodes[root.0].value;
        if rv.numel() != 1 {
            return Err(TensorError::NonScalarRoot(rv.shape().to_vec()));
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(rv.shape(), S::one()));
        let mut leaf_grads = Vec::new();
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                leaf_grads.push((i, g));
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        for (i, g) in leaf_grads {
            match &mut self.nodes[i].grad {
                Some(acc) => acc.add_assign_from(&g),
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn propagate(&self, i: usize, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        let node = &self.nodes[i];
        let out_shape = node.value.shape();
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -S::one() } else { S::one() };
                if self.wants(*a) {
                    let ga = reduce_broadcast(gd, out_shape, self.nodes[*a].value.shape(), |_, v| v);
                    acc(grads, *a, ga);
                }
                if self.wants(*b) {
                    let gb = reduce_broadcast(gd, out_shape, self.nodes[*b].value.shape(), |_, v| v * sign);
                    acc(grads, *b, gb);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let sa = broadcast_strides(ta.shape(), out_shape);
                let sb = broadcast_strides(tb.shape(), out_shape);
                let (va, vb) = (ta.data(), tb.data());
                if self.wants(*a) {
                    let mut ga = Tensor::zeros(ta.shape());
                    let d = ga.data_mut();
                    for_each_broadcast(out_shape, &sa, &sb, |o, ia, ib| d[ia] += gd[o] * vb[ib]);
                    acc(grads, *a, ga);
                }
                if self.wants(*b) {
                    let mut gb = Tensor::zeros(tb.shape());
                    let d = gb.data_mut();
                    for_each_broadcast(out_shape, &sa, &sb, |o, ia, ib| d[ib] += gd[o] * va[ia]);
                    acc(grads, *b, gb);
                }
            }
            Op::MatMul(a, b) => self.matmul_backward(*a, *b, gd, grads),
            Op::Reshape(x) => {
                let t = Tensor::new(self.nodes[*x].value.shape(), gd.to_vec()).expect("reshape grad");
                acc(grads, *x, t);
            }
            Op::Permute(x, axes) => {
                let s = self.nodes[*x].value.shape();
                let st = strides(s);
                let ps: Vec<usize> = axes.iter().map(|&a| st[a]).collect();
                let zero = vec![0; s.len()];
                let mut gx = Tensor::zeros(s);
                let d = gx.data_mut();
                for_each_broadcast(out_shape, &ps, &zero, |o, ix, _| d[ix] += gd[o]);
                acc(grads, *x, gx);
            }
            Op::Concat(xs, axis) => {
                let outer = numel(&out_shape[..*axis]);
                let inner = numel(&out_shape[axis + 1..]);
                let total = out_shape[*axis];
                let mut offset = 0;
                for &x in xs {
                    let s = self.nodes[x].value.shape();
                    let len = s[*axis];
                    if self.wants(x) {
                        let mut gx = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            gx.extend_from_slice(&gd[base..base + len * inner]);
                        }
                        acc(grads, x, Tensor::new(s, gx).expect("concat grad"));
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let s = self.nodes[*x].value.shape();
                let (outer, inner) = (numel(&s[..*axis]), numel(&s[axis + 1..]));
                let (n, len) = (s[*axis], out_shape[*axis]);
                let mut gx = Tensor::zeros(s);
                let d = gx.data_mut();
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    let src = o * len * inner;
                    d[dst..dst + len * inner].copy_from_slice(&gd[src..src + len * inner]);
                }
                acc(grads, *x, gx);
            }
            Op::Pad { x, axis, before } => {
                let s = self.nodes[*x].value.shape();
                let (outer, inner) = (numel(&s[..*axis]), numel(&s[axis + 1..]));
                let (n, m) = (s[*axis], out_shape[*axis]);
                let mut gx = Vec::with_capacity(numel(s));
                for o in 0..outer {
                    let src = (o * m + before) * inner;
                    gx.extend_from_slice(&gd[src..src + n * inner]);
                }
                acc(grads, *x, Tensor::new(s, gx).expect("pad grad"));
            }
            Op::Gather { x, axis, index } => {
                let s = self.nodes[*x].value.shape();
                let (outer, inner) = (numel(&s[..*axis]), numel(&s[axis + 1..]));
                let n = s[*axis];
                let mut gx = Tensor::zeros(s);
                let d = gx.data_mut();
                for o in 0..outer {
                    for (j, &k) in index.iter().enumerate() {
                        let dst = (o * n + k) * inner;
                        let src = (o * index.len() + j) * inner;
                        for t in 0..inner {
                            d[dst + t] += gd[src + t];
                        }
                    }
                }
                acc(grads, *x, gx);
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let d = *out_shape.last().expect("rank >= 1");
                let mut gx = vec![S::zero(); y.len()];
                for r in 0..y.len() / d {
                    let (yr, gr) = (&y[r * d..(r + 1) * d], &gd[r * d..(r + 1) * d]);
                    let dot: S = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        gx[r * d + j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(grads, *x, Tensor::new(out_shape, gx).expect("softmax grad"));
            }
            Op::Relu(x) => {
                let xv = self.nodes[*x].value.data();
                let gx = xv
                    .iter()
                    .zip(gd)
                    .map(|(&v, &g)| if v > S::zero() { g } else { S::zero() })
                    .collect();
                acc(grads, *x, Tensor::new(out_shape, gx).expect("relu grad"));
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                let gx = y.iter().zip(gd).map(|(&v, &g)| g * (S::one() - v * v)).collect();
                acc(grads, *x, Tensor::new(out_shape, gx).expect("tanh grad"));
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                let gx = y.iter().zip(gd).map(|(&v, &g)| g * v * (S::one() - v)).collect();
                acc(grads, *x, Tensor::new(out_shape, gx).expect("sigmoid grad"));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = *out_shape.last().expect("rank >= 1");
                let rows = gd.len() / d;
                let gv = self.nodes[*gain].value.data();
                if self.wants(*x) {
                    let dn = S::of(d as f64);
                    let mut gx = vec![S::zero(); gd.len()];
                    let mut dxhat = vec![S::zero(); d];
                    for r in 0..rows {
                        let (gr, hr) = (&gd[r * d..(r + 1) * d], &xhat[r * d..(r + 1) * d]);
                        for j in 0..d {
                            dxhat[j] = gr[j] * gv[j];
                        }
                        let m1 = dxhat.iter().copied().sum::<S>() / dn;
                        let m2 = dxhat.iter().zip(hr).map(|(&a, &b)| a * b).sum::<S>() / dn;
                        for j in 0..d {
                            gx[r * d + j] = inv_std[r] * (dxhat[j] - m1 - hr[j] * m2);
                        }
                    }
                    acc(grads, *x, Tensor::new(out_shape, gx).expect("layer_norm grad"));
                }
                if self.wants(*gain) {
                    let mut gg = vec![S::zero(); d];
                    for (k, (&g, &h)) in gd.iter().zip(xhat).enumerate() {
                        gg[k % d] += g * h;
                    }
                    acc(grads, *gain, Tensor::new(&[d], gg).expect("gain grad"));
                }
                if self.wants(*bias) {
                    let mut gb = vec![S::zero(); d];
                    for (k, &g) in gd.iter().enumerate() {
                        gb[k % d] += g;
                    }
                    acc(grads, *bias, Tensor::new(&[d], gb).expect("bias grad"));
                }
            }
            Op::Scale(x, c) => {
                let gx = gd.iter().map(|&g| g * *c).collect();
                acc(grads, *x, Tensor::new(out_shape, gx).expect("scale grad"));
            }
            Op::Sum(x) | Op::Mean(x) => {
                let s = self.nodes[*x].value.shape();
                let mut v = gd[0];
                if matches!(node.op, Op::Mean(_)) {
                    v /= S::of(numel(s) as f64);
                }
                acc(grads, *x, Tensor::full(s, v));
            }
            Op::SumAxis { x, axis } => {
                let s = self.nodes[*x].value.shape();
                let (outer, inner) = (numel(&s[..*axis]), numel(&s[axis + 1..]));
                let n = s[*axis];
                let mut gx = Vec::with_capacity(numel(s));
                for o in 0..outer {
                    for _ in 0..n {
                        gx.extend_from_slice(&gd[o * inner..(o + 1) * inner]);
                    }
                }
                acc(grads, *x, Tensor::new(s, gx).expect("sum_axis grad"));
            }
        }
    }

    fn matmul_backward(&self, a: usize, b: usize, gd: &[S], grads: &mut [Option<Tensor<S>>]) {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        let (sa, sb) = (ta.shape(), tb.shape());
        let (n, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let m = sb[sb.len() - 1];
        let plan = MatmulPlan::new(&sa[..sa.len() - 2], &sb[..sb.len() - 2], n, k, m).expect("validated in forward");
        let (va, vb) = (ta.data(), tb.data());
        if self.wants(a) {
            let mut ga = Tensor::zeros(sa);
            let d = ga.data_mut();
            plan.for_each(|oc, oa, ob| {
                for i in 0..n {
                    let grow = &gd[oc + i * m..oc + (i + 1) * m];
                    for p in 0..k {
                        let brow = &vb[ob + p * m..ob + (p + 1) * m];
                        d[oa + i * k + p] += grow.iter().zip(brow).map(|(&x, &y)| x * y).sum::<S>();
                    }
                }
            });
            acc(grads, a, ga);
        }
        if self.wants(b) {
            let mut gb = Tensor::zeros(sb);
            let d = gb.data_mut();
            plan.for_each(|oc, oa, ob| {
                for i in 0..n {
                    let grow = &gd[oc + i * m..oc + (i + 1) * m];
                    for p in 0..k {
                        let x = va[oa + i * k + p];
                        if x == S::zero() {
                            continue;
                        }
                        let drow = &mut d[ob + p * m..ob + (p + 1) * m];
                        for (dv, &gv) in drow.iter_mut().zip(grow) {
                            *dv += x * gv;
                        }
                    }
                }
            });
            acc(grads, b, gb);
        }
    }
}

#[inline]
fn sigmoid<S: Scalar>(v: S) -> S {
    if v >= S::zero() {
        S::one() / (S::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (S::one() + e)
    }
}

fn acc<S: Scalar>(grads: &mut [Option<Tensor<S>>], i: usize, g: Tensor<S>) {
    match &mut grads[i] {
        Some(t) => t.add_assign_from(&g),
        slot => *slot = Some(g),
    }
}

/// Sums an output-shaped gradient back down to a broadcast operand's shape.
fn reduce_broadcast<S: Scalar>(gd: &[S], out: &[usize], src: &[usize], f: impl Fn(usize, S) -> S) -> Tensor<S> {
    if out == src {
        return Tensor::new(src, gd.iter().enumerate().map(|(i, &v)| f(i, v)).collect()).expect("same shape");
    }
    let mut t = Tensor::zeros(src);
    let d = t.data_mut();
    let ss = broadcast_strides(src, out);
    let zero = vec![0; out.len()];
    for_each_broadcast(out, &ss, &zero, |o, i, _| d[i] += f(o, gd[o]));
    t
}

/// Offsets of each (output, lhs, rhs) matrix block for a batched matmul.
struct MatmulPlan {
    batch: Vec<usize>,
    sa: Vec<usize>,
    sb: Vec<usize>,
    n: usize,
    k: usize,
    m: usize,
}

impl MatmulPlan {
    fn new(ba: &[usize], bb: &[usize], n: usize, k: usize, m: usize) -> Option<Self> {
        let batch = broadcast_shapes(ba, bb)?;
        let sa = broadcast_strides(ba, &batch);
        let sb = broadcast_strides(bb, &batch);
        Some(Self { batch, sa, sb, n, k, m })
    }

    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (nk, km, nm) = (self.n * self.k, self.k * self.m, self.n * self.m);
        for_each_broadcast(&self.batch, &self.sa, &self.sb, |o, a, b| f(o * nm, a * nk, b * km));
    }
}
