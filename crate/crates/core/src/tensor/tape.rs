use std::cell::{Cell, Ref, RefCell};
use std::rc::Rc;

use super::kernels::{self, Bcast, MatmulPlan};
use super::{lit, Scalar, Tensor};
use crate::error::{Error, Result};

pub type NodeId = usize;

/// Sparse row recombination: output row `i` is `Σ w · input[src]` over `rows[i]`.
/// Covers nearest and bilinear resampling of token maps.
#[derive(Debug, Clone, Default)]
pub struct RowMix<F> {
    pub in_rows: usize,
    pub rows: Vec<Vec<(usize, F)>>,
}

enum Op<F> {
    Leaf,
    Add(NodeId, NodeId, Bcast, Bcast),
    Sub(NodeId, NodeId, Bcast, Bcast),
    Mul(NodeId, NodeId, Bcast, Bcast),
    Scale(NodeId, F),
    MatMul(NodeId, NodeId, Box<MatmulPlan>),
    Permute(NodeId, Vec<usize>),
    Reshape(NodeId),
    Softmax(NodeId, usize),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        mean: Vec<F>,
        rstd: Vec<F>,
    },
    Gelu(NodeId),
    SmoothL1(NodeId, F),
    Sum(NodeId),
    Mean(NodeId),
    SumAxis(NodeId, usize),
    Gather(NodeId, Vec<usize>),
    Scatter(NodeId, NodeId, Vec<usize>),
    RowMix(NodeId, Rc<RowMix<F>>),
    Concat(Vec<NodeId>),
    CrossEntropy(NodeId, Vec<usize>, Vec<F>),
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Per-forward record of operations. Dropped after backward.
pub struct Tape<F> {
    nodes: RefCell<Vec<Node<F>>>,
    grads: RefCell<Vec<Option<Vec<F>>>>,
    recording: bool,
    attention_entries: Cell<u64>,
}

/// Handle to a value on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, F: Scalar> {
    tape: &'t Tape<F>,
    id: NodeId,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(Vec::new()),
            recording: true,
            attention_entries: Cell::new(0),
        }
    }

    /// A tape that records values only; nothing on it can be differentiated.
    pub fn no_grad() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor<F>, requires_grad: bool) -> Var<'_, F> {
        self.push(value, Op::Leaf, requires_grad && self.recording)
    }

    pub(crate) fn var(&self, id: NodeId) -> Var<'_, F> {
        Var { tape: self, id }
    }

    pub fn constant(&self, value: Tensor<F>) -> Var<'_, F> {
        self.leaf(value, false)
    }

    /// Attention score entries computed on this tape so far.
    pub fn attention_entries(&self) -> u64 {
        self.attention_entries.get()
    }

    pub(crate) fn count_attention(&self, entries: u64) {
        self.attention_entries
            .set(self.attention_entries.get() + entries);
    }

    /// Accumulated gradient of a node after [`Tape::backward`].
    pub fn grad(&self, v: Var<'_, F>) -> Option<Tensor<F>> {
        let grads = self.grads.borrow();
        let shape = self.nodes.borrow()[v.id].value.shape().to_vec();
        grads
            .get(v.id)
            .and_then(|g| g.clone())
            .map(|g| Tensor::new(shape, g).expect("grad shape"))
    }

    pub fn zero_grads(&self) {
        self.grads.borrow_mut().clear();
    }

    fn push(&self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var<'_, F> {
        let mut nodes = self.nodes.borrow_mut();
        let (op, requires_grad) = if self.recording && requires_grad {
            (op, true)
        } else {
            (Op::Leaf, false)
        };
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

    fn rg(&self, ids: &[NodeId]) -> bool {
        let nodes = self.nodes.borrow();
        self.recording && ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Reverse sweep from a scalar `loss`. Gradients accumulate across calls.
    pub fn backward(&self, loss: Var<'_, F>) -> Result<()> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::shape("backward", root.value.shape(), &[1]));
        }
        let mut local: Vec<Option<Vec<F>>> = (0..=loss.id).map(|_| None).collect();
        local[loss.id] = Some(vec![F::one()]);
        let mut stored = self.grads.borrow_mut();
        if stored.len() < nodes.len() {
            stored.resize(nodes.len(), None);
        }
        for id in (0..=loss.id).rev() {
            let Some(g) = local[id].take() else { continue };
            if !nodes[id].requires_grad {
                continue;
            }
            propagate(&nodes, id, &g, &mut local);
            match &mut stored[id] {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &x)| *a += x),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }
}

fn slot<'a, F: Scalar>(
    nodes: &[Node<F>],
    local: &'a mut [Option<Vec<F>>],
    id: NodeId,
) -> Option<&'a mut Vec<F>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let n = nodes[id].value.numel();
    Some(local[id].get_or_insert_with(|| vec![F::zero(); n]))
}

fn propagate<F: Scalar>(nodes: &[Node<F>], id: NodeId, g: &[F], local: &mut [Option<Vec<F>>]) {
    let node = &nodes[id];
    let val = |i: NodeId| nodes[i].value.data();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b, ma, mb) => {
            if let Some(da) = slot(nodes, local, *a) {
                kernels::reduce_into(ma, g, da);
            }
            if let Some(db) = slot(nodes, local, *b) {
                kernels::reduce_into(mb, g, db);
            }
        }
        Op::Sub(a, b, ma, mb) => {
            if let Some(da) = slot(nodes, local, *a) {
                kernels::reduce_into(ma, g, da);
            }
            if let Some(db) = slot(nodes, local, *b) {
                let neg: Vec<F> = g.iter().map(|&x| -x).collect();
                kernels::reduce_into(mb, &neg, db);
            }
        }
        Op::Mul(a, b, ma, mb) => {
            let (av, bv) = (val(*a), val(*b));
            if let Some(da) = slot(nodes, local, *a) {
                for (i, &gi) in g.iter().enumerate() {
                    da[ma.at(i)] += gi * bv[mb.at(i)];
                }
            }
            if let Some(db) = slot(nodes, local, *b) {
                for (i, &gi) in g.iter().enumerate() {
                    db[mb.at(i)] += gi * av[ma.at(i)];
                }
            }
        }
        Op::Scale(a, s) => {
            if let Some(da) = slot(nodes, local, *a) {
                da.iter_mut().zip(g).for_each(|(d, &x)| *d += x * *s);
            }
        }
        Op::MatMul(a, b, plan) => {
            if let Some(da) = slot(nodes, local, *a) {
                plan.grad_a(g, val(*b), da);
            }
            if let Some(db) = slot(nodes, local, *b) {
                plan.grad_b(g, val(*a), db);
            }
        }
        Op::Permute(a, perm) => {
            if let Some(da) = slot(nodes, local, *a) {
                let inv = kernels::inverse_perm(perm);
                let (_, back) = kernels::permute(node.value.shape(), g, &inv);
                da.iter_mut().zip(back).for_each(|(d, x)| *d += x);
            }
        }
        Op::Reshape(a) => {
            if let Some(da) = slot(nodes, local, *a) {
                da.iter_mut().zip(g).for_each(|(d, &x)| *d += x);
            }
        }
        Op::Softmax(a, axis) => {
            if let Some(da) = slot(nodes, local, *a) {
                kernels::softmax_backward(node.value.data(), g, node.value.shape(), *axis, da);
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            mean,
            rstd,
        } => {
            let xv = val(*x);
            let gv = val(*gain);
            let w = gv.len();
            let rows = xv.len() / w;
            let inv_w = F::one() / lit::<F>(w as f64);
            let xhat = |r: usize, j: usize| (xv[r * w + j] - mean[r]) * rstd[r];
            if let Some(dg) = slot(nodes, local, *gain) {
                for r in 0..rows {
                    for j in 0..w {
                        dg[j] += g[r * w + j] * xhat(r, j);
                    }
                }
            }
            if let Some(db) = slot(nodes, local, *bias) {
                for r in 0..rows {
                    for j in 0..w {
                        db[j] += g[r * w + j];
                    }
                }
            }
            if let Some(dx) = slot(nodes, local, *x) {
                for r in 0..rows {
                    let mut m1 = F::zero();
                    let mut m2 = F::zero();
                    for j in 0..w {
                        let gh = g[r * w + j] * gv[j];
                        m1 += gh;
                        m2 += gh * xhat(r, j);
                    }
                    m1 *= inv_w;
                    m2 *= inv_w;
                    for j in 0..w {
                        let gh = g[r * w + j] * gv[j];
                        dx[r * w + j] += rstd[r] * (gh - m1 - xhat(r, j) * m2);
                    }
                }
            }
        }
        Op::Gelu(a) => {
            let av = val(*a);
            if let Some(da) = slot(nodes, local, *a) {
                for i in 0..g.len() {
                    da[i] += g[i] * kernels::gelu_grad(av[i]);
                }
            }
        }
        Op::SmoothL1(a, beta) => {
            let av = val(*a);
            if let Some(da) = slot(nodes, local, *a) {
                for i in 0..g.len() {
                    da[i] += g[i] * kernels::smooth_l1_grad(av[i], *beta);
                }
            }
        }
        Op::Sum(a) => {
            if let Some(da) = slot(nodes, local, *a) {
                da.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::Mean(a) => {
            if let Some(da) = slot(nodes, local, *a) {
                let s = g[0] / lit::<F>(da.len() as f64);
                da.iter_mut().for_each(|d| *d += s);
            }
        }
        Op::SumAxis(a, axis) => {
            let shape = nodes[*a].value.shape().to_vec();
            if let Some(da) = slot(nodes, local, *a) {
                let (outer, len, inner) = kernels::axis_split(&shape, *axis);
                for o in 0..outer {
                    for j in 0..len {
                        for i in 0..inner {
                            da[(o * len + j) * inner + i] += g[o * inner + i];
                        }
                    }
                }
            }
        }
        Op::Gather(a, idx) => {
            if let Some(da) = slot(nodes, local, *a) {
                let w = g.len() / idx.len().max(1);
                for (i, &r) in idx.iter().enumerate() {
                    for j in 0..w {
                        da[r * w + j] += g[i * w + j];
                    }
                }
            }
        }
        Op::Scatter(base, src, idx) => {
            let w = nodes[*src].value.numel() / idx.len().max(1);
            if let Some(db) = slot(nodes, local, *base) {
                let mut masked = g.to_vec();
                for &r in idx {
                    masked[r * w..(r + 1) * w]
                        .iter_mut()
                        .for_each(|x| *x = F::zero());
                }
                db.iter_mut().zip(masked).for_each(|(d, x)| *d += x);
            }
            if let Some(ds) = slot(nodes, local, *src) {
                for (i, &r) in idx.iter().enumerate() {
                    for j in 0..w {
                        ds[i * w + j] += g[r * w + j];
                    }
                }
            }
        }
        Op::RowMix(a, mix) => {
            if let Some(da) = slot(nodes, local, *a) {
                let w = g.len() / mix.rows.len().max(1);
                for (i, row) in mix.rows.iter().enumerate() {
                    for &(src, wt) in row {
                        for j in 0..w {
                            da[src * w + j] += wt * g[i * w + j];
                        }
                    }
                }
            }
        }
        Op::Concat(parts) => {
            let mut off = 0;
            for &p in parts {
                let n = nodes[p].value.numel();
                if let Some(dp) = slot(nodes, local, p) {
                    dp.iter_mut()
                        .zip(&g[off..off + n])
                        .for_each(|(d, &x)| *d += x);
                }
                off += n;
            }
        }
        Op::CrossEntropy(a, labels, probs) => {
            if let Some(da) = slot(nodes, local, *a) {
                let n = labels.len();
                let c = probs.len() / n;
                let s = g[0] / lit::<F>(n as f64);
                for (r, &l) in labels.iter().enumerate() {
                    for j in 0..c {
                        let onehot = if j == l { F::one() } else { F::zero() };
                        da[r * c + j] += s * (probs[r * c + j] - onehot);
                    }
                }
            }
        }
    }
}

impl<'t, F: Scalar> Var<'t, F> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<F> {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor<F>> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn to_tensor(&self) -> Tensor<F> {
        self.value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn grad(&self) -> Option<Tensor<F>> {
        self.tape.grad(*self)
    }

    pub fn backward(&self) -> Result<()> {
        self.tape.backward(*self)
    }

    fn same_tape(&self, other: &Var<'t, F>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars belong to different tapes"
        );
    }

    fn binary(
        &self,
        other: Var<'t, F>,
        name: &'static str,
        f: impl Fn(F, F) -> F,
        make: impl FnOnce(NodeId, NodeId, Bcast, Bcast) -> Op<F>,
    ) -> Result<Var<'t, F>> {
        self.same_tape(&other);
        let (out, ma, mb) = {
            let a = self.value();
            let b = other.value();
            let shape = kernels::broadcast_shape(a.shape(), b.shape())
                .ok_or_else(|| Error::shape(name, a.shape(), b.shape()))?;
            let ma = Bcast::new(a.shape(), &shape);
            let mb = Bcast::new(b.shape(), &shape);
            let n: usize = shape.iter().product();
            let (ad, bd) = (a.data(), b.data());
            let data: Vec<F> = (0..n).map(|i| f(ad[ma.at(i)], bd[mb.at(i)])).collect();
            (Tensor::new(shape, data)?, ma, mb)
        };
        let rg = self.tape.rg(&[self.id, other.id]);
        Ok(self.tape.push(out, make(self.id, other.id, ma, mb), rg))
    }

    pub fn add(&self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        self.binary(other, "add", |a, b| a + b, Op::Add)
    }

    pub fn sub(&self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub)
    }

    pub fn mul(&self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul)
    }

    pub fn scale(&self, s: F) -> Var<'t, F> {
        let out = {
            let a = self.value();
            Tensor::new(
                a.shape().to_vec(),
                a.data().iter().map(|&x| x * s).collect(),
            )
            .expect("same shape")
        };
        let rg = self.tape.rg(&[self.id]);
        self.tape.push(out, Op::Scale(self.id, s), rg)
    }

    pub fn matmul(&self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        self.same_tape(&other);
        let (out, plan) = {
            let a = self.value();
            let b = other.value();
            let plan = MatmulPlan::new(a.shape(), b.shape())?;
            let data = plan.forward(a.data(), b.data());
            (Tensor::new(plan.out_shape.clone(), data)?, plan)
        };
        let rg = self.tape.rg(&[self.id, other.id]);
        Ok(self
            .tape
            .push(out, Op::MatMul(self.id, other.id, Box::new(plan)), rg))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Var<'t, F>> {
        let out = self.value().permute(perm)?;
        let rg = self.tape.rg(&[self.id]);
        Ok(self.tape.push(out, Op::Permute(self.id, perm.to_vec()), rg))
    }

    pub fn transpose(&self, d0: usize, d1: usize) -> Result<Var<'t, F>> {
        let nd = self.value().shape().len();
        if d0 >= nd || d1 >= nd {
            return Err(Error::shape("transpose", &self.shape(), &[d0, d1]));
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(d0, d1);
        self.permute(&perm)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, F>> {
        let out = self.value().clone().reshape(shape)?;
        let rg = self.tape.rg(&[self.id]);
        Ok(self.tape.push(out, Op::Reshape(self.id), rg))
    }

    pub fn softmax(&self, axis: usize) -> Result<Var<'t, F>> {
        let out = {
            let a = self.value();
            if axis >= a.shape().len() {
                return Err(Error::Invalid(format!(
                    "softmax axis {axis} for shape {:?}",
                    a.shape()
                )));
            }
            let y = kernels::softmax(a.data(), a.shape(), axis);
            Tensor::new(a.shape().to_vec(), y)?
        };
        let rg = self.tape.rg(&[self.id]);
        Ok(self.tape.push(out, Op::Softmax(self.id, axis), rg))
    }

    pub fn layernorm(&self, gain: Var<'t, F>, bias: Var<'t, F>, eps: F) -> Result<Var<'t, F>> {
        let (out, mean, rstd) = {
            let x = self.value();
            let gv = gain.value();
            let bv = bias.value();
            let w = *x.shape().last().expect("non-empty shape");
            if gv.numel() != w || bv.numel() != w {
                return Err(Error::shape("layernorm", x.shape(), gv.shape()));
            }
            let (y, mean, rstd) = kernels::layernorm(x.data(), w, gv.data(), bv.data(), eps);
            (Tensor::new(x.shape().to_vec(), y)?, mean, rstd)
        };
        let rg = self.tape.rg(&[self.id, gain.id, bias.id]);
        Ok(self.tape.push(
            out,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                mean,
                rstd,
            },
            rg,
        ))
    }

    fn unary(&self, f: impl Fn(F) -> F, op: Op<F>) -> Var<'t, F> {
        let out = {
            let a = self.value();
            Tensor::new(a.shape().to_vec(), a.data().iter().map(|&x| f(x)).collect())
                .expect("same shape")
        };
        let rg = self.tape.rg(&[self.id]);
        self.tape.push(out, op, rg)
    }

    pub fn gelu(&self) -> Var<'t, F> {
        self.unary(kernels::gelu, Op::Gelu(self.id))
    }

    /// Elementwise SmoothL1 of the values themselves (pass a difference).
    pub fn smooth_l1(&self, beta: F) -> Var<'t, F> {
        self.unary(|x| kernels::smooth_l1(x, beta), Op::SmoothL1(self.id, beta))
    }

    pub fn sum(&self) -> Var<'t, F> {
        let s = self.value().data().iter().copied().sum::<F>();
        let rg = self.tape.rg(&[self.id]);
        self.tape.push(Tensor::scalar(s), Op::Sum(self.id), rg)
    }

    pub fn mean(&self) -> Var<'t, F> {
        let m = {
            let v = self.value();
            v.data().iter().copied().sum::<F>() / lit::<F>(v.numel() as f64)
        };
        let rg = self.tape.rg(&[self.id]);
        self.tape.push(Tensor::scalar(m), Op::Mean(self.id), rg)
    }

    /// Sum along `axis`, dropping it.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t, F>> {
        let out = {
            let a = self.value();
            let shape = a.shape();
            if axis >= shape.len() {
                return Err(Error::shape("sum_axis", shape, &[axis]));
            }
            let (outer, len, inner) = kernels::axis_split(shape, axis);
            let mut data = vec![F::zero(); outer * inner];
            let d = a.data();
            for o in 0..outer {
                for j in 0..len {
                    for i in 0..inner {
                        data[o * inner + i] += d[(o * len + j) * inner + i];
                    }
                }
            }
            let mut s: Vec<usize> = shape.to_vec();
            s.remove(axis);
            if s.is_empty() {
                s.push(1);
            }
            Tensor::new(s, data)?
        };
        let rg = self.tape.rg(&[self.id]);
        Ok(self.tape.push(out, Op::SumAxis(self.id, axis), rg))
    }

    /// Rows `idx` along axis 0 (repeats allowed).
    pub fn gather(&self, idx: &[usize]) -> Result<Var<'t, F>> {
        if idx.is_empty() {
            return Err(Error::Invalid("gather with empty index list".into()));
        }
        let out = self.value().gather_rows(idx)?;
        let rg = self.tape.rg(&[self.id]);
        Ok(self.tape.push(out, Op::Gather(self.id, idx.to_vec()), rg))
    }

    /// Copy of `self` with rows `idx` replaced by the rows of `src`.
    pub fn scatter(&self, src: Var<'t, F>, idx: &[usize]) -> Result<Var<'t, F>> {
        self.same_tape(&src);
        let out = {
            let base = self.value();
            let s = src.value();
            let rows = base.shape()[0];
            let w = base.numel() / rows;
            if s.shape()[0] != idx.len() || s.numel() != idx.len() * w {
                return Err(Error::shape("scatter", base.shape(), s.shape()));
            }
            let mut seen = vec![false; rows];
            let mut data = base.data().to_vec();
            for (i, &r) in idx.iter().enumerate() {
                if r >= rows || seen[r] {
                    return Err(Error::Invalid(format!(
                        "scatter index {r} collides or is out of range"
                    )));
                }
                seen[r] = true;
                data[r * w..(r + 1) * w].copy_from_slice(&s.data()[i * w..(i + 1) * w]);
            }
            Tensor::new(base.shape().to_vec(), data)?
        };
        let rg = self.tape.rg(&[self.id, src.id]);
        Ok(self
            .tape
            .push(out, Op::Scatter(self.id, src.id, idx.to_vec()), rg))
    }

    pub fn row_mix(&self, mix: Rc<RowMix<F>>) -> Result<Var<'t, F>> {
        let out = {
            let a = self.value();
            let rows = a.shape()[0];
            if rows != mix.in_rows {
                return Err(Error::shape("row_mix", a.shape(), &[mix.in_rows]));
            }
            let w = a.numel() / rows;
            let d = a.data();
            let mut data = vec![F::zero(); mix.rows.len() * w];
            for (i, row) in mix.rows.iter().enumerate() {
                let dst = &mut data[i * w..(i + 1) * w];
                for &(src, wt) in row {
                    for (o, &x) in dst.iter_mut().zip(&d[src * w..(src + 1) * w]) {
                        *o += wt * x;
                    }
                }
            }
            let mut shape = a.shape().to_vec();
            shape[0] = mix.rows.len();
            Tensor::new(shape, data)?
        };
        let rg = self.tape.rg(&[self.id]);
        Ok(self.tape.push(out, Op::RowMix(self.id, mix), rg))
    }

    /// Concatenate along axis 0.
    pub fn concat(parts: &[Var<'t, F>]) -> Result<Var<'t, F>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Invalid("concat of nothing".into()))?;
        let tape = first.tape;
        let out = {
            let tail = first.shape()[1..].to_vec();
            let mut rows = 0;
            let mut data = Vec::new();
            for p in parts {
                first.same_tape(p);
                let v = p.value();
                if v.shape()[1..] != tail[..] {
                    return Err(Error::shape("concat", first.value().shape(), v.shape()));
                }
                rows += v.shape()[0];
                data.extend_from_slice(v.data());
            }
            let mut shape = vec![rows];
            shape.extend(tail);
            Tensor::new(shape, data)?
        };
        let ids: Vec<NodeId> = parts.iter().map(|p| p.id).collect();
        let rg = tape.rg(&ids);
        Ok(tape.push(out, Op::Concat(ids), rg))
    }

    /// Mean cross-entropy of `[N, C]` logits against class ids.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Var<'t, F>> {
        let (loss, probs) = {
            let a = self.value();
            let shape = a.shape();
            if shape.len() != 2 || shape[0] != labels.len() {
                return Err(Error::shape("cross_entropy", shape, &[labels.len()]));
            }
            let c = shape[1];
            if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
                return Err(Error::Invalid(format!("label {bad} outside {c} classes")));
            }
            let probs = kernels::softmax(a.data(), shape, 1);
            let d = a.data();
            let mut total = F::zero();
            for (r, &l) in labels.iter().enumerate() {
                let row = &d[r * c..(r + 1) * c];
                let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
                let lse = mx + row.iter().map(|&x| (x - mx).exp()).sum::<F>().ln();
                total += lse - row[l];
            }
            (total / lit::<F>(labels.len() as f64), probs)
        };
        let rg = self.tape.rg(&[self.id]);
        Ok(self.tape.push(
            Tensor::scalar(loss),
            Op::CrossEntropy(self.id, labels.to_vec(), probs),
            rg,
        ))
    }
}
