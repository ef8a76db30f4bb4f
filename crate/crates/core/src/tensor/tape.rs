use std::cell::RefCell;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{
    self, apply_axis_map, apply_axis_map_t, broadcast_shape, broadcast_strides, for_each_broadcast,
    AxisMap, ConvGeom,
};
use super::{Real, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`]. Cheap to copy; only valid on
/// the tape that produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    id: usize,
    tape: u64,
}

impl Var {
    pub fn node_id(&self) -> usize {
        self.id
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Neg,
    Exp,
    Ln,
    Tanh,
    Recip,
    Abs,
    Sqrt,
    Sigmoid,
    Silu,
    Relu,
    Elu,
    /// `1 / (1 - u)`, defined only for `|u| < 1`.
    Geometric,
}

#[derive(Clone, Copy, Debug)]
enum ScalarKind {
    Add,
    Mul,
    Pow,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary { kind: BinaryKind, a: usize, b: usize },
    Scalar { kind: ScalarKind, a: usize, s: f64 },
    Unary { kind: UnaryKind, a: usize },
    MatMul { a: usize, b: usize },
    Conv2d { x: usize, w: usize, geom: ConvGeom },
    Sum { a: usize },
    SumAxis { a: usize, axis: usize },
    Softmax { a: usize },
    Reshape { a: usize },
    Permute { a: usize, perm: Vec<usize> },
    Concat { parts: Vec<usize>, axis: usize },
    Slice { a: usize, axis: usize, start: usize },
    Inverse { a: usize },
    AxisMap { a: usize, axis: usize, map: Rc<AxisMap> },
    Norm2 { a: usize },
    NormalizeRows { a: usize, eps: f64 },
}

struct Node<T> {
    shape: Vec<usize>,
    value: Rc<Vec<T>>,
    op: Op,
    needs_grad: bool,
}

/// Define-by-run computation record. Nodes are appended in evaluation order,
/// which is a topological order, and are never mutated once recorded.
pub struct Tape<T: Real = f32> {
    id: u64,
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T: Real> {
    tape: u64,
    shapes: Vec<Vec<usize>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss with respect to `v`, or `None` when `v` does
    /// not influence the loss (or does not require gradients).
    pub fn get(&self, v: Var) -> Option<Tensor<T>> {
        if v.tape != self.tape || v.id >= self.grads.len() {
            return None;
        }
        self.grads[v.id]
            .as_ref()
            .map(|g| Tensor::new(&self.shapes[v.id], g.clone()).expect("gradient shape"))
    }

    /// Like [`get`](Self::get) but returns zeros for unreached variables.
    pub fn get_or_zeros(&self, v: Var) -> Tensor<T> {
        self.get(v).unwrap_or_else(|| Tensor::zeros(&self.shapes[v.id]))
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed), nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Whether `v` was recorded on this tape.
    pub fn owns(&self, v: Var) -> bool {
        v.tape == self.id && v.id < self.len()
    }

    fn check(&self, v: Var) -> Result<()> {
        if self.owns(v) {
            Ok(())
        } else {
            Err(Error::contract(format!("variable {} belongs to a different tape", v.id)))
        }
    }

    fn push(&self, shape: Vec<usize>, value: Vec<T>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { shape, value: Rc::new(value), op, needs_grad });
        Var { id: nodes.len() - 1, tape: self.id }
    }

    fn get(&self, v: Var) -> Result<(Vec<usize>, Rc<Vec<T>>, bool)> {
        self.check(v)?;
        let nodes = self.nodes.borrow();
        let n = &nodes[v.id];
        Ok((n.shape.clone(), Rc::clone(&n.value), n.needs_grad))
    }

    /// Records a differentiable input.
    pub fn leaf(&self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, true)
    }

    /// Records an input that never receives gradients.
    pub fn constant(&self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, false)
    }

    pub fn scalar_const(&self, v: f64) -> Var {
        self.constant(Tensor::scalar(T::lit(v)))
    }

    /// Copy of `v` cut off from the graph.
    pub fn detach(&self, v: Var) -> Result<Var> {
        let (shape, value, _) = self.get(v)?;
        Ok(self.push(shape, (*value).clone(), Op::Leaf, false))
    }

    pub fn value(&self, v: Var) -> Tensor<T> {
        let nodes = self.nodes.borrow();
        assert!(v.tape == self.id, "variable from a different tape");
        let n = &nodes[v.id];
        Tensor::new(&n.shape, (*n.value).clone()).expect("node shape")
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        assert!(v.tape == self.id, "variable from a different tape");
        self.nodes.borrow()[v.id].shape.clone()
    }

    /// The single element of a one-element variable.
    pub fn item(&self, v: Var) -> T {
        let nodes = self.nodes.borrow();
        assert!(v.tape == self.id, "variable from a different tape");
        let n = &nodes[v.id];
        assert_eq!(n.value.len(), 1, "item() on a non-scalar of shape {:?}", n.shape);
        n.value[0]
    }

    // ---------------------------------------------------------------- elementwise

    pub fn binary(&self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (sa, va, ga) = self.get(a)?;
        let (sb, vb, gb) = self.get(b)?;
        let out = broadcast_shape(&sa, &sb)?;
        let f = |x: T, y: T| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
            BinaryKind::Pow => x.powf(y),
        };
        let data: Vec<T> = if sa == sb {
            va.iter().zip(vb.iter()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let mut d = vec![T::zero(); numel(&out)];
            let (ta, tb) = (broadcast_strides(&sa, &out), broadcast_strides(&sb, &out));
            for_each_broadcast(&out, &ta, &tb, |o, i, j| d[o] = f(va[i], vb[j]));
            d
        };
        Ok(self.push(out, data, Op::Binary { kind, a: a.id, b: b.id }, ga || gb))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }
    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }
    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }
    pub fn pow(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Pow, a, b)
    }

    fn scalar_op(&self, kind: ScalarKind, a: Var, s: f64) -> Result<Var> {
        let (sa, va, ga) = self.get(a)?;
        let st = T::lit(s);
        let data = va
            .iter()
            .map(|&x| match kind {
                ScalarKind::Add => x + st,
                ScalarKind::Mul => x * st,
                ScalarKind::Pow => x.powf(st),
            })
            .collect();
        Ok(self.push(sa, data, Op::Scalar { kind, a: a.id, s }, ga))
    }

    pub fn add_scalar(&self, a: Var, s: f64) -> Result<Var> {
        self.scalar_op(ScalarKind::Add, a, s)
    }
    pub fn mul_scalar(&self, a: Var, s: f64) -> Result<Var> {
        self.scalar_op(ScalarKind::Mul, a, s)
    }
    pub fn pow_scalar(&self, a: Var, p: f64) -> Result<Var> {
        self.scalar_op(ScalarKind::Pow, a, p)
    }

    pub fn unary(&self, kind: UnaryKind, a: Var) -> Result<Var> {
        let (sa, va, ga) = self.get(a)?;
        if kind == UnaryKind::Geometric {
            if let Some(bad) = va.iter().find(|x| x.abs() >= T::one() || !x.is_finite()) {
                return Err(Error::Domain(format!(
                    "geometric series diverges at |u| = {} (requires |u| < 1)",
                    bad.abs()
                )));
            }
        }
        let data = va.iter().map(|&x| unary_fwd(kind, x)).collect();
        Ok(self.push(sa, data, Op::Unary { kind, a: a.id }, ga))
    }

    pub fn neg(&self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Neg, a)
    }
    pub fn exp(&self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, a)
    }
    pub fn ln(&self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Ln, a)
    }
    pub fn tanh(&self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Tanh, a)
    }
    pub fn recip(&self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Recip, a)
    }
    pub fn abs(&self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Abs, a)
    }
    pub fn sqrt(&self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Sqrt, a)
    }
    pub fn sigmoid(&self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Sigmoid, a)
    }
    pub fn silu(&self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Silu, a)
    }
    pub fn relu(&self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Relu, a)
    }
    pub fn elu(&self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Elu, a)
    }

    // ---------------------------------------------------------------- linear algebra

    /// Batched matrix product `[.., m, k] · [.., k, n]` with broadcast batch dims.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (sa, va, ga) = self.get(a)?;
        let (sb, vb, gb) = self.get(b)?;
        let p = MatmulPlan::new(&sa, &sb)?;
        let mut out = vec![T::zero(); numel(&p.out_shape)];
        p.for_each(|o, ia, ib| {
            kernels::matmul_acc(
                &va[ia * p.m * p.k..(ia + 1) * p.m * p.k],
                &vb[ib * p.k * p.n..(ib + 1) * p.k * p.n],
                &mut out[o * p.m * p.n..(o + 1) * p.m * p.n],
                p.m,
                p.k,
                p.n,
            )
        });
        Ok(self.push(p.out_shape.clone(), out, Op::MatMul { a: a.id, b: b.id }, ga || gb))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self, a: Var) -> Result<Var> {
        let r = self.get(a)?.0.len();
        if r < 2 {
            return Err(Error::dim("transpose needs rank >= 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(a, &perm)
    }

    /// Matrix inverse by Gauss–Jordan with partial pivoting.
    pub fn inverse(&self, a: Var) -> Result<Var> {
        let (sa, va, ga) = self.get(a)?;
        if sa.len() != 2 || sa[0] != sa[1] {
            return Err(Error::dim(format!("inverse needs a square matrix, got {sa:?}")));
        }
        let n = sa[0];
        if n > 16 {
            return Err(Error::dim(format!("inverse supports up to 16x16, got {n}x{n}")));
        }
        let a64: Vec<f64> = va.iter().map(|v| v.as_f64()).collect();
        let (inv, cond) = kernels::invert(&a64, n)?;
        if cond > 1e8 || !cond.is_finite() {
            return Err(Error::Numeric { msg: format!("ill-conditioned {n}x{n} matrix"), condition: cond });
        }
        let data = inv.into_iter().map(T::lit).collect();
        Ok(self.push(sa, data, Op::Inverse { a: a.id }, ga))
    }

    /// 2-D cross-correlation, `x: [N,C,H,W]`, `w: [F,C,kh,kw]`.
    pub fn conv2d(&self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, vx, gx) = self.get(x)?;
        let (sw, vw, gw) = self.get(w)?;
        if sx.len() != 4 || sw.len() != 4 {
            return Err(Error::dim(format!("conv2d expects 4-D input and weight, got {sx:?} and {sw:?}")));
        }
        if sx[1] != sw[1] {
            return Err(Error::dim(format!("conv2d channel mismatch: input {} vs weight {}", sx[1], sw[1])));
        }
        if stride == 0 {
            return Err(Error::config("conv2d stride must be positive"));
        }
        let (h, wd, kh, kw) = (sx[2], sx[3], sw[2], sw[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::dim(format!("conv2d kernel {kh}x{kw} larger than padded input {h}x{wd}")));
        }
        let geom = ConvGeom {
            n: sx[0],
            c: sx[1],
            h,
            w: wd,
            f: sw[0],
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (wd + 2 * pad - kw) / stride + 1,
        };
        let out = kernels::conv2d_forward(&vx, &vw, &geom);
        let shape = vec![geom.n, geom.f, geom.ho, geom.wo];
        Ok(self.push(shape, out, Op::Conv2d { x: x.id, w: w.id, geom }, gx || gw))
    }

    /// Applies a fixed linear map along `axis`.
    pub fn axis_map(&self, a: Var, axis: usize, map: Rc<AxisMap>) -> Result<Var> {
        let (sa, va, ga) = self.get(a)?;
        let data = apply_axis_map(&va, &sa, axis, &map)?;
        let mut shape = sa;
        shape[axis] = map.out_len();
        Ok(self.push(shape, data, Op::AxisMap { a: a.id, axis, map }, ga))
    }

    // ---------------------------------------------------------------- reductions

    /// Sum of all elements (`f64` accumulation), shape `[1]`.
    pub fn sum(&self, a: Var) -> Result<Var> {
        let (_, va, ga) = self.get(a)?;
        let s: f64 = va.iter().map(|v| v.as_f64()).sum();
        Ok(self.push(vec![1], vec![T::lit(s)], Op::Sum { a: a.id }, ga))
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        let n = numel(&self.get(a)?.0);
        let s = self.sum(a)?;
        self.mul_scalar(s, 1.0 / n as f64)
    }

    /// Sum over one axis, keeping it with size 1.
    pub fn sum_axis(&self, a: Var, axis: usize) -> Result<Var> {
        let (sa, va, ga) = self.get(a)?;
        if axis >= sa.len() {
            return Err(Error::dim(format!("axis {axis} out of range for {sa:?}")));
        }
        let outer: usize = sa[..axis].iter().product();
        let inner: usize = sa[axis + 1..].iter().product();
        let n = sa[axis];
        let mut acc = vec![0.0f64; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                for i in 0..inner {
                    acc[o * inner + i] += va[(o * n + j) * inner + i].as_f64();
                }
            }
        }
        let mut shape = sa;
        shape[axis] = 1;
        Ok(self.push(shape, acc.into_iter().map(T::lit).collect(), Op::SumAxis { a: a.id, axis }, ga))
    }

    /// Softmax over the last axis.
    pub fn softmax(&self, a: Var) -> Result<Var> {
        let (sa, va, ga) = self.get(a)?;
        let c = *sa.last().ok_or_else(|| Error::dim("softmax of a rank-0 value"))?;
        let mut out = vec![T::zero(); va.len()];
        for (row, orow) in va.chunks(c).zip(out.chunks_mut(c)) {
            let mx = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
            let e: Vec<f64> = row.iter().map(|v| (v.as_f64() - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for (o, ev) in orow.iter_mut().zip(e) {
                *o = T::lit(ev / z);
            }
        }
        Ok(self.push(sa, out, Op::Softmax { a: a.id }, ga))
    }

    /// Global Euclidean norm, shape `[1]`. The gradient at the origin is
    /// taken to be zero.
    pub fn norm2(&self, a: Var) -> Result<Var> {
        let (_, va, ga) = self.get(a)?;
        let s: f64 = va.iter().map(|v| v.as_f64() * v.as_f64()).sum();
        Ok(self.push(vec![1], vec![T::lit(s.sqrt())], Op::Norm2 { a: a.id }, ga))
    }

    /// L2-normalises every row along the last axis. Rows with norm below
    /// `eps` become zero.
    pub fn normalize_rows(&self, a: Var, eps: f64) -> Result<Var> {
        let (sa, va, ga) = self.get(a)?;
        let c = *sa.last().ok_or_else(|| Error::dim("normalize_rows of a rank-0 value"))?;
        let mut out = vec![T::zero(); va.len()];
        for (row, orow) in va.chunks(c).zip(out.chunks_mut(c)) {
            let nrm = row.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
            if nrm >= eps {
                for (o, &v) in orow.iter_mut().zip(row) {
                    *o = T::lit(v.as_f64() / nrm);
                }
            }
        }
        Ok(self.push(sa, out, Op::NormalizeRows { a: a.id, eps }, ga))
    }

    // ---------------------------------------------------------------- shape ops

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let (sa, va, ga) = self.get(a)?;
        if numel(&sa) != numel(shape) {
            return Err(Error::dim(format!("cannot reshape {sa:?} into {shape:?}")));
        }
        Ok(self.push(shape.to_vec(), (*va).clone(), Op::Reshape { a: a.id }, ga))
    }

    pub fn permute(&self, a: Var, perm: &[usize]) -> Result<Var> {
        let (sa, va, ga) = self.get(a)?;
        let r = sa.len();
        let mut seen = vec![false; r];
        if perm.len() != r || perm.iter().any(|&p| p >= r || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::dim(format!("invalid permutation {perm:?} for rank {r}")));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| sa[p]).collect();
        let data = permute_data(&va, &sa, perm);
        Ok(self.push(out_shape, data, Op::Permute { a: a.id, perm: perm.to_vec() }, ga))
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::dim("concat of zero tensors"));
        }
        let infos = parts.iter().map(|&p| self.get(p)).collect::<Result<Vec<_>>>()?;
        let s0 = &infos[0].0;
        if axis >= s0.len() {
            return Err(Error::dim(format!("concat axis {axis} out of range for {s0:?}")));
        }
        for (s, _, _) in &infos {
            if s.len() != s0.len() || s.iter().zip(s0).enumerate().any(|(i, (x, y))| i != axis && x != y) {
                return Err(Error::dim(format!("concat shape mismatch {s:?} vs {s0:?} on axis {axis}")));
            }
        }
        let outer: usize = s0[..axis].iter().product();
        let inner: usize = s0[axis + 1..].iter().product();
        let total: usize = infos.iter().map(|(s, _, _)| s[axis]).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (s, v, _) in &infos {
                let len = s[axis] * inner;
                data.extend_from_slice(&v[o * len..(o + 1) * len]);
            }
        }
        let mut shape = s0.clone();
        shape[axis] = total;
        let ng = infos.iter().any(|i| i.2);
        Ok(self.push(shape, data, Op::Concat { parts: parts.iter().map(|p| p.id).collect(), axis }, ng))
    }

    pub fn slice(&self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let (sa, va, ga) = self.get(a)?;
        if axis >= sa.len() || start + len > sa[axis] {
            return Err(Error::dim(format!("slice [{start}, {}) out of range on axis {axis} of {sa:?}", start + len)));
        }
        let outer: usize = sa[..axis].iter().product();
        let inner: usize = sa[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * sa[axis] + start) * inner;
            data.extend_from_slice(&va[base..base + len * inner]);
        }
        let mut shape = sa;
        shape[axis] = len;
        Ok(self.push(shape, data, Op::Slice { a: a.id, axis, start }, ga))
    }

    // ---------------------------------------------------------------- backward

    /// Reverse sweep from a one-element `loss`. Each reachable node is
    /// visited exactly once, in reverse recording order.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        self.check(loss)?;
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].shape
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![T::one()]);
        let mut done: Vec<Option<Vec<T>>> = vec![None; nodes.len()];
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if node.needs_grad {
                self.propagate(&nodes, id, &g, &mut grads);
            }
            done[id] = Some(g);
        }
        Ok(Gradients { tape: self.id, shapes: nodes.iter().map(|n| n.shape.clone()).collect(), grads: done })
    }

    fn propagate(&self, nodes: &[Node<T>], id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &nodes[id];
        let wants = |i: usize| nodes[i].needs_grad;
        let mut acc = |i: usize, contrib: Vec<T>| match &mut grads[i] {
            Some(existing) => add_into(existing, &contrib),
            slot @ None => *slot = Some(contrib),
        };
        match &node.op {
            Op::Leaf => {}
            Op::Binary { kind, a, b } => {
                let (va, vb, y) = (&nodes[*a].value, &nodes[*b].value, &node.value);
                let (sa, sb) = (&nodes[*a].shape, &nodes[*b].shape);
                let (wa, wb) = (wants(*a), wants(*b));
                let mut da = vec![T::zero(); if wa { va.len() } else { 0 }];
                let mut db = vec![T::zero(); if wb { vb.len() } else { 0 }];
                let mut step = |o: usize, i: usize, j: usize| {
                    let (x, z, gv) = (va[i], vb[j], g[o]);
                    let (ga, gb) = match kind {
                        BinaryKind::Add => (gv, gv),
                        BinaryKind::Sub => (gv, -gv),
                        BinaryKind::Mul => (gv * z, gv * x),
                        BinaryKind::Div => (gv / z, -gv * x / (z * z)),
                        BinaryKind::Pow => {
                            let lx = if x > T::zero() { x.ln() } else { T::zero() };
                            (gv * z * x.powf(z - T::one()), gv * y[o] * lx)
                        }
                    };
                    if wa {
                        da[i] = da[i] + ga;
                    }
                    if wb {
                        db[j] = db[j] + gb;
                    }
                };
                if sa == sb {
                    for o in 0..g.len() {
                        step(o, o, o);
                    }
                } else {
                    let out = &node.shape;
                    let (ta, tb) = (broadcast_strides(sa, out), broadcast_strides(sb, out));
                    for_each_broadcast(out, &ta, &tb, step);
                }
                if wa {
                    acc(*a, da);
                }
                if wb {
                    acc(*b, db);
                }
            }
            Op::Scalar { kind, a, s } => {
                let va = &nodes[*a].value;
                let st = T::lit(*s);
                let d = va
                    .iter()
                    .zip(g)
                    .map(|(&x, &gv)| match kind {
                        ScalarKind::Add => gv,
                        ScalarKind::Mul => gv * st,
                        ScalarKind::Pow => gv * st * x.powf(st - T::one()),
                    })
                    .collect();
                acc(*a, d);
            }
            Op::Unary { kind, a } => {
                let (va, y) = (&nodes[*a].value, &node.value);
                let d = va
                    .iter()
                    .zip(y.iter())
                    .zip(g)
                    .map(|((&x, &yv), &gv)| gv * unary_deriv(*kind, x, yv))
                    .collect();
                acc(*a, d);
            }
            Op::MatMul { a, b } => {
                let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                let p = MatmulPlan::new(&nodes[*a].shape, &nodes[*b].shape).expect("validated in forward");
                let (wa, wb) = (wants(*a), wants(*b));
                let mut da = vec![T::zero(); if wa { va.len() } else { 0 }];
                let mut db = vec![T::zero(); if wb { vb.len() } else { 0 }];
                let (mk, kn, mn) = (p.m * p.k, p.k * p.n, p.m * p.n);
                p.for_each(|o, ia, ib| {
                    let gc = &g[o * mn..(o + 1) * mn];
                    if wa {
                        kernels::matmul_acc_bt(gc, &vb[ib * kn..(ib + 1) * kn], &mut da[ia * mk..(ia + 1) * mk], p.m, p.k, p.n);
                    }
                    if wb {
                        kernels::matmul_acc_at(&va[ia * mk..(ia + 1) * mk], gc, &mut db[ib * kn..(ib + 1) * kn], p.m, p.k, p.n);
                    }
                });
                if wa {
                    acc(*a, da);
                }
                if wb {
                    acc(*b, db);
                }
            }
            Op::Conv2d { x, w, geom } => {
                let (wx, ww) = (wants(*x), wants(*w));
                let (dx, dw) = kernels::conv2d_backward(&nodes[*x].value, &nodes[*w].value, g, geom, wx, ww);
                if let Some(dx) = dx {
                    acc(*x, dx);
                }
                if let Some(dw) = dw {
                    acc(*w, dw);
                }
            }
            Op::Sum { a } => {
                acc(*a, vec![g[0]; nodes[*a].value.len()]);
            }
            Op::SumAxis { a, axis } => {
                let sa = &nodes[*a].shape;
                let outer: usize = sa[..*axis].iter().product();
                let inner: usize = sa[*axis + 1..].iter().product();
                let n = sa[*axis];
                let mut d = vec![T::zero(); outer * n * inner];
                for o in 0..outer {
                    for j in 0..n {
                        d[(o * n + j) * inner..(o * n + j + 1) * inner]
                            .copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                acc(*a, d);
            }
            Op::Softmax { a } => {
                let c = *node.shape.last().unwrap();
                let mut d = vec![T::zero(); g.len()];
                for ((yrow, grow), drow) in node.value.chunks(c).zip(g.chunks(c)).zip(d.chunks_mut(c)) {
                    let dot: f64 = yrow.iter().zip(grow).map(|(y, g)| y.as_f64() * g.as_f64()).sum();
                    for ((o, &y), &gv) in drow.iter_mut().zip(yrow).zip(grow) {
                        *o = y * (gv - T::lit(dot));
                    }
                }
                acc(*a, d);
            }
            Op::Norm2 { a } => {
                let nrm = node.value[0];
                let va = &nodes[*a].value;
                let d = if nrm > T::zero() {
                    va.iter().map(|&x| g[0] * x / nrm).collect()
                } else {
                    vec![T::zero(); va.len()]
                };
                acc(*a, d);
            }
            Op::NormalizeRows { a, eps } => {
                let c = *node.shape.last().unwrap();
                let va = &nodes[*a].value;
                let mut d = vec![T::zero(); g.len()];
                for (((xrow, yrow), grow), drow) in
                    va.chunks(c).zip(node.value.chunks(c)).zip(g.chunks(c)).zip(d.chunks_mut(c))
                {
                    let nrm = xrow.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
                    if nrm < *eps {
                        continue;
                    }
                    let dot: f64 = yrow.iter().zip(grow).map(|(y, g)| y.as_f64() * g.as_f64()).sum();
                    for ((o, &y), &gv) in drow.iter_mut().zip(yrow).zip(grow) {
                        *o = T::lit((gv.as_f64() - y.as_f64() * dot) / nrm);
                    }
                }
                acc(*a, d);
            }
            Op::Reshape { a } => acc(*a, g.to_vec()),
            Op::Permute { a, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                acc(*a, permute_data(g, &node.shape, &inv));
            }
            Op::Concat { parts, axis } => {
                let shape = &node.shape;
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let total = shape[*axis];
                let mut off = 0;
                for &p in parts {
                    let n = nodes[p].shape[*axis];
                    if wants(p) {
                        let mut d = Vec::with_capacity(outer * n * inner);
                        for o in 0..outer {
                            let base = (o * total + off) * inner;
                            d.extend_from_slice(&g[base..base + n * inner]);
                        }
                        acc(p, d);
                    }
                    off += n;
                }
            }
            Op::Slice { a, axis, start } => {
                let sa = &nodes[*a].shape;
                let outer: usize = sa[..*axis].iter().product();
                let inner: usize = sa[*axis + 1..].iter().product();
                let len = node.shape[*axis];
                let mut d = vec![T::zero(); numel(sa)];
                for o in 0..outer {
                    let base = (o * sa[*axis] + start) * inner;
                    d[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                acc(*a, d);
            }
            Op::Inverse { a } => {
                // d(A⁻¹) = -A⁻¹ dA A⁻¹  =>  dL/dA = -Yᵀ G Yᵀ
                let n = node.shape[0];
                let y = &node.value;
                let yt: Vec<T> = (0..n * n).map(|i| y[(i % n) * n + i / n]).collect();
                let mut tmp = vec![T::zero(); n * n];
                kernels::matmul_acc(&yt, g, &mut tmp, n, n, n);
                let mut d = vec![T::zero(); n * n];
                kernels::matmul_acc(&tmp, &yt, &mut d, n, n, n);
                acc(*a, d.into_iter().map(|v| -v).collect());
            }
            Op::AxisMap { a, axis, map } => {
                acc(*a, apply_axis_map_t(g, &nodes[*a].shape, *axis, map));
            }
        }
    }
}

#[inline]
fn unary_fwd<T: Real>(kind: UnaryKind, x: T) -> T {
    let one = T::one();
    match kind {
        UnaryKind::Neg => -x,
        UnaryKind::Exp => x.exp(),
        UnaryKind::Ln => x.ln(),
        UnaryKind::Tanh => x.tanh(),
        UnaryKind::Recip => one / x,
        UnaryKind::Abs => x.abs(),
        UnaryKind::Sqrt => x.sqrt(),
        UnaryKind::Sigmoid => one / (one + (-x).exp()),
        UnaryKind::Silu => x / (one + (-x).exp()),
        UnaryKind::Relu => x.max(T::zero()),
        UnaryKind::Elu => {
            if x > T::zero() {
                x
            } else {
                x.exp() - one
            }
        }
        UnaryKind::Geometric => one / (one - x),
    }
}

/// dy/dx given input `x` and output `y`.
#[inline]
fn unary_deriv<T: Real>(kind: UnaryKind, x: T, y: T) -> T {
    let (zero, one) = (T::zero(), T::one());
    match kind {
        UnaryKind::Neg => -one,
        UnaryKind::Exp => y,
        UnaryKind::Ln => one / x,
        UnaryKind::Tanh => one - y * y,
        UnaryKind::Recip => -(y * y),
        UnaryKind::Abs => {
            if x > zero {
                one
            } else if x < zero {
                -one
            } else {
                zero
            }
        }
        UnaryKind::Sqrt => {
            if y > zero {
                one / (y + y)
            } else {
                zero
            }
        }
        UnaryKind::Sigmoid => y * (one - y),
        UnaryKind::Silu => {
            let s = one / (one + (-x).exp());
            s + x * s * (one - s)
        }
        UnaryKind::Relu => {
            if x > zero {
                one
            } else {
                zero
            }
        }
        UnaryKind::Elu => {
            if x > zero {
                one
            } else {
                y + one
            }
        }
        UnaryKind::Geometric => y * y,
    }
}

fn permute_data<T: Copy>(v: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let r = shape.len();
    let mut in_strides = vec![1; r];
    for i in (0..r.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let gather: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = v.len();
    let mut out = Vec::with_capacity(total);
    if total == 0 {
        return out;
    }
    let mut idx = vec![0usize; r];
    let mut src = 0usize;
    for _ in 0..total {
        out.push(v[src]);
        let mut d = r;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            src += gather[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= gather[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    out
}

struct MatmulPlan {
    m: usize,
    k: usize,
    n: usize,
    batch: Vec<usize>,
    sa: Vec<usize>,
    sb: Vec<usize>,
    out_shape: Vec<usize>,
}

impl MatmulPlan {
    fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        if a.len() < 2 || b.len() < 2 {
            return Err(Error::dim(format!("matmul needs rank >= 2 operands, got {a:?} and {b:?}")));
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
        if k != k2 {
            return Err(Error::dim(format!("matmul inner dimension mismatch: {a:?} x {b:?}")));
        }
        let ba = &a[..a.len() - 2];
        let bb = &b[..b.len() - 2];
        let batch = broadcast_shape(ba, bb)?;
        let sa = broadcast_strides(ba, &batch);
        let sb = broadcast_strides(bb, &batch);
        let mut out_shape = batch.clone();
        out_shape.extend([m, n]);
        Ok(MatmulPlan { m, k, n, batch, sa, sb, out_shape })
    }

    fn for_each(&self, f: impl FnMut(usize, usize, usize)) {
        for_each_broadcast(&self.batch, &self.sa, &self.sb, f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn hadamard_and_identity() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        let b = tape.leaf(t(&[3], &[4.0, 5.0, 6.0]));
        assert_eq!(tape.value(tape.mul(a, b).unwrap()).data(), &[4.0, 10.0, 18.0]);
        let z = tape.add_scalar(a, 0.0).unwrap();
        assert_eq!(tape.value(z), tape.value(a));
        let e = tape.exp(tape.leaf(t(&[2], &[0.0, 1.0]))).unwrap();
        assert_eq!(tape.value(e).data(), &[1.0, std::f64::consts::E]);
    }

    #[test]
    fn f32_exp_literal() {
        let tape = Tape::<f32>::new();
        let e = tape.exp(tape.leaf(Tensor::new(&[2], vec![0.0f32, 1.0]).unwrap())).unwrap();
        assert_eq!(tape.value(e).data(), &[1.0, 2.718_281_7]);
    }

    #[test]
    fn division_by_zero_is_ieee() {
        let tape = Tape::<f32>::new();
        let a = tape.leaf(Tensor::new(&[2], vec![1.0f32, -1.0]).unwrap());
        let b = tape.leaf(Tensor::zeros(&[2]));
        let q = tape.value(tape.div(a, b).unwrap());
        assert_eq!(q.data(), &[f32::INFINITY, f32::NEG_INFINITY]);
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let tape = Tape::<f32>::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[4]));
        assert!(matches!(tape.add(a, b), Err(Error::Dimension(_))));
        let m = tape.leaf(Tensor::zeros(&[3, 2]));
        assert!(matches!(tape.matmul(a, tape.leaf(Tensor::zeros(&[2, 2]))), Err(Error::Dimension(_))));
        assert!(tape.matmul(a, m).is_ok());
    }

    #[test]
    fn matmul_examples() {
        let tape = Tape::<f64>::new();
        let i3 = tape.constant(Tensor::eye(3));
        let v = tape.leaf(t(&[3, 1], &[1.5, -2.0, 7.0]));
        assert_eq!(tape.value(tape.matmul(i3, v).unwrap()), tape.value(v));
        let a = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let ones = tape.constant(t(&[2, 1], &[1.0, 1.0]));
        assert_eq!(tape.value(tape.matmul(a, ones).unwrap()).data(), &[3.0, 7.0]);
    }

    #[test]
    fn square_sum_gradient() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn non_scalar_backward_rejected() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn foreign_variable_rejected() {
        let t1 = Tape::<f64>::new();
        let t2 = Tape::<f64>::new();
        let x = t1.leaf(t(&[1], &[1.0]));
        let _ = t2.leaf(t(&[1], &[1.0]));
        assert!(matches!(t2.exp(x), Err(Error::Contract(_))));
    }

    #[test]
    fn inverse_examples() {
        let tape = Tape::<f64>::new();
        let i = tape.leaf(Tensor::eye(4));
        assert_eq!(tape.value(tape.inverse(i).unwrap()), Tensor::eye(4));
        let d = tape.leaf(t(&[2, 2], &[2.0, 0.0, 0.0, 4.0]));
        assert_eq!(tape.value(tape.inverse(d).unwrap()).data(), &[0.5, 0.0, 0.0, 0.25]);
        let s = tape.leaf(t(&[2, 2], &[1.0, 1.0, 1.0, 1.0 + 1e-12]));
        assert!(matches!(tape.inverse(s), Err(Error::Numeric { .. })));
    }

    #[test]
    fn permute_roundtrip_and_transpose() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_fn(&[2, 3, 4], |i| i as f64));
        let p = tape.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(tape.shape(p), vec![4, 2, 3]);
        let back = tape.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(tape.value(back), tape.value(x));
        let m = tape.leaf(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        assert_eq!(tape.value(tape.transpose(m).unwrap()).data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn concat_and_slice_are_inverse() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::from_fn(&[2, 2, 3], |i| i as f64));
        let b = tape.leaf(Tensor::from_fn(&[2, 1, 3], |i| 100.0 + i as f64));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.shape(c), vec![2, 3, 3]);
        assert_eq!(tape.value(tape.slice(c, 1, 0, 2).unwrap()), tape.value(a));
        assert_eq!(tape.value(tape.slice(c, 1, 2, 1).unwrap()), tape.value(b));
    }

    #[test]
    fn geometric_kernel_domain() {
        let tape = Tape::<f64>::new();
        let ok = tape.leaf(t(&[2], &[0.0, 0.5]));
        assert_eq!(tape.value(tape.unary(UnaryKind::Geometric, ok).unwrap()).data(), &[1.0, 2.0]);
        let bad = tape.leaf(t(&[1], &[1.0]));
        assert!(matches!(tape.unary(UnaryKind::Geometric, bad), Err(Error::Domain(_))));
    }

    #[test]
    fn norm2_subgradient_at_origin() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[3]));
        let n = tape.norm2(x).unwrap();
        let g = tape.backward(n).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn repeated_backward_is_bit_identical() {
        let tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::from_fn(&[4, 4], |i| (i as f32 * 0.37).sin()));
        let w = tape.leaf(Tensor::from_fn(&[4, 4], |i| (i as f32 * 0.11).cos()));
        let y = tape.matmul(x, w).unwrap();
        let y = tape.tanh(y).unwrap();
        let s = tape.softmax(y).unwrap();
        let l = tape.sum(tape.mul(s, y).unwrap()).unwrap();
        let g1 = tape.backward(l).unwrap();
        let g2 = tape.backward(l).unwrap();
        assert_eq!(g1.get(x), g2.get(x));
        assert_eq!(g1.get(w), g2.get(w));
    }
}
