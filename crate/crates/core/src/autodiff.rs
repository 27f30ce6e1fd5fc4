//! Minimal reverse-mode automatic differentiation on an explicit tape.
//!
//! The policy's scoring path and every preference loss are built from a small
//! fixed vocabulary of operations, so the tape records exactly those ops and
//! nothing else. Reductions that would otherwise explode into per-scalar
//! nodes (`dot`, `log-sum-exp`, picking one log-softmax entry) are fused into
//! single n-ary nodes with analytic adjoints — that keeps a training batch at
//! a few hundred nodes per scored response instead of tens of thousands.
//!
//! Two evaluation backends implement the same [`Engine`] trait:
//!
//! * [`Tape`] records the computation and can run [`Tape::backward`];
//! * [`PlainEngine`] executes the identical arithmetic immediately, for
//!   evaluation, reference-model scoring, and finite-difference checks.
//!
//! Both backends call the same kernels in [`crate::math`] in the same order,
//! so a value computed on the tape is bit-identical to the plain one — there
//! is a property test pinning that down in the policy module.
//!
//! Gradient flow can be cut at any point with [`Engine::detach`]: the value
//! passes through, the adjoint does not. That is how shared negatives are
//! handled in "detached" linkage mode.

use crate::math;
use crate::scalar::Scalar;

/// Errors from gradient extraction.
#[derive(Debug, thiserror::Error)]
pub enum AutodiffError {
    /// The root (or an adjoint buffer) does not belong to this tape — e.g.
    /// backward was requested before any forward computation was recorded.
    #[error("node {index} is not on this tape (tape has {len} nodes)")]
    NodeOutOfRange { index: usize, len: usize },
    /// An adjoint buffer sized for a different tape was passed in.
    #[error("adjoint buffer has {got} slots but tape has {want} nodes")]
    AdjointSizeMismatch { got: usize, want: usize },
}

pub type AdResult<T> = Result<T, AutodiffError>;

/// Handle to one node on a [`Tape`]. Cheap to copy; only meaningful for the
/// tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(u32);

impl Var {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Evaluation backend for the scoring and loss arithmetic.
///
/// Writing forward passes against this trait means the recorded (trainable)
/// and immediate (evaluation-time) computations are the same code.
pub trait Engine<T: Scalar> {
    type Value: Copy + std::fmt::Debug;

    /// A value with no gradient, from a plain scalar.
    fn constant(&mut self, c: T) -> Self::Value;
    /// Read the numeric value back out.
    fn value(&self, v: Self::Value) -> T;

    fn add(&mut self, a: Self::Value, b: Self::Value) -> Self::Value;
    fn sub(&mut self, a: Self::Value, b: Self::Value) -> Self::Value;
    fn mul(&mut self, a: Self::Value, b: Self::Value) -> Self::Value;
    fn neg(&mut self, a: Self::Value) -> Self::Value;
    /// `c * a` for a plain constant `c`.
    fn scale(&mut self, a: Self::Value, c: T) -> Self::Value;
    /// `a + c` for a plain constant `c`.
    fn add_const(&mut self, a: Self::Value, c: T) -> Self::Value;
    fn tanh(&mut self, a: Self::Value) -> Self::Value;
    fn softplus(&mut self, a: Self::Value) -> Self::Value;
    /// `sum_i xs[i]`, left to right.
    fn sum(&mut self, xs: &[Self::Value]) -> Self::Value;
    /// `sum_i ws[i] * xs[i]` for plain-constant weights.
    fn weighted_sum(&mut self, xs: &[Self::Value], ws: &[T]) -> Self::Value;
    /// `sum_i xs[i] * ys[i]`.
    fn dot(&mut self, xs: &[Self::Value], ys: &[Self::Value]) -> Self::Value;
    /// Max-shifted `log(sum_i exp(xs[i]))`.
    fn log_sum_exp(&mut self, xs: &[Self::Value]) -> Self::Value;
    /// `log_softmax(logits)[pick]`, fused for stability and node economy.
    fn log_softmax_pick(&mut self, logits: &[Self::Value], pick: usize) -> Self::Value;
    /// Value passes through, gradient does not.
    fn detach(&mut self, a: Self::Value) -> Self::Value;
}

/// Immediate-mode backend: `Value = T`, every op is plain arithmetic.
#[derive(Debug, Default, Clone, Copy)]
pub struct PlainEngine;

impl<T: Scalar> Engine<T> for PlainEngine {
    type Value = T;

    #[inline]
    fn constant(&mut self, c: T) -> T {
        c
    }
    #[inline]
    fn value(&self, v: T) -> T {
        v
    }
    #[inline]
    fn add(&mut self, a: T, b: T) -> T {
        a + b
    }
    #[inline]
    fn sub(&mut self, a: T, b: T) -> T {
        a - b
    }
    #[inline]
    fn mul(&mut self, a: T, b: T) -> T {
        a * b
    }
    #[inline]
    fn neg(&mut self, a: T) -> T {
        -a
    }
    #[inline]
    fn scale(&mut self, a: T, c: T) -> T {
        c * a
    }
    #[inline]
    fn add_const(&mut self, a: T, c: T) -> T {
        a + c
    }
    #[inline]
    fn tanh(&mut self, a: T) -> T {
        a.tanh()
    }
    #[inline]
    fn softplus(&mut self, a: T) -> T {
        math::softplus(a)
    }
    fn sum(&mut self, xs: &[T]) -> T {
        let mut acc = T::zero();
        for &x in xs {
            acc = acc + x;
        }
        acc
    }
    fn weighted_sum(&mut self, xs: &[T], ws: &[T]) -> T {
        debug_assert_eq!(xs.len(), ws.len());
        let mut acc = T::zero();
        for (&x, &w) in xs.iter().zip(ws) {
            acc = acc + w * x;
        }
        acc
    }
    #[inline]
    fn dot(&mut self, xs: &[T], ys: &[T]) -> T {
        math::dot(xs, ys)
    }
    #[inline]
    fn log_sum_exp(&mut self, xs: &[T]) -> T {
        math::log_sum_exp(xs)
    }
    #[inline]
    fn log_softmax_pick(&mut self, logits: &[T], pick: usize) -> T {
        logits[pick] - math::log_sum_exp(logits)
    }
    #[inline]
    fn detach(&mut self, a: T) -> T {
        a
    }
}

enum Op<T> {
    Leaf,
    Constant,
    Add(u32, u32),
    Sub(u32, u32),
    Mul(u32, u32),
    Neg(u32),
    Scale(u32, T),
    AddConst(u32),
    Tanh(u32),
    Softplus(u32),
    Sum(Box<[u32]>),
    WeightedSum(Box<[u32]>, Box<[T]>),
    Dot(Box<[u32]>, Box<[u32]>),
    LogSumExp(Box<[u32]>),
    LogSoftmaxPick(Box<[u32]>, u32),
    Detach,
}

/// Recording backend. One tape per training batch; dropped after the
/// optimizer step, so node storage never outlives a batch.
pub struct Tape<T> {
    ops: Vec<Op<T>>,
    vals: Vec<T>,
    scratch: Vec<T>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { ops: Vec::new(), vals: Vec::new(), scratch: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    /// Register a differentiable input (a model parameter).
    pub fn leaf(&mut self, v: T) -> Var {
        self.push(Op::Leaf, v)
    }

    fn push(&mut self, op: Op<T>, v: T) -> Var {
        let idx = self.ops.len();
        debug_assert!(idx < u32::MAX as usize, "tape overflow");
        self.ops.push(op);
        self.vals.push(v);
        Var(idx as u32)
    }

    fn gather(&mut self, xs: &[Var]) -> Vec<T> {
        let mut buf = std::mem::take(&mut self.scratch);
        buf.clear();
        buf.extend(xs.iter().map(|v| self.vals[v.index()]));
        buf
    }

    fn restore(&mut self, buf: Vec<T>) {
        self.scratch = buf;
    }

    /// Fresh zeroed adjoint buffer, propagate from `root`, return the buffer.
    pub fn backward(&self, root: Var, upstream: T) -> AdResult<Adjoints<T>> {
        let mut adj = Adjoints::zeroed(self.len());
        self.backward_into(root, upstream, &mut adj)?;
        Ok(adj)
    }

    /// Propagate `upstream` from `root`, adding into `adj`. Calling this
    /// twice accumulates: the buffer then holds the sum of both gradients.
    pub fn backward_into(&self, root: Var, upstream: T, adj: &mut Adjoints<T>) -> AdResult<()> {
        if root.index() >= self.len() {
            return Err(AutodiffError::NodeOutOfRange { index: root.index(), len: self.len() });
        }
        if adj.d.len() != self.len() {
            return Err(AutodiffError::AdjointSizeMismatch { got: adj.d.len(), want: self.len() });
        }
        let mut local = vec![T::zero(); self.len()];
        local[root.index()] = upstream;
        for i in (0..=root.index()).rev() {
            let up = local[i];
            if up == T::zero() {
                continue;
            }
            match &self.ops[i] {
                Op::Leaf | Op::Constant | Op::Detach => {}
                Op::Add(a, b) => {
                    local[*a as usize] = local[*a as usize] + up;
                    local[*b as usize] = local[*b as usize] + up;
                }
                Op::Sub(a, b) => {
                    local[*a as usize] = local[*a as usize] + up;
                    local[*b as usize] = local[*b as usize] - up;
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.vals[*a as usize], self.vals[*b as usize]);
                    local[*a as usize] = local[*a as usize] + up * vb;
                    local[*b as usize] = local[*b as usize] + up * va;
                }
                Op::Neg(a) => {
                    local[*a as usize] = local[*a as usize] - up;
                }
                Op::Scale(a, c) => {
                    local[*a as usize] = local[*a as usize] + up * *c;
                }
                Op::AddConst(a) => {
                    local[*a as usize] = local[*a as usize] + up;
                }
                Op::Tanh(a) => {
                    let y = self.vals[i];
                    local[*a as usize] = local[*a as usize] + up * (T::one() - y * y);
                }
                Op::Softplus(a) => {
                    let x = self.vals[*a as usize];
                    local[*a as usize] = local[*a as usize] + up * math::sigmoid(x);
                }
                Op::Sum(xs) => {
                    for &x in xs.iter() {
                        local[x as usize] = local[x as usize] + up;
                    }
                }
                Op::WeightedSum(xs, ws) => {
                    for (&x, &w) in xs.iter().zip(ws.iter()) {
                        local[x as usize] = local[x as usize] + up * w;
                    }
                }
                Op::Dot(xs, ys) => {
                    for (&x, &y) in xs.iter().zip(ys.iter()) {
                        let (vx, vy) = (self.vals[x as usize], self.vals[y as usize]);
                        local[x as usize] = local[x as usize] + up * vy;
                        local[y as usize] = local[y as usize] + up * vx;
                    }
                }
                Op::LogSumExp(xs) => {
                    // d lse / d x_j = exp(x_j - lse); the shift keeps exp <= 1.
                    let lse = self.vals[i];
                    for &x in xs.iter() {
                        let w = (self.vals[x as usize] - lse).exp();
                        local[x as usize] = local[x as usize] + up * w;
                    }
                }
                Op::LogSoftmaxPick(logits, pick) => {
                    // value = x_pick - lse, so lse is recoverable without a
                    // second reduction. Gradient is indicator minus softmax:
                    // the softmax mass is subtracted per occurrence, the
                    // indicator fires once on the picked node.
                    let lse = self.vals[*pick as usize] - self.vals[i];
                    for &x in logits.iter() {
                        let p = (self.vals[x as usize] - lse).exp();
                        local[x as usize] = local[x as usize] - up * p;
                    }
                    local[*pick as usize] = local[*pick as usize] + up;
                }
            }
        }
        for (dst, src) in adj.d.iter_mut().zip(&local) {
            *dst = *dst + *src;
        }
        Ok(())
    }

    pub fn value(&self, v: Var) -> T {
        self.vals[v.index()]
    }
}

impl<T: Scalar> Engine<T> for Tape<T> {
    type Value = Var;

    fn constant(&mut self, c: T) -> Var {
        self.push(Op::Constant, c)
    }
    fn value(&self, v: Var) -> T {
        self.vals[v.index()]
    }
    fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.vals[a.index()] + self.vals[b.index()];
        self.push(Op::Add(a.0, b.0), v)
    }
    fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.vals[a.index()] - self.vals[b.index()];
        self.push(Op::Sub(a.0, b.0), v)
    }
    fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.vals[a.index()] * self.vals[b.index()];
        self.push(Op::Mul(a.0, b.0), v)
    }
    fn neg(&mut self, a: Var) -> Var {
        let v = -self.vals[a.index()];
        self.push(Op::Neg(a.0), v)
    }
    fn scale(&mut self, a: Var, c: T) -> Var {
        let v = c * self.vals[a.index()];
        self.push(Op::Scale(a.0, c), v)
    }
    fn add_const(&mut self, a: Var, c: T) -> Var {
        let v = self.vals[a.index()] + c;
        self.push(Op::AddConst(a.0), v)
    }
    fn tanh(&mut self, a: Var) -> Var {
        let v = self.vals[a.index()].tanh();
        self.push(Op::Tanh(a.0), v)
    }
    fn softplus(&mut self, a: Var) -> Var {
        let v = math::softplus(self.vals[a.index()]);
        self.push(Op::Softplus(a.0), v)
    }
    fn sum(&mut self, xs: &[Var]) -> Var {
        let mut acc = T::zero();
        for v in xs {
            acc = acc + self.vals[v.index()];
        }
        let idx: Box<[u32]> = xs.iter().map(|v| v.0).collect();
        self.push(Op::Sum(idx), acc)
    }
    fn weighted_sum(&mut self, xs: &[Var], ws: &[T]) -> Var {
        debug_assert_eq!(xs.len(), ws.len());
        let mut acc = T::zero();
        for (v, &w) in xs.iter().zip(ws) {
            acc = acc + w * self.vals[v.index()];
        }
        let idx: Box<[u32]> = xs.iter().map(|v| v.0).collect();
        self.push(Op::WeightedSum(idx, ws.into()), acc)
    }
    fn dot(&mut self, xs: &[Var], ys: &[Var]) -> Var {
        debug_assert_eq!(xs.len(), ys.len());
        let mut acc = T::zero();
        for (x, y) in xs.iter().zip(ys) {
            acc = acc + self.vals[x.index()] * self.vals[y.index()];
        }
        let ix: Box<[u32]> = xs.iter().map(|v| v.0).collect();
        let iy: Box<[u32]> = ys.iter().map(|v| v.0).collect();
        self.push(Op::Dot(ix, iy), acc)
    }
    fn log_sum_exp(&mut self, xs: &[Var]) -> Var {
        let buf = self.gather(xs);
        let v = math::log_sum_exp(&buf);
        self.restore(buf);
        let idx: Box<[u32]> = xs.iter().map(|v| v.0).collect();
        self.push(Op::LogSumExp(idx), v)
    }
    fn log_softmax_pick(&mut self, logits: &[Var], pick: usize) -> Var {
        let buf = self.gather(logits);
        let v = buf[pick] - math::log_sum_exp(&buf);
        self.restore(buf);
        let target = logits[pick].0;
        let idx: Box<[u32]> = logits.iter().map(|v| v.0).collect();
        self.push(Op::LogSoftmaxPick(idx, target), v)
    }
    fn detach(&mut self, a: Var) -> Var {
        let v = self.vals[a.index()];
        self.push(Op::Detach, v)
    }
}

/// Gradient buffer aligned with a tape's node indices.
#[derive(Debug, Clone)]
pub struct Adjoints<T> {
    d: Vec<T>,
}

impl<T: Scalar> Adjoints<T> {
    pub fn zeroed(n: usize) -> Self {
        Adjoints { d: vec![T::zero(); n] }
    }

    pub fn wrt(&self, v: Var) -> T {
        self.d[v.index()]
    }

    /// Adjoints of the first `n` nodes — by convention the parameter leaves,
    /// which are always bound to the tape first.
    pub fn leading(&self, n: usize) -> &[T] {
        &self.d[..n]
    }
}
