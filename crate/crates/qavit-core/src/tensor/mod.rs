//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! Every operation that consumes a gradient-tracked tensor records a
//! backward step; [`Tensor::backward`] walks the recorded graph in reverse
//! creation order and accumulates (`+=`) gradients into every reachable
//! tensor. Leaves created with [`Tensor::param`] keep their gradients until
//! [`Tensor::zero_grad`] is called, which is what the optimizer relies on
//! for multi-sample batches.
//!
//! Graphs are single-threaded by construction (`Rc` storage); independent
//! models may live on different threads.

mod gradcheck;
mod init;
pub(crate) mod kernels;
mod ops;

pub use gradcheck::{gradcheck, GradcheckReport};
pub use init::trunc_normal;

use std::cell::{Cell, Ref, RefCell};
use std::fmt;
use std::rc::Rc;

use num_traits::Float;

use crate::error::{Error, Result};

/// Scalar storage type of a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }

    pub fn size_bytes(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Scalar element of a tensor. Implemented for `f32` and `f64`.
pub trait Element: Float + Default + fmt::Debug + fmt::Display + 'static {
    const DTYPE: Dtype;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    /// Hyperbolic tangent for bulk elementwise use. The f32 variant is a
    /// branch-free polynomial-exp approximation (~1e-7 relative, exact at
    /// 0) that autovectorizes; f64 keeps libm precision for the gradient
    /// oracles.
    fn tanh_bulk(self) -> Self;
}

impl Element for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn to_f64(self) -> f64 {
        self as f64
    }

    fn tanh_bulk(self) -> Self {
        fast_tanh_f32(self)
    }
}

impl Element for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn from_f64(v: f64) -> Self {
        v
    }

    fn to_f64(self) -> f64 {
        self
    }

    fn tanh_bulk(self) -> Self {
        self.tanh()
    }
}

/// exp(x) for x <= 0 via range reduction to 2^k · exp(r) with a degree-6
/// Taylor polynomial on |r| <= ln2/2 and a Cody-Waite split of ln2.
#[inline(always)]
fn fast_exp_neg_f32(x: f32) -> f32 {
    const INV_LN2: f32 = 1.442_695_f32;
    const LN2_HI: f32 = 0.693_359_375; // exact in binary
    const LN2_LO: f32 = -2.121_944_4e-4;
    let x = x.max(-105.0); // deep tail underflows to 0 anyway
    let k = (x * INV_LN2).round();
    let r = (x - k * LN2_HI) - k * LN2_LO;
    let p = 1.0
        + r * (1.0 + r * (0.5 + r * (1.0 / 6.0 + r * (1.0 / 24.0 + r * (1.0 / 120.0 + r * (1.0 / 720.0))))));
    // 2^k by exponent-bit construction; k <= 0 here. Below 2^-126 the
    // subnormal range collapses to zero via the guard factor.
    let kc = k.max(-126.0);
    let scale = f32::from_bits(((kc + 127.0) as u32) << 23);
    let alive = if k >= -126.0 { 1.0 } else { 0.0 };
    alive * scale * p
}

#[inline(always)]
fn fast_tanh_f32(x: f32) -> f32 {
    let a = x.abs();
    let e = fast_exp_neg_f32(-2.0 * a);
    let t = (1.0 - e) / (1.0 + e);
    t.copysign(x)
}

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static NO_GRAD: Cell<bool> = const { Cell::new(false) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Run `f` without recording backward steps (inference mode).
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    NO_GRAD.with(|c| {
        let prev = c.replace(true);
        let out = f();
        c.set(prev);
        out
    })
}

fn grad_enabled() -> bool {
    NO_GRAD.with(|c| !c.get())
}

/// Backward rule: receives the output gradient and output data, and
/// accumulates contributions into the parents it captured at record time.
type BackFn<T> = Box<dyn Fn(&[T], &[T])>;

pub(crate) struct BackStep<T: Element> {
    parents: Vec<Tensor<T>>,
    back: BackFn<T>,
}

pub(crate) struct Node<T: Element> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<T>>,
    grad: RefCell<Option<Vec<T>>>,
    requires_grad: Cell<bool>,
    step: Option<BackStep<T>>,
}

/// Dense row-major tensor; cheap to clone (shared storage).
pub struct Tensor<T: Element> {
    node: Rc<Node<T>>,
}

impl<T: Element> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor { node: Rc::clone(&self.node) }
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad.get())
            .finish()
    }
}

impl<T: Element> Tensor<T> {
    fn new(shape: Vec<usize>, data: Vec<T>, requires_grad: bool, step: Option<BackStep<T>>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            node: Rc::new(Node {
                id: next_id(),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: Cell::new(requires_grad),
                step,
            }),
        }
    }

    /// Constant (untracked) tensor from raw row-major data.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::ShapeMismatch {
                op: "from_vec",
                detail: format!("shape {:?} needs {} scalars, got {}", shape, shape.iter().product::<usize>(), data.len()),
            });
        }
        Ok(Tensor::new(shape.to_vec(), data, false, None))
    }

    /// Gradient-tracked leaf (a trainable parameter).
    pub fn param(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let t = Tensor::from_vec(shape, data)?;
        t.node.requires_grad.set(true);
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::new(shape.to_vec(), vec![T::zero(); shape.iter().product()], false, None)
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Tensor::new(shape.to_vec(), vec![v; shape.iter().product()], false, None)
    }

    /// Rank-0 scalar tensor.
    pub fn scalar(v: T) -> Self {
        Tensor::new(vec![], vec![v], false, None)
    }

    /// Rank-0 trainable scalar (used for fusion gates).
    pub fn scalar_param(v: T) -> Self {
        let t = Tensor::scalar(v);
        t.node.requires_grad.set(true);
        t
    }

    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<T>,
        parents: Vec<Tensor<T>>,
        back: impl Fn(&[T], &[T]) + 'static,
    ) -> Self {
        let tracked = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        let step = if tracked {
            Some(BackStep { parents, back: Box::new(back) })
        } else {
            None
        };
        Tensor::new(shape, data, tracked, step)
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn numel(&self) -> usize {
        self.node.shape.iter().product()
    }

    pub fn dtype(&self) -> Dtype {
        T::DTYPE
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad.get()
    }

    /// Toggle gradient tracking on a leaf (freeze/unfreeze).
    pub fn set_requires_grad(&self, on: bool) {
        debug_assert!(self.node.step.is_none(), "requires_grad is only togglable on leaves");
        self.node.requires_grad.set(on);
    }

    pub fn is_leaf(&self) -> bool {
        self.node.step.is_none()
    }

    pub fn data(&self) -> Ref<'_, Vec<T>> {
        self.node.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.node.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.numel(), 1);
        self.node.data.borrow()[0]
    }

    /// Overwrite data in place (optimizer updates, gradcheck probes).
    pub fn set_data(&self, data: &[T]) {
        let mut d = self.node.data.borrow_mut();
        assert_eq!(d.len(), data.len(), "set_data length mismatch");
        d.copy_from_slice(data);
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.node.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// Accumulate `delta` into this tensor's gradient buffer (`+=`).
    pub(crate) fn accum_grad(&self, delta: &[T]) {
        if !self.requires_grad() {
            return;
        }
        let mut g = self.node.grad.borrow_mut();
        match g.as_mut() {
            Some(buf) => {
                for (gv, &dv) in buf.iter_mut().zip(delta) {
                    *gv = *gv + dv;
                }
            }
            None => *g = Some(delta.to_vec()),
        }
    }

    /// Accumulate via a closure over the (lazily zero-initialized) buffer.
    pub(crate) fn accum_grad_with(&self, f: impl FnOnce(&mut [T])) {
        if !self.requires_grad() {
            return;
        }
        let mut g = self.node.grad.borrow_mut();
        let buf = g.get_or_insert_with(|| vec![T::zero(); self.numel()]);
        f(buf);
    }

    /// Untracked copy of this tensor's current value.
    pub fn detach(&self) -> Tensor<T> {
        Tensor::new(self.node.shape.clone(), self.to_vec(), false, None)
    }

    pub(crate) fn id(&self) -> u64 {
        self.node.id
    }

    /// Rows/cols of a 2-D tensor.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.node.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::ShapeMismatch { op, detail: format!("expected 2-D tensor, got shape {:?}", other) }),
        }
    }

    /// Reverse-mode pass from a scalar loss. Gradients accumulate (`+=`)
    /// into every reachable gradient-tracked tensor.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::ShapeMismatch {
                op: "backward",
                detail: format!("loss must be scalar, got shape {:?}", self.node.shape),
            });
        }
        if !self.requires_grad() {
            return Ok(());
        }

        // Node ids increase monotonically with creation and ops only consume
        // existing tensors, so descending id order is a valid reverse
        // topological order.
        let mut reachable: Vec<Tensor<T>> = Vec::new();
        let mut seen = std::collections::HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if !seen.insert(t.id()) {
                continue;
            }
            if let Some(step) = &t.node.step {
                for p in &step.parents {
                    if p.requires_grad() {
                        stack.push(p.clone());
                    }
                }
            }
            reachable.push(t);
        }
        reachable.sort_by(|a, b| b.id().cmp(&a.id()));

        self.accum_grad(&[T::one()]);

        for t in &reachable {
            let Some(step) = &t.node.step else { continue };
            let grad = t.node.grad.borrow();
            let Some(grad) = grad.as_ref() else { continue };
            let data = t.node.data.borrow();
            (step.back)(grad, &data);
        }
        Ok(())
    }
}

/// Scan for NaN/Inf; returns the first offending flat index.
pub(crate) fn first_non_finite<T: Element>(data: &[T]) -> Option<usize> {
    data.iter().position(|v| !v.is_finite())
}

/// Debug-only numeric fault detection at op boundaries.
#[cfg(debug_assertions)]
pub(crate) fn debug_check_finite<T: Element>(op: &'static str, data: &[T]) -> Result<()> {
    if let Some(index) = first_non_finite(data) {
        return Err(Error::NumericFault { op, index });
    }
    Ok(())
}

#[cfg(not(debug_assertions))]
pub(crate) fn debug_check_finite<T: Element>(_op: &'static str, _data: &[T]) -> Result<()> {
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_wrong_length() {
        assert!(Tensor::<f32>::from_vec(&[2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn scalar_has_empty_shape_and_one_element() {
        let s = Tensor::scalar(2.5f64);
        assert!(s.shape().is_empty());
        assert_eq!(s.numel(), 1);
        assert_eq!(s.item(), 2.5);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let x = Tensor::param(&[2], vec![1.0f64, 2.0]).unwrap();
        let y = x.scale(2.0).unwrap();
        assert!(y.backward().is_err());
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let x = Tensor::param(&[2, 3], vec![1.0f64; 6]).unwrap();
        let loss = x.sum().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn grad_of_zero_scaled_loss_is_zeros() {
        let x = Tensor::param(&[4], vec![3.0f64; 4]).unwrap();
        let loss = x.scale(0.0).unwrap().sum().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let x = Tensor::param(&[2], vec![1.0f64, 1.0]).unwrap();
        let loss = x.sum().unwrap();
        loss.backward().unwrap();
        // Second pass over a fresh graph accumulates on top.
        let loss2 = x.sum().unwrap();
        loss2.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let x = Tensor::param(&[3, 3], (0..9).map(|i| i as f64 * 0.37 - 1.0).collect()).unwrap();
            let y = x.matmul(&x.transpose().unwrap()).unwrap();
            let loss = y.gelu().unwrap().sum().unwrap();
            loss.backward().unwrap();
            x.grad().unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b, "identical graphs must produce bitwise-identical gradients");
    }

    #[test]
    fn untracked_graph_records_no_steps() {
        let x = Tensor::from_vec(&[2, 2], vec![1.0f32; 4]).unwrap();
        let y = x.matmul(&x).unwrap();
        assert!(!y.requires_grad());
        assert!(y.is_leaf());
    }
}

#[cfg(test)]
mod fast_math_tests {
    use super::*;

    #[test]
    fn fast_tanh_tracks_libm_within_1e6() {
        let mut worst = 0.0f64;
        let mut x = -12.0f32;
        while x < 12.0 {
            let fast = fast_tanh_f32(x) as f64;
            let exact = (x as f64).tanh();
            worst = worst.max((fast - exact).abs());
            x += 0.0037;
        }
        assert!(worst < 1e-6, "worst abs err {}", worst);
        assert_eq!(fast_tanh_f32(0.0), 0.0);
        assert_eq!(fast_tanh_f32(40.0), 1.0);
        assert_eq!(fast_tanh_f32(-40.0), -1.0);
        for v in [0.25f32, 1.5, 3.0] {
            assert_eq!(fast_tanh_f32(v), -fast_tanh_f32(-v));
        }
    }

    #[test]
    fn fast_exp_matches_libm_for_negatives() {
        let mut x = -80.0f32;
        while x <= 0.0 {
            let fast = fast_exp_neg_f32(x) as f64;
            let exact = (x as f64).exp();
            let rel = (fast - exact).abs() / exact.max(1e-300);
            assert!(rel < 2e-6 || exact < 1e-30, "x={} rel={}", x, rel);
            x += 0.173;
        }
        assert_eq!(fast_exp_neg_f32(0.0), 1.0);
        assert_eq!(fast_exp_neg_f32(-1000.0), 0.0);
    }
}
