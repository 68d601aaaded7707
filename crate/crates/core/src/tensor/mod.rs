//! Minimal reverse-mode automatic differentiation on flat, row-major buffers.
//!
//! A [`Tape`] is an append-only arena of tensors. Forward operations push a
//! result slot together with a closure implementing the corresponding
//! backward rule; [`Tape::backward`] replays those closures in reverse
//! topological order (which is simply reverse insertion order, since inputs
//! always precede outputs on the tape).
//!
//! Gradients accumulate: calling `backward` twice without
//! [`Tape::zero_grads`] in between adds the second pass on top of the first,
//! mirroring the usual training-loop contract. All computation is sequential,
//! so results are bit-reproducible for a fixed binary.
//!
//! The engine is generic over [`Scalar`]; training runs in `f32`, gradient
//! checking in `f64`.

mod gradcheck;
mod ops;

pub use gradcheck::{grad_check, DEFAULT_GRAD_CHECK_EPS};

use crate::error::{Error, Result};

/// Handle to a tensor stored on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

/// Floating-point element type for tape computation.
pub trait Scalar:
    num_traits::Float + num_traits::NumAssign + std::fmt::Debug + std::fmt::Display + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    /// Gauss error function, used by the exact (non-tanh) GELU.
    fn erf(self) -> Self;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn erf(self) -> Self {
        statrs::function::erf::erf(self as f64) as f32
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn erf(self) -> Self {
        statrs::function::erf::erf(self)
    }
}

/// One tensor: contiguous row-major data plus gradient bookkeeping.
pub(crate) struct Slot<T> {
    pub data: Vec<T>,
    pub shape: Vec<usize>,
    pub requires_grad: bool,
    pub grad: Option<Vec<T>>,
}

/// Backward rule: `(slots, grad_of_output, transient_grads)`.
///
/// Reads forward values from `slots`, receives the output cotangent and
/// accumulates into the parents' entries of the transient gradient table.
pub(crate) type BackFn<T> = Box<dyn Fn(&[Slot<T>], &[T], &mut [Option<Vec<T>>])>;

pub struct Tape<T: Scalar> {
    slots: Vec<Slot<T>>,
    backward_fns: Vec<Option<BackFn<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { slots: Vec::new(), backward_fns: Vec::new() }
    }

    /// Number of tensors recorded so far.
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Insert a leaf tensor. `data.len()` must equal the shape product.
    pub fn leaf(&mut self, data: Vec<T>, shape: Vec<usize>, requires_grad: bool) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::Shape(format!(
                "leaf data length {} does not match shape {:?} (numel {})",
                data.len(),
                shape,
                numel
            )));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero-sized dimension in shape {:?}", shape)));
        }
        let id = self.push(data, shape, None);
        self.push_leaf_grad_flag(id, requires_grad);
        Ok(id)
    }

    /// Leaf that never receives gradients (inputs, targets, masks, ...).
    pub fn constant(&mut self, data: Vec<T>, shape: Vec<usize>) -> Result<TensorId> {
        self.leaf(data, shape, false)
    }

    pub(crate) fn push(&mut self, data: Vec<T>, shape: Vec<usize>, back: Option<BackFn<T>>) -> TensorId {
        let id = self.slots.len();
        self.slots.push(Slot { data, shape, requires_grad: false, grad: None });
        self.backward_fns.push(back);
        TensorId(id)
    }

    fn push_leaf_grad_flag(&mut self, id: TensorId, requires_grad: bool) {
        self.slots[id.0].requires_grad = requires_grad;
    }

    pub fn data(&self, id: TensorId) -> &[T] {
        &self.slots[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.slots[id.0].shape
    }

    pub fn numel(&self, id: TensorId) -> usize {
        self.slots[id.0].data.len()
    }

    /// Accumulated gradient, if this tensor requires grad and `backward` ran.
    pub fn grad(&self, id: TensorId) -> Option<&[T]> {
        self.slots[id.0].grad.as_deref()
    }

    /// Reset all accumulated gradients.
    pub fn zero_grads(&mut self) {
        for s in &mut self.slots {
            s.grad = None;
        }
    }

    /// Reverse pass from a scalar loss. Accumulates (`+=`) into the `grad`
    /// buffer of every tensor with `requires_grad`; tensors the loss does not
    /// depend on end up with an all-zero gradient.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.slots[loss.0].data.len() != 1 {
            return Err(Error::Invalid(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.slots[loss.0].shape
            )));
        }
        let mut transient: Vec<Option<Vec<T>>> = (0..self.slots.len()).map(|_| None).collect();
        transient[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = transient[i].take() else { continue };
            if let Some(back) = &self.backward_fns[i] {
                back(&self.slots, &g, &mut transient);
            }
            if self.slots[i].requires_grad {
                let slot = &mut self.slots[i];
                let buf = slot.grad.get_or_insert_with(|| vec![T::zero(); slot.data.len()]);
                for (dst, src) in buf.iter_mut().zip(&g) {
                    *dst += *src;
                }
            }
        }
        for s in &mut self.slots {
            if s.requires_grad && s.grad.is_none() {
                s.grad = Some(vec![T::zero(); s.data.len()]);
            }
        }
        Ok(())
    }
}

/// Accumulate `src` into the transient gradient entry for `idx`,
/// allocating a zero buffer of length `len` on first touch.
pub(crate) fn acc_grad<T: Scalar>(
    transient: &mut [Option<Vec<T>>],
    idx: usize,
    len: usize,
    write: impl FnOnce(&mut [T]),
) {
    let buf = transient[idx].get_or_insert_with(|| vec![T::zero(); len]);
    write(buf);
}

impl<T: Scalar> Tape<T> {
    /// Mark an existing leaf as a gradient target. Intended for tests and
    /// parameter binding; must only be applied to leaves.
    pub fn set_requires_grad(&mut self, id: TensorId, requires_grad: bool) {
        debug_assert!(self.backward_fns[id.0].is_none(), "requires_grad is a leaf property");
        self.push_leaf_grad_flag(id, requires_grad);
    }
}
