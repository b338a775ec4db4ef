//! Dense-tensor substrate with reverse-mode automatic differentiation.
//!
//! Everything downstream (graph attention, genre pooling, expert routing,
//! the training loop) is built from the op set in [`ops`]. Values are stored
//! as `f64` buffers; in [`Precision::Single`] mode every op output, parameter
//! and gradient is rounded through `f32` after it is computed, which gives
//! 32-bit storage semantics with a 64-bit accumulator. [`Precision::Double`]
//! keeps full `f64` and is what the finite-difference checks run under.
//!
//! A [`Tape`] owns one forward computation: ops append nodes in topological
//! order and [`Tensor`] handles are cheap references into it. Training code
//! builds a fresh tape per step; [`Param`]s live outside the tape and are
//! re-registered each forward pass.

pub mod container;
pub mod gradcheck;
pub mod nn;
pub mod ops;
pub mod optim;

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use crate::error::{GusdError, Result};
use ops::Op;

/// Storage precision for tape values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    /// Round every stored value through `f32` (training default).
    Single,
    /// Full `f64` (verification / gradient-check mode).
    Double,
}

impl Precision {
    #[inline]
    pub(crate) fn round(self, x: f64) -> f64 {
        match self {
            Precision::Single => x as f32 as f64,
            Precision::Double => x,
        }
    }

    pub(crate) fn round_buf(self, buf: &mut [f64]) {
        if self == Precision::Single {
            for v in buf.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}

/// A trainable parameter: named value + gradient accumulator, living outside
/// any tape. Cloning shares the underlying storage.
#[derive(Clone)]
pub struct Param {
    inner: Rc<ParamInner>,
}

struct ParamInner {
    name: String,
    shape: Vec<usize>,
    value: RefCell<Vec<f64>>,
    grad: RefCell<Vec<f64>>,
}

impl Param {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, value: Vec<f64>) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(n, value.len(), "param data length must match shape");
        Param {
            inner: Rc::new(ParamInner {
                name: name.into(),
                shape,
                grad: RefCell::new(vec![0.0; n]),
                value: RefCell::new(value),
            }),
        }
    }

    pub fn name(&self) -> &str {
        &self.inner.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn value(&self) -> Vec<f64> {
        self.inner.value.borrow().clone()
    }

    pub fn set_value(&self, v: Vec<f64>) {
        assert_eq!(v.len(), self.numel());
        *self.inner.value.borrow_mut() = v;
    }

    /// Current accumulated gradient.
    pub fn grad(&self) -> Vec<f64> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        for g in self.inner.grad.borrow_mut().iter_mut() {
            *g = 0.0;
        }
    }

    pub(crate) fn accumulate_grad(&self, g: &[f64]) {
        let mut slot = self.inner.grad.borrow_mut();
        for (s, gi) in slot.iter_mut().zip(g) {
            *s += gi;
        }
    }

    pub(crate) fn with_value<R>(&self, f: impl FnOnce(&mut Vec<f64>) -> R) -> R {
        f(&mut self.inner.value.borrow_mut())
    }

    /// Identity comparison: two handles to the same storage.
    pub fn same_storage(&self, other: &Param) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }
}

impl fmt::Debug for Param {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Param({:?}, shape={:?})", self.inner.name, self.inner.shape)
    }
}

pub(crate) struct TapeNode {
    pub data: Vec<f64>,
    pub shape: Vec<usize>,
    pub grad: Option<Vec<f64>>,
    pub requires_grad: bool,
    pub op: Op,
}

pub(crate) struct TapeInner {
    pub nodes: Vec<TapeNode>,
    pub precision: Precision,
    pub grad_enabled: bool,
    pub train_mode: bool,
}

/// Recording tape for one forward computation. Cheap to clone (handle).
#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl Tape {
    pub fn new(precision: Precision) -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                precision,
                grad_enabled: true,
                train_mode: false,
            })),
        }
    }

    pub fn precision(&self) -> Precision {
        self.inner.borrow().precision
    }

    /// Disable gradient recording: ops still compute values, but the tape
    /// cannot be differentiated. Used for evaluation passes.
    pub fn set_grad_enabled(&self, enabled: bool) {
        self.inner.borrow_mut().grad_enabled = enabled;
    }

    pub fn grad_enabled(&self) -> bool {
        self.inner.borrow().grad_enabled
    }

    /// Training mode enables dropout; evaluation mode makes it the identity.
    pub fn set_train_mode(&self, train: bool) {
        self.inner.borrow_mut().train_mode = train;
    }

    pub fn train_mode(&self) -> bool {
        self.inner.borrow().train_mode
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn push(&self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Op) -> Tensor {
        let mut inner = self.inner.borrow_mut();
        let requires_grad = requires_grad && inner.grad_enabled;
        let op = if inner.grad_enabled { op } else { Op::Leaf };
        let id = inner.nodes.len();
        inner.nodes.push(TapeNode {
            data,
            shape: shape.clone(),
            grad: None,
            requires_grad,
            op,
        });
        Tensor {
            id,
            shape,
            tape: self.clone(),
        }
    }

    /// Register a constant leaf (no gradient).
    pub fn constant(&self, data: Vec<f64>, shape: Vec<usize>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(GusdError::Shape(format!(
                "constant: shape {:?} implies {} elements, data has {}",
                shape,
                n,
                data.len()
            )));
        }
        let mut data = data;
        self.inner.borrow().precision.round_buf(&mut data);
        Ok(self.push(data, shape, false, Op::Leaf))
    }

    pub fn zeros(&self, shape: Vec<usize>) -> Tensor {
        let n: usize = shape.iter().product();
        self.push(vec![0.0; n], shape, false, Op::Leaf)
    }

    /// Register a [`Param`] as a differentiable leaf; after `backward` the
    /// leaf's gradient is accumulated into the param's grad buffer.
    pub fn param(&self, p: &Param) -> Tensor {
        let mut data = p.value();
        self.inner.borrow().precision.round_buf(&mut data);
        self.push(data, p.shape().to_vec(), true, Op::Param(p.clone()))
    }

    pub(crate) fn with_inner<R>(&self, f: impl FnOnce(&TapeInner) -> R) -> R {
        f(&self.inner.borrow())
    }

    pub(crate) fn with_inner_mut<R>(&self, f: impl FnOnce(&mut TapeInner) -> R) -> R {
        f(&mut self.inner.borrow_mut())
    }

    /// Reverse sweep from a scalar loss. Populates gradients for every
    /// reachable node that requires grad and accumulates into bound params.
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        if loss.numel() != 1 {
            return Err(GusdError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        if self.is_empty() {
            return Err(GusdError::Contract("backward on an empty tape".into()));
        }
        if !Rc::ptr_eq(&self.inner, &loss.tape.inner) {
            return Err(GusdError::Contract("loss does not belong to this tape".into()));
        }

        let precision = self.precision();
        let mut grads: Vec<Option<Vec<f64>>> = {
            let inner = self.inner.borrow();
            let mut g: Vec<Option<Vec<f64>>> = Vec::with_capacity(inner.nodes.len());
            g.resize_with(inner.nodes.len(), || None);
            g
        };
        grads[loss.id] = Some(vec![1.0]);

        {
            let inner = self.inner.borrow();
            if !inner.nodes[loss.id].requires_grad {
                return Err(GusdError::Contract(
                    "loss does not require grad (grad recording disabled?)".into(),
                ));
            }
            for id in (0..=loss.id).rev() {
                let g = match grads[id].take() {
                    Some(g) => g,
                    None => continue,
                };
                let node = &inner.nodes[id];
                if node.requires_grad {
                    ops::backward_step(&inner, id, &g, &mut grads);
                }
                if precision == Precision::Single {
                    let mut g = g;
                    precision.round_buf(&mut g);
                    grads[id] = Some(g);
                } else {
                    grads[id] = Some(g);
                }
            }
            if precision == Precision::Single {
                for g in grads.iter_mut().flatten() {
                    precision.round_buf(g);
                }
            }
        }

        // Store grads back on the nodes and export param gradients.
        let mut inner = self.inner.borrow_mut();
        for (id, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                if let Op::Param(p) = &inner.nodes[id].op {
                    p.accumulate_grad(&g);
                }
                inner.nodes[id].grad = Some(g);
            }
        }
        let _ = &mut inner;
        Ok(())
    }
}

/// Handle to one value on a [`Tape`].
#[derive(Clone)]
pub struct Tensor {
    pub(crate) id: usize,
    pub(crate) shape: Vec<usize>,
    pub(crate) tape: Tape,
}

impl Tensor {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    /// Copy of the underlying buffer.
    pub fn to_vec(&self) -> Vec<f64> {
        self.tape.with_inner(|inner| inner.nodes[self.id].data.clone())
    }

    /// Scalar value; panics if not a 1-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.tape.with_inner(|inner| inner.nodes[self.id].data[0])
    }

    /// Gradient of this node after `backward`, if it was reached.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.tape.with_inner(|inner| inner.nodes[self.id].grad.clone())
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.with_inner(|inner| inner.nodes[self.id].requires_grad)
    }

    pub(crate) fn rows_cols(&self) -> Result<(usize, usize)> {
        match self.shape.len() {
            1 => Ok((1, self.shape[0])),
            2 => Ok((self.shape[0], self.shape[1])),
            _ => Err(GusdError::Shape(format!(
                "expected a 1-d or 2-d tensor, got shape {:?}",
                self.shape
            ))),
        }
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor(id={}, shape={:?})", self.id, self.shape)
    }
}
