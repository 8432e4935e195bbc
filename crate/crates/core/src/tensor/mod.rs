//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Tensors are plain row-major values; cloning shares the underlying buffer.
//! Gradients are recorded on an explicit [`GradTape`]: create a tape, attach
//! the tensors you want gradients for with [`GradTape::watch`], run forward
//! operations, then call [`backward`] on a scalar loss. Watched tensors
//! accumulate their gradients in a cell shared by all clones, so parameters
//! held elsewhere (e.g. by a classifier) see the result.
//!
//! ```
//! use metasel::tensor::{backward, GradTape, Tensor};
//!
//! let x = Tensor::param(vec![3.0], &[1]);
//! let tape = GradTape::new();
//! let xt = tape.watch(&x).unwrap();
//! let y = xt.mul(&xt).unwrap().sum().unwrap(); // y = x^2
//! backward(&y).unwrap();
//! assert_eq!(x.grad().unwrap()[0], 6.0);
//! ```
//!
//! Everything is 64-bit; forward results are bitwise deterministic. A tape
//! and the tensors taped on it belong to one worker at a time; untaped
//! tensors are immutable values that can be shared freely.

mod ops;
mod optim;
mod tape;

pub use optim::Sgd;
pub use tape::{backward, GradTape};

use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};

pub(crate) type GradCell = Arc<Mutex<Option<Vec<f64>>>>;

/// Dense n-dimensional array of f64, row-major.
#[derive(Clone)]
pub struct Tensor {
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Arc<Vec<f64>>,
    pub(crate) requires_grad: bool,
    /// Present iff `requires_grad`; shared by clones so gradients written by
    /// `backward` are visible through any handle.
    pub(crate) grad: Option<GradCell>,
    /// Present while the tensor participates in a tape.
    pub(crate) node: Option<tape::NodeRef>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("requires_grad", &self.requires_grad)
            .field("taped", &self.node.is_some())
            .finish()
    }
}

impl Tensor {
    /// Create a tensor from a flat row-major buffer.
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite tensor entry {v}")));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
            requires_grad: false,
            grad: None,
            node: None,
        })
    }

    /// All-zero tensor of the given shape.
    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![0.0; numel]),
            requires_grad: false,
            grad: None,
            node: None,
        }
    }

    /// 0-dimensional-like scalar (shape `[1]`).
    pub fn scalar(v: f64) -> Self {
        Tensor::new(vec![v], &[1]).expect("scalar is always valid")
    }

    /// A trainable tensor: `requires_grad` with an empty gradient cell.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Self {
        let mut t = Tensor::new(data, shape).expect("param data must match shape");
        t.requires_grad = true;
        t.grad = Some(Arc::new(Mutex::new(None)));
        t
    }

    /// Copy of `self` that requires gradients (fresh cell, same data).
    pub fn with_grad(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            requires_grad: true,
            grad: Some(Arc::new(Mutex::new(None))),
            node: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// The scalar value; errors when the tensor has more than one element.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::Shape(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Current accumulated gradient, if any.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.grad.as_ref().and_then(|c| c.lock().unwrap().clone())
    }

    /// Clear the accumulated gradient.
    pub fn zero_grad(&self) {
        if let Some(c) = &self.grad {
            *c.lock().unwrap() = None;
        }
    }

    /// Take the gradient out, leaving the cell empty.
    pub(crate) fn take_grad(&self) -> Option<Vec<f64>> {
        self.grad.as_ref().and_then(|c| c.lock().unwrap().take())
    }

    /// Replace the underlying buffer in place (used by optimizers).
    pub(crate) fn data_mut(&mut self) -> &mut Vec<f64> {
        Arc::make_mut(&mut self.data)
    }

    /// Index of the largest entry (first on ties). 1-D only.
    pub fn argmax(&self) -> Result<usize> {
        if self.rank() != 1 || self.data.is_empty() {
            return Err(Error::Shape(format!(
                "argmax expects a nonempty vector, got shape {:?}",
                self.shape
            )));
        }
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        Ok(best)
    }

    /// Numerically stable softmax of a vector (max-subtraction; not taped).
    pub fn softmax(&self) -> Result<Tensor> {
        if self.rank() != 1 || self.data.is_empty() {
            return Err(Error::Shape(format!(
                "softmax expects a nonempty vector, got shape {:?}",
                self.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: Arc::new(softmax_slice(&self.data)),
            requires_grad: false,
            grad: None,
            node: None,
        })
    }
}

/// Stable softmax of a slice.
pub(crate) fn softmax_slice(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

/// log(sum(exp(x))) with max-subtraction.
pub(crate) fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}
