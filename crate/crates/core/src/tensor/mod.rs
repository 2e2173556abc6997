//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a plain value (shape + row-major data). Differentiable
//! computation goes through a [`Tape`]: leaves are registered with
//! [`Tape::leaf`], every op records a node, and [`Tape::backward`] replays
//! the recording in reverse to produce per-leaf gradients. One tape is
//! confined to one thread; tensors detached from a tape are immutable values
//! and freely shareable.

mod svd;
mod tape;

pub use svd::singular_values;
pub use tape::{Gradients, Tape};

use crate::error::{Error, Result};

/// Handle of a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

/// Dense multi-dimensional array of f64 values, optionally attached to a tape.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    node_id: Option<NodeId>,
}

impl Tensor {
    /// Build a tensor, validating element count and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::DataLength {
                shape,
                len: data.len(),
                expected,
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "tensor construction",
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            node_id: None,
        })
    }

    /// Rank-0 scalar.
    pub fn scalar(v: f64) -> Result<Self> {
        Tensor::new(vec![], vec![v])
    }

    /// Rank-1 vector.
    pub fn vector(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Tensor::new(vec![n], data)
    }

    /// Rank-2 matrix from row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
            requires_grad: false,
            node_id: None,
        }
    }

    /// Internal constructor for op outputs; skips the finiteness scan so a
    /// non-finite loss surfaces at the trainer's abort check, not mid-op.
    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, id: NodeId) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data,
            requires_grad,
            node_id: Some(id),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn node_id(&self) -> Option<NodeId> {
        self.node_id
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    /// Value of a scalar tensor.
    pub fn item(&self) -> Result<f64> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(Error::NotScalar {
                context: "item",
                got: self.shape.clone(),
            })
        }
    }

    /// (rows, cols) of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(Error::BadShape {
                op: "dims2",
                expected: "a rank-2 tensor",
                got: self.shape.clone(),
            }),
        }
    }

    pub(crate) fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub(crate) fn set_node_id(&mut self, id: NodeId) {
        self.node_id = Some(id);
    }
}

/// Numerically stable softplus, log(1 + exp(x)).
pub(crate) fn softplus_scalar(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic sigmoid, the softplus derivative.
pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) const GELU_COEFF: f64 = 0.044715;

/// GELU via the tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi)(x + 0.044715 x^3))).
pub(crate) fn gelu_scalar(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + GELU_COEFF * x * x * x)).tanh())
}

pub(crate) fn gelu_grad_scalar(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + GELU_COEFF * x * x * x);
    let t = u.tanh();
    let du = c * (1.0 + 3.0 * GELU_COEFF * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_validates_length() {
        let err = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0]).unwrap_err();
        assert!(matches!(err, Error::DataLength { .. }));
    }

    #[test]
    fn construction_rejects_non_finite() {
        let err = Tensor::vector(vec![1.0, f64::NAN]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }

    #[test]
    fn scalar_item() {
        let t = Tensor::scalar(3.5).unwrap();
        assert!(t.is_scalar());
        assert_eq!(t.item().unwrap(), 3.5);
        assert!(Tensor::vector(vec![1.0, 2.0]).unwrap().item().is_err());
    }

    #[test]
    fn softplus_scalar_asymptotes() {
        assert!((softplus_scalar(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((softplus_scalar(100.0) - 100.0).abs() < 1e-12);
        assert!(softplus_scalar(-100.0).abs() < 1e-12);
    }

    #[test]
    fn gelu_scalar_values() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert!((gelu_scalar(10.0) - 10.0).abs() < 1e-9);
        // Frozen from a scalar evaluation of the tanh-form expression.
        assert!((gelu_scalar(1.0) - 0.841191990608277).abs() < 1e-12);
    }
}
