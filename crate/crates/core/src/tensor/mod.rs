//! Dense 64-bit tensors and a define-by-run reverse-mode differentiation graph.
//!
//! A [`Tensor`] is a plain owned value: shape, row-major data and an optional
//! gradient buffer. Computations happen on a [`Graph`], which is rebuilt for
//! every forward pass. Parameters enter the graph as leaves via
//! [`Graph::leaf`]; after [`Graph::backward`] their gradients are read back
//! with [`Graph::grad`] and folded into the owning tensor with
//! [`Tensor::accumulate_grad`].

mod gradcheck;
mod graph;
mod kernels;

pub use gradcheck::{grad_check, GradCheckReport, GradFailure, FD_STEP};
pub use graph::{Elementwise, Graph, Operand, Var, IGNORE_INDEX};

use crate::error::{Error, Result};

/// Number of elements described by `shape`; the empty shape is a scalar.
pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::dim("tensor", &shape, &[data.len()]));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    /// A trainable tensor. Panics if `data` does not fill `shape`.
    pub fn parameter(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(numel(&shape), data.len(), "parameter shape/data mismatch");
        Tensor {
            shape,
            data,
            requires_grad: true,
            grad: None,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Tensor {
            shape,
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        if !requires_grad {
            self.grad = None;
        }
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Adds `g` into the gradient buffer. Tensors that do not require grad
    /// ignore the call.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if !self.requires_grad {
            return Ok(());
        }
        if g.len() != self.data.len() {
            return Err(Error::dim("accumulate_grad", &self.shape, &[g.len()]));
        }
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(b, x)| *b += x),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn take_grad(&mut self) -> Option<Vec<f64>> {
        self.grad.take()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::Rank {
                op: "item",
                shape: self.shape.clone(),
            });
        }
        Ok(self.data[0])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_cover_data() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::new(vec![2, 3], vec![0.0; 5]),
            Err(Error::Dimension { .. })
        ));
        assert_eq!(Tensor::scalar(3.0).numel(), 1);
    }

    #[test]
    fn non_trainable_tensor_never_accumulates() {
        let mut t = Tensor::zeros(vec![2]);
        t.accumulate_grad(&[1.0, 2.0]).unwrap();
        assert!(t.grad().is_none());

        let mut p = Tensor::parameter(vec![2], vec![0.0, 0.0]);
        p.accumulate_grad(&[1.0, 2.0]).unwrap();
        p.accumulate_grad(&[1.0, 2.0]).unwrap();
        assert_eq!(p.grad().unwrap(), &[2.0, 4.0]);
        assert!(p.accumulate_grad(&[1.0]).is_err());
    }
}
