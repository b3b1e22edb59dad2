//! Dense row-major f32 tensors and the reverse-mode tape.
//!
//! Storage is 32-bit; every reduction accumulates in f64 so that gradient
//! checks against central finite differences stay stable.

mod io;
mod kernels;
mod tape;

pub use io::{read_tensor, write_tensor_f32, write_tensor_i8, SerializedTensor, DTYPE_F32, DTYPE_I8};
pub use kernels::Padding;
pub use tape::{GradMap, Tape, ValueId};

/// Raw max-pool kernel, shared with the no-tape inference path.
pub(crate) fn max_pool_raw(
    data: &[f32],
    shape: &[usize],
    win: usize,
    stride: usize,
    padding: Padding,
) -> crate::error::Result<(Vec<f32>, Vec<usize>, Vec<u32>)> {
    kernels::max_pool_forward(data, shape, win, stride, padding)
}

/// Raw matmul kernel, shared with the no-tape inference path.
pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> crate::error::Result<(Vec<f32>, Vec<usize>)> {
    kernels::matmul_forward(a.data(), a.shape(), b.data(), b.shape())
}

use crate::error::{Error, Result};

/// Dense n-dimensional array of f32 in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("from_vec", format!("zero dimension in {shape:?}")));
        }
        if numel != data.len() {
            return Err(Error::shape(
                "from_vec",
                format!("shape {shape:?} wants {numel} elements, got {}", data.len()),
            ));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn filled(shape: Vec<usize>, value: f32) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f32>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::shape(
                "set_grad",
                format!("grad length {} vs data length {}", grad.len(), self.data.len()),
            ));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> Result<f32> {
        if self.data.len() != 1 {
            return Err(Error::shape("item", format!("numel {} != 1", self.data.len())));
        }
        Ok(self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Byte-exact equality of the raw f32 payload (ignores grad).
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Pure convolution, matching the tape op. Differentiation happens on the tape.
pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, padding: Padding) -> Result<Tensor> {
    let (data, shape) = kernels::conv2d_forward(
        input.data(),
        input.shape(),
        kernel.data(),
        kernel.shape(),
        stride,
        padding,
    )?;
    Tensor::from_vec(shape, data)
}

/// Temperature-softened softmax over the last axis.
pub fn softmax_temperature(logits: &Tensor, tau: f32) -> Result<Tensor> {
    let data = kernels::softmax_temp_forward(logits.data(), logits.shape(), tau)?;
    Tensor::from_vec(logits.shape().to_vec(), data)
}

/// Mean over rows of KL(p || q), with q clamped at 1e-12 inside the log.
pub fn kl_divergence(p: &Tensor, q: &Tensor) -> Result<Tensor> {
    let v = kernels::kl_div_forward(p.data(), q.data(), p.shape(), q.shape())?;
    Ok(Tensor::scalar(v))
}

/// Mean over rows of -sum(labels * log_softmax(logits)).
pub fn cross_entropy(logits: &Tensor, labels: &Tensor) -> Result<Tensor> {
    let v = kernels::cross_entropy_forward(logits.data(), labels.data(), logits.shape(), labels.shape())?;
    Ok(Tensor::scalar(v))
}
