//! Minimal dense tensor engine.
//!
//! A tensor is a flat row-major `Vec<f64>` plus a shape. The layer set is
//! fixed (conv2d, batch norm, relu, global average pooling, linear, softmax
//! cross-entropy) and each operation ships an explicit backward rule; there
//! is no general autograd graph. Keeping the engine this small makes every
//! gradient hand-checkable against finite differences.

mod ops;

pub use ops::{
    batch_norm_backward, batch_norm_eval, batch_norm_train, conv2d, conv2d_backward, gap,
    gap_backward, linear, linear_backward, relu, relu_backward, softmax_cross_entropy,
    softmax_cross_entropy_backward, BnCache,
};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Whether a forward pass uses batch statistics (training) or running
/// statistics (evaluation).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::invalid(format!(
                "tensor data length {} does not match shape {:?} (= {} elements)",
                data.len(),
                shape,
                expect
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    /// Gaussian init with the given standard deviation.
    pub fn randn(shape: Vec<usize>, std: f64, rng: &mut Rng) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: (0..n).map(|_| std * rng.normal()).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Fails unless the tensor has exactly the given number of axes.
    pub fn expect_ndim(&self, ndim: usize, what: &str) -> Result<()> {
        if self.shape.len() != ndim {
            return Err(Error::invalid(format!(
                "{what}: expected {ndim}-d tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok(())
    }

    /// Element-wise sum; shapes must match exactly.
    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Learned affine plus tracked running statistics for one batch-norm layer.
///
/// Running statistics start at (mean 0, variance 1) so an untrained layer in
/// eval mode is close to the identity map, and are updated in train mode as
/// an exponential moving average with decay `momentum`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNormParams {
    pub fn new(channels: usize) -> Self {
        BatchNormParams {
            gamma: Tensor::full(vec![channels], 1.0),
            beta: Tensor::zeros(vec![channels]),
            running_mean: Tensor::zeros(vec![channels]),
            running_var: Tensor::full(vec![channels], 1.0),
            eps: 1e-5,
            momentum: 0.9,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.gamma.len();
        if self.beta.len() != c || self.running_mean.len() != c || self.running_var.len() != c {
            return Err(Error::invalid("batch-norm parameter lengths disagree"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::invalid(format!("batch-norm eps must be > 0, got {}", self.eps)));
        }
        if self.running_var.data().iter().any(|&v| v < 0.0) {
            return Err(Error::invalid("batch-norm running variance is negative"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_mismatched_length() {
        let err = Tensor::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn randn_is_seeded_and_scaled() {
        let stream = crate::rng::RngStream::new(11);
        let a = Tensor::randn(vec![4, 4], 0.5, &mut stream.derive(&[1]));
        let b = Tensor::randn(vec![4, 4], 0.5, &mut stream.derive(&[1]));
        assert_eq!(a, b);
        assert!(a.all_finite());
    }

    #[test]
    fn batch_norm_params_validate_catches_bad_eps() {
        let mut p = BatchNormParams::new(3);
        p.eps = 0.0;
        assert!(p.validate().is_err());
    }
}
