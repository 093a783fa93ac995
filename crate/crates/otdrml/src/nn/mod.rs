//! Minimal from-scratch neural-network kernels: 1-D convolution, dense
//! layers, activations, max-pooling, inverted dropout, losses, and Adam —
//! all in 64-bit floats with exact analytic gradients.
//!
//! Layers cache what their backward pass needs during `forward`; calling
//! `backward` first is a state error. Gradient buffers are overwritten (not
//! accumulated) by each backward pass, so a microbatch driver sums the
//! flattened gradients itself in a deterministic order.

mod adam;
mod gradcheck;
mod layers;
mod loss;

pub use adam::Adam;
pub use gradcheck::{max_relative_error, numeric_gradient};
pub use layers::{Conv1d, Dense, Dropout, MaxPool1d, Relu, Sigmoid};
pub use loss::{bce, bce_grad, mse, mse_grad, BCE_EPS};

use crate::error::{OtdrError, Result};

/// Dense row-major tensor of 64-bit floats; rank 3 `[batch, channels,
/// length]` between conv layers, rank 2 `[batch, features]` in the heads.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let want: usize = shape.iter().product();
        if data.len() != want {
            return Err(OtdrError::Shape(format!(
                "shape {shape:?} needs {want} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    /// Same data under a new shape with equal element count.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::from_vec(shape, self.data.clone())
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Dimension `i`, or 0 when out of rank (callers check rank first).
    pub fn dim(&self, i: usize) -> usize {
        self.shape.get(i).copied().unwrap_or(0)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn expect_rank(&self, rank: usize, what: &str) -> Result<()> {
        if self.rank() != rank {
            return Err(OtdrError::Shape(format!(
                "{what} expects a rank-{rank} tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok(())
    }

    fn expect_shape(&self, shape: &[usize], what: &str) -> Result<()> {
        if self.shape != shape {
            return Err(OtdrError::Shape(format!(
                "{what} expects shape {shape:?}, got {:?}",
                self.shape
            )));
        }
        Ok(())
    }
}
