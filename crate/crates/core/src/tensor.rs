//! Dense row-major tensors.
//!
//! The last axis is contiguous in memory. Volumetric maps use the layout
//! `(N, C, D, H, W)` where `W` indexes the x axis, matching the x-fastest
//! raster order of serialized voxel grids, so a voxel grid can be wrapped
//! into a tensor without copying.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    data: Vec<T>,
    shape: Vec<usize>,
}

impl<T: Scalar> Tensor<T> {
    /// Wraps `data` with the given shape. Every extent must be positive and
    /// their product must equal `data.len()`. An empty shape is a scalar.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::ShapeMismatch(format!(
                "tensor shape {shape:?} has a zero extent"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} implies {numel} elements but {} were provided",
                data.len()
            )));
        }
        Ok(Tensor {
            data,
            shape: shape.to_vec(),
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::filled(shape, T::zero())
    }

    pub fn filled(shape: &[usize], value: T) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::ShapeMismatch(format!(
                "tensor shape {shape:?} has a zero extent"
            )));
        }
        let numel: usize = shape.iter().product();
        Ok(Tensor {
            data: vec![value; numel],
            shape: shape.to_vec(),
        })
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            data: vec![value],
            shape: Vec::new(),
        }
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

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Returns the single element of a scalar (one-element) tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Reinterprets the tensor under a new shape with the same element count.
    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::ShapeMismatch(format!(
                "tensor shape {shape:?} has a zero extent"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {:?} ({} elements) to {shape:?} ({numel} elements)",
                self.shape,
                self.data.len()
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Element-wise conversion to another precision.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            data: self.data.iter().map(|&v| U::from_f64(v.as_f64())).collect(),
            shape: self.shape.clone(),
        }
    }

    /// Largest absolute element, useful for error reporting in tests.
    pub fn max_abs(&self) -> f64 {
        self.data
            .iter()
            .map(|v| v.as_f64().abs())
            .fold(0.0, f64::max)
    }
}

/// Splits a volumetric shape into `(n, c, d, h, w)`, accepting both batched
/// rank-5 `(N, C, D, H, W)` and unbatched rank-4 `(C, D, H, W)` tensors.
/// Returns the extents together with whether a batch axis was present.
pub fn as_batched(shape: &[usize]) -> Result<(usize, usize, usize, usize, usize, bool)> {
    match *shape {
        [n, c, d, h, w] => Ok((n, c, d, h, w, true)),
        [c, d, h, w] => Ok((1, c, d, h, w, false)),
        _ => Err(Error::ShapeMismatch(format!(
            "expected a rank-4 (C, D, H, W) or rank-5 (N, C, D, H, W) tensor, got {shape:?}"
        ))),
    }
}

/// Rebuilds a volumetric shape, restoring the batch axis only if the
/// operation's input had one.
pub fn volumetric_shape(
    n: usize,
    c: usize,
    d: usize,
    h: usize,
    w: usize,
    batched: bool,
) -> Vec<usize> {
    if batched {
        vec![n, c, d, h, w]
    } else {
        debug_assert_eq!(n, 1);
        vec![c, d, h, w]
    }
}
