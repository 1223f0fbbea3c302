//! Volumetric deep learning toolkit for part segmentation of 3D shapes.
//!
//! The crate is organized in layers. [`tensor`] and [`tape`] provide a small
//! reverse-mode autodiff engine over dense row-major tensors. [`nn`] builds
//! the differentiable operators used by the segmentation networks, most
//! importantly dilated 3D convolution. [`dilation`] holds the closed-form
//! feasibility and receptive-field arithmetic for dilation-rate schedules.
//! [`model`] assembles the network variants, [`voxel`] and [`synth`] produce
//! voxelized training data, and [`train`], [`metrics`], and [`features`]
//! cover optimization, evaluation, and part-feature extraction. [`cli`]
//! exposes all of it as a command-line tool.

pub mod categories;
pub mod checkpoint;
pub mod cli;
pub mod dilation;
pub mod error;
pub mod features;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod scalar;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod voxel;

pub use error::{Error, Result};
pub use scalar::{Dtype, Scalar};
pub use tensor::Tensor;
