//! Parameter-owning layer wrappers.
//!
//! A layer registers its tensors in a [`ParamStore`] at construction time and
//! remembers only the ids. `apply` binds those parameters to the given tape
//! and appends the corresponding operator, so the same store can be used with
//! a fresh tape every step.
//!
//! Weights draw from a zero-mean normal with standard deviation
//! `sqrt(2 / fan_in)`, which keeps activation variance stable under the
//! rectifier nonlinearity used throughout the models. Biases start at zero.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::nn::conv::{conv3d, conv3d_transpose, Conv3dCfg, ConvTranspose3dCfg};
use crate::nn::linear::fully_connected;
use crate::nn::norm::{batch_norm3d, BnStats};
use crate::nn::Mode;
use crate::scalar::Scalar;
use crate::tape::{ParamId, ParamStore, Tape, Var};
use crate::tensor::Tensor;

fn he_normal<T: Scalar, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("std is positive");
    let numel: usize = shape.iter().product();
    let data: Vec<T> = (0..numel).map(|_| T::from_f64(dist.sample(rng))).collect();
    Tensor::from_vec(shape, data).expect("shape matches the sampled length")
}

/// Volumetric convolution with learned weight and bias.
pub struct Conv3d {
    pub cfg: Conv3dCfg,
    weight: ParamId,
    bias: ParamId,
}

impl Conv3d {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        cfg: Conv3dCfg,
    ) -> Result<Self> {
        cfg.validate()?;
        let fan_in = cfg.in_ch * cfg.kernel * cfg.kernel * cfg.kernel;
        let weight = store.add(
            &format!("{name}.weight"),
            he_normal(rng, &cfg.weight_shape(), fan_in),
            true,
        )?;
        let bias = store.add(&format!("{name}.bias"), Tensor::zeros(&[cfg.out_ch])?, true)?;
        Ok(Self { cfg, weight, bias })
    }

    pub fn apply<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        tape: &mut Tape<T>,
        x: Var,
    ) -> Result<Var> {
        let w = tape.param(store, self.weight)?;
        let b = tape.param(store, self.bias)?;
        conv3d(tape, x, w, b, self.cfg)
    }
}

/// Transposed convolution used by the decoder of the encoder-decoder model.
pub struct ConvTranspose3d {
    pub cfg: ConvTranspose3dCfg,
    weight: ParamId,
    bias: ParamId,
}

impl ConvTranspose3d {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        cfg: ConvTranspose3dCfg,
    ) -> Result<Self> {
        cfg.validate()?;
        let fan_in = cfg.in_ch * cfg.kernel * cfg.kernel * cfg.kernel;
        let weight = store.add(
            &format!("{name}.weight"),
            he_normal(rng, &cfg.weight_shape(), fan_in),
            true,
        )?;
        let bias = store.add(&format!("{name}.bias"), Tensor::zeros(&[cfg.out_ch])?, true)?;
        Ok(Self { cfg, weight, bias })
    }

    pub fn apply<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        tape: &mut Tape<T>,
        x: Var,
    ) -> Result<Var> {
        let w = tape.param(store, self.weight)?;
        let b = tape.param(store, self.bias)?;
        conv3d_transpose(tape, x, w, b, self.cfg)
    }
}

/// Batch normalization with learned affine parameters and running statistics
/// stored as non-trainable buffers.
pub struct BatchNorm3d {
    gamma: ParamId,
    beta: ParamId,
    mean: ParamId,
    var: ParamId,
    count: ParamId,
}

impl BatchNorm3d {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
    ) -> Result<Self> {
        let ones = Tensor::filled(&[channels], T::one())?;
        let zeros = Tensor::zeros(&[channels])?;
        Ok(Self {
            gamma: store.add(&format!("{name}.gamma"), ones.clone(), true)?,
            beta: store.add(&format!("{name}.beta"), zeros.clone(), true)?,
            mean: store.add(&format!("{name}.running_mean"), zeros, false)?,
            var: store.add(&format!("{name}.running_var"), ones, false)?,
            count: store.add(&format!("{name}.batches"), Tensor::zeros(&[1])?, false)?,
        })
    }

    pub fn apply<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        tape: &mut Tape<T>,
        x: Var,
        mode: Mode,
    ) -> Result<Var> {
        let gamma = tape.param(store, self.gamma)?;
        let beta = tape.param(store, self.beta)?;
        let mut mean = store.get(self.mean).clone();
        let mut var = store.get(self.var).clone();
        let mut count = store.get(self.count).clone();
        let y = batch_norm3d(
            tape,
            x,
            gamma,
            beta,
            BnStats { mean: &mut mean, var: &mut var, count: &mut count },
            mode,
        )?;
        if mode == Mode::Train {
            *store.get_mut(self.mean) = mean;
            *store.get_mut(self.var) = var;
            *store.get_mut(self.count) = count;
        }
        Ok(y)
    }
}

/// Fully connected layer on flat features.
pub struct Linear {
    weight: ParamId,
    bias: ParamId,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_features: usize,
        out_features: usize,
    ) -> Result<Self> {
        let weight = store.add(
            &format!("{name}.weight"),
            he_normal(rng, &[out_features, in_features], in_features),
            true,
        )?;
        let bias = store.add(&format!("{name}.bias"), Tensor::zeros(&[out_features])?, true)?;
        Ok(Self { weight, bias })
    }

    pub fn apply<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        tape: &mut Tape<T>,
        x: Var,
    ) -> Result<Var> {
        let w = tape.param(store, self.weight)?;
        let b = tape.param(store, self.bias)?;
        fully_connected(tape, x, w, b)
    }
}
