//! Batch normalization over volumetric activations.

use crate::error::{Error, Result};
use crate::nn::Mode;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::{as_batched, Tensor};

/// Numerical floor added to the variance before taking the inverse root.
pub const BN_EPS: f64 = 1e-5;
/// Fraction of the previous running statistic retained per update.
pub const BN_MOMENTUM: f64 = 0.9;

/// Running statistics owned by the caller and updated in place during
/// training. `count` has a single element holding the number of batches
/// folded in so far; evaluation before the first update is rejected because
/// the running variance would still be the arbitrary initial value.
pub struct BnStats<'a, T> {
    pub mean: &'a mut Tensor<T>,
    pub var: &'a mut Tensor<T>,
    pub count: &'a mut Tensor<T>,
}

/// Normalizes each channel to zero mean and unit variance, then applies the
/// learned affine pair `gamma`, `beta`. In training mode the statistics come
/// from the current batch (biased variance over batch and space) and the
/// running buffers absorb them; in eval mode the running buffers are used
/// directly.
pub fn batch_norm3d<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    gamma: Var,
    beta: Var,
    stats: BnStats<'_, T>,
    mode: Mode,
) -> Result<Var> {
    let (n, c, d, h, w, _batched) = as_batched(tape.value(x)?.shape())?;
    if tape.value(gamma)?.shape() != [c] || tape.value(beta)?.shape() != [c] {
        return Err(Error::ShapeMismatch(format!(
            "batch_norm3d expects gamma and beta of shape [{c}], got {:?} and {:?}",
            tape.value(gamma)?.shape(),
            tape.value(beta)?.shape()
        )));
    }
    if stats.mean.shape() != [c] || stats.var.shape() != [c] {
        return Err(Error::ShapeMismatch(format!(
            "batch_norm3d expects running statistics of shape [{c}]"
        )));
    }
    let vol = d * h * w;
    let m = n * vol;

    let (mu, inv): (Vec<f64>, Vec<f64>) = match mode {
        Mode::Train => {
            let vx = tape.value(x)?.data();
            let mut mu = vec![0.0f64; c];
            let mut var = vec![0.0f64; c];
            for ch in 0..c {
                let mut s = 0.0f64;
                for b in 0..n {
                    for v in &vx[(b * c + ch) * vol..][..vol] {
                        s += v.as_f64();
                    }
                }
                let mean = s / m as f64;
                let mut sq = 0.0f64;
                for b in 0..n {
                    for v in &vx[(b * c + ch) * vol..][..vol] {
                        let dv = v.as_f64() - mean;
                        sq += dv * dv;
                    }
                }
                mu[ch] = mean;
                var[ch] = sq / m as f64;
            }
            for ch in 0..c {
                let rm = stats.mean.data()[ch].as_f64();
                let rv = stats.var.data()[ch].as_f64();
                stats.mean.data_mut()[ch] =
                    T::from_f64(BN_MOMENTUM * rm + (1.0 - BN_MOMENTUM) * mu[ch]);
                stats.var.data_mut()[ch] =
                    T::from_f64(BN_MOMENTUM * rv + (1.0 - BN_MOMENTUM) * var[ch]);
            }
            let seen = stats.count.data()[0].as_f64();
            stats.count.data_mut()[0] = T::from_f64(seen + 1.0);
            let inv = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
            (mu, inv)
        }
        Mode::Eval => {
            if stats.count.data()[0].as_f64() == 0.0 {
                return Err(Error::InvalidConfig(
                    "batch norm evaluated before any statistics were accumulated"
                        .into(),
                ));
            }
            let mu = stats.mean.data().iter().map(|v| v.as_f64()).collect();
            let inv = stats
                .var
                .data()
                .iter()
                .map(|v| 1.0 / (v.as_f64() + BN_EPS).sqrt())
                .collect();
            (mu, inv)
        }
    };

    let mut out = Tensor::zeros(tape.value(x)?.shape())?;
    {
        let vx = tape.value(x)?.data();
        let vg = tape.value(gamma)?.data();
        let vb = tape.value(beta)?.data();
        let od = out.data_mut();
        for b in 0..n {
            for ch in 0..c {
                let g = vg[ch].as_f64();
                let bt = vb[ch].as_f64();
                let base = (b * c + ch) * vol;
                for i in 0..vol {
                    let xhat = (vx[base + i].as_f64() - mu[ch]) * inv[ch];
                    od[base + i] = T::from_f64(xhat * g + bt);
                }
            }
        }
    }

    Ok(tape.push(
        out,
        Some(Box::new(move |vals, grad_out, grads| {
            let vx = vals.get(x);
            let vg = vals.get(gamma);
            let go = grad_out.data();
            let mut gin = Tensor::zeros(vx.shape()).expect("input shape is valid");
            let mut ggamma = Tensor::zeros(&[c]).expect("channel count is valid");
            let mut gbeta = Tensor::zeros(&[c]).expect("channel count is valid");
            for ch in 0..c {
                let gm = vg.data()[ch].as_f64();
                let mut sum_g = 0.0f64;
                let mut sum_g_xhat = 0.0f64;
                for b in 0..n {
                    let base = (b * c + ch) * vol;
                    for i in 0..vol {
                        let g = go[base + i].as_f64();
                        let xhat = (vx.data()[base + i].as_f64() - mu[ch]) * inv[ch];
                        sum_g += g;
                        sum_g_xhat += g * xhat;
                    }
                }
                ggamma.data_mut()[ch] = T::from_f64(sum_g_xhat);
                gbeta.data_mut()[ch] = T::from_f64(sum_g);
                match mode {
                    Mode::Train => {
                        let scale = gm * inv[ch] / m as f64;
                        for b in 0..n {
                            let base = (b * c + ch) * vol;
                            for i in 0..vol {
                                let g = go[base + i].as_f64();
                                let xhat =
                                    (vx.data()[base + i].as_f64() - mu[ch]) * inv[ch];
                                gin.data_mut()[base + i] = T::from_f64(
                                    scale * (m as f64 * g - sum_g - xhat * sum_g_xhat),
                                );
                            }
                        }
                    }
                    Mode::Eval => {
                        let scale = gm * inv[ch];
                        for b in 0..n {
                            let base = (b * c + ch) * vol;
                            for i in 0..vol {
                                gin.data_mut()[base + i] =
                                    T::from_f64(go[base + i].as_f64() * scale);
                            }
                        }
                    }
                }
            }
            grads.accumulate(x, gin);
            grads.accumulate(gamma, ggamma);
            grads.accumulate(beta, gbeta);
        })),
    ))
}
