//! Spatial pooling operators.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::{as_batched, volumetric_shape, Tensor};

/// 2x2x2 max pooling with stride 2. Every spatial extent must be even.
/// Ties inside a window resolve to the first maximum in raster scan order
/// (z, then y, then x), which keeps the backward scatter deterministic.
pub fn max_pool3d<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let (n, c, d, h, w, batched) = as_batched(tape.value(x)?.shape())?;
    if d % 2 != 0 || h % 2 != 0 || w % 2 != 0 {
        return Err(Error::ShapeMismatch(format!(
            "max_pool3d requires even spatial extents, got ({d}, {h}, {w})"
        )));
    }
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    let hw = h * w;
    let dhw = d * hw;
    let ohw = oh * ow;
    let odhw = od * ohw;
    let mut out = Tensor::zeros(&volumetric_shape(n, c, od, oh, ow, batched))?;
    let mut argmax = vec![0u32; n * c * odhw];
    {
        let vx = tape.value(x)?.data();
        let out_data = out.data_mut();
        for nc in 0..n * c {
            let xc = &vx[nc * dhw..][..dhw];
            let oc = &mut out_data[nc * odhw..][..odhw];
            let ac = &mut argmax[nc * odhw..][..odhw];
            let mut at = 0;
            for oz in 0..od {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = T::neg_infinity();
                        let mut best_idx = 0usize;
                        for kz in 0..2 {
                            for ky in 0..2 {
                                for kx in 0..2 {
                                    let idx = ((2 * oz + kz) * h + 2 * oy + ky) * w
                                        + 2 * ox
                                        + kx;
                                    if xc[idx] > best {
                                        best = xc[idx];
                                        best_idx = idx;
                                    }
                                }
                            }
                        }
                        oc[at] = best;
                        ac[at] = (nc * dhw + best_idx) as u32;
                        at += 1;
                    }
                }
            }
        }
    }
    let in_shape = tape.value(x)?.shape().to_vec();
    Ok(tape.push(
        out,
        Some(Box::new(move |_vals, grad_out, grads| {
            let mut gin = Tensor::zeros(&in_shape).expect("input shape is valid");
            let gd = gin.data_mut();
            for (g, &idx) in grad_out.data().iter().zip(&argmax) {
                gd[idx as usize] += *g;
            }
            grads.accumulate(x, gin);
        })),
    ))
}

/// Mean over all spatial positions, `(N, C, D, H, W) -> (N, C)` or
/// `(C, D, H, W) -> (C)`. Sums accumulate in `f64`.
pub fn global_avg_pool<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let (n, c, d, h, w, batched) = as_batched(tape.value(x)?.shape())?;
    let vol = d * h * w;
    let mut out_data = Vec::with_capacity(n * c);
    {
        let vx = tape.value(x)?.data();
        for nc in 0..n * c {
            let mut s = 0.0f64;
            for v in &vx[nc * vol..][..vol] {
                s += v.as_f64();
            }
            out_data.push(T::from_f64(s / vol as f64));
        }
    }
    let out_shape: Vec<usize> = if batched { vec![n, c] } else { vec![c] };
    let in_shape = tape.value(x)?.shape().to_vec();
    let out = Tensor::from_vec(&out_shape, out_data)?;
    Ok(tape.push(
        out,
        Some(Box::new(move |_vals, grad_out, grads| {
            let mut gin = Tensor::zeros(&in_shape).expect("input shape is valid");
            let scale = T::from_f64(1.0 / vol as f64);
            let gd = gin.data_mut();
            for (nc, g) in grad_out.data().iter().enumerate() {
                let gv = *g * scale;
                for o in &mut gd[nc * vol..][..vol] {
                    *o = gv;
                }
            }
            grads.accumulate(x, gin);
        })),
    ))
}
