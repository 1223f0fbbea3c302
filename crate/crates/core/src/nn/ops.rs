//! Channel-wise arithmetic used by the attention and fusion blocks.

use crate::error::{Error, Result};
use crate::nn::dot8;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::{as_batched, volumetric_shape, Tensor};

/// Multiplies every spatial position of channel `c` in sample `n` by the
/// scalar `a[n, c]` (or `a[c]` for unbatched input). The scale tensor shape
/// must match the volume's batch layout.
pub fn scale_channels<T: Scalar>(tape: &mut Tape<T>, x: Var, a: Var) -> Result<Var> {
    let (n, c, d, h, w, batched) = as_batched(tape.value(x)?.shape())?;
    let expect: Vec<usize> = if batched { vec![n, c] } else { vec![c] };
    if tape.value(a)?.shape() != &expect[..] {
        return Err(Error::ShapeMismatch(format!(
            "scale_channels expects scales of shape {expect:?}, got {:?}",
            tape.value(a)?.shape()
        )));
    }
    let vol = d * h * w;
    let mut out = Tensor::zeros(tape.value(x)?.shape())?;
    {
        let vx = tape.value(x)?.data();
        let va = tape.value(a)?.data();
        let od = out.data_mut();
        for nc in 0..n * c {
            let s = va[nc];
            for (o, v) in od[nc * vol..][..vol].iter_mut().zip(&vx[nc * vol..][..vol]) {
                *o = *v * s;
            }
        }
    }
    Ok(tape.push(
        out,
        Some(Box::new(move |vals, grad_out, grads| {
            let vx = vals.get(x);
            let va = vals.get(a);
            let go = grad_out.data();
            let mut gx = Tensor::zeros(vx.shape()).expect("input shape is valid");
            let mut ga = Tensor::zeros(va.shape()).expect("scale shape is valid");
            for nc in 0..n * c {
                let s = va.data()[nc];
                let gs = &go[nc * vol..][..vol];
                let xs = &vx.data()[nc * vol..][..vol];
                for (o, g) in gx.data_mut()[nc * vol..][..vol].iter_mut().zip(gs) {
                    *o = *g * s;
                }
                ga.data_mut()[nc] = dot8(gs, xs);
            }
            grads.accumulate(x, gx);
            grads.accumulate(a, ga);
        })),
    ))
}

/// Stacks two volumes along the channel axis. Batch and spatial extents must
/// agree; the output has `C_a + C_b` channels.
pub fn concat_channels<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    let (na, ca, da, ha, wa, batched_a) = as_batched(tape.value(a)?.shape())?;
    let (nb, cb, db, hb, wb, batched_b) = as_batched(tape.value(b)?.shape())?;
    if (na, da, ha, wa, batched_a) != (nb, db, hb, wb, batched_b) {
        return Err(Error::ShapeMismatch(format!(
            "concat_channels requires matching batch and spatial extents, got {:?} and {:?}",
            tape.value(a)?.shape(),
            tape.value(b)?.shape()
        )));
    }
    let vol = da * ha * wa;
    let cout = ca + cb;
    let mut out = Tensor::zeros(&volumetric_shape(na, cout, da, ha, wa, batched_a))?;
    {
        let va = tape.value(a)?.data();
        let vb = tape.value(b)?.data();
        let od = out.data_mut();
        for s in 0..na {
            let dst = &mut od[s * cout * vol..][..cout * vol];
            dst[..ca * vol].copy_from_slice(&va[s * ca * vol..][..ca * vol]);
            dst[ca * vol..].copy_from_slice(&vb[s * cb * vol..][..cb * vol]);
        }
    }
    let a_shape = tape.value(a)?.shape().to_vec();
    let b_shape = tape.value(b)?.shape().to_vec();
    Ok(tape.push(
        out,
        Some(Box::new(move |_vals, grad_out, grads| {
            let go = grad_out.data();
            let mut ga = Tensor::zeros(&a_shape).expect("input shape is valid");
            let mut gb = Tensor::zeros(&b_shape).expect("input shape is valid");
            for s in 0..na {
                let src = &go[s * cout * vol..][..cout * vol];
                ga.data_mut()[s * ca * vol..][..ca * vol]
                    .copy_from_slice(&src[..ca * vol]);
                gb.data_mut()[s * cb * vol..][..cb * vol]
                    .copy_from_slice(&src[ca * vol..]);
            }
            grads.accumulate(a, ga);
            grads.accumulate(b, gb);
        })),
    ))
}
