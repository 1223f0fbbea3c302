//! Dilated (atrous) 3D convolution and its transpose.
//!
//! A dilated kernel samples its taps `dilation` voxels apart, so the
//! receptive field grows without adding parameters or reducing resolution.
//! Both operators use same padding so the spatial extent is preserved at
//! stride 1.
//!
//! The stride-1 path, which carries nearly all of the training cost, lowers
//! convolution to matrix multiplication. Per z slice an im2col matrix
//! gathers every kernel tap's shifted view of the input (zero outside the
//! volume), and a tuned GEMM contracts it with the weights; the backward
//! passes reuse the same matrix for the weight gradient and scatter the
//! transposed product back for the input gradient. Strided convolutions use
//! direct gather loops instead. Work splits by sample or output channel, so
//! every memory cell is owned by exactly one task and results are
//! bit-identical regardless of thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::{as_batched, volumetric_shape, Tensor};

/// Configuration of a same-padded 3D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv3dCfg {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub dilation: usize,
    pub stride: usize,
}

impl Conv3dCfg {
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        Conv3dCfg {
            in_ch,
            out_ch,
            kernel,
            dilation: 1,
            stride: 1,
        }
    }

    pub fn with_dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_ch == 0
            || self.out_ch == 0
            || self.kernel == 0
            || self.dilation == 0
            || self.stride == 0
        {
            return Err(Error::InvalidConfig(format!(
                "convolution extents must all be positive: {self:?}"
            )));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::InvalidConfig(format!(
                "same padding requires an odd kernel, got {}",
                self.kernel
            )));
        }
        Ok(())
    }

    /// Padding per side, `dilation * (kernel - 1) / 2`.
    pub fn padding(&self) -> usize {
        self.dilation * (self.kernel - 1) / 2
    }

    /// Output extent along one axis, `ceil(extent / stride)`.
    pub fn out_extent(&self, extent: usize) -> usize {
        (extent + self.stride - 1) / self.stride
    }

    pub fn weight_shape(&self) -> [usize; 5] {
        [
            self.out_ch,
            self.in_ch,
            self.kernel,
            self.kernel,
            self.kernel,
        ]
    }
}

/// Valid output range `[lo, hi)` along one axis of extent `e` for a tap
/// whose input offset is `d`, i.e. the positions `o` with `o + d` in
/// `[0, e)`.
#[inline]
fn axis_range(e: usize, d: isize) -> (usize, usize) {
    let lo = if d < 0 { (-d) as usize } else { 0 };
    let hi = if d > 0 { e.saturating_sub(d as usize) } else { e };
    let lo = lo.min(e);
    (lo, hi.max(lo))
}

fn ceil_div(a: isize, b: isize) -> isize {
    let d = a.div_euclid(b);
    if a.rem_euclid(b) != 0 {
        d + 1
    } else {
        d
    }
}

/// Valid input range `[lo, hi)` of extent `ie` whose strided image
/// `i * s + off` lands inside `[0, oe)`.
#[inline]
fn scatter_range(ie: usize, oe: usize, s: usize, off: isize) -> (usize, usize) {
    let s = s as isize;
    let lo = ceil_div(-off, s).max(0);
    let hi = ceil_div(oe as isize - off, s).min(ie as isize);
    let lo = lo.min(ie as isize);
    (lo as usize, hi.max(lo) as usize)
}

// ===== Stride-1 kernels (im2col + GEMM) =====

/// Materializes the im2col matrix for one z slice of one sample. Row
/// `ci * k^3 + tap` holds the values tap `(kz, ky, kx)` of channel `ci`
/// reads for every output position of the slice, zero where the tap falls
/// outside the volume. The row order matches the flattened weight layout so
/// the contraction is a plain row-major GEMM.
#[allow(clippy::too_many_arguments)]
fn build_cols<T: Scalar>(
    xn: &[T],
    cols: &mut [T],
    z: usize,
    cin: usize,
    dd: usize,
    hh: usize,
    ww: usize,
    k: usize,
    rate: usize,
) {
    let hw = hh * ww;
    let dhw = dd * hw;
    let p = (rate * (k - 1) / 2) as isize;
    let mut row = 0;
    for ci in 0..cin {
        let xc = &xn[ci * dhw..][..dhw];
        for kz in 0..k {
            let zi = z as isize + (rate * kz) as isize - p;
            let z_ok = zi >= 0 && zi < dd as isize;
            for ky in 0..k {
                let dy = (rate * ky) as isize - p;
                let (y0, y1) = axis_range(hh, dy);
                for kx in 0..k {
                    let dx = (rate * kx) as isize - p;
                    let (x0, x1) = axis_range(ww, dx);
                    let dst = &mut cols[row * hw..][..hw];
                    row += 1;
                    dst.fill(T::zero());
                    if !z_ok || x0 >= x1 {
                        continue;
                    }
                    let xpl = &xc[zi as usize * hw..][..hw];
                    let sx = (x0 as isize + dx) as usize;
                    for y in y0..y1 {
                        let yi = (y as isize + dy) as usize;
                        dst[y * ww + x0..][..x1 - x0]
                            .copy_from_slice(&xpl[yi * ww + sx..][..x1 - x0]);
                    }
                }
            }
        }
    }
}

/// Inverse of [`build_cols`]: adds every row of the column matrix back into
/// the positions of the gradient volume it was gathered from.
#[allow(clippy::too_many_arguments)]
fn scatter_cols<T: Scalar>(
    gc: &mut [T],
    cols: &[T],
    z: usize,
    cin: usize,
    dd: usize,
    hh: usize,
    ww: usize,
    k: usize,
    rate: usize,
) {
    let hw = hh * ww;
    let dhw = dd * hw;
    let p = (rate * (k - 1) / 2) as isize;
    let mut row = 0;
    for ci in 0..cin {
        let gcc = &mut gc[ci * dhw..][..dhw];
        for kz in 0..k {
            let zi = z as isize + (rate * kz) as isize - p;
            let z_ok = zi >= 0 && zi < dd as isize;
            for ky in 0..k {
                let dy = (rate * ky) as isize - p;
                let (y0, y1) = axis_range(hh, dy);
                for kx in 0..k {
                    let dx = (rate * kx) as isize - p;
                    let (x0, x1) = axis_range(ww, dx);
                    let src = &cols[row * hw..][..hw];
                    row += 1;
                    if !z_ok || x0 >= x1 {
                        continue;
                    }
                    let gpl = &mut gcc[zi as usize * hw..][..hw];
                    let sx = (x0 as isize + dx) as usize;
                    for y in y0..y1 {
                        let yi = (y as isize + dy) as usize;
                        let dst = &mut gpl[yi * ww + sx..][..x1 - x0];
                        let add = &src[y * ww + x0..][..x1 - x0];
                        for (d, s) in dst.iter_mut().zip(add) {
                            *d += *s;
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn fwd_s1<T: Scalar>(
    x: &[T],
    w: &[T],
    bias: &[T],
    out: &mut [T],
    _n: usize,
    cin: usize,
    cout: usize,
    dd: usize,
    hh: usize,
    ww: usize,
    k: usize,
    rate: usize,
) {
    let hw = hh * ww;
    let dhw = dd * hw;
    let k3 = k * k * k;
    out.par_chunks_mut(cout * dhw)
        .enumerate()
        .for_each(|(ni, on)| {
            let xn = &x[ni * cin * dhw..][..cin * dhw];
            for co in 0..cout {
                on[co * dhw..][..dhw].fill(bias[co]);
            }
            if k == 1 {
                // Pointwise convolution is a single channel-mixing GEMM:
                // out (cout x dhw) += W (cout x cin) * x (cin x dhw).
                unsafe {
                    T::gemm(
                        cout,
                        cin,
                        dhw,
                        T::one(),
                        w.as_ptr(),
                        cin as isize,
                        1,
                        xn.as_ptr(),
                        dhw as isize,
                        1,
                        T::one(),
                        on.as_mut_ptr(),
                        dhw as isize,
                        1,
                    );
                }
            } else {
                let mut cols = vec![T::zero(); cin * k3 * hw];
                for z in 0..dd {
                    build_cols(xn, &mut cols, z, cin, dd, hh, ww, k, rate);
                    // out slice (cout x hw, row stride dhw) +=
                    //   W (cout x cin*k^3) * cols (cin*k^3 x hw).
                    unsafe {
                        T::gemm(
                            cout,
                            cin * k3,
                            hw,
                            T::one(),
                            w.as_ptr(),
                            (cin * k3) as isize,
                            1,
                            cols.as_ptr(),
                            hw as isize,
                            1,
                            T::one(),
                            on.as_mut_ptr().add(z * hw),
                            dhw as isize,
                            1,
                        );
                    }
                }
            }
        });
}

#[allow(clippy::too_many_arguments)]
fn bwd_input_s1<T: Scalar>(
    gout: &[T],
    w: &[T],
    gin: &mut [T],
    _n: usize,
    cin: usize,
    cout: usize,
    dd: usize,
    hh: usize,
    ww: usize,
    k: usize,
    rate: usize,
) {
    let hw = hh * ww;
    let dhw = dd * hw;
    let k3 = k * k * k;
    gin.par_chunks_mut(cin * dhw)
        .enumerate()
        .for_each(|(ni, gc)| {
            let gn = &gout[ni * cout * dhw..][..cout * dhw];
            if k == 1 {
                // gin (cin x dhw) = W^T (cin x cout) * gout (cout x dhw).
                unsafe {
                    T::gemm(
                        cin,
                        cout,
                        dhw,
                        T::one(),
                        w.as_ptr(),
                        1,
                        cin as isize,
                        gn.as_ptr(),
                        dhw as isize,
                        1,
                        T::zero(),
                        gc.as_mut_ptr(),
                        dhw as isize,
                        1,
                    );
                }
            } else {
                gc.fill(T::zero());
                let mut cols = vec![T::zero(); cin * k3 * hw];
                for z in 0..dd {
                    // cols (cin*k^3 x hw) =
                    //   W^T (cin*k^3 x cout) * gout slice (cout x hw),
                    // then each row is scattered back onto the positions it
                    // was originally gathered from.
                    unsafe {
                        T::gemm(
                            cin * k3,
                            cout,
                            hw,
                            T::one(),
                            w.as_ptr(),
                            1,
                            (cin * k3) as isize,
                            gn.as_ptr().add(z * hw),
                            dhw as isize,
                            1,
                            T::zero(),
                            cols.as_mut_ptr(),
                            hw as isize,
                            1,
                        );
                    }
                    scatter_cols(gc, &cols, z, cin, dd, hh, ww, k, rate);
                }
            }
        });
}

#[allow(clippy::too_many_arguments)]
fn bwd_weight_s1<T: Scalar>(
    x: &[T],
    gout: &[T],
    gw: &mut [T],
    gbias: &mut [T],
    n: usize,
    cin: usize,
    cout: usize,
    dd: usize,
    hh: usize,
    ww: usize,
    k: usize,
    rate: usize,
) {
    let hw = hh * ww;
    let dhw = dd * hw;
    let k3 = k * k * k;
    // Per-sample partial results, reduced in sample order afterwards so the
    // outcome does not depend on how rayon schedules the map.
    let partials: Vec<(Vec<T>, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|ni| {
            let xn = &x[ni * cin * dhw..][..cin * dhw];
            let gn = &gout[ni * cout * dhw..][..cout * dhw];
            let mut gwp = vec![T::zero(); cout * cin * k3];
            let mut gbp = vec![0.0f64; cout];
            for co in 0..cout {
                let mut s = 0.0f64;
                for v in &gn[co * dhw..][..dhw] {
                    s += v.as_f64();
                }
                gbp[co] = s;
            }
            if k == 1 {
                // gw (cout x cin) = gout (cout x dhw) * x^T (dhw x cin).
                unsafe {
                    T::gemm(
                        cout,
                        dhw,
                        cin,
                        T::one(),
                        gn.as_ptr(),
                        dhw as isize,
                        1,
                        xn.as_ptr(),
                        1,
                        dhw as isize,
                        T::zero(),
                        gwp.as_mut_ptr(),
                        cin as isize,
                        1,
                    );
                }
            } else {
                let mut cols = vec![T::zero(); cin * k3 * hw];
                for z in 0..dd {
                    build_cols(xn, &mut cols, z, cin, dd, hh, ww, k, rate);
                    // gw (cout x cin*k^3) +=
                    //   gout slice (cout x hw) * cols^T (hw x cin*k^3).
                    unsafe {
                        T::gemm(
                            cout,
                            hw,
                            cin * k3,
                            T::one(),
                            gn.as_ptr().add(z * hw),
                            dhw as isize,
                            1,
                            cols.as_ptr(),
                            1,
                            hw as isize,
                            T::one(),
                            gwp.as_mut_ptr(),
                            (cin * k3) as isize,
                            1,
                        );
                    }
                }
            }
            (gwp, gbp)
        })
        .collect();
    for (gwp, _) in &partials {
        for (acc, v) in gw.iter_mut().zip(gwp) {
            *acc += *v;
        }
    }
    for co in 0..cout {
        let mut s = 0.0f64;
        for (_, gbp) in &partials {
            s += gbp[co];
        }
        gbias[co] = T::from_f64(s);
    }
}

// ===== General (strided) kernels =====

#[allow(clippy::too_many_arguments)]
fn fwd_general<T: Scalar>(
    x: &[T],
    w: &[T],
    bias: &[T],
    out: &mut [T],
    _n: usize,
    cin: usize,
    cout: usize,
    dd: usize,
    hh: usize,
    ww: usize,
    k: usize,
    rate: usize,
    stride: usize,
) {
    let hw = hh * ww;
    let dhw = dd * hw;
    let k3 = k * k * k;
    let p = (rate * (k - 1) / 2) as isize;
    let od = (dd + stride - 1) / stride;
    let oh = (hh + stride - 1) / stride;
    let ow = (ww + stride - 1) / stride;
    let odhw = od * oh * ow;
    out.par_chunks_mut(odhw).enumerate().for_each(|(idx, oc)| {
        let (ni, co) = (idx / cout, idx % cout);
        let xn = &x[ni * cin * dhw..][..cin * dhw];
        let mut at = 0;
        for oz in 0..od {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias[co];
                    for ci in 0..cin {
                        let xc = &xn[ci * dhw..][..dhw];
                        let wb = (co * cin + ci) * k3;
                        for kz in 0..k {
                            let zi = (oz * stride + rate * kz) as isize - p;
                            if zi < 0 || zi >= dd as isize {
                                continue;
                            }
                            for ky in 0..k {
                                let yi = (oy * stride + rate * ky) as isize - p;
                                if yi < 0 || yi >= hh as isize {
                                    continue;
                                }
                                for kx in 0..k {
                                    let xi = (ox * stride + rate * kx) as isize - p;
                                    if xi < 0 || xi >= ww as isize {
                                        continue;
                                    }
                                    let xv = xc[(zi as usize * hh + yi as usize) * ww + xi as usize];
                                    acc = xv.mul_add(w[wb + (kz * k + ky) * k + kx], acc);
                                }
                            }
                        }
                    }
                    oc[at] = acc;
                    at += 1;
                }
            }
        }
    });
}

#[allow(clippy::too_many_arguments)]
fn bwd_input_general<T: Scalar>(
    gout: &[T],
    w: &[T],
    gin: &mut [T],
    _n: usize,
    cin: usize,
    cout: usize,
    dd: usize,
    hh: usize,
    ww: usize,
    k: usize,
    rate: usize,
    stride: usize,
) {
    let hw = hh * ww;
    let dhw = dd * hw;
    let k3 = k * k * k;
    let p = (rate * (k - 1) / 2) as isize;
    let od = (dd + stride - 1) / stride;
    let oh = (hh + stride - 1) / stride;
    let ow = (ww + stride - 1) / stride;
    let odhw = od * oh * ow;
    let s = stride as isize;
    gin.par_chunks_mut(dhw).enumerate().for_each(|(idx, gc)| {
        let (ni, ci) = (idx / cin, idx % cin);
        let gn = &gout[ni * cout * odhw..][..cout * odhw];
        let mut at = 0;
        for uz in 0..dd as isize {
            for uy in 0..hh as isize {
                for ux in 0..ww as isize {
                    let mut acc = T::zero();
                    for co in 0..cout {
                        let go = &gn[co * odhw..][..odhw];
                        let wb = (co * cin + ci) * k3;
                        for kz in 0..k {
                            let t = uz + p - (rate * kz) as isize;
                            if t < 0 || t % s != 0 || t / s >= od as isize {
                                continue;
                            }
                            let oz = (t / s) as usize;
                            for ky in 0..k {
                                let t = uy + p - (rate * ky) as isize;
                                if t < 0 || t % s != 0 || t / s >= oh as isize {
                                    continue;
                                }
                                let oy = (t / s) as usize;
                                for kx in 0..k {
                                    let t = ux + p - (rate * kx) as isize;
                                    if t < 0 || t % s != 0 || t / s >= ow as isize {
                                        continue;
                                    }
                                    let ox = (t / s) as usize;
                                    let g = go[(oz * oh + oy) * ow + ox];
                                    acc = g.mul_add(w[wb + (kz * k + ky) * k + kx], acc);
                                }
                            }
                        }
                    }
                    gc[at] = acc;
                    at += 1;
                }
            }
        }
    });
}

#[allow(clippy::too_many_arguments)]
fn bwd_weight_general<T: Scalar>(
    x: &[T],
    gout: &[T],
    gw: &mut [T],
    gbias: &mut [T],
    n: usize,
    cin: usize,
    cout: usize,
    dd: usize,
    hh: usize,
    ww: usize,
    k: usize,
    rate: usize,
    stride: usize,
) {
    let hw = hh * ww;
    let dhw = dd * hw;
    let k3 = k * k * k;
    let p = (rate * (k - 1) / 2) as isize;
    let od = (dd + stride - 1) / stride;
    let oh = (hh + stride - 1) / stride;
    let ow = (ww + stride - 1) / stride;
    let odhw = od * oh * ow;
    gw.par_chunks_mut(cin * k3)
        .zip(gbias.par_iter_mut())
        .enumerate()
        .for_each(|(co, (gwc, gb))| {
            let mut bias_acc = 0.0f64;
            for ni in 0..n {
                let go = &gout[(ni * cout + co) * odhw..][..odhw];
                let mut s = T::zero();
                for v in go {
                    s += *v;
                }
                bias_acc += s.as_f64();
            }
            *gb = T::from_f64(bias_acc);
            for ci in 0..cin {
                for kz in 0..k {
                    for ky in 0..k {
                        for kx in 0..k {
                            let mut acc = 0.0f64;
                            for ni in 0..n {
                                let go = &gout[(ni * cout + co) * odhw..][..odhw];
                                let xc = &x[(ni * cin + ci) * dhw..][..dhw];
                                let mut at = 0;
                                for oz in 0..od {
                                    let zi = (oz * stride + rate * kz) as isize - p;
                                    if zi < 0 || zi >= dd as isize {
                                        at += oh * ow;
                                        continue;
                                    }
                                    for oy in 0..oh {
                                        let yi = (oy * stride + rate * ky) as isize - p;
                                        if yi < 0 || yi >= hh as isize {
                                            at += ow;
                                            continue;
                                        }
                                        for ox in 0..ow {
                                            let xi =
                                                (ox * stride + rate * kx) as isize - p;
                                            if xi < 0 || xi >= ww as isize {
                                                at += 1;
                                                continue;
                                            }
                                            let xv = xc[(zi as usize * hh + yi as usize) * ww
                                                + xi as usize];
                                            acc += (go[at] * xv).as_f64();
                                            at += 1;
                                        }
                                    }
                                }
                            }
                            gwc[ci * k3 + (kz * k + ky) * k + kx] = T::from_f64(acc);
                        }
                    }
                }
            }
        });
}

// ===== Tape operators =====

/// Dilated 3D convolution with same padding.
///
/// `x` is `(N, C_in, D, H, W)` or `(C_in, D, H, W)`, `weight` is
/// `(C_out, C_in, k, k, k)`, `bias` is `(C_out)`.
pub fn conv3d<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    weight: Var,
    bias: Var,
    cfg: Conv3dCfg,
) -> Result<Var> {
    cfg.validate()?;
    let (n, c, dd, hh, ww, batched) = as_batched(tape.value(x)?.shape())?;
    if c != cfg.in_ch {
        return Err(Error::ShapeMismatch(format!(
            "conv3d expects {} input channels, got {c}",
            cfg.in_ch
        )));
    }
    if tape.value(weight)?.shape() != cfg.weight_shape() {
        return Err(Error::ShapeMismatch(format!(
            "conv3d weight shape {:?} does not match {:?}",
            tape.value(weight)?.shape(),
            cfg.weight_shape()
        )));
    }
    if tape.value(bias)?.shape() != [cfg.out_ch] {
        return Err(Error::ShapeMismatch(format!(
            "conv3d bias shape {:?} does not match ({})",
            tape.value(bias)?.shape(),
            cfg.out_ch
        )));
    }
    let (od, oh, ow) = (
        cfg.out_extent(dd),
        cfg.out_extent(hh),
        cfg.out_extent(ww),
    );
    let mut out = Tensor::zeros(&volumetric_shape(n, cfg.out_ch, od, oh, ow, batched))?;
    {
        let vx = tape.value(x)?;
        let vw = tape.value(weight)?;
        let vb = tape.value(bias)?;
        if cfg.stride == 1 {
            fwd_s1(
                vx.data(),
                vw.data(),
                vb.data(),
                out.data_mut(),
                n,
                cfg.in_ch,
                cfg.out_ch,
                dd,
                hh,
                ww,
                cfg.kernel,
                cfg.dilation,
            );
        } else {
            fwd_general(
                vx.data(),
                vw.data(),
                vb.data(),
                out.data_mut(),
                n,
                cfg.in_ch,
                cfg.out_ch,
                dd,
                hh,
                ww,
                cfg.kernel,
                cfg.dilation,
                cfg.stride,
            );
        }
    }
    Ok(tape.push(
        out,
        Some(Box::new(move |vals, grad_out, grads| {
            let vx = vals.get(x);
            let vw = vals.get(weight);
            let mut gin = Tensor::zeros(vx.shape()).expect("input shape is valid");
            let mut gw = Tensor::zeros(vw.shape()).expect("weight shape is valid");
            let mut gb = Tensor::zeros(&[cfg.out_ch]).expect("bias shape is valid");
            if cfg.stride == 1 {
                bwd_input_s1(
                    grad_out.data(),
                    vw.data(),
                    gin.data_mut(),
                    n,
                    cfg.in_ch,
                    cfg.out_ch,
                    dd,
                    hh,
                    ww,
                    cfg.kernel,
                    cfg.dilation,
                );
                bwd_weight_s1(
                    vx.data(),
                    grad_out.data(),
                    gw.data_mut(),
                    gb.data_mut(),
                    n,
                    cfg.in_ch,
                    cfg.out_ch,
                    dd,
                    hh,
                    ww,
                    cfg.kernel,
                    cfg.dilation,
                );
            } else {
                bwd_input_general(
                    grad_out.data(),
                    vw.data(),
                    gin.data_mut(),
                    n,
                    cfg.in_ch,
                    cfg.out_ch,
                    dd,
                    hh,
                    ww,
                    cfg.kernel,
                    cfg.dilation,
                    cfg.stride,
                );
                bwd_weight_general(
                    vx.data(),
                    grad_out.data(),
                    gw.data_mut(),
                    gb.data_mut(),
                    n,
                    cfg.in_ch,
                    cfg.out_ch,
                    dd,
                    hh,
                    ww,
                    cfg.kernel,
                    cfg.dilation,
                    cfg.stride,
                );
            }
            grads.accumulate(x, gin);
            grads.accumulate(weight, gw);
            grads.accumulate(bias, gb);
        })),
    ))
}

/// Configuration of a strided transpose convolution that upsamples every
/// spatial extent by exactly `stride`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvTranspose3dCfg {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvTranspose3dCfg {
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize, stride: usize) -> Self {
        ConvTranspose3dCfg {
            in_ch,
            out_ch,
            kernel,
            stride,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_ch == 0 || self.out_ch == 0 || self.kernel == 0 || self.stride == 0 {
            return Err(Error::InvalidConfig(format!(
                "transpose convolution extents must all be positive: {self:?}"
            )));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::InvalidConfig(format!(
                "transpose convolution requires an odd kernel, got {}",
                self.kernel
            )));
        }
        Ok(())
    }

    pub fn padding(&self) -> usize {
        (self.kernel - 1) / 2
    }

    /// Weight layout `(C_in, C_out, k, k, k)`, i.e. the kernel of the
    /// downsampling convolution this operator transposes.
    pub fn weight_shape(&self) -> [usize; 5] {
        [
            self.in_ch,
            self.out_ch,
            self.kernel,
            self.kernel,
            self.kernel,
        ]
    }
}

#[allow(clippy::too_many_arguments)]
fn tconv_fwd<T: Scalar>(
    x: &[T],
    w: &[T],
    bias: &[T],
    out: &mut [T],
    _n: usize,
    cin: usize,
    cout: usize,
    id: usize,
    ih: usize,
    iw: usize,
    k: usize,
    stride: usize,
) {
    let ihw = ih * iw;
    let idhw = id * ihw;
    let (od, oh, ow) = (id * stride, ih * stride, iw * stride);
    let ohw = oh * ow;
    let odhw = od * ohw;
    let k3 = k * k * k;
    let p = ((k - 1) / 2) as isize;
    out.par_chunks_mut(odhw).enumerate().for_each(|(idx, oc)| {
        let (ni, co) = (idx / cout, idx % cout);
        oc.fill(bias[co]);
        let xn = &x[ni * cin * idhw..][..cin * idhw];
        for ci in 0..cin {
            let xc = &xn[ci * idhw..][..idhw];
            let wb = (ci * cout + co) * k3;
            for kz in 0..k {
                let offz = kz as isize - p;
                let (iz0, iz1) = scatter_range(id, od, stride, offz);
                if iz0 >= iz1 {
                    continue;
                }
                for ky in 0..k {
                    let offy = ky as isize - p;
                    let (iy0, iy1) = scatter_range(ih, oh, stride, offy);
                    if iy0 >= iy1 {
                        continue;
                    }
                    for kx in 0..k {
                        let offx = kx as isize - p;
                        let (ix0, ix1) = scatter_range(iw, ow, stride, offx);
                        if ix0 >= ix1 {
                            continue;
                        }
                        let wt = w[wb + (kz * k + ky) * k + kx];
                        let ox0 = (ix0 * stride) as isize + offx;
                        for iz in iz0..iz1 {
                            let oz = ((iz * stride) as isize + offz) as usize;
                            let xpl = &xc[iz * ihw..][..ihw];
                            let opl = &mut oc[oz * ohw..][..ohw];
                            for iy in iy0..iy1 {
                                let oy = ((iy * stride) as isize + offy) as usize;
                                let src = &xpl[iy * iw + ix0..][..ix1 - ix0];
                                let orow = &mut opl[oy * ow..][..ow];
                                let mut o = ox0 as usize;
                                for v in src {
                                    orow[o] = v.mul_add(wt, orow[o]);
                                    o += stride;
                                }
                            }
                        }
                    }
                }
            }
        }
    });
}

#[allow(clippy::too_many_arguments)]
fn tconv_bwd_input<T: Scalar>(
    gout: &[T],
    w: &[T],
    gin: &mut [T],
    _n: usize,
    cin: usize,
    cout: usize,
    id: usize,
    ih: usize,
    iw: usize,
    k: usize,
    stride: usize,
) {
    let ihw = ih * iw;
    let idhw = id * ihw;
    let (od, oh, ow) = (id * stride, ih * stride, iw * stride);
    let ohw = oh * ow;
    let odhw = od * ohw;
    let k3 = k * k * k;
    let p = ((k - 1) / 2) as isize;
    gin.par_chunks_mut(idhw).enumerate().for_each(|(idx, gc)| {
        let (ni, ci) = (idx / cin, idx % cin);
        gc.fill(T::zero());
        let gn = &gout[ni * cout * odhw..][..cout * odhw];
        for co in 0..cout {
            let go = &gn[co * odhw..][..odhw];
            let wb = (ci * cout + co) * k3;
            for kz in 0..k {
                let offz = kz as isize - p;
                let (iz0, iz1) = scatter_range(id, od, stride, offz);
                if iz0 >= iz1 {
                    continue;
                }
                for ky in 0..k {
                    let offy = ky as isize - p;
                    let (iy0, iy1) = scatter_range(ih, oh, stride, offy);
                    if iy0 >= iy1 {
                        continue;
                    }
                    for kx in 0..k {
                        let offx = kx as isize - p;
                        let (ix0, ix1) = scatter_range(iw, ow, stride, offx);
                        if ix0 >= ix1 {
                            continue;
                        }
                        let wt = w[wb + (kz * k + ky) * k + kx];
                        let ox0 = (ix0 * stride) as isize + offx;
                        for iz in iz0..iz1 {
                            let oz = ((iz * stride) as isize + offz) as usize;
                            let gpl = &go[oz * ohw..][..ohw];
                            let dpl = &mut gc[iz * ihw..][..ihw];
                            for iy in iy0..iy1 {
                                let oy = ((iy * stride) as isize + offy) as usize;
                                let grow = &gpl[oy * ow..][..ow];
                                let dst = &mut dpl[iy * iw + ix0..][..ix1 - ix0];
                                let mut o = ox0 as usize;
                                for v in dst.iter_mut() {
                                    *v = grow[o].mul_add(wt, *v);
                                    o += stride;
                                }
                            }
                        }
                    }
                }
            }
        }
    });
}

#[allow(clippy::too_many_arguments)]
fn tconv_bwd_weight<T: Scalar>(
    x: &[T],
    gout: &[T],
    gw: &mut [T],
    gbias: &mut [T],
    n: usize,
    cin: usize,
    cout: usize,
    id: usize,
    ih: usize,
    iw: usize,
    k: usize,
    stride: usize,
) {
    let ihw = ih * iw;
    let idhw = id * ihw;
    let (od, oh, ow) = (id * stride, ih * stride, iw * stride);
    let ohw = oh * ow;
    let odhw = od * ohw;
    let k3 = k * k * k;
    let p = ((k - 1) / 2) as isize;
    gw.par_chunks_mut(cout * k3)
        .enumerate()
        .for_each(|(ci, gwc)| {
            for co in 0..cout {
                for kz in 0..k {
                    let offz = kz as isize - p;
                    let (iz0, iz1) = scatter_range(id, od, stride, offz);
                    for ky in 0..k {
                        let offy = ky as isize - p;
                        let (iy0, iy1) = scatter_range(ih, oh, stride, offy);
                        for kx in 0..k {
                            let offx = kx as isize - p;
                            let (ix0, ix1) = scatter_range(iw, ow, stride, offx);
                            let mut acc = 0.0f64;
                            if iz0 < iz1 && iy0 < iy1 && ix0 < ix1 {
                                for ni in 0..n {
                                    let xc = &x[(ni * cin + ci) * idhw..][..idhw];
                                    let go = &gout[(ni * cout + co) * odhw..][..odhw];
                                    for iz in iz0..iz1 {
                                        let oz = ((iz * stride) as isize + offz) as usize;
                                        for iy in iy0..iy1 {
                                            let oy =
                                                ((iy * stride) as isize + offy) as usize;
                                            let xrow = &xc[iz * ihw + iy * iw..][..iw];
                                            let grow = &go[oz * ohw + oy * ow..][..ow];
                                            let mut row = T::zero();
                                            let mut o =
                                                ((ix0 * stride) as isize + offx) as usize;
                                            for ix in ix0..ix1 {
                                                row = xrow[ix].mul_add(grow[o], row);
                                                o += stride;
                                            }
                                            acc += row.as_f64();
                                        }
                                    }
                                }
                            }
                            gwc[co * k3 + (kz * k + ky) * k + kx] = T::from_f64(acc);
                        }
                    }
                }
            }
        });
    for co in 0..cout {
        let mut acc = 0.0f64;
        for ni in 0..n {
            let go = &gout[(ni * cout + co) * odhw..][..odhw];
            let mut s = T::zero();
            for v in go {
                s += *v;
            }
            acc += s.as_f64();
        }
        gbias[co] = T::from_f64(acc);
    }
}

/// Transpose (fractionally strided) 3D convolution that upsamples each
/// spatial extent by `stride`. `x` is `(N, C_in, D, H, W)` or
/// `(C_in, D, H, W)`; the output extent is `stride` times the input extent.
pub fn conv3d_transpose<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    weight: Var,
    bias: Var,
    cfg: ConvTranspose3dCfg,
) -> Result<Var> {
    cfg.validate()?;
    let (n, c, id, ih, iw, batched) = as_batched(tape.value(x)?.shape())?;
    if c != cfg.in_ch {
        return Err(Error::ShapeMismatch(format!(
            "conv3d_transpose expects {} input channels, got {c}",
            cfg.in_ch
        )));
    }
    if tape.value(weight)?.shape() != cfg.weight_shape() {
        return Err(Error::ShapeMismatch(format!(
            "conv3d_transpose weight shape {:?} does not match {:?}",
            tape.value(weight)?.shape(),
            cfg.weight_shape()
        )));
    }
    if tape.value(bias)?.shape() != [cfg.out_ch] {
        return Err(Error::ShapeMismatch(format!(
            "conv3d_transpose bias shape {:?} does not match ({})",
            tape.value(bias)?.shape(),
            cfg.out_ch
        )));
    }
    let mut out = Tensor::zeros(&volumetric_shape(
        n,
        cfg.out_ch,
        id * cfg.stride,
        ih * cfg.stride,
        iw * cfg.stride,
        batched,
    ))?;
    {
        let vx = tape.value(x)?;
        let vw = tape.value(weight)?;
        let vb = tape.value(bias)?;
        tconv_fwd(
            vx.data(),
            vw.data(),
            vb.data(),
            out.data_mut(),
            n,
            cfg.in_ch,
            cfg.out_ch,
            id,
            ih,
            iw,
            cfg.kernel,
            cfg.stride,
        );
    }
    Ok(tape.push(
        out,
        Some(Box::new(move |vals, grad_out, grads| {
            let vx = vals.get(x);
            let vw = vals.get(weight);
            let mut gin = Tensor::zeros(vx.shape()).expect("input shape is valid");
            let mut gw = Tensor::zeros(vw.shape()).expect("weight shape is valid");
            let mut gb = Tensor::zeros(&[cfg.out_ch]).expect("bias shape is valid");
            tconv_bwd_input(
                grad_out.data(),
                vw.data(),
                gin.data_mut(),
                n,
                cfg.in_ch,
                cfg.out_ch,
                id,
                ih,
                iw,
                cfg.kernel,
                cfg.stride,
            );
            tconv_bwd_weight(
                vx.data(),
                grad_out.data(),
                gw.data_mut(),
                gb.data_mut(),
                n,
                cfg.in_ch,
                cfg.out_ch,
                id,
                ih,
                iw,
                cfg.kernel,
                cfg.stride,
            );
            grads.accumulate(x, gin);
            grads.accumulate(weight, gw);
            grads.accumulate(bias, gb);
        })),
    ))
}
