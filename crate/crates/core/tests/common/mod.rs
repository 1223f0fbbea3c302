//! Reference implementations the integration suites score the library
//! against. Everything here is written as plain loops, independent of the
//! tensor and tape machinery under test.

#![allow(dead_code)]

use rand::Rng;

/// Dilated 3D convolution with same padding and stride 1, transcribed
/// directly from the definition. `x` is `(n, cin, d, h, w)` row-major,
/// `weight` is `(cout, cin, k, k, k)`, the result is `(n, cout, d, h, w)`.
pub fn conv3d_reference(
    x: &[f64],
    n: usize,
    cin: usize,
    d: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    cout: usize,
    k: usize,
    dilation: usize,
    bias: &[f64],
) -> Vec<f64> {
    let pad = dilation * (k - 1) / 2;
    let mut out = vec![0.0; n * cout * d * h * w];
    for b in 0..n {
        for co in 0..cout {
            for oz in 0..d {
                for oy in 0..h {
                    for ox in 0..w {
                        let mut sum = bias[co];
                        for ci in 0..cin {
                            for kz in 0..k {
                                let iz = (oz + dilation * kz) as i64 - pad as i64;
                                if iz < 0 || iz >= d as i64 {
                                    continue;
                                }
                                for ky in 0..k {
                                    let iy = (oy + dilation * ky) as i64 - pad as i64;
                                    if iy < 0 || iy >= h as i64 {
                                        continue;
                                    }
                                    for kx in 0..k {
                                        let ix = (ox + dilation * kx) as i64 - pad as i64;
                                        if ix < 0 || ix >= w as i64 {
                                            continue;
                                        }
                                        let xi = (((b * cin + ci) * d + iz as usize) * h
                                            + iy as usize)
                                            * w
                                            + ix as usize;
                                        let wi =
                                            (((co * cin + ci) * k + kz) * k + ky) * k + kx;
                                        sum += x[xi] * weight[wi];
                                    }
                                }
                            }
                        }
                        out[(((b * cout + co) * d + oz) * h + oy) * w + ox] = sum;
                    }
                }
            }
        }
    }
    out
}

/// Attentive fusion of one sample, scalar by scalar: global average of the
/// concatenated channels, two fully connected layers with a rectifier
/// between them, sigmoid attention scaling the low stage, high stage added
/// through. `f_lo` and `f_hi` are `(channels, vol)` row-major; returns the
/// fused volume and the attention vector.
pub fn afa_reference(
    f_lo: &[f64],
    f_hi: &[f64],
    channels: usize,
    vol: usize,
    w1: &[f64],
    b1: &[f64],
    w2: &[f64],
    b2: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let mut z = vec![0.0; 2 * channels];
    for c in 0..channels {
        for v in 0..vol {
            z[c] += f_lo[c * vol + v];
            z[channels + c] += f_hi[c * vol + v];
        }
    }
    for value in &mut z {
        *value /= vol as f64;
    }

    let mut hidden = vec![0.0; channels];
    for o in 0..channels {
        let mut sum = b1[o];
        for (j, &zj) in z.iter().enumerate() {
            sum += w1[o * 2 * channels + j] * zj;
        }
        hidden[o] = sum.max(0.0);
    }

    let mut attention = vec![0.0; channels];
    for o in 0..channels {
        let mut sum = b2[o];
        for (j, &hj) in hidden.iter().enumerate() {
            sum += w2[o * channels + j] * hj;
        }
        attention[o] = 1.0 / (1.0 + (-sum).exp());
    }

    let mut out = vec![0.0; channels * vol];
    for c in 0..channels {
        for v in 0..vol {
            out[c * vol + v] = f_lo[c * vol + v] * attention[c] + f_hi[c * vol + v];
        }
    }
    (out, attention)
}

/// Bias-corrected Adam, transcribed from the update rule.
pub struct AdamReference {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamReference {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(
        &mut self,
        theta: &mut [f64],
        grad: &[f64],
        lr: f64,
        beta1: f64,
        beta2: f64,
        epsilon: f64,
    ) {
        self.t += 1;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for i in 0..theta.len() {
            let g = grad[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            theta[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
        }
    }
}

/// Uniform random values in `lo..hi`.
pub fn rand_vec<R: Rng>(rng: &mut R, len: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(lo..hi)).collect()
}
