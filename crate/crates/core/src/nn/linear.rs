//! Fully connected layer on flat feature vectors.

use crate::error::{Error, Result};
use crate::nn::dot8;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// `y = x W^T + b` where `x` is `(N, C_in)` or `(C_in)`, `w` is
/// `(C_out, C_in)` and `b` is `(C_out)`.
pub fn fully_connected<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    w: Var,
    b: Var,
) -> Result<Var> {
    let x_shape = tape.value(x)?.shape().to_vec();
    let (n, cin, batched) = match x_shape[..] {
        [n, c] => (n, c, true),
        [c] => (1, c, false),
        _ => {
            return Err(Error::ShapeMismatch(format!(
                "fully_connected expects rank 1 or 2 input, got {x_shape:?}"
            )))
        }
    };
    let w_shape = tape.value(w)?.shape().to_vec();
    let cout = match w_shape[..] {
        [co, ci] if ci == cin => co,
        _ => {
            return Err(Error::ShapeMismatch(format!(
                "fully_connected weight {w_shape:?} does not match input width {cin}"
            )))
        }
    };
    if tape.value(b)?.shape() != [cout] {
        return Err(Error::ShapeMismatch(format!(
            "fully_connected bias must have shape [{cout}]"
        )));
    }

    let out_shape: Vec<usize> = if batched { vec![n, cout] } else { vec![cout] };
    let mut out = Tensor::zeros(&out_shape)?;
    {
        let vx = tape.value(x)?.data();
        let vw = tape.value(w)?.data();
        let vb = tape.value(b)?.data();
        let od = out.data_mut();
        for row in 0..n {
            let xr = &vx[row * cin..][..cin];
            for co in 0..cout {
                od[row * cout + co] = dot8(xr, &vw[co * cin..][..cin]) + vb[co];
            }
        }
    }

    Ok(tape.push(
        out,
        Some(Box::new(move |vals, grad_out, grads| {
            let vx = vals.get(x);
            let vw = vals.get(w);
            let go = grad_out.data();
            let mut gx = Tensor::zeros(vx.shape()).expect("input shape is valid");
            let mut gw = Tensor::zeros(vw.shape()).expect("weight shape is valid");
            let mut gb = Tensor::zeros(&[cout]).expect("bias shape is valid");
            for row in 0..n {
                let xr = &vx.data()[row * cin..][..cin];
                let gxr = &mut gx.data_mut()[row * cin..][..cin];
                for co in 0..cout {
                    let g = go[row * cout + co];
                    let wr = &vw.data()[co * cin..][..cin];
                    for ci in 0..cin {
                        gxr[ci] += g * wr[ci];
                    }
                    let gwr = &mut gw.data_mut()[co * cin..][..cin];
                    for ci in 0..cin {
                        gwr[ci] += g * xr[ci];
                    }
                    gb.data_mut()[co] += g;
                }
            }
            grads.accumulate(x, gx);
            grads.accumulate(w, gw);
            grads.accumulate(b, gb);
        })),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::finite_difference_check;

    #[test]
    fn matches_hand_computed_product() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 0.5, -1.0, 2.0]).unwrap());
        let w = tape.constant(Tensor::from_vec(&[2, 3], vec![1.0, 0.0, -1.0, 2.0, 1.0, 0.0]).unwrap());
        let b = tape.constant(Tensor::from_vec(&[2], vec![0.1, -0.2]).unwrap());
        let y = fully_connected(&mut tape, x, w, b).unwrap();
        let got = tape.value(y).unwrap().data().to_vec();
        assert_eq!(got, vec![1.0 - 3.0 + 0.1, 2.0 + 2.0 - 0.2, 0.5 - 2.0 + 0.1, 1.0 - 1.0 - 0.2]);
    }

    #[test]
    fn unbatched_vector_input_works() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap());
        let w = tape.constant(Tensor::from_vec(&[1, 2], vec![0.5, 0.25]).unwrap());
        let b = tape.constant(Tensor::from_vec(&[1], vec![1.0]).unwrap());
        let y = fully_connected(&mut tape, x, w, b).unwrap();
        assert_eq!(tape.value(y).unwrap().shape(), &[1]);
        assert_eq!(tape.value(y).unwrap().data(), &[3.5]);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let x0 = Tensor::from_vec(&[3, 4], (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let w0 = Tensor::from_vec(&[2, 4], (0..8).map(|i| (i as f64 * 0.73).cos()).collect()).unwrap();
        let b0 = Tensor::from_vec(&[2], vec![0.3, -0.6]).unwrap();
        let run = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| {
            let mut tape = Tape::<f64>::new();
            let xv = tape.constant(x.clone());
            let wv = tape.constant(w.clone());
            let bv = tape.constant(b.clone());
            let y = fully_connected(&mut tape, xv, wv, bv)?;
            let sq = tape.mul(y, y)?;
            let s = tape.sum(sq)?;
            let value = tape.value(s)?.item()?;
            tape.backward(s)?;
            Ok((
                value,
                tape.grad(xv)?.clone(),
                tape.grad(wv)?.clone(),
                tape.grad(bv)?.clone(),
            ))
        };
        let (_, gx, gw, gb) = run(&x0, &w0, &b0).unwrap();
        for (who, analytic) in [(0, gx), (1, gw), (2, gb)] {
            let mut probe = match who {
                0 => x0.clone(),
                1 => w0.clone(),
                _ => b0.clone(),
            };
            let mut f = |p: &Tensor<f64>| {
                let r = match who {
                    0 => run(p, &w0, &b0),
                    1 => run(&x0, p, &b0),
                    _ => run(&x0, &w0, p),
                };
                r.map(|t| t.0)
            };
            let err = finite_difference_check(&mut f, &mut probe, &analytic, 1e-6).unwrap();
            assert!(err < 1e-7, "input {who} gradient error {err}");
        }
    }
}
