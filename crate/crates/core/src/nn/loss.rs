//! Masked softmax cross entropy and label utilities.
//!
//! Voxel labels use `0` for empty space and `1..=K` for the K part classes.
//! The loss averages over occupied voxels only and propagates exactly zero
//! gradient through empty ones.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::{as_batched, Tensor};

/// Softmax cross entropy over the channel axis, averaged over the occupied
/// voxels of the batch. `logits` is `(N, K, D, H, W)` or `(K, D, H, W)`;
/// `labels` is flat `N * D * H * W` in the same spatial order.
pub fn softmax_cross_entropy_masked<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    labels: &[u8],
    num_parts: usize,
) -> Result<Var> {
    let (n, k, d, h, w, _batched) = as_batched(tape.value(logits)?.shape())?;
    if k != num_parts {
        return Err(Error::ShapeMismatch(format!(
            "logits carry {k} channels but {num_parts} parts were requested"
        )));
    }
    let vol = d * h * w;
    if labels.len() != n * vol {
        return Err(Error::ShapeMismatch(format!(
            "expected {} labels for logits of shape {:?}, got {}",
            n * vol,
            tape.value(logits)?.shape(),
            labels.len()
        )));
    }
    let mut occupied = 0usize;
    for (i, &lbl) in labels.iter().enumerate() {
        if lbl as usize > num_parts {
            return Err(Error::InvalidArgument(format!(
                "label {lbl} at voxel {i} exceeds part count {num_parts}"
            )));
        }
        if lbl != 0 {
            occupied += 1;
        }
    }
    if occupied == 0 {
        return Err(Error::InvalidArgument(
            "loss is undefined on a batch with no occupied voxels".into(),
        ));
    }

    let mut total = 0.0f64;
    {
        let vx = tape.value(logits)?.data();
        for b in 0..n {
            for s in 0..vol {
                let lbl = labels[b * vol + s];
                if lbl == 0 {
                    continue;
                }
                let base = b * k * vol + s;
                let mut mx = f64::NEG_INFINITY;
                for cls in 0..k {
                    mx = mx.max(vx[base + cls * vol].as_f64());
                }
                let mut sum = 0.0f64;
                for cls in 0..k {
                    sum += (vx[base + cls * vol].as_f64() - mx).exp();
                }
                let z_true = vx[base + (lbl as usize - 1) * vol].as_f64();
                total += mx + sum.ln() - z_true;
            }
        }
    }
    let loss = Tensor::scalar(T::from_f64(total / occupied as f64));
    let labels: Vec<u8> = labels.to_vec();
    let logits_shape = tape.value(logits)?.shape().to_vec();

    Ok(tape.push(
        loss,
        Some(Box::new(move |vals, grad_out, grads| {
            let g = grad_out.data()[0].as_f64() / occupied as f64;
            let vx = vals.get(logits);
            let mut gin = Tensor::zeros(&logits_shape).expect("logits shape is valid");
            let gd = gin.data_mut();
            for b in 0..n {
                for s in 0..vol {
                    let lbl = labels[b * vol + s];
                    if lbl == 0 {
                        continue;
                    }
                    let base = b * k * vol + s;
                    let mut mx = f64::NEG_INFINITY;
                    for cls in 0..k {
                        mx = mx.max(vx.data()[base + cls * vol].as_f64());
                    }
                    let mut sum = 0.0f64;
                    for cls in 0..k {
                        sum += (vx.data()[base + cls * vol].as_f64() - mx).exp();
                    }
                    for cls in 0..k {
                        let p = (vx.data()[base + cls * vol].as_f64() - mx).exp() / sum;
                        let target = if cls == lbl as usize - 1 { 1.0 } else { 0.0 };
                        gd[base + cls * vol] = T::from_f64((p - target) * g);
                    }
                }
            }
            grads.accumulate(logits, gin);
        })),
    ))
}

/// Argmax over the channel axis, returned as 1-based part labels for every
/// voxel (occupancy masking is the caller's concern). Ties resolve to the
/// lowest class index.
pub fn predict_parts<T: Scalar>(logits: &Tensor<T>) -> Result<Vec<u8>> {
    let (n, k, d, h, w, _batched) = as_batched(logits.shape())?;
    if k > u8::MAX as usize {
        return Err(Error::InvalidArgument(format!(
            "part count {k} does not fit the label encoding"
        )));
    }
    let vol = d * h * w;
    let vx = logits.data();
    let mut out = Vec::with_capacity(n * vol);
    for b in 0..n {
        for s in 0..vol {
            let base = b * k * vol + s;
            let mut best = vx[base];
            let mut best_cls = 0usize;
            for cls in 1..k {
                let v = vx[base + cls * vol];
                if v > best {
                    best = v;
                    best_cls = cls;
                }
            }
            out.push(best_cls as u8 + 1);
        }
    }
    Ok(out)
}

/// Fraction of occupied voxels whose argmax prediction matches the label,
/// returned as `(correct, occupied)`.
pub fn voxel_accuracy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[u8],
) -> Result<(usize, usize)> {
    let pred = predict_parts(logits)?;
    if pred.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "prediction count {} does not match label count {}",
            pred.len(),
            labels.len()
        )));
    }
    let mut correct = 0usize;
    let mut occupied = 0usize;
    for (&p, &l) in pred.iter().zip(labels) {
        if l != 0 {
            occupied += 1;
            if p == l {
                correct += 1;
            }
        }
    }
    Ok((correct, occupied))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::finite_difference_check;
    use approx::assert_abs_diff_eq;

    #[test]
    fn uniform_logits_cost_ln_k() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(Tensor::zeros(&[1, 4, 1, 2, 2]).unwrap());
        let labels = vec![1, 0, 3, 2];
        let l = softmax_cross_entropy_masked(&mut tape, logits, &labels, 4).unwrap();
        assert_abs_diff_eq!(
            tape.value(l).unwrap().item().unwrap(),
            4.0f64.ln(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn empty_voxels_receive_exactly_zero_gradient() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(
            Tensor::from_vec(&[1, 2, 1, 1, 3], vec![0.3, -1.0, 0.7, 0.2, 0.5, -0.4]).unwrap(),
        );
        let labels = vec![1, 0, 2];
        let l = softmax_cross_entropy_masked(&mut tape, logits, &labels, 2).unwrap();
        tape.backward(l).unwrap();
        let g = tape.grad(logits).unwrap();
        // Spatial position 1 is empty in both channels.
        assert_eq!(g.data()[1], 0.0);
        assert_eq!(g.data()[4], 0.0);
        assert!(g.data()[0] != 0.0 && g.data()[3] != 0.0);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let x0 = Tensor::from_vec(
            &[2, 3, 1, 2, 2],
            (0..24).map(|i| ((i * 7 + 3) % 11) as f64 / 4.0 - 1.2).collect(),
        )
        .unwrap();
        let labels = vec![1, 0, 3, 2, 0, 2, 1, 0];
        let run = |x: &Tensor<f64>| {
            let mut tape = Tape::<f64>::new();
            let xv = tape.constant(x.clone());
            let l = softmax_cross_entropy_masked(&mut tape, xv, &labels, 3)?;
            let value = tape.value(l)?.item()?;
            tape.backward(l)?;
            Ok((value, tape.grad(xv)?.clone()))
        };
        let (_, analytic) = run(&x0).unwrap();
        let mut probe = x0.clone();
        let err =
            finite_difference_check(&mut |p: &Tensor<f64>| run(p).map(|t| t.0), &mut probe, &analytic, 1e-6)
                .unwrap();
        assert!(err < 1e-8, "gradient error {err}");
    }

    #[test]
    fn all_empty_batch_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(Tensor::zeros(&[1, 2, 1, 1, 2]).unwrap());
        let err = softmax_cross_entropy_masked(&mut tape, logits, &[0, 0], 2);
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(Tensor::zeros(&[1, 2, 1, 1, 2]).unwrap());
        let err = softmax_cross_entropy_masked(&mut tape, logits, &[1, 3], 2);
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn extreme_logits_stay_finite() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(
            Tensor::from_vec(&[1, 2, 1, 1, 1], vec![800.0, -800.0]).unwrap(),
        );
        let l = softmax_cross_entropy_masked(&mut tape, logits, &[2], 2).unwrap();
        let v = tape.value(l).unwrap().item().unwrap();
        assert!(v.is_finite());
        assert_abs_diff_eq!(v, 1600.0, epsilon = 1e-9);
    }

    #[test]
    fn prediction_and_accuracy_follow_argmax() {
        let logits = Tensor::from_vec(
            &[1, 3, 1, 1, 2],
            vec![0.1, 5.0, 0.2, 1.0, 0.3, 1.0],
        )
        .unwrap();
        assert_eq!(predict_parts(&logits).unwrap(), vec![3, 1]);
        let (correct, occupied) = voxel_accuracy(&logits, &[3, 2]).unwrap();
        assert_eq!((correct, occupied), (1, 2));
        let (correct, occupied) = voxel_accuracy(&logits, &[0, 1]).unwrap();
        assert_eq!((correct, occupied), (1, 1));
    }
}
