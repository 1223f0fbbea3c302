//! Pointwise nonlinearities.

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

/// Rectified linear unit, `max(x, 0)`. The subgradient at zero is taken
/// as zero.
pub fn relu<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let mut out = tape.value(x)?.clone();
    for v in out.data_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
    Ok(tape.push(
        out,
        Some(Box::new(move |vals, mut grad_out, grads| {
            let vx = vals.get(x);
            for (g, xi) in grad_out.data_mut().iter_mut().zip(vx.data()) {
                if *xi <= T::zero() {
                    *g = T::zero();
                }
            }
            grads.accumulate(x, grad_out);
        })),
    ))
}

/// Logistic sigmoid, evaluated in the numerically stable branch form:
/// `1 / (1 + e^-x)` for non-negative `x` and `e^x / (1 + e^x)` otherwise,
/// so the exponential never overflows.
pub fn sigmoid<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let mut out = tape.value(x)?.clone();
    for v in out.data_mut() {
        *v = sigmoid_scalar(*v);
    }
    Ok(tape.push(
        out,
        Some(Box::new(move |vals, mut grad_out, grads| {
            let vx = vals.get(x);
            for (g, xi) in grad_out.data_mut().iter_mut().zip(vx.data()) {
                let y = sigmoid_scalar(*xi);
                *g = *g * y * (T::one() - y);
            }
            grads.accumulate(x, grad_out);
        })),
    ))
}

#[inline]
pub(crate) fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::finite_difference_check;
    use crate::tensor::Tensor;

    #[test]
    fn relu_forward_and_backward() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_vec(&[4], vec![-1.0, 0.0, 0.5, 2.0]).unwrap());
        let y = relu(&mut tape, x).unwrap();
        assert_eq!(tape.value(y).unwrap().data(), &[0.0, 0.0, 0.5, 2.0]);
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_vec(&[3], vec![-800.0, 0.0, 800.0]).unwrap());
        let y = sigmoid(&mut tape, x).unwrap();
        let v = tape.value(y).unwrap().data().to_vec();
        assert_eq!(v[0], 0.0);
        assert_eq!(v[1], 0.5);
        assert_eq!(v[2], 1.0);
        assert!(v.iter().all(|p| p.is_finite()));
    }

    #[test]
    fn sigmoid_gradient_matches_finite_differences() {
        let mut x = Tensor::from_vec(&[5], vec![-2.0, -0.3, 0.0, 0.7, 3.0]).unwrap();
        let mut eval = |t: &Tensor<f64>| {
            let mut tape = Tape::<f64>::new();
            let xv = tape.constant(t.clone());
            let y = sigmoid(&mut tape, xv)?;
            let s = tape.sum(y)?;
            tape.value(s)?.item()
        };
        let analytic = {
            let mut tape = Tape::<f64>::new();
            let xv = tape.constant(x.clone());
            let y = sigmoid(&mut tape, xv).unwrap();
            let s = tape.sum(y).unwrap();
            tape.backward(s).unwrap();
            tape.grad(xv).unwrap().clone()
        };
        let err = finite_difference_check(&mut eval, &mut x, &analytic, 1e-6).unwrap();
        assert!(err < 1e-8, "relative error {err}");
    }
}
