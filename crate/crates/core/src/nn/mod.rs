//! Differentiable operators for volumetric networks.
//!
//! Every operator is a free function that appends nodes to a [`crate::tape::Tape`].
//! Operators accept both batched `(N, C, D, H, W)` and unbatched
//! `(C, D, H, W)` inputs and preserve the batchedness of what they are given.
//! Backward closures read forward values from the tape instead of capturing
//! copies, so peak memory stays proportional to one set of activations.

pub mod activation;
pub mod conv;
pub mod layers;
pub mod linear;
pub mod loss;
pub mod norm;
pub mod ops;
pub mod pool;

/// Whether stateful layers (batch norm) use batch statistics and update
/// their running averages, or freeze them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Sums `a[i] * b[i]` with eight independent accumulator lanes.
///
/// The fixed lane structure makes the reduction order deterministic while
/// leaving each lane's updates independent, which lets LLVM vectorize the
/// loop (a single running sum would serialize on the floating-point add).
#[inline]
pub(crate) fn dot8<T: crate::scalar::Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [T::zero(); 8];
    let chunks_a = a.chunks_exact(8);
    let chunks_b = b.chunks_exact(8);
    let tail_a = chunks_a.remainder();
    let tail_b = chunks_b.remainder();
    for (ca, cb) in chunks_a.zip(chunks_b) {
        for j in 0..8 {
            lanes[j] = ca[j].mul_add(cb[j], lanes[j]);
        }
    }
    let mut tail = T::zero();
    for (x, y) in tail_a.iter().zip(tail_b) {
        tail = x.mul_add(*y, tail);
    }
    let q0 = lanes[0] + lanes[4];
    let q1 = lanes[1] + lanes[5];
    let q2 = lanes[2] + lanes[6];
    let q3 = lanes[3] + lanes[7];
    ((q0 + q2) + (q1 + q3)) + tail
}

#[cfg(test)]
mod tests {
    use super::dot8;

    #[test]
    fn dot8_matches_plain_dot() {
        for len in [0, 1, 7, 8, 9, 31, 64] {
            let a: Vec<f64> = (0..len).map(|i| (i as f64) * 0.3 - 1.0).collect();
            let b: Vec<f64> = (0..len).map(|i| 2.0 - (i as f64) * 0.1).collect();
            let expect: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
            let got = dot8(&a, &b);
            assert!((got - expect).abs() < 1e-12, "len {len}: {got} vs {expect}");
        }
    }
}
