//! Inner-loop primitives shared by the offline and streaming paths.
//!
//! Both paths must call these (and nothing else) for reductions so that
//! their results agree bit-for-bit.

use crate::scalar::Scalar;

const LANES: usize = 8;

/// Dot product with a fixed eight-way accumulation order.
#[inline]
pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [S::zero(); LANES];
    let chunks = a.len() / LANES;
    for c in 0..chunks {
        let x = &a[c * LANES..c * LANES + LANES];
        let y = &b[c * LANES..c * LANES + LANES];
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = S::zero();
    for i in chunks * LANES..a.len() {
        tail += a[i] * b[i];
    }
    let s01 = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    let s23 = (acc[4] + acc[5]) + (acc[6] + acc[7]);
    (s01 + s23) + tail
}

/// `y += alpha * x`
#[inline]
pub fn axpy<S: Scalar>(alpha: S, x: &[S], y: &mut [S]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
pub fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

#[inline]
pub fn prelu<S: Scalar>(x: S, slope: S) -> S {
    if x > S::zero() {
        x
    } else {
        slope * x
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_matches_naive_sum() {
        let a: Vec<f64> = (0..37).map(|i| i as f64 * 0.5 - 3.0).collect();
        let b: Vec<f64> = (0..37).map(|i| (i as f64).sin()).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-12);
        assert_eq!(dot::<f32>(&[], &[]), 0.0);
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert_eq!(prelu(-1.0f64, 0.25), -0.25);
        assert_eq!(prelu(2.0f64, 0.7), 2.0);
    }
}
