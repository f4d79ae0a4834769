use std::f64::consts::PI;

use crate::error::{invalid, Result};
use crate::kernels::dot;
use crate::scalar::Scalar;

/// Orthonormal DCT-II of size `N` as a precomputed basis matrix.
///
/// Row `mu` of the basis holds `c(mu) * sqrt(2/N) * cos(pi*mu*(2n+1)/(2N))`
/// with `c(0) = 1/sqrt(2)` and `c(mu) = 1` otherwise. The inverse uses the
/// transposed basis, so `inverse(forward(x)) == x` up to rounding.
#[derive(Debug, Clone)]
pub struct Dct<S> {
    n: usize,
    basis: Vec<S>,
    basis_t: Vec<S>,
}

impl<S: Scalar> Dct<S> {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(invalid!("DCT size must be at least 1"));
        }
        let scale = (2.0 / n as f64).sqrt();
        let mut basis = vec![S::zero(); n * n];
        let mut basis_t = vec![S::zero(); n * n];
        for mu in 0..n {
            let c = if mu == 0 { std::f64::consts::FRAC_1_SQRT_2 } else { 1.0 };
            for k in 0..n {
                let v = c * scale * (PI * mu as f64 * (2 * k + 1) as f64 / (2 * n) as f64).cos();
                basis[mu * n + k] = S::lit(v);
                basis_t[k * n + mu] = S::lit(v);
            }
        }
        Ok(Self { n, basis, basis_t })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Row-major `N x N` analysis matrix.
    pub fn matrix(&self) -> &[S] {
        &self.basis
    }

    pub fn forward(&self, frame: &[S], out: &mut [S]) -> Result<()> {
        self.check(frame.len(), out.len())?;
        for (mu, o) in out.iter_mut().enumerate() {
            *o = dot(&self.basis[mu * self.n..(mu + 1) * self.n], frame);
        }
        Ok(())
    }

    pub fn inverse(&self, coeffs: &[S], out: &mut [S]) -> Result<()> {
        self.check(coeffs.len(), out.len())?;
        for (k, o) in out.iter_mut().enumerate() {
            *o = dot(&self.basis_t[k * self.n..(k + 1) * self.n], coeffs);
        }
        Ok(())
    }

    fn check(&self, input: usize, output: usize) -> Result<()> {
        if input != self.n || output != self.n {
            return Err(invalid!("DCT of size {} got input length {input} and output length {output}", self.n));
        }
        Ok(())
    }
}

/// One-shot orthonormal DCT-II in 64-bit.
pub fn dct_n(frame: &[f64]) -> Result<Vec<f64>> {
    if frame.is_empty() {
        return Err(invalid!("empty frame"));
    }
    let plan = Dct::<f64>::new(frame.len())?;
    let mut out = vec![0.0; frame.len()];
    plan.forward(frame, &mut out)?;
    Ok(out)
}

/// One-shot inverse of [`dct_n`] for a transform of size `n`.
pub fn idct_n(coeffs: &[f64], n: usize) -> Result<Vec<f64>> {
    let plan = Dct::<f64>::new(n)?;
    let mut out = vec![0.0; n];
    plan.inverse(coeffs, &mut out)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};

    /// Term-by-term evaluation of the DCT-II sum, independent of the basis matrix.
    fn dct_direct(x: &[f64]) -> Vec<f64> {
        let n = x.len() as f64;
        (0..x.len())
            .map(|mu| {
                let c = if mu == 0 { 1.0 / 2f64.sqrt() } else { 1.0 };
                let s: f64 = x
                    .iter()
                    .enumerate()
                    .map(|(k, &v)| v * (PI * mu as f64 * (2.0 * k as f64 + 1.0) / (2.0 * n)).cos())
                    .sum();
                c * (2.0 / n).sqrt() * s
            })
            .collect()
    }

    #[test]
    fn constant_frame_excites_only_dc() {
        let out = dct_n(&[1.0, 1.0, 1.0, 1.0]).unwrap();
        assert_abs_diff_eq!(out[0], 2.0, epsilon = 1e-14);
        for v in &out[1..] {
            assert_abs_diff_eq!(*v, 0.0, epsilon = 1e-14);
        }
        let back = idct_n(&out, 4).unwrap();
        for v in back {
            assert_abs_diff_eq!(v, 1.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn impulse_matches_direct_evaluation() {
        let out = dct_n(&[1.0, 0.0, 0.0, 0.0]).unwrap();
        let oracle = dct_direct(&[1.0, 0.0, 0.0, 0.0]);
        // frozen from the direct sum
        let frozen = [0.5, 0.653_281_482_438_188_3, 0.5, 0.270_598_050_073_098_5];
        for i in 0..4 {
            assert_abs_diff_eq!(out[i], oracle[i], epsilon = 1e-14);
            assert_abs_diff_eq!(out[i], frozen[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn inverse_of_second_basis_vector() {
        let out = idct_n(&[0.0, 1.0, 0.0, 0.0], 4).unwrap();
        let expected: Vec<f64> =
            [1.0, 3.0, 5.0, 7.0].iter().map(|k: &f64| (0.5f64).sqrt() * (k * PI / 8.0).cos()).collect();
        for i in 0..4 {
            assert_abs_diff_eq!(out[i], expected[i], epsilon = 1e-14);
        }
    }

    #[test]
    fn energy_preserved_and_round_trip() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..512).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = dct_n(&x).unwrap();
        let ex: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let ey: f64 = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert_abs_diff_eq!(ex, ey, epsilon = 1e-12);
        let back = idct_n(&y, 512).unwrap();
        let norm = ex.max(1e-300);
        let err = x.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err / norm < 1e-12, "relative error {}", err / norm);
        assert_eq!(dct_direct(&x[..16]).len(), 16);
    }

    #[test]
    fn rejects_bad_lengths() {
        assert!(dct_n(&[]).is_err());
        assert!(idct_n(&[1.0, 2.0], 4).is_err());
        let plan = Dct::<f32>::new(8).unwrap();
        let mut out = vec![0.0f32; 4];
        assert!(plan.forward(&[0.0; 8], &mut out).is_err());
    }
}
