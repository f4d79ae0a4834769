//! Causal spatial attention: channel pooling, a start-padded convolution
//! over the pooled maps, and sigmoid gating broadcast across channels.

use crate::error::{invalid, Result};
use crate::nn::{ConvSpec, Graph, Tensor, Var};
use crate::scalar::Scalar;

/// Attention convolution: `weight [1, 2, k_F, k_T]` and `bias [1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CsaParams<S> {
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
}

impl<S: Scalar> CsaParams<S> {
    pub fn zeros(k_f: usize, k_t: usize) -> Result<Self> {
        check_kernel(k_f, k_t)?;
        Ok(Self { weight: Tensor::zeros(&[1, 2, k_f, k_t]), bias: Tensor::zeros(&[1]) })
    }

    pub fn kernel(&self) -> Result<(usize, usize)> {
        let [o, i, k_f, k_t] = self.weight.dims4()?;
        if o != 1 || i != 2 || self.bias.numel() != 1 {
            return Err(invalid!(
                "attention weight must be [1, 2, kF, kT] with one bias, got {:?} and {:?}",
                self.weight.shape(),
                self.bias.shape()
            ));
        }
        check_kernel(k_f, k_t)?;
        Ok((k_f, k_t))
    }
}

pub fn check_kernel(k_f: usize, k_t: usize) -> Result<()> {
    if k_f.is_multiple_of(2) || k_t == 0 {
        return Err(invalid!("attention kernel needs odd k_F and k_T >= 1, got ({k_f}, {k_t})"));
    }
    Ok(())
}

/// Convolution geometry of the attention map for an odd `k_f`.
pub fn csa_spec(k_f: usize) -> ConvSpec {
    ConvSpec { stride_f: 1, pad_f: (k_f - 1) / 2 }
}

/// Records `σ(conv([avg(U); max(U)])) ⊗ U` on the tape. `weight` and `bias`
/// are nodes holding the attention convolution.
pub fn csa_forward<S: Scalar>(g: &mut Graph<S>, u: Var, weight: Var, bias: Var) -> Result<Var> {
    Ok(csa_nodes(g, u, weight, bias)?.0)
}

/// Like [`csa_forward`] but also returns the attention map node.
pub fn csa_nodes<S: Scalar>(g: &mut Graph<S>, u: Var, weight: Var, bias: Var) -> Result<(Var, Var)> {
    let [o, i, k_f, k_t] = g.value(weight).dims4()?;
    if o != 1 || i != 2 {
        return Err(invalid!("attention weight must be [1, 2, kF, kT], got {:?}", g.value(weight).shape()));
    }
    check_kernel(k_f, k_t)?;
    let pooled = g.channel_pool(u)?;
    let logits = g.conv2d(pooled, weight, bias, csa_spec(k_f))?;
    let sam = g.sigmoid(logits)?;
    Ok((g.mul(u, sam)?, sam))
}

/// Applies attention with constant parameters, returning `(output, SAM)`.
pub fn csa_apply<S: Scalar>(u: &Tensor<S>, p: &CsaParams<S>) -> Result<(Tensor<S>, Tensor<S>)> {
    p.kernel()?;
    let mut g = Graph::new();
    let uv = g.constant(u.clone());
    let w = g.constant(p.weight.clone());
    let b = g.constant(p.bias.clone());
    let (out, sam) = csa_nodes(&mut g, uv, w, b)?;
    Ok((g.value(out).clone(), g.value(sam).clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng, scale: f64) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
    }

    fn pool(u: &Tensor<f64>) -> Tensor<f64> {
        let mut g = Graph::new();
        let v = g.constant(u.clone());
        let p = g.channel_pool(v).unwrap();
        g.value(p).clone()
    }

    #[test]
    fn single_channel_pool_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let u = random(&[1, 1, 3, 4], &mut rng, 1.0);
        let p = pool(&u);
        assert_eq!(&p.data()[..12], u.data());
        assert_eq!(&p.data()[12..], u.data());
    }

    #[test]
    fn pool_definition_and_permutation() {
        let u = Tensor::new(vec![1, 2, 1, 1], vec![1.0, 3.0]).unwrap();
        assert_eq!(pool(&u).data(), &[2.0, 3.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let u = random(&[1, 4, 3, 5], &mut rng, 1.0);
        let mut perm = u.clone();
        for (dst, src) in [3, 0, 2, 1].into_iter().enumerate() {
            perm.data_mut()[dst * 15..(dst + 1) * 15].copy_from_slice(&u.data()[src * 15..(src + 1) * 15]);
        }
        let (a, b) = (pool(&u), pool(&perm));
        assert_eq!(&a.data()[15..], &b.data()[15..]);
        for (x, y) in a.data()[..15].iter().zip(&b.data()[..15]) {
            assert!((x - y).abs() < 1e-15);
        }
        let mut g = Graph::<f64>::new();
        let empty = g.constant(Tensor::zeros(&[1, 0, 3, 5]));
        assert!(g.channel_pool(empty).is_err());
    }

    #[test]
    fn zero_kernel_halves_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u = random(&[2, 3, 8, 6], &mut rng, 2.0);
        let (out, sam) = csa_apply(&u, &CsaParams::zeros(7, 15).unwrap()).unwrap();
        assert!(sam.data().iter().all(|&s| s == 0.5));
        for (o, x) in out.data().iter().zip(u.data()) {
            assert_eq!(*o, x / 2.0);
        }
    }

    #[test]
    fn attention_only_attenuates() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let u = random(&[1, 4, 8, 20], &mut rng, 3.0);
            let p = CsaParams { weight: random(&[1, 2, 7, 15], &mut rng, 0.5), bias: random(&[1], &mut rng, 1.0) };
            let (out, sam) = csa_apply(&u, &p).unwrap();
            assert_eq!(sam.shape(), &[1, 1, 8, 20]);
            assert!(sam.data().iter().all(|&s| s > 0.0 && s < 1.0));
            assert_eq!(out.shape(), u.shape());
            for (o, x) in out.data().iter().zip(u.data()) {
                assert!(o.abs() <= x.abs());
            }
        }
    }

    #[test]
    fn shape_errors() {
        assert!(CsaParams::<f64>::zeros(6, 15).is_err());
        assert!(CsaParams::<f64>::zeros(7, 0).is_err());
        let bad = CsaParams { weight: Tensor::<f64>::zeros(&[1, 3, 7, 15]), bias: Tensor::zeros(&[1]) };
        assert!(csa_apply(&Tensor::zeros(&[1, 2, 8, 4]), &bad).is_err());
    }
}
