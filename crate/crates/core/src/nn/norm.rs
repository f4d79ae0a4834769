//! Per-channel batch normalization over `[B, C, ...]`.

use crate::error::{invalid, Result};
use crate::scalar::Scalar;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Batch statistics gathered in training mode.
#[derive(Debug, Clone)]
pub struct BatchStats<S> {
    pub mean: Vec<S>,
    /// Unbiased variance, used for the running estimate.
    pub var: Vec<S>,
}

/// Folds eval-mode normalization into `y = x * scale + shift`.
pub fn eval_affine<S: Scalar>(gain: &[S], bias: &[S], mean: &[S], var: &[S]) -> (Vec<S>, Vec<S>) {
    let eps = S::lit(BN_EPS);
    let scale: Vec<S> = gain.iter().zip(var).map(|(&g, &v)| g / (v + eps).sqrt()).collect();
    let shift = bias.iter().zip(mean).zip(&scale).map(|((&b, &m), &s)| b - m * s).collect();
    (scale, shift)
}

/// Exponential moving update of running statistics.
pub fn update_running<S: Scalar>(running_mean: &mut [S], running_var: &mut [S], stats: &BatchStats<S>) {
    let m = S::lit(BN_MOMENTUM);
    for (r, &v) in running_mean.iter_mut().zip(&stats.mean) {
        *r = (S::one() - m) * *r + m * v;
    }
    for (r, &v) in running_var.iter_mut().zip(&stats.var) {
        *r = (S::one() - m) * *r + m * v;
    }
}

pub(crate) struct TrainForward<S> {
    pub out: Vec<S>,
    pub xhat: Vec<S>,
    pub inv_std: Vec<S>,
    pub stats: BatchStats<S>,
}

/// `x` viewed as `[batch, channels, inner]`.
pub(crate) fn train_forward<S: Scalar>(
    x: &[S],
    batch: usize,
    channels: usize,
    inner: usize,
    gain: &[S],
    bias: &[S],
) -> Result<TrainForward<S>> {
    let count = batch * inner;
    if count < 2 {
        return Err(invalid!("batch norm in training mode needs more than one value per channel, got {count}"));
    }
    let n = S::from_usize(count).unwrap();
    let eps = S::lit(BN_EPS);
    let mut out = vec![S::zero(); x.len()];
    let mut xhat = vec![S::zero(); x.len()];
    let mut inv_std = vec![S::zero(); channels];
    let mut mean_v = vec![S::zero(); channels];
    let mut var_v = vec![S::zero(); channels];
    for c in 0..channels {
        let rows = (0..batch).map(|b| (b * channels + c) * inner);
        let mut sum = S::zero();
        for r in rows.clone() {
            sum += x[r..r + inner].iter().copied().sum::<S>();
        }
        let mean = sum / n;
        let mut sq = S::zero();
        for r in rows.clone() {
            sq += x[r..r + inner].iter().map(|&v| (v - mean) * (v - mean)).sum::<S>();
        }
        let var = sq / n;
        let inv = S::one() / (var + eps).sqrt();
        for r in rows {
            for i in r..r + inner {
                let h = (x[i] - mean) * inv;
                xhat[i] = h;
                out[i] = h * gain[c] + bias[c];
            }
        }
        inv_std[c] = inv;
        mean_v[c] = mean;
        var_v[c] = sq / (n - S::one());
    }
    Ok(TrainForward { out, xhat, inv_std, stats: BatchStats { mean: mean_v, var: var_v } })
}

/// Returns `(dx, dgain, dbias)` for training-mode normalization.
pub(crate) fn train_backward<S: Scalar>(
    gout: &[S],
    xhat: &[S],
    inv_std: &[S],
    gain: &[S],
    batch: usize,
    channels: usize,
    inner: usize,
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let n = S::from_usize(batch * inner).unwrap();
    let mut dx = vec![S::zero(); gout.len()];
    let mut dgain = vec![S::zero(); channels];
    let mut dbias = vec![S::zero(); channels];
    for c in 0..channels {
        let rows = (0..batch).map(|b| (b * channels + c) * inner);
        let (mut sg, mut sgx) = (S::zero(), S::zero());
        for r in rows.clone() {
            for i in r..r + inner {
                sg += gout[i];
                sgx += gout[i] * xhat[i];
            }
        }
        dgain[c] = sgx;
        dbias[c] = sg;
        let k = gain[c] * inv_std[c] / n;
        for r in rows {
            for i in r..r + inner {
                dx[i] = k * (n * gout[i] - sg - xhat[i] * sgx);
            }
        }
    }
    (dx, dgain, dbias)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn eval_backward<S: Scalar>(
    gout: &[S],
    x: &[S],
    scale: &[S],
    mean: &[S],
    var: &[S],
    batch: usize,
    channels: usize,
    inner: usize,
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let eps = S::lit(BN_EPS);
    let mut dx = vec![S::zero(); gout.len()];
    let mut dgain = vec![S::zero(); channels];
    let mut dbias = vec![S::zero(); channels];
    for b in 0..batch {
        for c in 0..channels {
            let r = (b * channels + c) * inner;
            let inv = S::one() / (var[c] + eps).sqrt();
            for i in r..r + inner {
                dx[i] = gout[i] * scale[c];
                dgain[c] += gout[i] * (x[i] - mean[c]) * inv;
                dbias[c] += gout[i];
            }
        }
    }
    (dx, dgain, dbias)
}
