//! Joint enhancement/VAD objective.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::nn::{Graph, Var, BCE_CLAMP};
use crate::scalar::Scalar;

/// Loss weights. Field names double as config-file keys.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the enhancement loss.
    pub lambda1: f64,
    /// Weight of the VAD loss.
    pub lambda2: f64,
    /// Weight of the mask term inside the enhancement loss.
    pub alpha: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda1: 1.0, lambda2: 0.1, alpha: 1.0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.lambda1, self.lambda2, self.alpha].iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(invalid!("loss weights must be finite and non-negative, got {self:?}"));
        }
        Ok(())
    }
}

fn check_len(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b || a == 0 {
        return Err(invalid!("{what}: lengths {a} and {b} must match and be non-zero"));
    }
    Ok(())
}

/// Mean absolute waveform error plus `alpha` times mean squared mask error.
pub fn loss_se(clean: &[f64], enhanced: &[f64], mask: &[f64], mask_est: &[f64], alpha: f64) -> Result<f64> {
    check_len(clean.len(), enhanced.len(), "waveforms")?;
    check_len(mask.len(), mask_est.len(), "masks")?;
    let l1 = clean.iter().zip(enhanced).map(|(a, b)| (a - b).abs()).sum::<f64>() / clean.len() as f64;
    let mse = mask.iter().zip(mask_est).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / mask.len() as f64;
    Ok(l1 + alpha * mse)
}

/// Binary cross-entropy with scores clamped to `[1e-7, 1 - 1e-7]`.
pub fn loss_vad(labels: &[f64], scores: &[f64]) -> Result<f64> {
    check_len(labels.len(), scores.len(), "VAD")?;
    let total: f64 = labels
        .iter()
        .zip(scores)
        .map(|(&y, &p)| {
            let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            y * p.ln() + (1.0 - y) * (1.0 - p).ln()
        })
        .sum();
    Ok(-total / labels.len() as f64)
}

pub fn loss_total(l_se: f64, l_vad: f64, cfg: &LossConfig) -> f64 {
    cfg.lambda1 * l_se + cfg.lambda2 * l_vad
}

/// Per-element weights and normalizers for a padded batch.
pub struct LossTargets<S> {
    pub clean: Vec<S>,
    pub sample_weights: Vec<S>,
    pub mask: Vec<S>,
    pub bin_weights: Vec<S>,
    pub vad: Vec<S>,
    pub frame_weights: Vec<S>,
}

/// The three loss terms recorded on the tape.
pub struct LossNodes {
    pub l1: Var,
    pub mse: Var,
    pub bce: Var,
    pub total: Var,
}

/// Records the weighted objective. Zero-weight terms are left out of the
/// total so their branches receive no gradient.
pub fn record_loss<S: Scalar>(
    g: &mut Graph<S>,
    enhanced: Var,
    mask: Var,
    vad: Var,
    t: &LossTargets<S>,
    cfg: &LossConfig,
) -> Result<LossNodes> {
    let norm = |w: &[S]| w.iter().copied().sum::<S>().max(S::one());
    let l1 = g.weighted_abs(enhanced, &t.clean, &t.sample_weights, norm(&t.sample_weights))?;
    let mse = g.weighted_sq(mask, &t.mask, &t.bin_weights, norm(&t.bin_weights))?;
    let bce = g.bce(vad, &t.vad, &t.frame_weights, norm(&t.frame_weights))?;
    let terms: Vec<(Var, S)> = [(l1, cfg.lambda1), (mse, cfg.lambda1 * cfg.alpha), (bce, cfg.lambda2)]
        .into_iter()
        .filter(|&(_, w)| w != 0.0)
        .map(|(v, w)| (v, S::lit(w)))
        .collect();
    let total = if terms.is_empty() {
        let z = g.constant(crate::nn::Tensor::scalar(S::zero()));
        g.weighted_sum(&[(z, S::zero())])?
    } else {
        g.weighted_sum(&terms)?
    };
    Ok(LossNodes { l1, mse, bce, total })
}
