//! Objective metrics: SI-SDR, segmental SNR and frame-level VAD scores.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Magnitude cap for SI-SDR, reached by exact reconstructions.
pub const SI_SDR_CAP_DB: f64 = 200.0;
pub const SEG_SNR_FRAME: usize = 512;
pub const SEG_SNR_RANGE: (f64, f64) = (-10.0, 35.0);

fn check_pair(reference: &[f64], estimate: &[f64]) -> Result<()> {
    if reference.len() != estimate.len() || reference.is_empty() {
        return Err(invalid!(
            "reference and estimate need equal non-zero lengths, got {} and {}",
            reference.len(),
            estimate.len()
        ));
    }
    Ok(())
}

/// Scale-invariant SDR in dB, clamped to `±SI_SDR_CAP_DB`.
pub fn si_sdr(reference: &[f64], estimate: &[f64]) -> Result<f64> {
    check_pair(reference, estimate)?;
    let ref_energy: f64 = reference.iter().map(|r| r * r).sum();
    if ref_energy == 0.0 {
        return Err(invalid!("SI-SDR is undefined for a silent reference"));
    }
    let alpha = reference.iter().zip(estimate).map(|(r, e)| r * e).sum::<f64>() / ref_energy;
    let (mut target, mut residual) = (0.0, 0.0);
    for (r, e) in reference.iter().zip(estimate) {
        let t = alpha * r;
        target += t * t;
        residual += (e - t) * (e - t);
    }
    let db = if residual == 0.0 { SI_SDR_CAP_DB } else { 10.0 * (target / residual).log10() };
    Ok(db.clamp(-SI_SDR_CAP_DB, SI_SDR_CAP_DB))
}

/// Mean over 512-sample frames of the per-frame SNR clamped to [-10, 35] dB.
pub fn seg_snr(reference: &[f64], estimate: &[f64]) -> Result<f64> {
    check_pair(reference, estimate)?;
    let (lo, hi) = SEG_SNR_RANGE;
    let frames: Vec<f64> = reference
        .chunks(SEG_SNR_FRAME)
        .zip(estimate.chunks(SEG_SNR_FRAME))
        .map(|(r, e)| {
            let signal: f64 = r.iter().map(|v| v * v).sum();
            let noise: f64 = r.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum();
            if noise == 0.0 {
                hi
            } else if signal == 0.0 {
                lo
            } else {
                (10.0 * (signal / noise).log10()).clamp(lo, hi)
            }
        })
        .collect();
    Ok(frames.iter().sum::<f64>() / frames.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VadMetrics {
    pub accuracy: f64,
    /// `None` when only one class is present.
    pub auc: Option<f64>,
}

/// Accuracy at `score >= threshold` and the rank-based AUC (ties count half).
pub fn vad_metrics(labels: &[f64], scores: &[f64], threshold: f64) -> Result<VadMetrics> {
    if labels.len() != scores.len() || labels.is_empty() {
        return Err(invalid!("{} labels for {} scores", labels.len(), scores.len()));
    }
    let positive = |y: f64| y >= 0.5;
    let correct = labels.iter().zip(scores).filter(|(&y, &s)| positive(y) == (s >= threshold)).count();
    let accuracy = correct as f64 / labels.len() as f64;
    Ok(VadMetrics { accuracy, auc: auc(labels, scores) })
}

/// Mann–Whitney estimate of the ROC area.
pub fn auc(labels: &[f64], scores: &[f64]) -> Option<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let n_pos = labels.iter().filter(|&&y| y >= 0.5).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += order[i..=j].iter().filter(|&&k| labels[k] >= 0.5).count() as f64 * mid_rank;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}
