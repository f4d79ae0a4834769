//! SNR mixing, energy-based VAD labels and DCT ratio-mask targets.

use crate::dsp::{stdct, FrameConfig, Spectrogram, Waveform};
use crate::error::{invalid, Result};

/// Default relative level below the loudest frame that still counts as speech.
pub const VAD_FLOOR_DB: f64 = 40.0;

/// Denominator magnitude below which the ratio mask is set to zero.
pub const MASK_EPS: f64 = 1e-8;

pub fn power(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64
}

/// Scales `noise` so the full-utterance SNR equals `snr_db` and adds it to
/// `clean`. Returns `(noisy, scale)`.
pub fn mix_at_snr(clean: &[f64], noise: &[f64], snr_db: f64) -> Result<(Vec<f64>, f64)> {
    if clean.len() != noise.len() {
        return Err(invalid!("clean has {} samples but noise has {}", clean.len(), noise.len()));
    }
    if !snr_db.is_finite() {
        return Err(invalid!("SNR must be finite, got {snr_db}"));
    }
    let (pc, pn) = (power(clean), power(noise));
    if pc <= 0.0 || pn <= 0.0 {
        return Err(invalid!("clean and noise need nonzero power (got {pc} and {pn})"));
    }
    let scale = (pc / (pn * 10f64.powf(snr_db / 10.0))).sqrt();
    let noisy = clean.iter().zip(noise).map(|(c, n)| c + scale * n).collect();
    Ok((noisy, scale))
}

pub fn snr_db(clean: &[f64], noise: &[f64]) -> f64 {
    10.0 * (power(clean) / power(noise)).log10()
}

/// Frame `t` is active when the RMS of its (unwindowed, zero-padded) span is
/// within `floor_db` of the loudest frame.
pub fn vad_labels(clean: &[f64], cfg: &FrameConfig, floor_db: f64) -> Vec<f64> {
    let frames = cfg.num_frames(clean.len());
    let (win, hop, lead) = (cfg.win_len(), cfg.hop(), cfg.lead() as isize);
    let rms: Vec<f64> = (0..frames)
        .map(|t| {
            let start = (t * hop) as isize - lead;
            let lo = start.max(0) as usize;
            let hi = ((start + win as isize).max(0) as usize).min(clean.len());
            let energy: f64 = clean.get(lo..hi).map_or(0.0, |s| s.iter().map(|v| v * v).sum());
            (energy / win as f64).sqrt()
        })
        .collect();
    let peak = rms.iter().copied().fold(0.0, f64::max);
    if peak == 0.0 {
        return vec![0.0; frames];
    }
    let threshold = peak * 10f64.powf(-floor_db / 20.0);
    rms.iter().map(|&r| if r >= threshold { 1.0 } else { 0.0 }).collect()
}

/// Ratio mask `S / X`, zero where `|X| < MASK_EPS`, clamped to `±clip`
/// (`clip` may be infinite).
pub fn dctirm(clean: &Spectrogram, noisy: &Spectrogram, clip: f64) -> Result<Vec<f64>> {
    if !clean.same_layout(noisy) {
        return Err(invalid!(
            "clean spectrogram {}x{} does not match noisy {}x{}",
            clean.bins,
            clean.frames,
            noisy.bins,
            noisy.frames
        ));
    }
    if clip.is_nan() || clip <= 0.0 {
        return Err(invalid!("mask clip must be positive, got {clip}"));
    }
    Ok(clean
        .coeffs
        .iter()
        .zip(&noisy.coeffs)
        .map(|(&s, &x)| if x.abs() >= MASK_EPS { (s / x).clamp(-clip, clip) } else { 0.0 })
        .collect())
}

/// A clean/noise pair mixed at a target SNR with its training targets.
#[derive(Debug, Clone)]
pub struct MixtureExample {
    pub clean: Waveform,
    /// Noise after scaling, so `noisy = clean + noise`.
    pub noise: Waveform,
    pub noisy: Waveform,
    pub snr_db: f64,
    pub vad: Vec<f64>,
    pub mask_target: Vec<f64>,
    pub noisy_spec: Spectrogram,
}

impl MixtureExample {
    pub fn mix(clean: Waveform, noise: &[f64], snr: f64, cfg: &FrameConfig, clip: f64) -> Result<Self> {
        let (_, scale) = mix_at_snr(&clean.samples, noise, snr)?;
        let scaled: Vec<f64> = noise.iter().map(|n| scale * n).collect();
        let noisy: Vec<f64> = clean.samples.iter().zip(&scaled).map(|(c, n)| c + n).collect();
        let rate = clean.sample_rate;
        Self::from_parts(clean, Waveform::new(scaled, rate)?, Waveform::new(noisy, rate)?, snr, cfg, clip)
    }

    /// Builds targets for an already mixed triple.
    pub fn from_parts(
        clean: Waveform,
        noise: Waveform,
        noisy: Waveform,
        snr_db: f64,
        cfg: &FrameConfig,
        clip: f64,
    ) -> Result<Self> {
        if clean.len() != noisy.len() || clean.len() != noise.len() || clean.sample_rate != noisy.sample_rate {
            return Err(invalid!("clean, noise and noisy must share length and rate"));
        }
        let noisy_spec = stdct(&noisy, cfg)?;
        let mask_target = dctirm(&stdct(&clean, cfg)?, &noisy_spec, clip)?;
        let vad = vad_labels(&clean.samples, cfg, VAD_FLOOR_DB);
        Ok(Self { clean, noise, noisy, snr_db, vad, mask_target, noisy_spec })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{istdct, SAMPLE_RATE};
    use crate::model::apply_mask;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(n: usize, seed: u64) -> Vec<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn equal_power_at_zero_db_keeps_scale() {
        let c = vec![1.0, -1.0, 1.0, -1.0];
        let n = vec![-1.0, -1.0, 1.0, 1.0];
        let (noisy, scale) = mix_at_snr(&c, &n, 0.0).unwrap();
        assert_eq!(scale, 1.0);
        assert_eq!(noisy, vec![0.0, -2.0, 2.0, 0.0]);
    }

    #[test]
    fn requested_snr_is_met() {
        let c = noise(8000, 1);
        let n = noise(8000, 2);
        for snr in [0.0, 5.0, 10.0, 15.0, -3.5] {
            let (noisy, scale) = mix_at_snr(&c, &n, snr).unwrap();
            let scaled: Vec<f64> = n.iter().map(|v| v * scale).collect();
            assert!((snr_db(&c, &scaled) - snr).abs() < 1e-9);
            if snr == 10.0 {
                assert!((power(&scaled) / (power(&c) / 10.0) - 1.0).abs() < 1e-10);
            }
            for ((y, c), s) in noisy.iter().zip(&c).zip(&scaled) {
                assert_eq!(y.to_bits(), (c + s).to_bits());
            }
        }
    }

    #[test]
    fn mixing_errors() {
        assert!(mix_at_snr(&[0.0; 4], &[1.0; 4], 0.0).is_err());
        assert!(mix_at_snr(&[1.0; 4], &[0.0; 4], 0.0).is_err());
        assert!(mix_at_snr(&[1.0; 4], &[1.0; 3], 0.0).is_err());
    }

    #[test]
    fn vad_label_extremes() {
        let cfg = FrameConfig::default();
        assert!(vad_labels(&[0.0; 16_000], &cfg, 40.0).iter().all(|&v| v == 0.0));
        let tone: Vec<f64> = (0..16_000).map(|i| (i as f64 * 0.3).sin()).collect();
        assert!(vad_labels(&tone, &cfg, 40.0).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn tone_silence_tone_edges() {
        // 1 s tone, 1 s silence, 1 s tone.
        let mut x = vec![0.0; 48_000];
        for (i, v) in x.iter_mut().enumerate() {
            if !(16_000..32_000).contains(&i) {
                *v = (2.0 * std::f64::consts::PI * 440.0 * i as f64 / 16_000.0).sin();
            }
        }
        let cfg = FrameConfig::default();
        let labels = vad_labels(&x, &cfg, 40.0);
        // Frame t spans padded [128 t, 128 t + 512), i.e. signal [128 t - 384, 128 t + 128).
        // Its centre 128 t - 128 crosses 16 000 at t = 126 and 32 000 at t = 251.
        let last_on = (0..labels.len()).find(|&t| labels[t] == 0.0).unwrap() - 1;
        let first_back = (last_on + 1..labels.len()).find(|&t| labels[t] == 1.0).unwrap();
        assert!(last_on.abs_diff(126) <= 1, "{last_on}");
        assert!(first_back.abs_diff(251) <= 1, "{first_back}");
    }

    #[test]
    fn ratio_mask_cases() {
        let cfg = FrameConfig::hamming(64, 16).unwrap();
        let w = Waveform::new(noise(500, 3), SAMPLE_RATE).unwrap();
        let x = stdct(&w, &cfg).unwrap();
        let m = dctirm(&x, &x, 1.0).unwrap();
        assert!(m.iter().zip(&x.coeffs).all(|(&m, &c)| m == 1.0 || c.abs() < MASK_EPS));
        let zero = x.with_coeffs(vec![0.0; x.coeffs.len()]).unwrap();
        assert!(dctirm(&zero, &x, 1.0).unwrap().iter().all(|&v| v == 0.0));

        let one = |v: f64| Spectrogram { coeffs: vec![v], bins: 1, frames: 1, ..x.clone() };
        assert_eq!(dctirm(&one(3.0), &one(1.0), 1.0).unwrap(), vec![1.0]);
        assert_eq!(dctirm(&one(3.0), &one(1.0), 5.0).unwrap(), vec![3.0]);
        assert_eq!(dctirm(&one(-3.0), &one(1.0), 1.0).unwrap(), vec![-1.0]);
        let short = Spectrogram { frames: x.frames - 1, coeffs: x.coeffs[..64 * (x.frames - 1)].to_vec(), ..x.clone() };
        assert!(dctirm(&short, &x, 1.0).is_err());
    }

    #[test]
    fn unclipped_oracle_mask_restores_clean() {
        let cfg = FrameConfig::default();
        let clean = noise(16_000, 4);
        let (noisy, _) = mix_at_snr(&clean, &noise(16_000, 5), 0.0).unwrap();
        let s = stdct(&Waveform::new(clean.clone(), SAMPLE_RATE).unwrap(), &cfg).unwrap();
        let x = stdct(&Waveform::new(noisy, SAMPLE_RATE).unwrap(), &cfg).unwrap();
        let m = dctirm(&s, &x, f64::INFINITY).unwrap();
        let out = istdct(&apply_mask(&x, &m).unwrap(), SAMPLE_RATE).unwrap();
        let err = out.samples.iter().zip(&clean).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err <= 1e-6, "{err}");
    }
}
