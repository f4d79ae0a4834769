use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::dsp::Dct;
use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;

/// The only rate the enhancer runs at.
pub const SAMPLE_RATE: u32 = 16_000;

/// Envelope values below this are treated as 1 during synthesis.
const ENVELOPE_FLOOR: f64 = 1e-8;

/// Mono audio with its sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(invalid!("sample rate must be positive"));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(invalid!("non-finite sample at index {i}"));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn require_rate(&self, expected: u32) -> Result<()> {
        if self.sample_rate != expected {
            return Err(Error::UnsupportedRate { rate: self.sample_rate, expected });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowKind {
    Hamming,
    Rectangular,
}

impl WindowKind {
    /// Periodic window of the given length.
    pub fn weights(self, len: usize) -> Vec<f64> {
        match self {
            WindowKind::Hamming => (0..len).map(|n| 0.54 - 0.46 * (2.0 * PI * n as f64 / len as f64).cos()).collect(),
            WindowKind::Rectangular => vec![1.0; len],
        }
    }
}

/// Serializable description of a [`FrameConfig`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameSpec {
    pub win_len: usize,
    pub hop: usize,
    pub window: WindowKind,
}

impl Default for FrameSpec {
    fn default() -> Self {
        Self { win_len: 512, hop: 128, window: WindowKind::Hamming }
    }
}

impl FrameSpec {
    pub fn build(&self) -> Result<FrameConfig> {
        FrameConfig::new(self.win_len, self.hop, self.window.weights(self.win_len))
    }
}

/// Framing parameters: window length (= DCT size), hop and window weights.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameConfig {
    win_len: usize,
    hop: usize,
    window: Vec<f64>,
}

impl Default for FrameConfig {
    fn default() -> Self {
        Self::hamming(512, 128).expect("default framing is valid")
    }
}

impl FrameConfig {
    pub fn new(win_len: usize, hop: usize, window: Vec<f64>) -> Result<Self> {
        if win_len == 0 || hop == 0 || hop > win_len {
            return Err(invalid!("need 0 < hop <= win_len, got hop {hop}, win_len {win_len}"));
        }
        if window.len() != win_len {
            return Err(invalid!("window has {} weights, expected {win_len}", window.len()));
        }
        if window.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(invalid!("window weights must be finite and non-negative"));
        }
        Ok(Self { win_len, hop, window })
    }

    pub fn hamming(win_len: usize, hop: usize) -> Result<Self> {
        Self::new(win_len, hop, WindowKind::Hamming.weights(win_len))
    }

    pub fn rectangular(win_len: usize, hop: usize) -> Result<Self> {
        Self::new(win_len, hop, WindowKind::Rectangular.weights(win_len))
    }

    pub fn win_len(&self) -> usize {
        self.win_len
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    /// Zeros prepended before the first frame.
    pub fn lead(&self) -> usize {
        self.win_len - self.hop
    }

    /// Frame count for a signal of `len` samples (zero for an empty signal).
    pub fn num_frames(&self, len: usize) -> usize {
        if len == 0 {
            return 0;
        }
        let padded = len + self.lead();
        if padded <= self.win_len {
            1
        } else {
            (padded - self.win_len).div_ceil(self.hop) + 1
        }
    }

    /// Length of the padded signal covered by `frames` frames.
    pub fn padded_len(&self, frames: usize) -> usize {
        if frames == 0 {
            0
        } else {
            (frames - 1) * self.hop + self.win_len
        }
    }
}

/// F x T matrix of STDCT coefficients, stored frequency-major with the
/// frame index innermost (`coeffs[f * frames + t]`).
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub coeffs: Vec<f64>,
    pub bins: usize,
    pub frames: usize,
    pub frame_config: FrameConfig,
    pub original_len: usize,
}

impl Spectrogram {
    #[inline]
    pub fn at(&self, bin: usize, frame: usize) -> f64 {
        self.coeffs[bin * self.frames + frame]
    }

    pub fn column(&self, frame: usize) -> Vec<f64> {
        (0..self.bins).map(|f| self.at(f, frame)).collect()
    }

    pub fn same_layout(&self, other: &Spectrogram) -> bool {
        self.bins == other.bins && self.frames == other.frames
    }

    /// Copy with the same layout and new coefficients.
    pub fn with_coeffs(&self, coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.len() != self.coeffs.len() {
            return Err(invalid!("expected {} coefficients, got {}", self.coeffs.len(), coeffs.len()));
        }
        Ok(Self { coeffs, ..self.clone() })
    }
}

/// Reusable analysis/synthesis plan over scalar type `S`.
#[derive(Debug, Clone)]
pub struct Stdct<S> {
    win_len: usize,
    hop: usize,
    window: Vec<S>,
    dct: Dct<S>,
}

impl<S: Scalar> Stdct<S> {
    pub fn new(cfg: &FrameConfig) -> Result<Self> {
        Ok(Self {
            win_len: cfg.win_len,
            hop: cfg.hop,
            window: cfg.window.iter().map(|&w| S::lit(w)).collect(),
            dct: Dct::new(cfg.win_len)?,
        })
    }

    pub fn win_len(&self) -> usize {
        self.win_len
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn window(&self) -> &[S] {
        &self.window
    }

    pub fn dct(&self) -> &Dct<S> {
        &self.dct
    }

    pub fn lead(&self) -> usize {
        self.win_len - self.hop
    }

    pub fn num_frames(&self, len: usize) -> usize {
        if len == 0 {
            return 0;
        }
        let padded = len + self.lead();
        if padded <= self.win_len {
            1
        } else {
            (padded - self.win_len).div_ceil(self.hop) + 1
        }
    }

    /// Windows one frame of raw samples and transforms it.
    pub fn analyze_frame(&self, frame: &[S], scratch: &mut [S], out: &mut [S]) -> Result<()> {
        for ((s, &x), &w) in scratch.iter_mut().zip(frame).zip(&self.window) {
            *s = x * w;
        }
        self.dct.forward(scratch, out)
    }

    /// Inverse-transforms one frame and applies the synthesis window in place.
    pub fn synthesize_frame(&self, coeffs: &[S], out: &mut [S]) -> Result<()> {
        self.dct.inverse(coeffs, out)?;
        for (o, &w) in out.iter_mut().zip(&self.window) {
            *o *= w;
        }
        Ok(())
    }

    /// Frames `samples` into an `F x T` coefficient matrix (frame index innermost).
    pub fn analyze(&self, samples: &[S]) -> Result<(Vec<S>, usize)> {
        let n = self.win_len;
        let frames = self.num_frames(samples.len());
        let lead = self.lead();
        let mut coeffs = vec![S::zero(); n * frames];
        let mut frame = vec![S::zero(); n];
        let mut scratch = vec![S::zero(); n];
        let mut col = vec![S::zero(); n];
        for t in 0..frames {
            for (k, v) in frame.iter_mut().enumerate() {
                let p = t * self.hop + k;
                *v = if p >= lead && p - lead < samples.len() { samples[p - lead] } else { S::zero() };
            }
            self.analyze_frame(&frame, &mut scratch, &mut col)?;
            for (f, &c) in col.iter().enumerate() {
                coeffs[f * frames + t] = c;
            }
        }
        Ok((coeffs, frames))
    }

    /// Weighted overlap-add of `frames` columns, normalized by the summed
    /// squared window and trimmed to `out_len` samples.
    pub fn synthesize(&self, coeffs: &[S], frames: usize, out_len: usize) -> Result<Vec<S>> {
        let n = self.win_len;
        if frames == 0 {
            return Err(invalid!("cannot synthesize from zero frames"));
        }
        if coeffs.len() != n * frames {
            return Err(invalid!("expected {} coefficients, got {}", n * frames, coeffs.len()));
        }
        let padded = (frames - 1) * self.hop + n;
        if out_len + self.lead() > padded {
            return Err(invalid!("{frames} frames cannot cover {out_len} samples"));
        }
        let mut acc = vec![S::zero(); padded];
        let mut env = vec![S::zero(); padded];
        let mut col = vec![S::zero(); n];
        let mut time = vec![S::zero(); n];
        for t in 0..frames {
            for (f, c) in col.iter_mut().enumerate() {
                *c = coeffs[f * frames + t];
            }
            self.synthesize_frame(&col, &mut time)?;
            let base = t * self.hop;
            for k in 0..n {
                acc[base + k] += time[k];
                env[base + k] += self.window[k] * self.window[k];
            }
        }
        let lead = self.lead();
        Ok((0..out_len).map(|i| normalize(acc[i + lead], env[i + lead])).collect())
    }

    /// Per-sample synthesis envelope of the padded signal covered by `frames`.
    pub fn envelope(&self, frames: usize) -> Vec<S> {
        let padded = if frames == 0 { 0 } else { (frames - 1) * self.hop + self.win_len };
        let mut env = vec![S::zero(); padded];
        for t in 0..frames {
            for k in 0..self.win_len {
                env[t * self.hop + k] += self.window[k] * self.window[k];
            }
        }
        env
    }
}

/// Divides an overlap-added sample by its window envelope.
#[inline]
pub fn normalize<S: Scalar>(acc: S, env: S) -> S {
    if env < S::lit(ENVELOPE_FLOOR) {
        acc
    } else {
        acc / env
    }
}

/// Short-time DCT of a waveform in 64-bit precision.
pub fn stdct(wave: &Waveform, cfg: &FrameConfig) -> Result<Spectrogram> {
    if wave.is_empty() {
        return Err(invalid!("cannot analyze an empty waveform"));
    }
    let plan = Stdct::<f64>::new(cfg)?;
    let (coeffs, frames) = plan.analyze(&wave.samples)?;
    Ok(Spectrogram { coeffs, bins: cfg.win_len, frames, frame_config: cfg.clone(), original_len: wave.len() })
}

/// Inverse short-time DCT; returns exactly `spec.original_len` samples.
pub fn istdct(spec: &Spectrogram, sample_rate: u32) -> Result<Waveform> {
    if spec.frames == 0 || spec.bins == 0 {
        return Err(invalid!("cannot synthesize an empty spectrogram"));
    }
    if spec.bins != spec.frame_config.win_len {
        return Err(invalid!("spectrogram has {} bins but frame length is {}", spec.bins, spec.frame_config.win_len));
    }
    let plan = Stdct::<f64>::new(&spec.frame_config)?;
    let samples = plan.synthesize(&spec.coeffs, spec.frames, spec.original_len)?;
    Waveform::new(samples, sample_rate)
}
