use serde::{Deserialize, Serialize};

use crate::attention::check_kernel;
use crate::dsp::FrameConfig;
use crate::error::{invalid, Result};
use crate::nn::{ConvSpec, TConvSpec};

/// Architecture hyperparameters. Field names double as config-file keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// DCT size, equal to the analysis window length.
    pub dct_size: usize,
    /// Frame hop in samples.
    pub hop: usize,
    pub encoder_channels: Vec<usize>,
    /// `(k_F, k_T)` of every encoder/decoder convolution.
    pub conv_kernel: [usize; 2],
    /// `(s_F, s_T)`; time stride must be 1.
    pub conv_stride: [usize; 2],
    pub se_gru_hidden: Vec<usize>,
    pub se_linear_out: usize,
    pub decoder_channels: Vec<usize>,
    /// `(k_F, k_T)` of the attention convolution.
    pub csa_kernel: [usize; 2],
    pub vad_transform_channels: usize,
    pub vad_gru_hidden: Vec<usize>,
    /// `(in, out)` of the VAD output layer.
    pub vad_linear: [usize; 2],
    pub mask_clip: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl ModelConfig {
    pub fn full() -> Self {
        Self {
            dct_size: 512,
            hop: 128,
            encoder_channels: vec![16, 32, 64, 128, 256],
            conv_kernel: [5, 2],
            conv_stride: [2, 1],
            se_gru_hidden: vec![128, 64, 32],
            se_linear_out: 4096,
            decoder_channels: vec![128, 64, 32, 16, 1],
            csa_kernel: [7, 15],
            vad_transform_channels: 8,
            vad_gru_hidden: vec![32, 16, 8],
            vad_linear: [8, 1],
            mask_clip: 1.0,
        }
    }

    /// Reduced configuration for desk-scale training and gradient checks.
    pub fn toy() -> Self {
        Self {
            dct_size: 64,
            hop: 16,
            encoder_channels: vec![4, 8, 16, 24, 32],
            se_gru_hidden: vec![16, 8, 8],
            se_linear_out: 64,
            decoder_channels: vec![24, 16, 8, 4, 1],
            vad_gru_hidden: vec![16, 8, 8],
            ..Self::full()
        }
    }

    /// Toy channel widths on the full 512/128 frame. Short training runs
    /// enhance far better with this frame than with the 64-bin toy frame,
    /// which smears harmonics at high SNR, while costing about the same per
    /// second of audio.
    pub fn desk() -> Self {
        Self { dct_size: 512, hop: 128, se_linear_out: 512, ..Self::toy() }
    }

    /// `"full"`, `"toy"` or `"desk"`.
    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "full" => Some(Self::full()),
            "toy" => Some(Self::toy()),
            "desk" => Some(Self::desk()),
            _ => None,
        }
    }

    pub fn depth(&self) -> usize {
        self.encoder_channels.len()
    }

    /// Frequency bins after the encoder.
    pub fn bottleneck_bins(&self) -> usize {
        self.dct_size >> self.depth()
    }

    pub fn frame_config(&self) -> Result<FrameConfig> {
        FrameConfig::hamming(self.dct_size, self.hop)
    }

    pub fn conv_spec(&self) -> ConvSpec {
        ConvSpec { stride_f: self.conv_stride[0], pad_f: self.conv_kernel[0] / 2 }
    }

    pub fn tconv_spec(&self) -> TConvSpec {
        TConvSpec { stride_f: self.conv_stride[0], pad_f: self.conv_kernel[0] / 2, out_pad_f: 1 }
    }

    /// Input channels of decoder layer `i` (0-based): previous stream plus skip.
    pub fn decoder_in(&self, i: usize) -> usize {
        let depth = self.depth();
        let prev = if i == 0 { self.encoder_channels[depth - 1] } else { self.decoder_channels[i - 1] };
        prev + self.encoder_channels[depth - 1 - i]
    }

    pub fn validate(&self) -> Result<()> {
        let depth = self.depth();
        if depth == 0 || self.se_gru_hidden.is_empty() || self.vad_gru_hidden.is_empty() {
            return Err(invalid!("encoder, SE recurrent and VAD recurrent stacks must be non-empty"));
        }
        let all = self
            .encoder_channels
            .iter()
            .chain(&self.decoder_channels)
            .chain(&self.se_gru_hidden)
            .chain(&self.vad_gru_hidden);
        if all.clone().any(|&c| c == 0) || self.vad_transform_channels == 0 {
            return Err(invalid!("layer widths must be positive"));
        }
        if self.decoder_channels.len() != depth || self.decoder_channels[depth - 1] != 1 {
            return Err(invalid!(
                "decoder needs {depth} layers ending in one channel, got {:?}",
                self.decoder_channels
            ));
        }
        if self.conv_kernel != [5, 2] || self.conv_stride != [2, 1] {
            return Err(invalid!(
                "only kernel (5, 2) with stride (2, 1) keeps the halving/doubling frequency chain, got {:?} / {:?}",
                self.conv_kernel,
                self.conv_stride
            ));
        }
        if self.dct_size == 0 || !self.dct_size.is_multiple_of(1 << (depth + 1)) {
            return Err(invalid!(
                "dct_size {} must be divisible by 2^{} so the encoder and VAD transform halve it exactly",
                self.dct_size,
                depth + 1
            ));
        }
        if self.hop == 0 || self.hop > self.dct_size {
            return Err(invalid!("hop {} must be in 1..={}", self.hop, self.dct_size));
        }
        let expected = self.encoder_channels[depth - 1] * self.bottleneck_bins();
        if self.se_linear_out != expected {
            return Err(invalid!(
                "se_linear_out {} must equal last encoder channels x bottleneck bins = {expected}",
                self.se_linear_out
            ));
        }
        if self.vad_linear != [*self.vad_gru_hidden.last().unwrap(), 1] {
            return Err(invalid!("vad_linear {:?} must map the last VAD GRU width to one score", self.vad_linear));
        }
        check_kernel(self.csa_kernel[0], self.csa_kernel[1])?;
        if !(self.mask_clip > 0.0 && self.mask_clip.is_finite()) {
            return Err(invalid!("mask_clip must be positive and finite, got {}", self.mask_clip));
        }
        Ok(())
    }

    /// Trainable scalars implied by the configuration.
    pub fn param_count(&self) -> Result<usize> {
        self.validate()?;
        let [kf, kt] = self.conv_kernel;
        let block = |ci: usize, co: usize| ci * co * kf * kt + co + 2 * co + co;
        let gru = |i: usize, h: usize| 3 * h * (i + h) + 6 * h;
        let csa = 2 * self.csa_kernel[0] * self.csa_kernel[1] + 1;
        let depth = self.depth();
        let mut n = 0;
        let mut ci = 1;
        for &co in &self.encoder_channels {
            n += block(ci, co);
            ci = co;
        }
        let mut i = self.se_linear_out;
        for &h in &self.se_gru_hidden {
            n += gru(i, h);
            i = h;
        }
        n += i * self.se_linear_out + self.se_linear_out;
        for (k, &co) in self.decoder_channels.iter().enumerate() {
            n += block(self.decoder_in(k), co);
            if k + 1 == depth {
                n -= co; // no PReLU on the mask layer
            }
        }
        n += (depth + depth - 1) * csa;
        let vc = self.vad_transform_channels;
        n += block(self.encoder_channels[depth - 1], vc);
        let mut i = vc * (self.bottleneck_bins() / 2);
        for &h in &self.vad_gru_hidden {
            n += gru(i, h);
            i = h;
        }
        n += self.vad_linear[0] * self.vad_linear[1] + self.vad_linear[1];
        Ok(n)
    }
}
