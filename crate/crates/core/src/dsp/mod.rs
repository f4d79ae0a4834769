//! Orthonormal DCT-II and short-time DCT analysis/synthesis.

mod dct;
mod stdct;

pub use dct::{dct_n, idct_n, Dct};
pub use stdct::{
    istdct, normalize, stdct, FrameConfig, FrameSpec, Spectrogram, Stdct, Waveform, WindowKind, SAMPLE_RATE,
};
