//! Real-time factor measurement.

use std::sync::Arc;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::open_session;
use crate::dsp::SAMPLE_RATE;
use crate::error::{invalid, Result};
use crate::model::ModelParams;
use crate::rng;
use crate::scalar::Scalar;

/// Where a timing was taken.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HardwareInfo {
    pub cpu: String,
    pub logical_cores: usize,
    pub os: String,
    pub arch: String,
}

impl HardwareInfo {
    pub fn detect() -> Self {
        let cpu = std::fs::read_to_string("/proc/cpuinfo")
            .ok()
            .and_then(|s| {
                s.lines()
                    .find(|l| l.starts_with("model name"))
                    .and_then(|l| l.split(':').nth(1))
                    .map(|v| v.trim().to_string())
            })
            .unwrap_or_else(|| "unknown".into());
        Self {
            cpu,
            logical_cores: std::thread::available_parallelism().map_or(1, |n| n.get()),
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RtfReport {
    pub dct_size: usize,
    pub hop: usize,
    pub params: usize,
    pub precision: String,
    pub audio_s: f64,
    pub chunk_ms: f64,
    pub chunk_samples: usize,
    pub frames: usize,
    pub processing_s: f64,
    /// Processing time over audio duration.
    pub rtf: f64,
    pub hardware: HardwareInfo,
}

/// Streams `duration_s` seconds of seeded noise through a fresh session in
/// `chunk_ms` chunks and times it.
pub fn benchmark_rtf<S: Scalar>(params: Arc<ModelParams<S>>, duration_s: f64, chunk_ms: f64) -> Result<RtfReport> {
    if !(duration_s > 0.0) || !(chunk_ms > 0.0) {
        return Err(invalid!("duration and chunk length must be positive"));
    }
    let len = (duration_s * SAMPLE_RATE as f64).round() as usize;
    let chunk = ((chunk_ms * 1e-3 * SAMPLE_RATE as f64).round() as usize).max(1);
    let mut r = rng::stream(0, "bench");
    let input: Vec<f64> = (0..len).map(|_| r.random_range(-0.3..0.3)).collect();

    let (dct_size, hop, count) = (params.config.dct_size, params.config.hop, params.param_count());
    let mut session = open_session(params)?;
    let start = Instant::now();
    let mut frames = 0;
    for c in input.chunks(chunk) {
        frames += session.push(c)?.vad.len();
    }
    frames += session.flush()?.vad.len();
    let processing_s = start.elapsed().as_secs_f64();
    let audio_s = len as f64 / SAMPLE_RATE as f64;
    Ok(RtfReport {
        dct_size,
        hop,
        params: count,
        precision: std::any::type_name::<S>().into(),
        audio_s,
        chunk_ms,
        chunk_samples: chunk,
        frames,
        processing_s,
        rtf: processing_s / audio_s,
        hardware: HardwareInfo::detect(),
    })
}
