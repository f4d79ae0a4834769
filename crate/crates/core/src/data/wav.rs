//! Mono 16 kHz WAV input/output (16-bit PCM or 32-bit float).

use std::io::{Read, Seek, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dsp::{Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};

const PCM16_SCALE: f64 = 32768.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleFormat {
    Pcm16,
    Float32,
}

pub fn read_wav(path: &Path) -> Result<Waveform> {
    let reader = hound::WavReader::open(path)?;
    decode(reader).map_err(|e| match e {
        Error::UnsupportedFormat(m) => Error::UnsupportedFormat(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn read_wav_from<R: Read>(input: R) -> Result<Waveform> {
    decode(hound::WavReader::new(input)?)
}

fn decode<R: Read>(reader: hound::WavReader<R>) -> Result<Waveform> {
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::UnsupportedFormat(format!("expected mono audio, found {} channels", spec.channels)));
    }
    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f64 / PCM16_SCALE))
            .collect::<std::result::Result<_, _>>()?,
        (hound::SampleFormat::Float, 32) => {
            reader.into_samples::<f32>().map(|s| s.map(|v| v as f64)).collect::<std::result::Result<_, _>>()?
        }
        (fmt, bits) => {
            return Err(Error::UnsupportedFormat(format!(
                "expected 16-bit PCM or 32-bit float samples, found {bits}-bit {fmt:?}"
            )))
        }
    };
    if spec.sample_rate != SAMPLE_RATE {
        return Err(Error::UnsupportedRate { rate: spec.sample_rate, expected: SAMPLE_RATE });
    }
    Waveform::new(samples, spec.sample_rate)
}

pub fn write_wav(path: &Path, wave: &Waveform, format: SampleFormat) -> Result<()> {
    let writer = hound::WavWriter::create(path, wav_spec(wave, format))?;
    encode(writer, wave, format)
}

pub fn write_wav_to<W: Write + Seek>(out: W, wave: &Waveform, format: SampleFormat) -> Result<()> {
    encode(hound::WavWriter::new(out, wav_spec(wave, format))?, wave, format)
}

fn wav_spec(wave: &Waveform, format: SampleFormat) -> hound::WavSpec {
    let (bits_per_sample, sample_format) = match format {
        SampleFormat::Pcm16 => (16, hound::SampleFormat::Int),
        SampleFormat::Float32 => (32, hound::SampleFormat::Float),
    };
    hound::WavSpec { channels: 1, sample_rate: wave.sample_rate, bits_per_sample, sample_format }
}

fn encode<W: Write + Seek>(mut writer: hound::WavWriter<W>, wave: &Waveform, format: SampleFormat) -> Result<()> {
    for &s in &wave.samples {
        match format {
            SampleFormat::Pcm16 => writer.write_sample(to_pcm16(s))?,
            SampleFormat::Float32 => writer.write_sample(s as f32)?,
        }
    }
    writer.finalize()?;
    Ok(())
}

/// Rounds to the nearest 16-bit code, saturating at full scale.
pub fn to_pcm16(s: f64) -> i16 {
    (s * PCM16_SCALE).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16
}

pub fn from_pcm16(v: i16) -> f64 {
    v as f64 / PCM16_SCALE
}
