//! Seeded synthetic corpus: harmonic "speech" with silence gaps mixed with
//! white, pink or babble-like noise.

use std::f64::consts::PI;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::mix::{mix_at_snr, vad_labels, MixtureExample, VAD_FLOOR_DB};
use crate::data::wav::{read_wav, write_wav, SampleFormat};
use crate::dsp::{FrameConfig, Waveform, SAMPLE_RATE};
use crate::error::{invalid, Error, Result};
use crate::rng;

/// Minimum silence between active regions, in seconds.
pub const MIN_GAP_S: f64 = 0.3;
/// Accepted range of labelled speech activity per utterance.
pub const ACTIVITY_RANGE: (f64, f64) = (0.4, 0.9);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    White,
    Pink,
    Babble,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Corpus generation settings. Field names double as config-file keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub duration_s: f64,
    pub snr_db: Vec<f64>,
    pub noise: Vec<NoiseKind>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            train: 50,
            val: 10,
            test: 0,
            duration_s: 2.0,
            snr_db: vec![0.0, 5.0, 10.0, 15.0],
            noise: vec![NoiseKind::White, NoiseKind::Pink, NoiseKind::Babble],
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.train + self.val + self.test == 0 {
            return Err(invalid!("corpus must contain at least one utterance"));
        }
        if !(self.duration_s.is_finite() && self.duration_s >= 1.0) {
            return Err(invalid!("duration_s must be at least 1 s, got {}", self.duration_s));
        }
        if self.snr_db.is_empty() || self.snr_db.iter().any(|s| !s.is_finite()) {
            return Err(invalid!("snr_db must list finite values"));
        }
        if self.noise.is_empty() {
            return Err(invalid!("at least one noise kind is required"));
        }
        Ok(())
    }
}

/// One utterance of a corpus manifest. Paths are relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestItem {
    pub id: String,
    pub split: Split,
    pub seed: u64,
    pub snr_db: f64,
    pub noise_kind: NoiseKind,
    pub clean: PathBuf,
    pub noise: PathBuf,
    pub noisy: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub items: Vec<ManifestItem>,
    /// Directory the item paths are relative to.
    pub root: PathBuf,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

impl DatasetManifest {
    /// Reads `manifest.jsonl` from a directory, or the given file.
    pub fn read(path: &Path) -> Result<Self> {
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let reader = BufReader::new(fs::File::open(&file)?);
        let mut items = Vec::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            items.push(
                serde_json::from_str(&line)
                    .map_err(|e| Error::UnsupportedFormat(format!("{} line {}: {e}", file.display(), n + 1)))?,
            );
        }
        let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        let m = Self { items, root };
        m.validate()?;
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(fs::File::create(path)?);
        for item in &self.items {
            serde_json::to_writer(&mut out, item)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    /// Rejects duplicated ids or files shared between items.
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for item in &self.items {
            for key in [item.id.as_str(), path_key(&item.clean), path_key(&item.noisy)] {
                if !seen.insert(key.to_string()) {
                    return Err(Error::UnsupportedFormat(format!("manifest entry {key} appears twice")));
                }
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestItem> {
        self.items.iter().filter(move |i| i.split == split)
    }

    /// Reads the audio of `item` and derives its training targets.
    pub fn load(&self, item: &ManifestItem, cfg: &FrameConfig, clip: f64) -> Result<MixtureExample> {
        let read = |p: &Path| read_wav(&self.root.join(p));
        MixtureExample::from_parts(read(&item.clean)?, read(&item.noise)?, read(&item.noisy)?, item.snr_db, cfg, clip)
    }
}

fn path_key(p: &Path) -> &str {
    p.to_str().unwrap_or_default()
}

/// Harmonic-complex "speech" with raised-cosine onsets and gaps of at least
/// [`MIN_GAP_S`] between active regions.
pub fn synth_speech(len: usize, rng: &mut rng::Rng) -> Vec<f64> {
    let cfg = FrameConfig::default();
    loop {
        let x = speech_candidate(len, rng);
        let labels = vad_labels(&x, &cfg, VAD_FLOOR_DB);
        let active = labels.iter().sum::<f64>() / labels.len() as f64;
        if active >= ACTIVITY_RANGE.0 + 0.05 && active <= ACTIVITY_RANGE.1 - 0.05 {
            return x;
        }
    }
}

fn speech_candidate(len: usize, rng: &mut rng::Rng) -> Vec<f64> {
    let sr = SAMPLE_RATE as f64;
    let mut x = vec![0.0; len];
    let mut pos = (rng.random_range(0.05..0.3) * sr) as usize;
    while pos < len {
        let seg = ((rng.random_range(0.25..0.7) * sr) as usize).min(len - pos);
        render_syllable(&mut x[pos..pos + seg], rng);
        pos += seg + (rng.random_range(MIN_GAP_S..MIN_GAP_S + 0.25) * sr) as usize;
    }
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        let gain = rng.random_range(0.3..0.8) / peak;
        x.iter_mut().for_each(|v| *v *= gain);
    }
    x
}

fn render_syllable(out: &mut [f64], rng: &mut rng::Rng) {
    let sr = SAMPLE_RATE as f64;
    let n = out.len();
    let f0_start: f64 = rng.random_range(100.0..300.0);
    let f0_end = (f0_start * rng.random_range(0.85..1.15f64)).clamp(100.0, 300.0);
    let formants = [rng.random_range(300.0..900.0), rng.random_range(900.0..2500.0)];
    let harmonics = (4000.0 / f0_start.max(f0_end)) as usize;
    let amps: Vec<f64> = (1..=harmonics)
        .map(|k| {
            let f = k as f64 * f0_start;
            let formant: f64 = formants.iter().map(|&c| (-((f - c) / 250.0).powi(2)).exp()).sum();
            (0.3 + formant) / k as f64
        })
        .collect();
    let phases: Vec<f64> = (0..harmonics).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
    let ramp = ((0.02 * sr) as usize).min(n / 2).max(1);
    let trem = rng.random_range(3.0..6.0);
    let mut phase = 0.0;
    for (i, o) in out.iter_mut().enumerate() {
        let f0 = f0_start + (f0_end - f0_start) * i as f64 / n as f64;
        phase += 2.0 * PI * f0 / sr;
        let s: f64 =
            amps.iter().zip(&phases).enumerate().map(|(k, (a, p))| a * ((k + 1) as f64 * phase + p).sin()).sum();
        let edge = if i < ramp {
            0.5 - 0.5 * (PI * i as f64 / ramp as f64).cos()
        } else if n - i <= ramp {
            0.5 - 0.5 * (PI * (n - i) as f64 / ramp as f64).cos()
        } else {
            1.0
        };
        let slow = 0.75 + 0.25 * (2.0 * PI * trem * i as f64 / sr).sin();
        *o = s * edge * slow;
    }
}

pub fn synth_noise(kind: NoiseKind, len: usize, rng: &mut rng::Rng) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    match kind {
        NoiseKind::White => (0..len).map(|_| normal.sample(rng)).collect(),
        NoiseKind::Pink => {
            // Paul Kellet's economy pink filter.
            let (mut b0, mut b1, mut b2) = (0.0, 0.0, 0.0);
            (0..len)
                .map(|_| {
                    let w = normal.sample(rng);
                    b0 = 0.99765 * b0 + w * 0.0990460;
                    b1 = 0.96300 * b1 + w * 0.2965164;
                    b2 = 0.57000 * b2 + w * 1.0526913;
                    b0 + b1 + b2 + w * 0.1848
                })
                .collect()
        }
        NoiseKind::Babble => {
            let mut x = vec![0.0; len];
            let sr = SAMPLE_RATE as f64;
            for _ in 0..6 {
                let mut pos = 0;
                while pos < len {
                    let seg = ((rng.random_range(0.15..0.4) * sr) as usize).min(len - pos);
                    let mut buf = vec![0.0; seg];
                    render_syllable(&mut buf, rng);
                    let gain = rng.random_range(0.5..1.0);
                    x[pos..pos + seg].iter_mut().zip(&buf).for_each(|(o, v)| *o += gain * v);
                    pos += seg + (rng.random_range(0.0..0.08) * sr) as usize;
                }
            }
            for v in x.iter_mut() {
                *v += 0.05 * normal.sample(rng);
            }
            x
        }
    }
}

/// Generates one mixture deterministically from `item_seed`.
pub fn synth_example(item_seed: u64, len: usize, kind: NoiseKind, snr: f64) -> Result<(Waveform, Waveform, Waveform)> {
    let clean = synth_speech(len, &mut rng::stream(item_seed, "speech"));
    let noise = synth_noise(kind, len, &mut rng::stream(item_seed, "noise"));
    let (noisy, scale) = mix_at_snr(&clean, &noise, snr)?;
    let scaled = noise.iter().map(|n| scale * n).collect();
    Ok((Waveform::new(clean, SAMPLE_RATE)?, Waveform::new(scaled, SAMPLE_RATE)?, Waveform::new(noisy, SAMPLE_RATE)?))
}

/// Writes a corpus under `out` (float WAV files plus `manifest.jsonl`).
pub fn synth_dataset(spec: &SynthSpec, seed: u64, out: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    fs::create_dir_all(out)?;
    let len = (spec.duration_s * SAMPLE_RATE as f64).round() as usize;
    let splits = [(Split::Train, spec.train), (Split::Val, spec.val), (Split::Test, spec.test)];
    let mut items = Vec::new();
    let mut index = 0u64;
    let mut pick = rng::stream(seed, "corpus");
    for (split, count) in splits {
        let tag = serde_json::to_value(split)?.as_str().unwrap_or_default().to_string();
        for k in 0..count {
            let item_seed = rng::derive_indexed(seed, "utterance", index);
            index += 1;
            let kind = *spec.noise.choose(&mut pick).expect("validated non-empty");
            let snr = *spec.snr_db.choose(&mut pick).expect("validated non-empty");
            let (clean, noise, noisy) = synth_example(item_seed, len, kind, snr)?;
            let id = format!("{tag}_{k:04}");
            let rel = |suffix: &str| PathBuf::from(format!("{id}_{suffix}.wav"));
            let item = ManifestItem {
                id: id.clone(),
                split,
                seed: item_seed,
                snr_db: snr,
                noise_kind: kind,
                clean: rel("clean"),
                noise: rel("noise"),
                noisy: rel("noisy"),
            };
            write_wav(&out.join(&item.clean), &clean, SampleFormat::Float32)?;
            write_wav(&out.join(&item.noise), &noise, SampleFormat::Float32)?;
            write_wav(&out.join(&item.noisy), &noisy, SampleFormat::Float32)?;
            items.push(item);
        }
    }
    let manifest = DatasetManifest { items, root: out.to_path_buf() };
    manifest.write(&out.join(MANIFEST_FILE))?;
    Ok(manifest)
}
