//! Shared encoder, SE branch (recurrent bottleneck, attention-gated skip
//! decoder) and VAD branch.

mod config;
mod network;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use config::ModelConfig;
pub use network::{forward_graph, ForwardNodes, Mode};

use crate::dsp::{istdct, stdct, Spectrogram, Waveform, SAMPLE_RATE};
use crate::error::{invalid, Error, Result};
use crate::nn::{load_checkpoint, save_checkpoint, write_checkpoint, Graph, ParamStore, Tensor, Var};
use crate::scalar::Scalar;

/// Per-frame voice activity scores in `(0, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VadScores(pub Vec<f64>);

impl VadScores {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Network weights together with the configuration they were built for.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<S> {
    pub config: ModelConfig,
    pub store: ParamStore<S>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    model: ModelConfig,
    #[serde(default)]
    step: Option<u64>,
}

impl<S: Scalar> ModelParams<S> {
    /// Deterministic initialization for `(config, seed)`.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        Ok(Self { config: config.clone(), store: network::build_store(config, seed)? })
    }

    pub fn param_count(&self) -> usize {
        self.store.trainable_count()
    }

    pub fn cast<T: Scalar>(&self) -> ModelParams<T> {
        ModelParams { config: self.config.clone(), store: self.store.cast() }
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<S>> {
        self.store.get(name)
    }

    /// Places every parameter on `g`; trainable ones track gradients when `grad` is set.
    pub fn bind(&self, g: &mut Graph<S>, grad: bool) -> Vec<Var> {
        self.store.entries().iter().map(|e| g.leaf(e.tensor.clone(), grad && e.trainable)).collect()
    }

    /// Eval-mode forward of `x [B, 1, F, T]`, returning mask `[B, 1, F, T]` and VAD `[B, T]`.
    pub fn forward(&self, x: &Tensor<S>) -> Result<(Tensor<S>, Tensor<S>)> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let out = forward_graph(&mut g, &self.config, &self.store, &vars, xv, Mode::Eval)?;
        Ok((g.value(out.mask).clone(), g.value(out.vad).clone()))
    }

    /// Mask and VAD scores for one spectrogram.
    pub fn estimate(&self, spec: &Spectrogram) -> Result<(Vec<f64>, VadScores)> {
        if spec.bins != self.config.dct_size {
            return Err(invalid!("spectrogram has {} bins, model expects {}", spec.bins, self.config.dct_size));
        }
        let x = Tensor::new(vec![1, 1, spec.bins, spec.frames], spec.coeffs.iter().map(|&v| S::lit(v)).collect())?;
        let (mask, vad) = self.forward(&x)?;
        Ok((
            mask.data().iter().map(|v| v.to_f64_lossy()).collect(),
            VadScores(vad.data().iter().map(|v| v.to_f64_lossy()).collect()),
        ))
    }

    /// Offline enhancement: analysis, masking, synthesis.
    pub fn enhance(&self, wave: &Waveform) -> Result<(Waveform, VadScores)> {
        let cfg = self.config.frame_config()?;
        enhance_with(wave, &cfg, |spec| self.estimate(spec))
    }

    pub fn checkpoint_meta(&self, step: Option<u64>) -> serde_json::Value {
        serde_json::to_value(CheckpointMeta { model: self.config.clone(), step }).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.checkpoint_meta(None), &self.store)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        write_checkpoint(&mut out, &self.checkpoint_meta(None), &self.store)?;
        Ok(out)
    }

    /// Loads a checkpoint and checks it against the layout of its own config.
    pub fn load(path: &Path) -> Result<Self> {
        let (meta, store) = load_checkpoint(path)?;
        Self::from_parts(meta, store)
    }

    pub(crate) fn from_parts(meta: serde_json::Value, store: ParamStore<S>) -> Result<Self> {
        let meta: CheckpointMeta =
            serde_json::from_value(meta).map_err(|e| Error::Checkpoint(format!("bad model metadata: {e}")))?;
        let template = network::build_store::<S>(&meta.model, 0)?;
        if template.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors for this config, found {}",
                template.len(),
                store.len()
            )));
        }
        for (a, b) in template.entries().iter().zip(store.entries()) {
            if a.name != b.name || a.tensor.shape() != b.tensor.shape() || a.trainable != b.trainable {
                return Err(Error::Checkpoint(format!(
                    "tensor {} {:?} does not match expected {} {:?}",
                    b.name,
                    b.tensor.shape(),
                    a.name,
                    a.tensor.shape()
                )));
            }
        }
        Ok(Self { config: meta.model, store })
    }
}

/// Element-wise product of a spectrogram and a mask in the same layout.
pub fn apply_mask(x: &Spectrogram, mask: &[f64]) -> Result<Spectrogram> {
    if mask.len() != x.coeffs.len() {
        return Err(invalid!("mask has {} entries, spectrogram {}", mask.len(), x.coeffs.len()));
    }
    x.with_coeffs(x.coeffs.iter().zip(mask).map(|(a, m)| a * m).collect())
}

/// Enhancement with an arbitrary mask estimator.
pub fn enhance_with(
    wave: &Waveform,
    cfg: &crate::dsp::FrameConfig,
    estimate: impl FnOnce(&Spectrogram) -> Result<(Vec<f64>, VadScores)>,
) -> Result<(Waveform, VadScores)> {
    wave.require_rate(SAMPLE_RATE)?;
    let spec = stdct(wave, cfg)?;
    let (mask, vad) = estimate(&spec)?;
    let enhanced = istdct(&apply_mask(&spec, &mask)?, wave.sample_rate)?;
    if enhanced.samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("enhanced waveform contains non-finite samples".into()));
    }
    Ok((enhanced, vad))
}
