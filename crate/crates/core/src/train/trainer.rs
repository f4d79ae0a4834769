//! Epoch loop: seeded shuffling and cropping, padded batches, RMSprop
//! updates, plateau learning-rate decay and best-validation checkpoints.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{dctirm, MixtureExample};
use crate::dsp::{FrameConfig, Stdct};
use crate::error::{invalid, Error, Result};
use crate::model::{forward_graph, Mode, ModelParams};
use crate::nn::norm::update_running;
use crate::nn::{load_checkpoint, save_checkpoint, Graph, ParamStore, Tensor};
use crate::rng;
use crate::scalar::Scalar;
use crate::train::loss::{record_loss, LossConfig, LossTargets};
use crate::train::optim::Rmsprop;

/// Optimization schedule. Field names double as config-file keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_decay: f64,
    pub patience_epochs: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub rmsprop_rho: f64,
    pub rmsprop_eps: f64,
    pub seed: u64,
    /// Stop after this many optimizer steps.
    pub max_steps: Option<u64>,
    /// Random training crop length in seconds (whole utterances when unset).
    pub crop_s: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            lr_decay: 0.5,
            patience_epochs: 6,
            batch_size: 16,
            epochs: 80,
            rmsprop_rho: 0.99,
            rmsprop_eps: 1e-8,
            seed: 0,
            max_steps: None,
            crop_s: None,
        }
    }
}

impl TrainConfig {
    /// Desk-scale schedule for [`crate::model::ModelConfig::toy`] and
    /// [`crate::model::ModelConfig::desk`]: a higher rate,
    /// short random crops and a fixed step budget.
    pub fn toy() -> Self {
        Self { lr: 1e-3, crop_s: Some(0.5), max_steps: Some(200), epochs: 1000, ..Self::default() }
    }

    /// `"full"` (the reference schedule), or `"toy"` and `"desk"`, which share
    /// the desk-scale schedule.
    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "full" => Some(Self::default()),
            "toy" | "desk" => Some(Self::toy()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid!("lr must be positive, got {}", self.lr));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay < 1.0) {
            return Err(invalid!("lr_decay must be in (0, 1), got {}", self.lr_decay));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(invalid!("batch_size and epochs must be positive"));
        }
        if !(0.0..1.0).contains(&self.rmsprop_rho) || !(self.rmsprop_eps > 0.0) {
            return Err(invalid!("need 0 <= rmsprop_rho < 1 and rmsprop_eps > 0"));
        }
        if self.crop_s.is_some_and(|c| !(c > 0.0 && c.is_finite())) {
            return Err(invalid!("crop_s must be positive"));
        }
        Ok(())
    }
}

/// Audio and full-utterance VAD labels of one training utterance.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub clean: Vec<f64>,
    pub noisy: Vec<f64>,
    pub vad: Vec<f64>,
}

impl From<&MixtureExample> for TrainExample {
    fn from(m: &MixtureExample) -> Self {
        Self { clean: m.clean.samples.clone(), noisy: m.noisy.samples.clone(), vad: m.vad.clone() }
    }
}

/// A window `[offset, offset + len)` of an example; `offset` is a multiple of the hop.
#[derive(Debug, Clone, Copy)]
pub struct Segment<'a> {
    pub example: &'a TrainExample,
    pub offset: usize,
    pub len: usize,
}

impl<'a> Segment<'a> {
    pub fn whole(example: &'a TrainExample) -> Self {
        Self { example, offset: 0, len: example.clean.len() }
    }
}

/// Batch statistics of every train-mode normalization layer, by layer name.
pub type RecordedStats<S> = Vec<(String, crate::nn::BatchStats<S>)>;

/// A zero-padded batch with its loss targets.
pub struct Batch<S> {
    pub x: Tensor<S>,
    pub len: usize,
    pub targets: LossTargets<S>,
}

/// Mutable schedule state, persisted with the weights for resumption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: u64,
    pub epoch: usize,
    /// Batches of `epoch` already consumed.
    pub batch_in_epoch: usize,
    pub lr: f64,
    pub best_val: Option<f64>,
    pub bad_epochs: usize,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub step: u64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub lr: f64,
    pub wall_time: f64,
    /// False when the step budget ended the epoch early.
    pub complete: bool,
}

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const STATE_CHECKPOINT: &str = "state.ckpt";

pub struct Trainer<S> {
    pub model: ModelParams<S>,
    pub config: TrainConfig,
    pub loss: LossConfig,
    pub state: TrainState,
    opt: Rmsprop<S>,
    frame: FrameConfig,
    analysis: Stdct<f64>,
    synthesis: Arc<Stdct<S>>,
}

impl<S: Scalar> Trainer<S> {
    pub fn new(model: ModelParams<S>, config: TrainConfig, loss: LossConfig) -> Result<Self> {
        config.validate()?;
        loss.validate()?;
        let frame = model.config.frame_config()?;
        let opt = Rmsprop::new(&model.store, config.rmsprop_rho, config.rmsprop_eps);
        let state = TrainState { step: 0, epoch: 0, batch_in_epoch: 0, lr: config.lr, best_val: None, bad_epochs: 0 };
        Ok(Self {
            analysis: Stdct::new(&frame)?,
            synthesis: Arc::new(Stdct::new(&frame)?),
            frame,
            model,
            config,
            loss,
            state,
            opt,
        })
    }

    pub fn frame(&self) -> &FrameConfig {
        &self.frame
    }

    /// Pads segments to a common length and computes their targets.
    pub fn prepare(&self, segments: &[Segment<'_>]) -> Result<Batch<S>> {
        if segments.is_empty() {
            return Err(invalid!("empty batch"));
        }
        let len = segments.iter().map(|s| s.len).max().unwrap_or(0);
        if len == 0 {
            return Err(invalid!("batch contains only empty segments"));
        }
        let frames = self.frame.num_frames(len);
        let bins = self.frame.win_len();
        let hop = self.frame.hop();
        let b = segments.len();
        let mut x = Vec::with_capacity(b * bins * frames);
        let mut t = LossTargets {
            clean: Vec::with_capacity(b * len),
            sample_weights: Vec::with_capacity(b * len),
            mask: Vec::with_capacity(b * bins * frames),
            bin_weights: Vec::with_capacity(b * bins * frames),
            vad: Vec::with_capacity(b * frames),
            frame_weights: Vec::with_capacity(b * frames),
        };
        for seg in segments {
            let ex = seg.example;
            if seg.offset % hop != 0 || seg.offset + seg.len > ex.clean.len() || ex.noisy.len() != ex.clean.len() {
                return Err(invalid!("segment {}+{} is not a hop-aligned window of its example", seg.offset, seg.len));
            }
            let mut clean = ex.clean[seg.offset..seg.offset + seg.len].to_vec();
            let mut noisy = ex.noisy[seg.offset..seg.offset + seg.len].to_vec();
            clean.resize(len, 0.0);
            noisy.resize(len, 0.0);
            let (sc, _) = self.analysis.analyze(&clean)?;
            let (xc, _) = self.analysis.analyze(&noisy)?;
            let valid_frames = self.frame.num_frames(seg.len);
            let layout = |coeffs: Vec<f64>| crate::dsp::Spectrogram {
                coeffs,
                bins,
                frames,
                frame_config: self.frame.clone(),
                original_len: len,
            };
            let (ss, xs) = (layout(sc), layout(xc));
            let mask = dctirm(&ss, &xs, self.model.config.mask_clip)?;
            x.extend(xs.coeffs.iter().map(|&v| S::lit(v)));
            t.mask.extend(mask.iter().map(|&v| S::lit(v)));
            for _ in 0..bins {
                t.bin_weights.extend((0..frames).map(|k| if k < valid_frames { S::one() } else { S::zero() }));
            }
            t.clean.extend(clean.iter().map(|&v| S::lit(v)));
            t.sample_weights.extend((0..len).map(|k| if k < seg.len { S::one() } else { S::zero() }));
            let first = seg.offset / hop;
            for k in 0..frames {
                let label = ex.vad.get(first + k).copied().unwrap_or(0.0);
                t.vad.push(S::lit(label));
                t.frame_weights.push(if k < valid_frames && first + k < ex.vad.len() { S::one() } else { S::zero() });
            }
        }
        Ok(Batch { x: Tensor::new(vec![b, 1, bins, frames], x)?, len, targets: t })
    }

    /// Loss of a batch without updating anything.
    pub fn evaluate(&self, batch: &Batch<S>, mode: Mode) -> Result<f64> {
        let mut g = Graph::new();
        let vars = self.model.bind(&mut g, false);
        let total = self.record(&mut g, &vars, batch, mode)?.0;
        Ok(g.value(total).item()?.to_f64_lossy())
    }

    /// Records forward pass, masking, synthesis and the joint loss on `g`,
    /// with `vars[i]` bound to store entry `i`.
    pub fn record(
        &self,
        g: &mut Graph<S>,
        vars: &[crate::nn::Var],
        batch: &Batch<S>,
        mode: Mode,
    ) -> Result<(crate::nn::Var, RecordedStats<S>)> {
        let xv = g.constant(batch.x.clone());
        let out = forward_graph(g, &self.model.config, &self.model.store, vars, xv, mode)?;
        let masked = g.mul_const(out.mask, &batch.x)?;
        let enhanced = g.istdct(masked, self.synthesis.clone(), batch.len)?;
        let loss = record_loss(g, enhanced, out.mask, out.vad, &batch.targets, &self.loss)?;
        Ok((loss.total, out.bn_stats))
    }

    /// One optimizer step on `batch`; returns the loss before the update.
    pub fn step(&mut self, batch: &Batch<S>) -> Result<f64> {
        let mut g = Graph::new();
        let vars = self.model.bind(&mut g, true);
        let (total, stats) = self.record(&mut g, &vars, batch, Mode::Train)?;
        let loss = g.value(total).item()?.to_f64_lossy();
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("loss is {loss} at step {}", self.state.step)));
        }
        let mut grads = g.backward(total)?;
        let grads: Vec<Option<Vec<S>>> = vars.iter().map(|&v| grads.take(v)).collect();
        if let Some(i) = grads.iter().position(|g| g.as_ref().is_some_and(|g| g.iter().any(|v| !v.is_finite()))) {
            return Err(Error::Numerical(format!(
                "non-finite gradient for {} at step {}",
                self.model.store.entries()[i].name,
                self.state.step
            )));
        }
        drop(g);
        self.opt.step(&mut self.model.store, &grads, self.state.lr)?;
        for (prefix, s) in stats {
            let mi = self.model.store.position(&format!("{prefix}.running_mean"))?;
            let vi = self.model.store.position(&format!("{prefix}.running_var"))?;
            let mut mean = self.model.store.tensor(mi).data().to_vec();
            let mut var = self.model.store.tensor(vi).data().to_vec();
            update_running(&mut mean, &mut var, &s);
            self.model.store.tensor_mut(mi).data_mut().copy_from_slice(&mean);
            self.model.store.tensor_mut(vi).data_mut().copy_from_slice(&var);
        }
        self.state.step += 1;
        Ok(loss)
    }

    fn crop_len(&self) -> Option<usize> {
        self.config.crop_s.map(|c| {
            let n = (c * crate::dsp::SAMPLE_RATE as f64).round() as usize;
            n.max(1)
        })
    }

    /// Training segments of batch `index` of `epoch`.
    pub fn epoch_batches<'a>(&self, train: &'a [TrainExample], epoch: usize) -> Vec<Vec<&'a TrainExample>> {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng::indexed_stream(self.config.seed, "shuffle", epoch as u64));
        order.chunks(self.config.batch_size).map(|c| c.iter().map(|&i| &train[i]).collect()).collect()
    }

    fn crop<'a>(&self, batch: &[&'a TrainExample]) -> Vec<Segment<'a>> {
        let hop = self.frame.hop();
        let mut r = rng::indexed_stream(self.config.seed, "crop", self.state.step);
        batch
            .iter()
            .map(|&ex| match self.crop_len() {
                Some(c) if c < ex.clean.len() => {
                    let slots = (ex.clean.len() - c) / hop;
                    Segment { example: ex, offset: hop * r.random_range(0..=slots), len: c }
                }
                _ => Segment::whole(ex),
            })
            .collect()
    }

    /// Mean eval-mode loss over whole utterances.
    pub fn validation_loss(&self, val: &[TrainExample]) -> Result<f64> {
        let mut total = 0.0;
        for chunk in val.chunks(self.config.batch_size) {
            let segs: Vec<Segment<'_>> = chunk.iter().map(Segment::whole).collect();
            total += self.evaluate(&self.prepare(&segs)?, Mode::Eval)? * chunk.len() as f64;
        }
        Ok(total / val.len() as f64)
    }

    /// Runs the schedule until `epochs` or `max_steps`. Calls `log` after every
    /// epoch; writes the best and latest state under `out` when given.
    pub fn fit(
        &mut self,
        train: &[TrainExample],
        val: &[TrainExample],
        out: Option<&Path>,
        mut log: impl FnMut(&EpochLog),
    ) -> Result<Vec<EpochLog>> {
        if train.is_empty() {
            return Err(invalid!("training set is empty"));
        }
        let started = Instant::now();
        let mut history = Vec::new();
        while self.state.epoch < self.config.epochs {
            let batches = self.epoch_batches(train, self.state.epoch);
            let mut losses = Vec::new();
            let mut complete = true;
            while self.state.batch_in_epoch < batches.len() {
                if self.config.max_steps.is_some_and(|m| self.state.step >= m) {
                    complete = false;
                    break;
                }
                let segs = self.crop(&batches[self.state.batch_in_epoch]);
                let batch = self.prepare(&segs)?;
                losses.push(self.step(&batch)?);
                self.state.batch_in_epoch += 1;
            }
            if losses.is_empty() {
                break;
            }
            let val_loss = if val.is_empty() { None } else { Some(self.validation_loss(val)?) };
            let score = val_loss.unwrap_or_else(|| losses.iter().sum::<f64>() / losses.len() as f64);
            let improved = self.state.best_val.is_none_or(|b| score < b);
            if improved {
                self.state.best_val = Some(score);
                if let Some(dir) = out {
                    self.model.save(&dir.join(BEST_CHECKPOINT))?;
                }
            }
            if complete {
                if improved {
                    self.state.bad_epochs = 0;
                } else {
                    self.state.bad_epochs += 1;
                    if self.state.bad_epochs >= self.config.patience_epochs {
                        self.state.lr *= self.config.lr_decay;
                        self.state.bad_epochs = 0;
                    }
                }
            }
            let entry = EpochLog {
                epoch: self.state.epoch,
                step: self.state.step,
                train_loss: losses.iter().sum::<f64>() / losses.len() as f64,
                val_loss,
                lr: self.state.lr,
                wall_time: started.elapsed().as_secs_f64(),
                complete,
            };
            log(&entry);
            history.push(entry);
            if complete {
                self.state.epoch += 1;
                self.state.batch_in_epoch = 0;
            }
            if let Some(dir) = out {
                self.save_state(&dir.join(STATE_CHECKPOINT))?;
            }
            if !complete {
                break;
            }
        }
        Ok(history)
    }

    /// Weights, optimizer accumulators and schedule in one checkpoint.
    pub fn save_state(&self, path: &Path) -> Result<()> {
        let mut store = self.model.store.clone();
        for (e, v) in self.model.store.entries().iter().zip(&self.opt.v) {
            if e.trainable {
                store.insert(format!("opt.v.{}", e.name), Tensor::new(e.tensor.shape().to_vec(), v.clone())?, false)?;
            }
        }
        let meta = serde_json::json!({
            "model": self.model.config,
            "train": self.config,
            "loss": self.loss,
            "state": self.state,
        });
        save_checkpoint(path, &meta, &store)
    }

    /// Restores a trainer written by [`Trainer::save_state`].
    pub fn load_state(path: &Path) -> Result<Self> {
        let (meta, full) = load_checkpoint::<S>(path)?;
        let field =
            |k: &str| meta.get(k).cloned().ok_or_else(|| Error::Checkpoint(format!("training state lacks {k}")));
        let config: TrainConfig = serde_json::from_value(field("train")?)?;
        let loss: LossConfig = serde_json::from_value(field("loss")?)?;
        let state: TrainState = serde_json::from_value(field("state")?)?;
        let mut weights = ParamStore::new();
        let mut accum = Vec::new();
        for e in full.entries() {
            match e.name.strip_prefix("opt.v.") {
                Some(name) => accum.push((name.to_string(), e.tensor.data().to_vec())),
                None => {
                    weights.insert(e.name.clone(), e.tensor.clone(), e.trainable)?;
                }
            }
        }
        let model = ModelParams::from_parts(serde_json::json!({ "model": field("model")? }), weights)?;
        let mut trainer = Self::new(model, config, loss)?;
        for (name, v) in accum {
            let i = trainer.model.store.position(&name)?;
            if trainer.opt.v[i].len() != v.len() {
                return Err(Error::Checkpoint(format!("optimizer state for {name} has the wrong size")));
            }
            trainer.opt.v[i] = v;
        }
        trainer.state = state;
        Ok(trainer)
    }
}

/// Paths written by [`Trainer::fit`] under an output directory.
pub fn output_paths(dir: &Path) -> (PathBuf, PathBuf) {
    (dir.join(BEST_CHECKPOINT), dir.join(STATE_CHECKPOINT))
}
