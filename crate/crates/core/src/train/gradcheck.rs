//! Finite-difference check of the complete training objective.

use rand::Rng;

use crate::error::{invalid, Result};
use crate::model::{Mode, ModelConfig, ModelParams};
use crate::nn::{finite_diff_check, GradCheckReport, DEFAULT_STEP};
use crate::rng;
use crate::train::{LossConfig, Segment, TrainConfig, TrainExample, Trainer};

pub const MODEL_GRADCHECK_TOL: f64 = 1e-3;

/// Checks `probes` randomly chosen trainable scalars of a freshly built
/// 64-bit model against central differences of the full joint loss on a
/// small random batch.
pub fn model_gradcheck(config: &ModelConfig, seed: u64, probes: usize) -> Result<GradCheckReport> {
    if probes == 0 {
        return Err(invalid!("need at least one probe"));
    }
    let model = ModelParams::<f64>::build(config, seed)?;
    let mut r = rng::stream(seed, "gradcheck");
    let len = 2 * config.dct_size + 5 * config.hop;
    let examples: Vec<TrainExample> = (0..2)
        .map(|_| {
            let freq = r.random_range(0.02..0.2);
            let clean: Vec<f64> = (0..len).map(|i| 0.3 * (freq * i as f64).sin()).collect();
            let noisy = clean.iter().map(|c| c + r.random_range(-0.1..0.1)).collect();
            let frames = model.config.frame_config().map(|f| f.num_frames(len)).unwrap_or(0);
            let vad = (0..frames).map(|_| if r.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
            TrainExample { clean, noisy, vad }
        })
        .collect();
    let trainer = Trainer::new(model, TrainConfig::default(), LossConfig::default())?;
    let segments: Vec<Segment<'_>> = examples.iter().map(Segment::whole).collect();
    let batch = trainer.prepare(&segments)?;

    let entries = trainer.model.store.entries();
    let trainable: Vec<usize> = (0..entries.len()).filter(|&i| entries[i].trainable).collect();
    let picks: Vec<(usize, usize)> = (0..probes)
        .map(|_| {
            let i = trainable[r.random_range(0..trainable.len())];
            (i, r.random_range(0..entries[i].tensor.numel()))
        })
        .collect();
    let inputs: Vec<_> = entries.iter().map(|e| e.tensor.clone()).collect();
    finite_diff_check(&inputs, Some(&picks), DEFAULT_STEP, |g, vars| {
        Ok(trainer.record(g, vars, &batch, Mode::Train)?.0)
    })
}
