use dctnet::data::{synth_example, vad_labels, NoiseKind, VAD_FLOOR_DB};
use dctnet::model::{ModelConfig, ModelParams};
use dctnet::train::{model_gradcheck, LossConfig, Segment, TrainConfig, TrainExample, Trainer, MODEL_GRADCHECK_TOL};

#[test]
fn full_model_gradients_match_finite_differences() {
    for seed in 0..10 {
        let report = model_gradcheck(&ModelConfig::toy(), seed, 50).unwrap();
        assert_eq!(report.checked + report.skipped, 50);
        assert!(report.skipped <= 1, "seed {seed}: {report:?}");
        assert!(report.max_rel_err < MODEL_GRADCHECK_TOL, "seed {seed}: {report:?}");
    }
}

fn corpus(n: usize, seconds: f64) -> Vec<TrainExample> {
    let cfg = ModelConfig::toy().frame_config().unwrap();
    (0..n as u64)
        .map(|i| {
            let (clean, _, noisy) =
                synth_example(100 + i, (seconds * 16_000.0) as usize, NoiseKind::White, 5.0).unwrap();
            let vad = vad_labels(&clean.samples, &cfg, VAD_FLOOR_DB);
            TrainExample { clean: clean.samples, noisy: noisy.samples, vad }
        })
        .collect()
}

fn small_config() -> TrainConfig {
    TrainConfig { lr: 1e-3, batch_size: 2, epochs: 3, crop_s: Some(0.1), seed: 4, ..TrainConfig::default() }
}

#[test]
fn vad_only_loss_leaves_enhancement_branch_untouched() {
    let data = corpus(4, 1.0);
    let model = ModelParams::<f32>::build(&ModelConfig::toy(), 1).unwrap();
    let before = model.clone();
    let loss = LossConfig { lambda1: 0.0, lambda2: 1.0, alpha: 1.0 };
    let mut t = Trainer::new(model, TrainConfig { max_steps: Some(2), ..small_config() }, loss).unwrap();
    t.fit(&data, &[], None, |_| {}).unwrap();
    assert_eq!(t.state.step, 2);
    for (a, b) in before.store.entries().iter().zip(t.model.store.entries()) {
        if !a.trainable {
            continue;
        }
        let se_branch = ["se_", "dec", "skip_csa"].iter().any(|p| a.name.starts_with(p));
        let shared_or_vad = a.name.starts_with("enc.") || a.name.starts_with("vad");
        if se_branch {
            assert_eq!(a.tensor, b.tensor, "{} changed", a.name);
        } else {
            assert!(shared_or_vad);
            if a.name.ends_with("weight") {
                assert_ne!(a.tensor, b.tensor, "{} did not change", a.name);
            }
        }
    }
}

#[test]
fn resume_reproduces_next_step() {
    let data = corpus(5, 1.0);
    let dir = tempfile::tempdir().unwrap();
    let model = ModelParams::<f32>::build(&ModelConfig::toy(), 2).unwrap();

    let mut straight =
        Trainer::new(model.clone(), TrainConfig { max_steps: Some(4), ..small_config() }, LossConfig::default())
            .unwrap();
    straight.fit(&data, &data[..1], None, |_| {}).unwrap();

    let mut first =
        Trainer::new(model, TrainConfig { max_steps: Some(3), ..small_config() }, LossConfig::default()).unwrap();
    first.fit(&data, &data[..1], Some(dir.path()), |_| {}).unwrap();
    assert!(dir.path().join("best.ckpt").exists());
    let mut resumed = Trainer::<f32>::load_state(&dir.path().join("state.ckpt")).unwrap();
    assert_eq!(resumed.state, first.state);
    resumed.config.max_steps = Some(4);
    resumed.fit(&data, &data[..1], None, |_| {}).unwrap();
    assert_eq!(resumed.state.step, 4);
    assert_eq!(resumed.model.store, straight.model.store);
}

#[test]
fn training_is_deterministic_and_logs() {
    let data = corpus(4, 1.0);
    let run = || {
        let model = ModelParams::<f32>::build(&ModelConfig::toy(), 3).unwrap();
        let mut t = Trainer::new(model, small_config(), LossConfig::default()).unwrap();
        let mut lines = Vec::new();
        t.fit(&data, &data[..2], None, |e| lines.push(e.clone())).unwrap();
        (t.model.store, lines)
    };
    let (a, la) = run();
    let (b, lb) = run();
    assert_eq!(a, b);
    assert_eq!(la.len(), 3);
    for (x, y) in la.iter().zip(&lb) {
        assert_eq!((x.train_loss, x.val_loss, x.lr), (y.train_loss, y.val_loss, y.lr));
        assert!(x.complete);
    }
}

#[test]
fn padded_batches_ignore_padding() {
    let data = corpus(2, 1.0);
    let model = ModelParams::<f64>::build(&ModelConfig::toy(), 5).unwrap();
    let t = Trainer::new(model, small_config(), LossConfig::default()).unwrap();
    let short = Segment { example: &data[0], offset: 160, len: 1600 };
    let long = Segment { example: &data[1], offset: 0, len: 4000 };
    let b = t.prepare(&[short, long]).unwrap();
    assert_eq!(b.len, 4000);
    let valid: f64 = b.targets.sample_weights.iter().sum();
    assert_eq!(valid, 5600.0);
    assert!(t.prepare(&[]).is_err());
    let misaligned = Segment { example: &data[0], offset: 3, len: 100 };
    assert!(t.prepare(&[misaligned]).is_err());
}

#[test]
fn empty_training_set_is_rejected() {
    let model = ModelParams::<f32>::build(&ModelConfig::toy(), 0).unwrap();
    let mut t = Trainer::new(model, small_config(), LossConfig::default()).unwrap();
    assert!(t.fit(&[], &[], None, |_| {}).is_err());
}
