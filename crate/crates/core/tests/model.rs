use dctnet::dsp::{FrameConfig, Waveform, SAMPLE_RATE};
use dctnet::model::{enhance_with, forward_graph, Mode, ModelConfig, ModelParams, VadScores};
use dctnet::nn::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_input(f: usize, t: usize, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    Tensor::new(vec![1, 1, f, t], (0..f * t).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
}

#[test]
fn full_config_shapes() {
    let config = ModelConfig::full();
    let m = ModelParams::<f32>::build(&config, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = random_input(512, 10, &mut rng);
    let mut g = Graph::new();
    let vars = m.bind(&mut g, false);
    let xv = g.constant(x);
    let out = forward_graph(&mut g, &config, &m.store, &vars, xv, Mode::Eval).unwrap();
    assert_eq!(g.value(out.encoded).shape(), &[1, 256, 16, 10]);
    assert_eq!(g.value(out.vad_features).shape(), &[1, 8, 8, 10]);
    assert_eq!(g.value(out.mask).shape(), &[1, 1, 512, 10]);
    assert_eq!(g.value(out.vad).shape(), &[1, 10]);
    assert!(g.value(out.mask).data().iter().all(|v| v.abs() < 1.0));
    assert!(g.value(out.vad).data().iter().all(|&v| v > 0.0 && v < 1.0));
    assert_eq!(m.tensor("se_linear.weight").unwrap().shape(), &[4096, 32]);
    let count = m.param_count();
    assert!((2_900_000..=3_300_000).contains(&count), "{count}");
}

#[test]
fn eval_forward_is_causal_and_deterministic() {
    let config = ModelConfig::toy();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for trial in 0..20 {
        let m = ModelParams::<f32>::build(&config, trial).unwrap();
        let t = 24;
        let t0 = rng.random_range(0..t - 1);
        let x1 = random_input(64, t, &mut rng);
        let mut x2 = x1.clone();
        for f in 0..64 {
            for ti in t0 + 1..t {
                x2.data_mut()[f * t + ti] = rng.random_range(-3.0..3.0);
            }
        }
        let (m1, v1) = m.forward(&x1).unwrap();
        let (m2, v2) = m.forward(&x2).unwrap();
        for f in 0..64 {
            for ti in 0..=t0 {
                assert_eq!(m1.data()[f * t + ti].to_bits(), m2.data()[f * t + ti].to_bits());
            }
        }
        assert_eq!(&v1.data()[..=t0], &v2.data()[..=t0]);
        let (m3, v3) = m.forward(&x1).unwrap();
        assert_eq!((m1, v1), (m3, v3));
    }
}

#[test]
fn identity_stub_reproduces_input() {
    let cfg = FrameConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let clean: Vec<f64> = (0..16_000).map(|_| rng.random_range(-0.5..0.5)).collect();
    let wave = Waveform::new(clean.clone(), SAMPLE_RATE).unwrap();
    let (out, vad) =
        enhance_with(&wave, &cfg, |spec| Ok((vec![1.0; spec.coeffs.len()], VadScores(vec![0.5; spec.frames]))))
            .unwrap();
    assert_eq!(out.len(), clean.len());
    let err = out.samples.iter().zip(&clean).map(|(a, b)| (*a as f32 - *b as f32).abs()).fold(0.0, f32::max);
    assert!(err <= 1e-6, "{err}");
    assert_eq!(vad.len(), 125);
}

#[test]
fn random_model_on_noise_and_silence() {
    let m = ModelParams::<f32>::build(&ModelConfig::full(), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let noise = Waveform::new((0..16_000).map(|_| rng.random_range(-0.3..0.3)).collect(), SAMPLE_RATE).unwrap();
    let (out, vad) = m.enhance(&noise).unwrap();
    assert_eq!(out.len(), noise.len());
    assert!(out.samples.iter().all(|v| v.is_finite()));
    assert!(vad.0.iter().all(|&v| v > 0.0 && v < 1.0));

    let silence = Waveform::new(vec![0.0; 4000], SAMPLE_RATE).unwrap();
    let (out, vad) = m.enhance(&silence).unwrap();
    assert!(out.samples.iter().all(|&v| v == 0.0));
    assert_eq!(vad.len(), 32);
    assert!(vad.0.iter().all(|v| v.is_finite()));
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("toy.ckpt");
    let m = ModelParams::<f32>::build(&ModelConfig::toy(), 9).unwrap();
    m.save(&path).unwrap();
    let loaded = ModelParams::<f32>::load(&path).unwrap();
    assert_eq!(loaded, m);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random_input(64, 12, &mut rng);
    let (a, b) = (m.forward(&x).unwrap(), loaded.forward(&x).unwrap());
    assert_eq!(
        a.0.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.0.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
    assert_eq!(a.1, b.1);
    assert_eq!(std::fs::read(&path).unwrap(), m.to_bytes().unwrap());
}
