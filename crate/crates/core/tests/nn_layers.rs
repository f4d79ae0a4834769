use dctnet::nn::{
    conv_frame, conv_frame_packed, finite_diff_check, tconv_frame, tconv_frame_packed, BnMode, ChannelMajor, ConvSpec,
    Graph, TConvSpec, Tensor, DEFAULT_STEP,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

const ENC: ConvSpec = ConvSpec { stride_f: 2, pad_f: 2 };
const DEC: TConvSpec = TConvSpec { stride_f: 2, pad_f: 2, out_pad_f: 1 };

#[test]
fn encoder_and_decoder_frequency_chain() {
    let mut f = 512;
    let mut chain = vec![f];
    for _ in 0..5 {
        f = ENC.out_freq(f, 5).unwrap();
        chain.push(f);
    }
    assert_eq!(chain, [512, 256, 128, 64, 32, 16]);
    for _ in 0..5 {
        f = DEC.out_freq(f, 5).unwrap();
    }
    assert_eq!(f, 512);
    assert_eq!(DEC.out_freq(16, 5).unwrap(), 32);
}

#[test]
fn unit_kernel_conv_is_identity() {
    let mut g = Graph::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = g.constant(rand_tensor(&[1, 1, 3, 3], &mut rng));
    let w = g.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
    let b = g.constant(Tensor::zeros(&[1]));
    let y = g.conv2d(x, w, b, ConvSpec { stride_f: 1, pad_f: 0 }).unwrap();
    assert_eq!(g.value(y), g.value(x));
}

#[test]
fn zero_input_tconv_gives_bias() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[1, 3, 4, 5]));
    let w = g.constant(Tensor::full(&[3, 2, 5, 2], 0.7));
    let b = g.constant(Tensor::new(vec![2], vec![0.5, -1.5]).unwrap());
    let y = g.conv_transpose2d(x, w, b, DEC).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 2, 8, 5]);
    let d = g.value(y).data();
    assert!(d[..40].iter().all(|&v| v == 0.5));
    assert!(d[40..].iter().all(|&v| v == -1.5));
}

fn prefix_equal(a: &Tensor<f64>, b: &Tensor<f64>, t0: usize) -> bool {
    let [bn, c, f, t] = a.dims4().unwrap();
    (0..bn * c * f).all(|r| (0..=t0).all(|ti| a.data()[r * t + ti].to_bits() == b.data()[r * t + ti].to_bits()))
}

#[test]
fn conv_and_tconv_are_causal() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..20 {
        let t = 6 + trial % 5;
        let t0 = rng.random_range(0..t - 1);
        let x1 = rand_tensor(&[2, 3, 16, t], &mut rng);
        let mut x2 = x1.clone();
        for r in 0..2 * 3 * 16 {
            for ti in t0 + 1..t {
                x2.data_mut()[r * t + ti] = rng.random_range(-5.0..5.0);
            }
        }
        let w = rand_tensor(&[4, 3, 5, 2], &mut rng);
        let wt = rand_tensor(&[3, 4, 5, 2], &mut rng);
        let b = rand_tensor(&[4], &mut rng);
        let run = |x: &Tensor<f64>| {
            let mut g = Graph::new();
            let (xv, wv, wtv, bv) =
                (g.constant(x.clone()), g.constant(w.clone()), g.constant(wt.clone()), g.constant(b.clone()));
            let c = g.conv2d(xv, wv, bv, ENC).unwrap();
            let d = g.conv_transpose2d(xv, wtv, bv, DEC).unwrap();
            (g.value(c).clone(), g.value(d).clone())
        };
        let (c1, d1) = run(&x1);
        let (c2, d2) = run(&x2);
        assert!(prefix_equal(&c1, &c2, t0));
        assert!(prefix_equal(&d1, &d2, t0));
        assert_ne!(c1, c2);
    }
}

#[test]
fn per_frame_kernels_match_offline_bit_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let t = 7;
    let x = rand_tensor(&[1, 3, 16, t], &mut rng);
    let w = rand_tensor(&[4, 3, 5, 2], &mut rng);
    let wt = rand_tensor(&[3, 4, 5, 2], &mut rng);
    let b = rand_tensor(&[4], &mut rng);
    let mut g = Graph::new();
    let (xv, wv, wtv, bv) =
        (g.constant(x.clone()), g.constant(w.clone()), g.constant(wt.clone()), g.constant(b.clone()));
    let c = g.conv2d(xv, wv, bv, ENC).unwrap();
    let d = g.conv_transpose2d(xv, wtv, bv, DEC).unwrap();
    let frame = |ti: usize| -> Vec<f64> { (0..3 * 16).map(|cf| x.data()[cf * t + ti]).collect() };
    for ti in 0..t {
        let cur = frame(ti);
        let prev = if ti > 0 { Some(frame(ti - 1)) } else { None };
        let mut out = vec![0.0; 4 * 8];
        conv_frame(&[prev.as_deref(), Some(&cur)], 3, 16, w.data(), [4, 3, 5, 2], b.data(), &ENC, &mut out);
        for (k, v) in out.iter().enumerate() {
            assert_eq!(v.to_bits(), g.value(c).data()[k * t + ti].to_bits());
        }
        let mut packed = vec![0.0; 4 * 8];
        let mut scratch = packed.clone();
        let pw = ChannelMajor::conv(w.data(), [4, 3, 5, 2]);
        conv_frame_packed(&[prev.as_deref(), Some(&cur)], 16, &pw, b.data(), &ENC, &mut scratch, &mut packed);
        assert_eq!(packed, out);

        let mut out = vec![0.0; 4 * 32];
        tconv_frame(&[Some(&cur), prev.as_deref()], 3, 16, wt.data(), [3, 4, 5, 2], b.data(), &DEC, &mut out);
        for (k, v) in out.iter().enumerate() {
            assert_eq!(v.to_bits(), g.value(d).data()[k * t + ti].to_bits());
        }
        let mut packed = vec![0.0; 4 * 32];
        let mut scratch = packed.clone();
        let pw = ChannelMajor::transposed(wt.data(), [3, 4, 5, 2]);
        tconv_frame_packed(&[Some(&cur), prev.as_deref()], 16, &pw, b.data(), &DEC, &mut scratch, &mut packed);
        assert_eq!(
            packed.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            out.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}

#[test]
fn shape_mismatches_are_rejected() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[1, 3, 16, 4]));
    let w = g.constant(Tensor::zeros(&[4, 2, 5, 2]));
    let b = g.constant(Tensor::zeros(&[4]));
    assert!(g.conv2d(x, w, b, ENC).is_err());
    assert!(g.conv_transpose2d(x, w, b, DEC).is_err());
    let h = g.constant(Tensor::zeros(&[1, 4, 3]));
    let wih = g.constant(Tensor::zeros(&[6, 3]));
    let whh = g.constant(Tensor::zeros(&[6, 2]));
    let bb = g.constant(Tensor::zeros(&[6]));
    assert!(g.gru(h, wih, whh, bb, bb).is_ok());
    let bad = g.constant(Tensor::zeros(&[1, 4, 5]));
    assert!(g.gru(bad, wih, whh, bb, bb).is_err());
}

#[test]
fn batch_norm_modes() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&[2, 3, 4, 5], &mut rng);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let gain = g.constant(Tensor::full(&[3], 1.0));
    let bias = g.constant(Tensor::zeros(&[3]));
    let mean = [0.0; 3];
    let var = [1.0; 3];
    let (y, stats) = g.batch_norm(xv, gain, bias, BnMode::Eval { mean: &mean, var: &var }).unwrap();
    assert!(stats.is_none());
    for (a, b) in g.value(y).data().iter().zip(x.data()) {
        assert!((a - b).abs() <= 1e-5 * b.abs().max(1e-12));
    }
    let (y, stats) = g.batch_norm(xv, gain, bias, BnMode::Train).unwrap();
    let stats = stats.unwrap();
    assert_eq!(stats.mean.len(), 3);
    let yv = g.value(y).data();
    for c in 0..3 {
        let vals: Vec<f64> = (0..2).flat_map(|b| yv[(b * 3 + c) * 20..(b * 3 + c + 1) * 20].to_vec()).collect();
        let m = vals.iter().sum::<f64>() / 40.0;
        let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 40.0;
        assert!(m.abs() < 1e-6);
        assert!((v - 1.0).abs() < 1e-4, "var {v}"); // eps 1e-5 shrinks unit variance slightly
    }
    let single = g.constant(Tensor::zeros(&[1, 3, 1, 1]));
    assert!(g.batch_norm(single, gain, bias, BnMode::Train).is_err());
}

#[test]
fn elementwise_definitions() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::new(vec![1, 1, 1, 2], vec![-1.0, 2.0]).unwrap());
    let a = g.constant(Tensor::full(&[1], 0.25));
    let y = g.prelu(x, a).unwrap();
    assert_eq!(g.value(y).data(), &[-0.25, 2.0]);
    let z = g.constant(Tensor::scalar(0.0));
    let s = g.sigmoid(z).unwrap();
    assert_eq!(g.value(s).item().unwrap(), 0.5);
    let xi = g.constant(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
    let w = g.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let b = g.constant(Tensor::zeros(&[2]));
    let l = g.linear(xi, w, b).unwrap();
    assert_eq!(g.value(l).data(), &[1.0, 2.0]);
}

#[test]
fn backward_basic_examples() {
    let mut g = Graph::<f64>::new();
    let xs = vec![0.5, -1.0, 2.0];
    let x = g.leaf(Tensor::new(vec![3], xs.clone()).unwrap(), true);
    let sq = g.mul(x, x).unwrap();
    let loss = g.dot_const(sq, &[1.0; 3]).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[1.0, -2.0, 4.0]);
    assert!(g.backward(sq).is_err());

    // d/dw sigmoid(w x) at w = 0 is x / 4
    let mut g = Graph::<f64>::new();
    let w = g.leaf(Tensor::new(vec![1, 1], vec![0.0]).unwrap(), true);
    let x = g.constant(Tensor::new(vec![1, 1], vec![3.0]).unwrap());
    let b = g.constant(Tensor::zeros(&[1]));
    let wx = g.linear(x, w, b).unwrap();
    let s = g.sigmoid(wx).unwrap();
    let loss = g.reshape(s, &[]).unwrap();
    let grads = g.backward(loss).unwrap();
    assert!((grads.get(w).unwrap()[0] - 0.75).abs() < 1e-15);
}

fn random_weights(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Runs a finite-difference check of `build` over 10 seeds.
fn check_layer(
    name: &str,
    shapes: &[&[usize]],
    out_len: impl Fn(&[usize]) -> usize,
    build: impl Fn(&mut Graph<f64>, &[dctnet::nn::Var]) -> dctnet::Result<dctnet::nn::Var>,
) {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| rand_tensor(s, &mut rng)).collect();
        let probe = random_weights(out_len(&shapes.iter().map(|s| s.iter().product()).collect::<Vec<_>>()), &mut rng);
        let report = finite_diff_check(&inputs, None, DEFAULT_STEP, |g, v| {
            let y = build(g, v)?;
            g.dot_const(y, &probe)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{name} seed {seed}: {report:?}");
    }
}

#[test]
fn conv_gradients() {
    check_layer(
        "conv",
        &[&[2, 2, 8, 4], &[3, 2, 5, 2], &[3]],
        |_| 2 * 3 * 4 * 4,
        |g, v| g.conv2d(v[0], v[1], v[2], ENC),
    );
}

#[test]
fn tconv_gradients() {
    check_layer(
        "tconv",
        &[&[2, 2, 4, 4], &[2, 3, 5, 2], &[3]],
        |_| 2 * 3 * 8 * 4,
        |g, v| g.conv_transpose2d(v[0], v[1], v[2], DEC),
    );
}

#[test]
fn batch_norm_gradients() {
    check_layer(
        "bn-train",
        &[&[2, 3, 4, 3], &[3], &[3]],
        |n| n[0],
        |g, v| Ok(g.batch_norm(v[0], v[1], v[2], BnMode::Train)?.0),
    );
    let mean = [0.1, -0.2, 0.3];
    let var = [0.5, 1.5, 2.0];
    check_layer(
        "bn-eval",
        &[&[2, 3, 4, 3], &[3], &[3]],
        |n| n[0],
        |g, v| Ok(g.batch_norm(v[0], v[1], v[2], BnMode::Eval { mean: &mean, var: &var })?.0),
    );
}

#[test]
fn prelu_gradients() {
    check_layer("prelu", &[&[2, 3, 4, 3], &[3]], |n| n[0], |g, v| g.prelu(v[0], v[1]));
}

#[test]
fn gru_gradients() {
    check_layer(
        "gru",
        &[&[2, 5, 3], &[12, 3], &[12, 4], &[12], &[12]],
        |_| 2 * 5 * 4,
        |g, v| g.gru(v[0], v[1], v[2], v[3], v[4]),
    );
}

#[test]
fn linear_and_activation_gradients() {
    check_layer("linear", &[&[2, 3, 4], &[5, 4], &[5]], |_| 30, |g, v| g.linear(v[0], v[1], v[2]));
    check_layer("sigmoid", &[&[2, 3, 4]], |n| n[0], |g, v| g.sigmoid(v[0]));
    check_layer("tanh", &[&[2, 3, 4]], |n| n[0], |g, v| g.tanh(v[0], 1.5));
}

#[test]
fn structural_op_gradients() {
    check_layer("mul-broadcast", &[&[2, 3, 4, 5], &[2, 1, 4, 5]], |n| n[0], |g, v| g.mul(v[0], v[1]));
    check_layer("concat", &[&[2, 3, 4, 5], &[2, 2, 4, 5]], |n| n[0] + n[1], |g, v| g.concat_channels(&[v[0], v[1]]));
    check_layer("pool", &[&[2, 3, 4, 5]], |n| n[0] / 3 * 2, |g, v| g.channel_pool(v[0]));
    check_layer(
        "sequence",
        &[&[2, 3, 4, 5]],
        |n| n[0],
        |g, v| {
            let s = g.to_sequence(v[0])?;
            let s = g.tanh(s, 1.0)?;
            g.from_sequence(s, 3, 4)
        },
    );
}

#[test]
fn loss_op_gradients() {
    let target: Vec<f64> = (0..24).map(|i| (i as f64 * 0.3).cos()).collect();
    let labels: Vec<f64> = (0..24).map(|i| (i % 2) as f64).collect();
    let weights: Vec<f64> = (0..24).map(|i| if i < 20 { 1.0 } else { 0.0 }).collect();
    check_layer("l1", &[&[2, 12]], |_| 1, |g, v| g.weighted_abs(v[0], &target, &weights, 20.0));
    check_layer("mse", &[&[2, 12]], |_| 1, |g, v| g.weighted_sq(v[0], &target, &weights, 20.0));
    check_layer(
        "bce",
        &[&[2, 12]],
        |_| 1,
        |g, v| {
            let p = g.sigmoid(v[0])?;
            g.bce(p, &labels, &weights, 20.0)
        },
    );
}

#[test]
fn istdct_op_matches_synthesis_and_gradients() {
    use dctnet::dsp::{istdct, stdct, FrameConfig, Stdct, Waveform};
    use std::sync::Arc;

    let cfg = FrameConfig::hamming(16, 4).unwrap();
    let plan = Arc::new(Stdct::<f64>::new(&cfg).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let wave = Waveform::new((0..37).map(|_| rng.random_range(-1.0..1.0)).collect(), 16_000).unwrap();
    let spec = stdct(&wave, &cfg).unwrap();
    let reference = istdct(&spec, 16_000).unwrap();
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![1, 1, 16, spec.frames], spec.coeffs.clone()).unwrap());
    let y = g.istdct(x, Arc::clone(&plan), 37).unwrap();
    assert_eq!(g.value(y).data(), &reference.samples[..]);

    let frames = spec.frames;
    check_layer("istdct", &[&[2, 1, 16, frames]], |_| 2 * 37, |g, v| g.istdct(v[0], Arc::clone(&plan), 37));
}
