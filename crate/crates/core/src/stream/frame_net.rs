//! The network evaluated one frame at a time in eval mode.

use std::collections::VecDeque;
use std::sync::Arc;

use crate::attention::csa_spec;
use crate::error::{invalid, Result};
use crate::kernels::{prelu, sigmoid};
use crate::model::ModelParams;
use crate::nn::norm::eval_affine;
use crate::nn::{
    conv_frame, conv_frame_packed, gru_cell, linear_row, pool_planes, tconv_frame, tconv_frame_packed, ChannelMajor,
    ConvSpec, GruWeights, ParamStore, TConvSpec,
};
use crate::scalar::Scalar;

/// The last `cap` frames of one layer input, oldest first.
#[derive(Debug, Clone)]
struct History<S> {
    frames: VecDeque<Vec<S>>,
    cap: usize,
    width: usize,
}

impl<S: Scalar> History<S> {
    fn new(cap: usize, width: usize) -> Self {
        Self { frames: VecDeque::with_capacity(cap), cap, width }
    }

    /// Frame `lag >= 1` steps in the past, or `None` before the stream start.
    fn lag(&self, lag: usize) -> Option<&[S]> {
        let n = self.frames.len();
        (lag >= 1 && lag <= n).then(|| self.frames[n - lag].as_slice())
    }

    fn push(&mut self, cur: &[S]) {
        if self.cap == 0 {
            return;
        }
        let mut buf = if self.frames.len() == self.cap { self.frames.pop_front().unwrap() } else { Vec::new() };
        buf.clear();
        buf.extend_from_slice(cur);
        self.frames.push_back(buf);
    }

    fn capacity(&self) -> usize {
        self.cap * self.width
    }
}

/// Eval-mode normalization folded to a per-channel affine map, optionally
/// followed by PReLU.
#[derive(Debug, Clone)]
struct Affine<S> {
    scale: Vec<S>,
    shift: Vec<S>,
    slope: Option<usize>,
}

impl<S: Scalar> Affine<S> {
    fn new(store: &ParamStore<S>, bn: &str, act: Option<&str>) -> Result<Self> {
        let var = store.get(&format!("{bn}.running_var"))?.data();
        if var.iter().any(|&v| !(v > S::zero())) {
            return Err(invalid!("{bn}: running variance must be positive"));
        }
        let (scale, shift) = eval_affine(
            store.get(&format!("{bn}.gain"))?.data(),
            store.get(&format!("{bn}.bias"))?.data(),
            store.get(&format!("{bn}.running_mean"))?.data(),
            var,
        );
        let slope = act.map(|p| store.position(&format!("{p}.slope"))).transpose()?;
        Ok(Self { scale, shift, slope })
    }

    fn apply(&self, store: &ParamStore<S>, x: &mut [S]) {
        let c_n = self.scale.len();
        let inner = x.len() / c_n;
        let slope = self.slope.map(|i| store.tensor(i).data());
        for c in 0..c_n {
            for v in &mut x[c * inner..(c + 1) * inner] {
                *v = *v * self.scale[c] + self.shift[c];
                if let Some(a) = slope {
                    *v = prelu(*v, a[c]);
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
enum Kind {
    Conv(ConvSpec),
    Transposed(TConvSpec),
}

/// Causal (transposed) convolution with its input history.
#[derive(Debug, Clone)]
struct ConvLayer<S> {
    weight: usize,
    bias: usize,
    shape: [usize; 4],
    kind: Kind,
    c_in: usize,
    f_in: usize,
    out_len: usize,
    hist: History<S>,
    /// Channel-major weights and scratch, for layers wide enough to gain.
    packed: Option<(ChannelMajor<S>, Vec<S>)>,
}

/// Narrower layers keep the plane-major kernels.
const PACK_MIN_CHANNELS: usize = 8;

impl<S: Scalar> ConvLayer<S> {
    fn new(store: &ParamStore<S>, prefix: &str, kind: Kind, c_in: usize, f_in: usize) -> Result<Self> {
        let weight = store.position(&format!("{prefix}.weight"))?;
        let bias = store.position(&format!("{prefix}.bias"))?;
        let shape = store.tensor(weight).dims4()?;
        let (c_out, k_f, k_t) = match kind {
            Kind::Conv(_) => (shape[0], shape[2], shape[3]),
            Kind::Transposed(_) => (shape[1], shape[2], shape[3]),
        };
        let f_out = match &kind {
            Kind::Conv(s) => s.out_freq(f_in, k_f)?,
            Kind::Transposed(s) => s.out_freq(f_in, k_f)?,
        };
        let packed = (c_out >= PACK_MIN_CHANNELS).then(|| {
            let w = store.tensor(weight).data();
            let w = match kind {
                Kind::Conv(_) => ChannelMajor::conv(w, shape),
                Kind::Transposed(_) => ChannelMajor::transposed(w, shape),
            };
            (w, vec![S::zero(); c_out * f_out])
        });
        Ok(Self {
            weight,
            bias,
            shape,
            kind,
            c_in,
            f_in,
            out_len: c_out * f_out,
            hist: History::new(k_t - 1, c_in * f_in),
            packed,
        })
    }

    fn forward(&mut self, store: &ParamStore<S>, cur: &[S]) -> Vec<S> {
        let k_t = self.shape[3];
        let w = store.tensor(self.weight).data();
        let b = store.tensor(self.bias).data();
        let mut out = vec![S::zero(); self.out_len];
        match &self.kind {
            Kind::Conv(spec) => {
                // Tap `kt` sees the frame `k_t - 1 - kt` steps back.
                let frames: Vec<Option<&[S]>> = (0..k_t)
                    .map(|kt| match k_t - 1 - kt {
                        0 => Some(cur),
                        lag => self.hist.lag(lag),
                    })
                    .collect();
                match &mut self.packed {
                    Some((pw, scratch)) => conv_frame_packed(&frames, self.f_in, pw, b, spec, scratch, &mut out),
                    None => conv_frame(&frames, self.c_in, self.f_in, w, self.shape, b, spec, &mut out),
                }
            }
            Kind::Transposed(spec) => {
                let frames: Vec<Option<&[S]>> =
                    (0..k_t).map(|kt| if kt == 0 { Some(cur) } else { self.hist.lag(kt) }).collect();
                match &mut self.packed {
                    Some((pw, scratch)) => tconv_frame_packed(&frames, self.f_in, pw, b, spec, scratch, &mut out),
                    None => tconv_frame(&frames, self.c_in, self.f_in, w, self.shape, b, spec, &mut out),
                }
            }
        }
        self.hist.push(cur);
        out
    }
}

/// Attention gate with its pooled-map history.
#[derive(Debug, Clone)]
struct Attention<S> {
    conv: ConvLayer<S>,
    bins: usize,
}

impl<S: Scalar> Attention<S> {
    fn new(store: &ParamStore<S>, prefix: &str, bins: usize) -> Result<Self> {
        let k_f = store.get(&format!("{prefix}.weight"))?.dims4()?[2];
        Ok(Self { conv: ConvLayer::new(store, prefix, Kind::Conv(csa_spec(k_f)), 2, bins)?, bins })
    }

    fn apply(&mut self, store: &ParamStore<S>, u: &mut [S]) {
        let f = self.bins;
        let planes: Vec<&[S]> = u.chunks_exact(f).collect();
        let mut pooled = vec![S::zero(); 2 * f];
        let mut argmax = vec![0u32; f];
        let (avg, max) = pooled.split_at_mut(f);
        pool_planes(&planes, avg, max, &mut argmax);
        let logits = self.conv.forward(store, &pooled);
        for plane in u.chunks_exact_mut(f) {
            for (v, &l) in plane.iter_mut().zip(&logits) {
                *v *= sigmoid(l);
            }
        }
    }
}

#[derive(Debug, Clone)]
struct GruLayer<S> {
    params: [usize; 4],
    h: Vec<S>,
    next: Vec<S>,
    gates: Vec<S>,
}

impl<S: Scalar> GruLayer<S> {
    fn new(store: &ParamStore<S>, prefix: &str) -> Result<Self> {
        let mut params = [0; 4];
        for (p, n) in params.iter_mut().zip(["w_ih", "w_hh", "b_ih", "b_hh"]) {
            *p = store.position(&format!("{prefix}.{n}"))?;
        }
        let hidden = store.tensor(params[1]).dims2()?[1];
        Ok(Self {
            params,
            h: vec![S::zero(); hidden],
            next: vec![S::zero(); hidden],
            gates: vec![S::zero(); 4 * hidden],
        })
    }

    fn step(&mut self, store: &ParamStore<S>, x: &[S]) -> Result<&[S]> {
        let [a, b, c, d] = self.params.map(|i| store.tensor(i));
        let w = GruWeights::new(a, b, c, d)?;
        gru_cell(&w, x, &self.h, &mut self.gates, &mut self.next);
        std::mem::swap(&mut self.h, &mut self.next);
        Ok(&self.h)
    }
}

fn gru_stack<S: Scalar>(store: &ParamStore<S>, layers: &mut [GruLayer<S>], x: Vec<S>) -> Result<Vec<S>> {
    let mut x = x;
    for l in layers {
        x = l.step(store, &x)?.to_vec();
    }
    Ok(x)
}

fn linear<S: Scalar>(store: &ParamStore<S>, idx: (usize, usize), x: &[S]) -> Vec<S> {
    let w = store.tensor(idx.0);
    let mut out = vec![S::zero(); w.shape()[0]];
    linear_row(w.data(), store.tensor(idx.1).data(), x, &mut out);
    out
}

fn linear_idx<S: Scalar>(store: &ParamStore<S>, prefix: &str) -> Result<(usize, usize)> {
    Ok((store.position(&format!("{prefix}.weight"))?, store.position(&format!("{prefix}.bias"))?))
}

#[derive(Debug, Clone)]
pub(crate) struct FrameNet<S: Scalar> {
    params: Arc<ModelParams<S>>,
    enc: Vec<(ConvLayer<S>, Affine<S>)>,
    se_gru: Vec<GruLayer<S>>,
    se_linear: (usize, usize),
    skip_csa: Vec<Attention<S>>,
    dec: Vec<(ConvLayer<S>, Affine<S>)>,
    dec_csa: Vec<Attention<S>>,
    vad: (ConvLayer<S>, Affine<S>),
    vad_gru: Vec<GruLayer<S>>,
    vad_linear: (usize, usize),
    mask_clip: S,
}

impl<S: Scalar> FrameNet<S> {
    pub fn new(params: &Arc<ModelParams<S>>) -> Result<Self> {
        let cfg = &params.config;
        let store = &params.store;
        let depth = cfg.depth();
        let conv = Kind::Conv(cfg.conv_spec());
        let mut enc = Vec::with_capacity(depth);
        let mut bins = Vec::with_capacity(depth);
        let (mut c, mut f) = (1, cfg.dct_size);
        for i in 0..depth {
            let p = format!("enc.{i}");
            let layer = ConvLayer::new(store, &format!("{p}.conv"), conv.clone(), c, f)?;
            c = cfg.encoder_channels[i];
            f = layer.out_len / c;
            bins.push(f);
            enc.push((layer, Affine::new(store, &format!("{p}.bn"), Some(&format!("{p}.prelu")))?));
        }
        let (enc_c, enc_f) = (c, f);
        let se_gru = (0..cfg.se_gru_hidden.len())
            .map(|j| GruLayer::new(store, &format!("se_gru.{j}")))
            .collect::<Result<_>>()?;

        let tconv = Kind::Transposed(cfg.tconv_spec());
        let mut skip_csa = Vec::with_capacity(depth);
        let mut dec = Vec::with_capacity(depth);
        let mut dec_csa = Vec::with_capacity(depth);
        for i in 0..depth {
            let skip_bins = bins[depth - 1 - i];
            skip_csa.push(Attention::new(store, &format!("skip_csa.{i}"), skip_bins)?);
            let p = format!("dec.{i}");
            let layer = ConvLayer::new(store, &format!("{p}.tconv"), tconv.clone(), cfg.decoder_in(i), skip_bins)?;
            let out_bins = layer.out_len / cfg.decoder_channels[i];
            let last = i + 1 == depth;
            let prelu = format!("{p}.prelu");
            dec.push((layer, Affine::new(store, &format!("{p}.bn"), (!last).then_some(prelu.as_str()))?));
            if !last {
                dec_csa.push(Attention::new(store, &format!("dec_csa.{i}"), out_bins)?);
            }
        }

        let vad =
            (ConvLayer::new(store, "vad.conv", conv, enc_c, enc_f)?, Affine::new(store, "vad.bn", Some("vad.prelu"))?);
        let vad_gru = (0..cfg.vad_gru_hidden.len())
            .map(|j| GruLayer::new(store, &format!("vad_gru.{j}")))
            .collect::<Result<_>>()?;
        Ok(Self {
            params: Arc::clone(params),
            enc,
            se_gru,
            se_linear: linear_idx(store, "se_linear")?,
            skip_csa,
            dec,
            dec_csa,
            vad,
            vad_gru,
            vad_linear: linear_idx(store, "vad_linear")?,
            mask_clip: S::lit(cfg.mask_clip),
        })
    }

    /// Scalars held across frames.
    pub fn state_len(&self) -> usize {
        let convs = self.enc.iter().chain(&self.dec).chain(std::iter::once(&self.vad)).map(|(l, _)| l.hist.capacity());
        let attn = self.skip_csa.iter().chain(&self.dec_csa).map(|a| a.conv.hist.capacity());
        let grus = self.se_gru.iter().chain(&self.vad_gru).map(|g| g.h.len());
        convs.chain(attn).chain(grus).sum()
    }

    /// Consumes one coefficient column, writes the mask column and returns
    /// the VAD score of the frame.
    pub fn step(&mut self, coeffs: &[f64], mask: &mut [f64]) -> Result<f64> {
        let params = Arc::clone(&self.params);
        let store = &params.store;
        let mut h: Vec<S> = coeffs.iter().map(|&v| S::lit(v)).collect();
        let mut skips = Vec::with_capacity(self.enc.len());
        for (layer, affine) in &mut self.enc {
            h = layer.forward(store, &h);
            affine.apply(store, &mut h);
            skips.push(h.clone());
        }
        let encoded = h;

        let seq = gru_stack(store, &mut self.se_gru, encoded.clone())?;
        let mut stream = linear(store, self.se_linear, &seq);
        let depth = self.dec.len();
        for i in 0..depth {
            let mut skip = std::mem::take(&mut skips[depth - 1 - i]);
            self.skip_csa[i].apply(store, &mut skip);
            stream.extend_from_slice(&skip);
            let (layer, affine) = &mut self.dec[i];
            stream = layer.forward(store, &stream);
            affine.apply(store, &mut stream);
            if i + 1 < depth {
                self.dec_csa[i].apply(store, &mut stream);
            } else {
                for v in &mut stream {
                    *v = self.mask_clip * v.tanh();
                }
            }
        }
        if stream.len() != mask.len() {
            return Err(invalid!("mask has {} bins, frame has {}", stream.len(), mask.len()));
        }
        for (m, v) in mask.iter_mut().zip(&stream) {
            *m = v.to_f64_lossy();
        }

        let (layer, affine) = &mut self.vad;
        let mut v = layer.forward(store, &encoded);
        affine.apply(store, &mut v);
        let seq = gru_stack(store, &mut self.vad_gru, v)?;
        let logit = linear(store, self.vad_linear, &seq);
        Ok(sigmoid(logit[0]).to_f64_lossy())
    }
}
