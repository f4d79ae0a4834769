//! Parameter layout and the recorded forward pass.

use crate::attention::csa_forward;
use crate::error::{invalid, Result};
use crate::model::ModelConfig;
use crate::nn::{uniform, BatchStats, BnMode, Graph, ParamStore, Tensor, Var};
use crate::scalar::Scalar;

/// Normalization mode for a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Builds every tensor of `config` with seeded uniform initialization.
pub(crate) fn build_store<S: Scalar>(config: &ModelConfig, seed: u64) -> Result<ParamStore<S>> {
    config.validate()?;
    let mut b = Builder { store: ParamStore::new(), seed };
    let [kf, kt] = config.conv_kernel;
    let depth = config.depth();
    let mut ci = 1;
    for (i, &co) in config.encoder_channels.iter().enumerate() {
        let p = format!("enc.{i}");
        b.conv(&format!("{p}.conv"), [co, ci, kf, kt], ci * kf * kt)?;
        b.bn(&format!("{p}.bn"), co)?;
        b.prelu(&format!("{p}.prelu"), co)?;
        ci = co;
    }
    let mut input = config.se_linear_out;
    for (j, &h) in config.se_gru_hidden.iter().enumerate() {
        b.gru(&format!("se_gru.{j}"), input, h)?;
        input = h;
    }
    b.linear("se_linear", input, config.se_linear_out)?;
    let [ckf, ckt] = config.csa_kernel;
    for i in 0..depth {
        b.csa(&format!("skip_csa.{i}"), ckf, ckt)?;
    }
    for (i, &co) in config.decoder_channels.iter().enumerate() {
        let p = format!("dec.{i}");
        let ci = config.decoder_in(i);
        b.conv(&format!("{p}.tconv"), [ci, co, kf, kt], co * kf * kt)?;
        b.bn(&format!("{p}.bn"), co)?;
        if i + 1 < depth {
            b.prelu(&format!("{p}.prelu"), co)?;
            b.csa(&format!("dec_csa.{i}"), ckf, ckt)?;
        }
    }
    let vc = config.vad_transform_channels;
    let last = config.encoder_channels[depth - 1];
    b.conv("vad.conv", [vc, last, kf, kt], last * kf * kt)?;
    b.bn("vad.bn", vc)?;
    b.prelu("vad.prelu", vc)?;
    let mut input = vc * config.bottleneck_bins() / 2;
    for (j, &h) in config.vad_gru_hidden.iter().enumerate() {
        b.gru(&format!("vad_gru.{j}"), input, h)?;
        input = h;
    }
    b.linear("vad_linear", config.vad_linear[0], config.vad_linear[1])?;
    Ok(b.store)
}

struct Builder<S> {
    store: ParamStore<S>,
    seed: u64,
}

impl<S: Scalar> Builder<S> {
    fn uniform(&mut self, name: String, shape: &[usize], fan_in: usize) -> Result<()> {
        let t = uniform(shape, 1.0 / (fan_in as f64).sqrt(), self.seed, &name);
        self.store.insert(name, t, true).map(|_| ())
    }

    fn conv(&mut self, p: &str, shape: [usize; 4], fan_in: usize) -> Result<()> {
        let bias_len = if p.ends_with("tconv") { shape[1] } else { shape[0] };
        self.uniform(format!("{p}.weight"), &shape, fan_in)?;
        self.uniform(format!("{p}.bias"), &[bias_len], fan_in)
    }

    fn bn(&mut self, p: &str, c: usize) -> Result<()> {
        self.store.insert(format!("{p}.gain"), Tensor::full(&[c], S::one()), true)?;
        self.store.insert(format!("{p}.bias"), Tensor::zeros(&[c]), true)?;
        self.store.insert(format!("{p}.running_mean"), Tensor::zeros(&[c]), false)?;
        self.store.insert(format!("{p}.running_var"), Tensor::full(&[c], S::one()), false)?;
        Ok(())
    }

    fn prelu(&mut self, p: &str, c: usize) -> Result<()> {
        self.store.insert(format!("{p}.slope"), Tensor::full(&[c], S::lit(0.25)), true).map(|_| ())
    }

    fn gru(&mut self, p: &str, input: usize, hidden: usize) -> Result<()> {
        self.uniform(format!("{p}.w_ih"), &[3 * hidden, input], input)?;
        self.uniform(format!("{p}.w_hh"), &[3 * hidden, hidden], hidden)?;
        self.uniform(format!("{p}.b_ih"), &[3 * hidden], hidden)?;
        self.uniform(format!("{p}.b_hh"), &[3 * hidden], hidden)
    }

    fn linear(&mut self, p: &str, input: usize, output: usize) -> Result<()> {
        self.uniform(format!("{p}.weight"), &[output, input], input)?;
        self.uniform(format!("{p}.bias"), &[output], input)
    }

    fn csa(&mut self, p: &str, k_f: usize, k_t: usize) -> Result<()> {
        self.uniform(format!("{p}.weight"), &[1, 2, k_f, k_t], 2 * k_f * k_t)?;
        self.store.insert(format!("{p}.bias"), Tensor::zeros(&[1]), true).map(|_| ())
    }
}

/// Graph nodes produced by [`forward_graph`].
pub struct ForwardNodes<S> {
    /// `[B, 1, F, T]` mask in `(-mask_clip, mask_clip)`.
    pub mask: Var,
    /// `[B, T]` VAD scores in `(0, 1)`.
    pub vad: Var,
    /// Shared encoder output.
    pub encoded: Var,
    /// VAD feature-transform output.
    pub vad_features: Var,
    /// Batch statistics per normalization layer prefix (training mode only).
    pub bn_stats: Vec<(String, BatchStats<S>)>,
}

/// Records the network on `g`. `vars[i]` must hold store entry `i`.
pub fn forward_graph<S: Scalar>(
    g: &mut Graph<S>,
    config: &ModelConfig,
    store: &ParamStore<S>,
    vars: &[Var],
    x: Var,
    mode: Mode,
) -> Result<ForwardNodes<S>> {
    if vars.len() != store.len() {
        return Err(invalid!("{} bound variables for {} parameters", vars.len(), store.len()));
    }
    let [_, c, f, _] = g.value(x).dims4()?;
    if c != 1 || f != config.dct_size {
        return Err(invalid!("network input must be [B, 1, {}, T], got {:?}", config.dct_size, g.value(x).shape()));
    }
    let mut fw = Fw { g, store, vars, mode, stats: Vec::new() };
    let depth = config.depth();
    let conv = config.conv_spec();
    let tconv = config.tconv_spec();

    let mut skips = Vec::with_capacity(depth);
    let mut h = x;
    for i in 0..depth {
        let p = format!("enc.{i}");
        h = fw.g.conv2d(h, fw.var(&format!("{p}.conv.weight"))?, fw.var(&format!("{p}.conv.bias"))?, conv)?;
        h = fw.bn(h, &format!("{p}.bn"))?;
        h = fw.prelu(h, &format!("{p}.prelu"))?;
        skips.push(h);
    }
    let encoded = h;

    let mut seq = fw.g.to_sequence(encoded)?;
    for j in 0..config.se_gru_hidden.len() {
        seq = fw.gru(seq, &format!("se_gru.{j}"))?;
    }
    seq = fw.linear(seq, "se_linear")?;
    let mut stream = fw.g.from_sequence(seq, config.encoder_channels[depth - 1], config.bottleneck_bins())?;

    for i in 0..depth {
        let skip = fw.csa(skips[depth - 1 - i], &format!("skip_csa.{i}"))?;
        let joined = fw.g.concat_channels(&[stream, skip])?;
        let p = format!("dec.{i}");
        let w = fw.var(&format!("{p}.tconv.weight"))?;
        let b = fw.var(&format!("{p}.tconv.bias"))?;
        let y = fw.g.conv_transpose2d(joined, w, b, tconv)?;
        let y = fw.bn(y, &format!("{p}.bn"))?;
        stream = if i + 1 < depth {
            let y = fw.prelu(y, &format!("{p}.prelu"))?;
            fw.csa(y, &format!("dec_csa.{i}"))?
        } else {
            fw.g.tanh(y, S::lit(config.mask_clip))?
        };
    }

    let w = fw.var("vad.conv.weight")?;
    let b = fw.var("vad.conv.bias")?;
    let v = fw.g.conv2d(encoded, w, b, conv)?;
    let v = fw.bn(v, "vad.bn")?;
    let v = fw.prelu(v, "vad.prelu")?;
    let vad_features = v;
    let mut seq = fw.g.to_sequence(v)?;
    for j in 0..config.vad_gru_hidden.len() {
        seq = fw.gru(seq, &format!("vad_gru.{j}"))?;
    }
    let logits = fw.linear(seq, "vad_linear")?;
    let [batch, frames, _] = fw.g.value(logits).dims3()?;
    let logits = fw.g.reshape(logits, &[batch, frames])?;
    let vad = fw.g.sigmoid(logits)?;
    Ok(ForwardNodes { mask: stream, vad, encoded, vad_features, bn_stats: fw.stats })
}

struct Fw<'a, S> {
    g: &'a mut Graph<S>,
    store: &'a ParamStore<S>,
    vars: &'a [Var],
    mode: Mode,
    stats: Vec<(String, BatchStats<S>)>,
}

impl<S: Scalar> Fw<'_, S> {
    fn var(&self, name: &str) -> Result<Var> {
        Ok(self.vars[self.store.position(name)?])
    }

    fn bn(&mut self, x: Var, p: &str) -> Result<Var> {
        let gain = self.var(&format!("{p}.gain"))?;
        let bias = self.var(&format!("{p}.bias"))?;
        let (y, stats) = match self.mode {
            Mode::Train => self.g.batch_norm(x, gain, bias, BnMode::Train)?,
            Mode::Eval => {
                let mean = self.store.get(&format!("{p}.running_mean"))?.data();
                let var = self.store.get(&format!("{p}.running_var"))?.data();
                self.g.batch_norm(x, gain, bias, BnMode::Eval { mean, var })?
            }
        };
        if let Some(s) = stats {
            self.stats.push((p.to_string(), s));
        }
        Ok(y)
    }

    fn prelu(&mut self, x: Var, p: &str) -> Result<Var> {
        let s = self.var(&format!("{p}.slope"))?;
        self.g.prelu(x, s)
    }

    fn gru(&mut self, x: Var, p: &str) -> Result<Var> {
        let [a, b, c, d] = ["w_ih", "w_hh", "b_ih", "b_hh"].map(|n| self.var(&format!("{p}.{n}")));
        self.g.gru(x, a?, b?, c?, d?)
    }

    fn linear(&mut self, x: Var, p: &str) -> Result<Var> {
        let w = self.var(&format!("{p}.weight"))?;
        let b = self.var(&format!("{p}.bias"))?;
        self.g.linear(x, w, b)
    }

    fn csa(&mut self, x: Var, p: &str) -> Result<Var> {
        let w = self.var(&format!("{p}.weight"))?;
        let b = self.var(&format!("{p}.bias"))?;
        csa_forward(self.g, x, w, b)
    }
}
