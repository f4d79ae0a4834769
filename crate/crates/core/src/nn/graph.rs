//! Append-only computation tape with reverse-mode gradients.
//!
//! Nodes are appended in evaluation order, so walking the tape backwards
//! visits every node after all of its consumers.

use std::sync::Arc;

use crate::dsp::Stdct;
use crate::error::{invalid, Error, Result};
use crate::kernels::{dot, prelu, sigmoid};
use crate::nn::conv::{self, ConvGeom, ConvSpec, TConvSpec};
use crate::nn::gru::{self, GruTrace, GruWeights};
use crate::nn::norm::{self, BatchStats};
use crate::nn::Tensor;
use crate::scalar::Scalar;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch-norm statistics source.
#[derive(Debug, Clone, Copy)]
pub enum BnMode<'a, S> {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with running statistics.
    Eval { mean: &'a [S], var: &'a [S] },
}

enum Op<S> {
    Leaf,
    Conv { x: Var, w: Var, b: Var, spec: ConvSpec },
    ConvTranspose { x: Var, w: Var, b: Var, spec: TConvSpec },
    BatchNormTrain { x: Var, gain: Var, bias: Var, xhat: Vec<S>, inv_std: Vec<S> },
    BatchNormEval { x: Var, gain: Var, bias: Var, scale: Vec<S>, mean: Vec<S>, var: Vec<S> },
    Prelu { x: Var, slope: Var },
    Gru { x: Var, w_ih: Var, w_hh: Var, b_ih: Var, b_hh: Var, trace: GruTrace<S> },
    Linear { x: Var, w: Var, b: Var },
    Sigmoid { x: Var },
    Tanh { x: Var, scale: S },
    Mul { a: Var, b: Var, broadcast: bool },
    Add { a: Var, b: Var },
    MulConst { x: Var, c: Vec<S> },
    Concat { parts: Vec<(Var, usize)> },
    ChannelPool { x: Var, argmax: Vec<u32> },
    ToSequence { x: Var },
    FromSequence { x: Var },
    Reshape { x: Var },
    Istdct { x: Var, plan: Arc<Stdct<S>>, env: Vec<S>, len: usize },
    WeightedAbs { x: Var, target: Vec<S>, weights: Vec<S>, norm: S },
    WeightedSq { x: Var, target: Vec<S>, weights: Vec<S>, norm: S },
    Bce { x: Var, target: Vec<S>, weights: Vec<S>, norm: S },
    DotConst { x: Var, c: Vec<S> },
    WeightedSum { terms: Vec<(Var, S)> },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Gradients of a scalar with respect to every node that requires one.
pub struct Grads<S> {
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Grads<S> {
    pub fn get(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<S>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

pub struct Graph<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Probability clamp applied inside the BCE loss.
pub const BCE_CLAMP: f64 = 1e-7;

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::Numerical(format!(
                "non-finite value produced by {} at tape position {}",
                op_name(&op),
                self.nodes.len()
            )));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Causal 2-D convolution. `x [B,Ci,F,T]`, `w [Co,Ci,kF,kT]`, `b [Co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, spec: ConvSpec) -> Result<Var> {
        let geom = ConvGeom::conv(self.value(x).dims4()?, self.value(w).dims4()?, self.value(b).numel(), &spec)?;
        let out = conv::conv_forward(&geom, &spec, self.value(x).data(), self.value(w).data(), self.value(b).data());
        let t = Tensor::new(vec![geom.batch, geom.c_out, geom.f_out, geom.frames], out)?;
        self.push(t, Op::Conv { x, w, b, spec }, &[x, w, b])
    }

    /// Causal transposed convolution. `x [B,Ci,F,T]`, `w [Ci,Co,kF,kT]`, `b [Co]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, spec: TConvSpec) -> Result<Var> {
        let geom = ConvGeom::tconv(self.value(x).dims4()?, self.value(w).dims4()?, self.value(b).numel(), &spec)?;
        let out = conv::tconv_forward(&geom, &spec, self.value(x).data(), self.value(w).data(), self.value(b).data());
        let t = Tensor::new(vec![geom.batch, geom.c_out, geom.f_out, geom.frames], out)?;
        self.push(t, Op::ConvTranspose { x, w, b, spec }, &[x, w, b])
    }

    /// Per-channel batch normalization of `x [B, C, ...]`.
    ///
    /// In training mode the batch statistics are returned so the caller can
    /// update its running estimates.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        mode: BnMode<'_, S>,
    ) -> Result<(Var, Option<BatchStats<S>>)> {
        let (batch, channels, inner) = channel_view(self.value(x))?;
        if self.value(gain).numel() != channels || self.value(bias).numel() != channels {
            return Err(invalid!("batch norm parameters do not match {channels} channels"));
        }
        let shape = self.value(x).shape().to_vec();
        match mode {
            BnMode::Train => {
                let fwd = norm::train_forward(
                    self.value(x).data(),
                    batch,
                    channels,
                    inner,
                    self.value(gain).data(),
                    self.value(bias).data(),
                )?;
                let op = Op::BatchNormTrain { x, gain, bias, xhat: fwd.xhat, inv_std: fwd.inv_std };
                let v = self.push(Tensor::new(shape, fwd.out)?, op, &[x, gain, bias])?;
                Ok((v, Some(fwd.stats)))
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != channels || var.len() != channels {
                    return Err(invalid!("running statistics do not match {channels} channels"));
                }
                if var.iter().any(|&v| !(v > S::zero())) {
                    return Err(invalid!("running variance must be positive"));
                }
                let (scale, shift) = norm::eval_affine(self.value(gain).data(), self.value(bias).data(), mean, var);
                let xs = self.value(x).data();
                let mut out = vec![S::zero(); xs.len()];
                for b in 0..batch {
                    for c in 0..channels {
                        let r = (b * channels + c) * inner;
                        for i in r..r + inner {
                            out[i] = xs[i] * scale[c] + shift[c];
                        }
                    }
                }
                let op = Op::BatchNormEval { x, gain, bias, scale, mean: mean.to_vec(), var: var.to_vec() };
                Ok((self.push(Tensor::new(shape, out)?, op, &[x, gain, bias])?, None))
            }
        }
    }

    /// Parametric ReLU with one slope per channel of `x [B, C, ...]`.
    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        let (_, channels, inner) = channel_view(self.value(x))?;
        if self.value(slope).numel() != channels {
            return Err(invalid!("PReLU has {} slopes for {channels} channels", self.value(slope).numel()));
        }
        let xs = self.value(x).data();
        let a = self.value(slope).data();
        let mut out = vec![S::zero(); xs.len()];
        for (i, (o, &v)) in out.iter_mut().zip(xs).enumerate() {
            *o = prelu(v, a[(i / inner) % channels]);
        }
        let t = Tensor::new(self.value(x).shape().to_vec(), out)?;
        self.push(t, Op::Prelu { x, slope }, &[x, slope])
    }

    /// GRU over `x [B, T, I]` from a zero initial state; returns `[B, T, H]`.
    pub fn gru(&mut self, x: Var, w_ih: Var, w_hh: Var, b_ih: Var, b_hh: Var) -> Result<Var> {
        let [batch, steps, input] = self.value(x).dims3()?;
        let w = GruWeights::new(self.value(w_ih), self.value(w_hh), self.value(b_ih), self.value(b_hh))?;
        if w.input != input {
            return Err(invalid!("GRU expects input width {}, got {input}", w.input));
        }
        let hidden = w.hidden;
        let (out, trace) = gru::sequence_forward(self.value(x).data(), batch, steps, &w);
        let t = Tensor::new(vec![batch, steps, hidden], out)?;
        self.push(t, Op::Gru { x, w_ih, w_hh, b_ih, b_hh, trace }, &[x, w_ih, w_hh, b_ih, b_hh])
    }

    /// Affine map over the last axis: `y = W x + b`, `w [O, I]`, `b [O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let [o, i] = self.value(w).dims2()?;
        let xshape = self.value(x).shape().to_vec();
        if xshape.last() != Some(&i) || self.value(b).numel() != o {
            return Err(invalid!("linear weight {:?} incompatible with input {xshape:?}", self.value(w).shape()));
        }
        let xs = self.value(x).data();
        let ws = self.value(w).data();
        let bs = self.value(b).data();
        let rows = xs.len() / i;
        let mut out = vec![S::zero(); rows * o];
        for r in 0..rows {
            linear_row(ws, bs, &xs[r * i..(r + 1) * i], &mut out[r * o..(r + 1) * o]);
        }
        let mut shape = xshape;
        *shape.last_mut().unwrap() = o;
        self.push(Tensor::new(shape, out)?, Op::Linear { x, w, b }, &[x, w, b])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let t = map(self.value(x), sigmoid);
        self.push(t, Op::Sigmoid { x }, &[x])
    }

    /// `scale * tanh(x)`
    pub fn tanh(&mut self, x: Var, scale: S) -> Result<Var> {
        let t = map(self.value(x), |v| scale * v.tanh());
        self.push(t, Op::Tanh { x, scale }, &[x])
    }

    /// Element-wise product. `b` may be `[B, 1, F, T]` against `a [B, C, F, T]`,
    /// in which case it is broadcast over channels.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ash = self.value(a).shape().to_vec();
        let bsh = self.value(b).shape().to_vec();
        let av = self.value(a).data();
        let bv = self.value(b).data();
        if ash == bsh {
            let out = av.iter().zip(bv).map(|(&x, &y)| x * y).collect();
            return self.push(Tensor::new(ash, out)?, Op::Mul { a, b, broadcast: false }, &[a, b]);
        }
        let [batch, channels, f, t] = self.value(a).dims4()?;
        if bsh != [batch, 1, f, t] {
            return Err(invalid!("cannot broadcast {bsh:?} against {ash:?}"));
        }
        let plane = f * t;
        let mut out = vec![S::zero(); av.len()];
        for bi in 0..batch {
            let m = &bv[bi * plane..(bi + 1) * plane];
            for c in 0..channels {
                let r = (bi * channels + c) * plane;
                for k in 0..plane {
                    out[r + k] = av[r + k] * m[k];
                }
            }
        }
        self.push(Tensor::new(ash, out)?, Op::Mul { a, b, broadcast: true }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(invalid!(
                "add of mismatched shapes {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        let out = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), out)?;
        self.push(t, Op::Add { a, b }, &[a, b])
    }

    /// Element-wise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, x: Var, c: &Tensor<S>) -> Result<Var> {
        if self.value(x).shape() != c.shape() {
            return Err(invalid!("constant shape {:?} does not match {:?}", c.shape(), self.value(x).shape()));
        }
        let out = self.value(x).data().iter().zip(c.data()).map(|(&a, &b)| a * b).collect();
        let t = Tensor::new(c.shape().to_vec(), out)?;
        self.push(t, Op::MulConst { x, c: c.data().to_vec() }, &[x])
    }

    /// Concatenates `[B, Ci, F, T]` tensors along channels.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(invalid!("nothing to concatenate"));
        };
        let [batch, _, f, t] = self.value(first).dims4()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let [pb, pc, pf, pt] = self.value(p).dims4()?;
            if (pb, pf, pt) != (batch, f, t) {
                return Err(invalid!("cannot concatenate {:?} with {:?}", self.value(p).shape(), [batch, 0, f, t]));
            }
            widths.push((p, pc));
        }
        let total: usize = widths.iter().map(|w| w.1).sum();
        let plane = f * t;
        let mut out = Vec::with_capacity(batch * total * plane);
        for bi in 0..batch {
            for &(p, c) in &widths {
                out.extend_from_slice(&self.value(p).data()[bi * c * plane..(bi + 1) * c * plane]);
            }
        }
        let v = Tensor::new(vec![batch, total, f, t], out)?;
        self.push(v, Op::Concat { parts: widths }, parts)
    }

    /// `[B, C, F, T] -> [B, 2, F, T]`: channel mean then channel max.
    pub fn channel_pool(&mut self, x: Var) -> Result<Var> {
        let [batch, channels, f, t] = self.value(x).dims4()?;
        if channels == 0 {
            return Err(invalid!("channel pooling needs at least one channel"));
        }
        let plane = f * t;
        let xs = self.value(x).data();
        let mut out = vec![S::zero(); batch * 2 * plane];
        let mut argmax = vec![0u32; batch * plane];
        for bi in 0..batch {
            let planes: Vec<&[S]> = (0..channels).map(|c| &xs[(bi * channels + c) * plane..][..plane]).collect();
            let (avg, rest) = out[bi * 2 * plane..(bi + 1) * 2 * plane].split_at_mut(plane);
            pool_planes(&planes, avg, rest, &mut argmax[bi * plane..(bi + 1) * plane]);
        }
        let v = Tensor::new(vec![batch, 2, f, t], out)?;
        self.push(v, Op::ChannelPool { x, argmax }, &[x])
    }

    /// `[B, C, F, T] -> [B, T, C*F]` with feature index `c * F + f`.
    pub fn to_sequence(&mut self, x: Var) -> Result<Var> {
        let [batch, c, f, t] = self.value(x).dims4()?;
        let xs = self.value(x).data();
        let mut out = vec![S::zero(); xs.len()];
        let width = c * f;
        for bi in 0..batch {
            for cf in 0..width {
                for ti in 0..t {
                    out[(bi * t + ti) * width + cf] = xs[(bi * width + cf) * t + ti];
                }
            }
        }
        self.push(Tensor::new(vec![batch, t, width], out)?, Op::ToSequence { x }, &[x])
    }

    /// Inverse of [`Graph::to_sequence`]: `[B, T, C*F] -> [B, C, F, T]`.
    pub fn from_sequence(&mut self, x: Var, channels: usize, bins: usize) -> Result<Var> {
        let [batch, t, width] = self.value(x).dims3()?;
        if width != channels * bins {
            return Err(invalid!("sequence width {width} is not {channels} x {bins}"));
        }
        let xs = self.value(x).data();
        let mut out = vec![S::zero(); xs.len()];
        for bi in 0..batch {
            for cf in 0..width {
                for ti in 0..t {
                    out[(bi * width + cf) * t + ti] = xs[(bi * t + ti) * width + cf];
                }
            }
        }
        let v = Tensor::new(vec![batch, channels, bins, t], out)?;
        self.push(v, Op::FromSequence { x }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        self.push(v, Op::Reshape { x }, &[x])
    }

    /// Inverse STDCT of `x [B, 1, F, T]` into `[B, len]`, with the same
    /// weighted overlap-add normalization as [`Stdct::synthesize`].
    pub fn istdct(&mut self, x: Var, plan: Arc<Stdct<S>>, len: usize) -> Result<Var> {
        let [batch, one, bins, frames] = self.value(x).dims4()?;
        if one != 1 || bins != plan.win_len() {
            return Err(invalid!("istdct expects [B, 1, {}, T], got {:?}", plan.win_len(), self.value(x).shape()));
        }
        let mut out = Vec::with_capacity(batch * len);
        for bi in 0..batch {
            let coeffs = &self.value(x).data()[bi * bins * frames..(bi + 1) * bins * frames];
            out.extend(plan.synthesize(coeffs, frames, len)?);
        }
        let env = plan.envelope(frames);
        let v = Tensor::new(vec![batch, len], out)?;
        self.push(v, Op::Istdct { x, plan, env, len }, &[x])
    }

    /// `Σ w |x - target| / norm`
    pub fn weighted_abs(&mut self, x: Var, target: &[S], weights: &[S], norm: S) -> Result<Var> {
        self.check_loss_args(x, target, weights, norm)?;
        let v: S =
            self.value(x).data().iter().zip(target).zip(weights).map(|((&p, &y), &w)| w * (p - y).abs()).sum::<S>()
                / norm;
        let op = Op::WeightedAbs { x, target: target.to_vec(), weights: weights.to_vec(), norm };
        self.push(Tensor::scalar(v), op, &[x])
    }

    /// `Σ w (x - target)² / norm`
    pub fn weighted_sq(&mut self, x: Var, target: &[S], weights: &[S], norm: S) -> Result<Var> {
        self.check_loss_args(x, target, weights, norm)?;
        let v: S =
            self.value(x).data().iter().zip(target).zip(weights).map(|((&p, &y), &w)| w * (p - y) * (p - y)).sum::<S>()
                / norm;
        let op = Op::WeightedSq { x, target: target.to_vec(), weights: weights.to_vec(), norm };
        self.push(Tensor::scalar(v), op, &[x])
    }

    /// Weighted binary cross entropy of probabilities `x` against `target`,
    /// with `x` clamped to `[1e-7, 1 - 1e-7]`.
    pub fn bce(&mut self, x: Var, target: &[S], weights: &[S], norm: S) -> Result<Var> {
        self.check_loss_args(x, target, weights, norm)?;
        let v: S = self
            .value(x)
            .data()
            .iter()
            .zip(target)
            .zip(weights)
            .map(|((&p, &y), &w)| {
                let p = clamp_prob(p);
                -w * (y * p.ln() + (S::one() - y) * (S::one() - p).ln())
            })
            .sum::<S>()
            / norm;
        let op = Op::Bce { x, target: target.to_vec(), weights: weights.to_vec(), norm };
        self.push(Tensor::scalar(v), op, &[x])
    }

    /// `Σ c ⊙ x` for a constant `c`.
    pub fn dot_const(&mut self, x: Var, c: &[S]) -> Result<Var> {
        if self.value(x).numel() != c.len() {
            return Err(invalid!("dot with {} weights on {} values", c.len(), self.value(x).numel()));
        }
        let v = dot(self.value(x).data(), c);
        self.push(Tensor::scalar(v), Op::DotConst { x, c: c.to_vec() }, &[x])
    }

    /// `Σ coeff_i * x_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, S)]) -> Result<Var> {
        let mut total = S::zero();
        for &(v, c) in terms {
            total += c * self.value(v).item()?;
        }
        let inputs: Vec<Var> = terms.iter().map(|t| t.0).collect();
        self.push(Tensor::scalar(total), Op::WeightedSum { terms: terms.to_vec() }, &inputs)
    }

    fn check_loss_args(&self, x: Var, target: &[S], weights: &[S], norm: S) -> Result<()> {
        let n = self.value(x).numel();
        if target.len() != n || weights.len() != n {
            return Err(invalid!("loss over {n} values got {} targets, {} weights", target.len(), weights.len()));
        }
        if !(norm > S::zero()) {
            return Err(invalid!("loss normalizer must be positive"));
        }
        Ok(())
    }

    /// Hash of the branch taken by every non-smooth op (PReLU sign, pooling
    /// argmax, L1 residual sign, BCE clamp). Two evaluations with equal
    /// fingerprints lie on the same smooth piece of the function.
    pub fn branch_fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |bit: u64| h = (h ^ bit).wrapping_mul(0x0000_0100_0000_01b3);
        for node in &self.nodes {
            match &node.op {
                Op::Prelu { x, .. } => {
                    self.value(*x).data().iter().for_each(|v| mix((*v > S::zero()) as u64));
                }
                Op::ChannelPool { argmax, .. } => argmax.iter().for_each(|&a| mix(a as u64 + 2)),
                Op::WeightedAbs { x, target, .. } => {
                    self.value(*x).data().iter().zip(target).for_each(|(p, y)| mix((p > y) as u64));
                }
                Op::Bce { x, .. } => {
                    self.value(*x).data().iter().for_each(|&p| mix((clamp_prob(p) != p) as u64 + 4));
                }
                _ => {}
            }
        }
        h
    }

    /// Reverse-mode accumulation from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Grads<S>> {
        if self.value(loss).numel() != 1 {
            return Err(invalid!("backward needs a scalar, got shape {:?}", self.value(loss).shape()));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<S>>], v: Var, g: Vec<S>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, i: usize, g: &[S], grads: &mut [Option<Vec<S>>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, spec } => {
                let geom =
                    ConvGeom::conv(self.value(*x).dims4()?, self.value(*w).dims4()?, self.value(*b).numel(), spec)?;
                let (dx, dw, db) = conv::conv_backward(&geom, spec, self.value(*x).data(), self.value(*w).data(), g);
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *w, dw);
                self.accumulate(grads, *b, db);
            }
            Op::ConvTranspose { x, w, b, spec } => {
                let geom =
                    ConvGeom::tconv(self.value(*x).dims4()?, self.value(*w).dims4()?, self.value(*b).numel(), spec)?;
                let (dx, dw, db) = conv::tconv_backward(&geom, spec, self.value(*x).data(), self.value(*w).data(), g);
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *w, dw);
                self.accumulate(grads, *b, db);
            }
            Op::BatchNormTrain { x, gain, bias, xhat, inv_std } => {
                let (batch, channels, inner) = channel_view(self.value(*x))?;
                let (dx, dg, db) =
                    norm::train_backward(g, xhat, inv_std, self.value(*gain).data(), batch, channels, inner);
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gain, dg);
                self.accumulate(grads, *bias, db);
            }
            Op::BatchNormEval { x, gain, bias, scale, mean, var } => {
                let (batch, channels, inner) = channel_view(self.value(*x))?;
                let (dx, dg, db) =
                    norm::eval_backward(g, self.value(*x).data(), scale, mean, var, batch, channels, inner);
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gain, dg);
                self.accumulate(grads, *bias, db);
            }
            Op::Prelu { x, slope } => {
                let (batch, channels, inner) = channel_view(self.value(*x))?;
                let xs = self.value(*x).data();
                let a = self.value(*slope).data();
                let mut dx = vec![S::zero(); xs.len()];
                let mut da = vec![S::zero(); channels];
                for b in 0..batch {
                    for c in 0..channels {
                        let r = (b * channels + c) * inner;
                        for k in r..r + inner {
                            if xs[k] > S::zero() {
                                dx[k] = g[k];
                            } else {
                                dx[k] = a[c] * g[k];
                                da[c] += xs[k] * g[k];
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *slope, da);
            }
            Op::Gru { x, w_ih, w_hh, b_ih, b_hh, trace } => {
                let w = GruWeights::new(self.value(*w_ih), self.value(*w_hh), self.value(*b_ih), self.value(*b_hh))?;
                let gg = gru::sequence_backward(self.value(*x).data(), g, trace, &w);
                self.accumulate(grads, *x, gg.dx);
                self.accumulate(grads, *w_ih, gg.dw_ih);
                self.accumulate(grads, *w_hh, gg.dw_hh);
                self.accumulate(grads, *b_ih, gg.db_ih);
                self.accumulate(grads, *b_hh, gg.db_hh);
            }
            Op::Linear { x, w, b } => {
                let [o, inp] = self.value(*w).dims2()?;
                let xs = self.value(*x).data();
                let ws = self.value(*w).data();
                let rows = xs.len() / inp;
                let mut dx = vec![S::zero(); xs.len()];
                let mut dw = vec![S::zero(); ws.len()];
                let mut db = vec![S::zero(); o];
                for r in 0..rows {
                    let xr = &xs[r * inp..(r + 1) * inp];
                    let gr = &g[r * o..(r + 1) * o];
                    let dxr = &mut dx[r * inp..(r + 1) * inp];
                    for (k, &gk) in gr.iter().enumerate() {
                        db[k] += gk;
                        crate::kernels::axpy(gk, xr, &mut dw[k * inp..(k + 1) * inp]);
                        crate::kernels::axpy(gk, &ws[k * inp..(k + 1) * inp], dxr);
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *w, dw);
                self.accumulate(grads, *b, db);
            }
            Op::Sigmoid { x } => {
                let y = node.value.data();
                let dx = y.iter().zip(g).map(|(&s, &gv)| gv * s * (S::one() - s)).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Tanh { x, scale } => {
                let xs = self.value(*x).data();
                let dx = xs
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| {
                        let t = v.tanh();
                        gv * *scale * (S::one() - t * t)
                    })
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Mul { a, b, broadcast } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if !broadcast {
                    let da = g.iter().zip(bv).map(|(&gv, &y)| gv * y).collect();
                    let db = g.iter().zip(av).map(|(&gv, &x)| gv * x).collect();
                    self.accumulate(grads, *a, da);
                    self.accumulate(grads, *b, db);
                } else {
                    let [batch, channels, f, t] = self.value(*a).dims4()?;
                    let plane = f * t;
                    let mut da = vec![S::zero(); av.len()];
                    let mut db = vec![S::zero(); bv.len()];
                    for bi in 0..batch {
                        for c in 0..channels {
                            let r = (bi * channels + c) * plane;
                            for k in 0..plane {
                                da[r + k] = g[r + k] * bv[bi * plane + k];
                                db[bi * plane + k] += g[r + k] * av[r + k];
                            }
                        }
                    }
                    self.accumulate(grads, *a, da);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::MulConst { x, c } => {
                let dx = g.iter().zip(c).map(|(&gv, &cv)| gv * cv).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Concat { parts } => {
                let [batch, total, f, t] = node.value.dims4()?;
                let plane = f * t;
                let mut offset = 0;
                for &(p, c) in parts {
                    let mut dp = Vec::with_capacity(batch * c * plane);
                    for bi in 0..batch {
                        let start = (bi * total + offset) * plane;
                        dp.extend_from_slice(&g[start..start + c * plane]);
                    }
                    offset += c;
                    self.accumulate(grads, p, dp);
                }
            }
            Op::ChannelPool { x, argmax } => {
                let [batch, channels, f, t] = self.value(*x).dims4()?;
                let plane = f * t;
                let inv_c = S::one() / S::from_usize(channels).unwrap();
                let mut dx = vec![S::zero(); self.value(*x).numel()];
                for bi in 0..batch {
                    let ga = &g[bi * 2 * plane..bi * 2 * plane + plane];
                    let gm = &g[bi * 2 * plane + plane..(bi + 1) * 2 * plane];
                    for c in 0..channels {
                        let r = (bi * channels + c) * plane;
                        for k in 0..plane {
                            dx[r + k] += ga[k] * inv_c;
                        }
                    }
                    for k in 0..plane {
                        let c = argmax[bi * plane + k] as usize;
                        dx[(bi * channels + c) * plane + k] += gm[k];
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::ToSequence { x } => {
                let [batch, c, f, t] = self.value(*x).dims4()?;
                let width = c * f;
                let mut dx = vec![S::zero(); g.len()];
                for bi in 0..batch {
                    for cf in 0..width {
                        for ti in 0..t {
                            dx[(bi * width + cf) * t + ti] = g[(bi * t + ti) * width + cf];
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::FromSequence { x } => {
                let [batch, t, width] = self.value(*x).dims3()?;
                let mut dx = vec![S::zero(); g.len()];
                for bi in 0..batch {
                    for cf in 0..width {
                        for ti in 0..t {
                            dx[(bi * t + ti) * width + cf] = g[(bi * width + cf) * t + ti];
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Reshape { x } => self.accumulate(grads, *x, g.to_vec()),
            Op::Istdct { x, plan, env, len } => {
                let [batch, _, bins, frames] = self.value(*x).dims4()?;
                let lead = plan.lead();
                let hop = plan.hop();
                let padded = env.len();
                let mut dx = vec![S::zero(); batch * bins * frames];
                let mut buf = vec![S::zero(); padded];
                let mut seg = vec![S::zero(); bins];
                let mut col = vec![S::zero(); bins];
                for bi in 0..batch {
                    buf.fill(S::zero());
                    for n in 0..*len {
                        let e = env[n + lead];
                        let scale = if e < S::lit(1e-8) { S::one() } else { S::one() / e };
                        buf[n + lead] = g[bi * len + n] * scale;
                    }
                    for t in 0..frames {
                        for (k, s) in seg.iter_mut().enumerate() {
                            *s = buf[t * hop + k] * plan.window()[k];
                        }
                        plan.dct().forward(&seg, &mut col)?;
                        for (f, &c) in col.iter().enumerate() {
                            dx[(bi * bins + f) * frames + t] = c;
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::WeightedAbs { x, target, weights, norm } => {
                let gv = g[0] / *norm;
                let dx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(target)
                    .zip(weights)
                    .map(|((&p, &y), &w)| {
                        let d = p - y;
                        let sign = if d > S::zero() {
                            S::one()
                        } else if d < S::zero() {
                            -S::one()
                        } else {
                            S::zero()
                        };
                        gv * w * sign
                    })
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::WeightedSq { x, target, weights, norm } => {
                let gv = g[0] / *norm;
                let two = S::lit(2.0);
                let dx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(target)
                    .zip(weights)
                    .map(|((&p, &y), &w)| gv * w * two * (p - y))
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Bce { x, target, weights, norm } => {
                let gv = g[0] / *norm;
                let lo = S::lit(BCE_CLAMP);
                let hi = S::one() - lo;
                let dx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(target)
                    .zip(weights)
                    .map(
                        |((&p, &y), &w)| {
                            if p < lo || p > hi {
                                S::zero()
                            } else {
                                gv * w * ((p - y) / (p * (S::one() - p)))
                            }
                        },
                    )
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::DotConst { x, c } => {
                let dx = c.iter().map(|&cv| g[0] * cv).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::WeightedSum { terms } => {
                for &(v, c) in terms {
                    self.accumulate(grads, v, vec![g[0] * c]);
                }
            }
        }
        Ok(())
    }
}

/// `y = b + W x` for one row; shared with the streaming path.
#[inline]
pub fn linear_row<S: Scalar>(w: &[S], b: &[S], x: &[S], out: &mut [S]) {
    let i = x.len();
    for (k, o) in out.iter_mut().enumerate() {
        *o = b[k] + dot(&w[k * i..(k + 1) * i], x);
    }
}

/// Channel mean and max over `planes`; shared with the streaming path.
#[inline]
pub fn pool_planes<S: Scalar>(planes: &[&[S]], avg: &mut [S], max: &mut [S], argmax: &mut [u32]) {
    let inv_c = S::one() / S::from_usize(planes.len()).unwrap();
    avg.fill(S::zero());
    max.copy_from_slice(planes[0]);
    argmax.fill(0);
    for (c, p) in planes.iter().enumerate() {
        for k in 0..avg.len() {
            avg[k] += p[k];
            if c > 0 && p[k] > max[k] {
                max[k] = p[k];
                argmax[k] = c as u32;
            }
        }
    }
    for a in avg.iter_mut() {
        *a *= inv_c;
    }
}

#[inline]
pub(crate) fn clamp_prob<S: Scalar>(p: S) -> S {
    let lo = S::lit(BCE_CLAMP);
    p.max(lo).min(S::one() - lo)
}

fn map<S: Scalar>(t: &Tensor<S>, f: impl Fn(S) -> S) -> Tensor<S> {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect()).expect("same shape")
}

/// Views `[B, C, ...]` as `(B, C, inner)`.
fn channel_view<S: Scalar>(t: &Tensor<S>) -> Result<(usize, usize, usize)> {
    let sh = t.shape();
    if sh.len() < 2 {
        return Err(invalid!("expected at least [batch, channels], got {sh:?}"));
    }
    Ok((sh[0], sh[1], sh[2..].iter().product()))
}

fn op_name<S>(op: &Op<S>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Conv { .. } => "conv2d",
        Op::ConvTranspose { .. } => "conv_transpose2d",
        Op::BatchNormTrain { .. } | Op::BatchNormEval { .. } => "batch_norm",
        Op::Prelu { .. } => "prelu",
        Op::Gru { .. } => "gru",
        Op::Linear { .. } => "linear",
        Op::Sigmoid { .. } => "sigmoid",
        Op::Tanh { .. } => "tanh",
        Op::Mul { .. } => "mul",
        Op::Add { .. } => "add",
        Op::MulConst { .. } => "mul_const",
        Op::Concat { .. } => "concat",
        Op::ChannelPool { .. } => "channel_pool",
        Op::ToSequence { .. } => "to_sequence",
        Op::FromSequence { .. } => "from_sequence",
        Op::Reshape { .. } => "reshape",
        Op::Istdct { .. } => "istdct",
        Op::WeightedAbs { .. } => "l1",
        Op::WeightedSq { .. } => "mse",
        Op::Bce { .. } => "bce",
        Op::DotConst { .. } => "dot",
        Op::WeightedSum { .. } => "weighted_sum",
    }
}
