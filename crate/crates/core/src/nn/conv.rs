//! Causal 2-D convolution and transposed convolution over `[B, C, F, T]`.
//!
//! Time is padded with `k_T - 1` zeros at the start only (convolution) or
//! the trailing `k_T - 1` output frames are dropped (transposed), so output
//! frame `t` depends on input frames `<= t`. Frequency uses symmetric
//! padding. Every output element accumulates its bias first and then its
//! taps in `(c_in, k_F, k_T)` order; the per-frame kernels used for
//! streaming follow the same order, which keeps the two paths bit-identical.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::kernels::{axpy, dot};
use crate::scalar::Scalar;

/// Frequency stride and padding of a causal convolution (time stride is 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub stride_f: usize,
    pub pad_f: usize,
}

/// Frequency stride, padding and output padding of a causal transposed convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TConvSpec {
    pub stride_f: usize,
    pub pad_f: usize,
    pub out_pad_f: usize,
}

impl ConvSpec {
    pub fn out_freq(&self, f_in: usize, k_f: usize) -> Result<usize> {
        if self.stride_f == 0 || f_in + 2 * self.pad_f < k_f {
            return Err(invalid!("kernel {k_f} does not fit {f_in} bins with padding {}", self.pad_f));
        }
        Ok((f_in + 2 * self.pad_f - k_f) / self.stride_f + 1)
    }
}

impl TConvSpec {
    pub fn out_freq(&self, f_in: usize, k_f: usize) -> Result<usize> {
        let full = (f_in.max(1) - 1) * self.stride_f + k_f + self.out_pad_f;
        if f_in == 0 || self.stride_f == 0 || full < 2 * self.pad_f + 1 {
            return Err(invalid!("transposed kernel {k_f} incompatible with {f_in} bins"));
        }
        Ok(full - 2 * self.pad_f)
    }
}

pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub f_in: usize,
    pub frames: usize,
    pub c_out: usize,
    pub f_out: usize,
    pub k_f: usize,
    pub k_t: usize,
}

impl ConvGeom {
    pub fn conv(x: [usize; 4], w: [usize; 4], bias: usize, spec: &ConvSpec) -> Result<Self> {
        let [batch, c_in, f_in, frames] = x;
        let [c_out, w_in, k_f, k_t] = w;
        if w_in != c_in || bias != c_out || k_t == 0 || k_f == 0 {
            return Err(invalid!("conv weight {w:?} / bias {bias} incompatible with input {x:?}"));
        }
        let f_out = spec.out_freq(f_in, k_f)?;
        Ok(Self { batch, c_in, f_in, frames, c_out, f_out, k_f, k_t })
    }

    pub fn tconv(x: [usize; 4], w: [usize; 4], bias: usize, spec: &TConvSpec) -> Result<Self> {
        let [batch, c_in, f_in, frames] = x;
        let [w_in, c_out, k_f, k_t] = w;
        if w_in != c_in || bias != c_out || k_t == 0 || k_f == 0 {
            return Err(invalid!("transposed conv weight {w:?} / bias {bias} incompatible with input {x:?}"));
        }
        let f_out = spec.out_freq(f_in, k_f)?;
        Ok(Self { batch, c_in, f_in, frames, c_out, f_out, k_f, k_t })
    }
}

#[inline]
fn src_bin(out_bin: usize, k: usize, stride: usize, pad: usize, len: usize) -> Option<usize> {
    let i = (out_bin * stride + k) as isize - pad as isize;
    (i >= 0 && (i as usize) < len).then_some(i as usize)
}

#[inline]
fn dst_bin(in_bin: usize, k: usize, stride: usize, pad: usize, len: usize) -> Option<usize> {
    src_bin(in_bin, k, stride, pad, len)
}

/// The `i < n` for which `i * stride + k - pad` lands in `0..len`, which is
/// where [`src_bin`] returns `Some`.
#[inline]
fn valid_bins(n: usize, k: usize, stride: usize, pad: usize, len: usize) -> std::ops::Range<usize> {
    let lo = pad.saturating_sub(k).div_ceil(stride);
    let hi = (len + pad).saturating_sub(k).div_ceil(stride).min(n);
    lo..hi.max(lo)
}

pub(crate) fn conv_forward<S: Scalar>(g: &ConvGeom, spec: &ConvSpec, x: &[S], w: &[S], b: &[S]) -> Vec<S> {
    let t_n = g.frames;
    let mut out = vec![S::zero(); g.batch * g.c_out * g.f_out * t_n];
    for bi in 0..g.batch {
        for co in 0..g.c_out {
            let ob = &mut out[(bi * g.c_out + co) * g.f_out * t_n..][..g.f_out * t_n];
            ob.fill(b[co]);
            for ci in 0..g.c_in {
                let xb = &x[(bi * g.c_in + ci) * g.f_in * t_n..][..g.f_in * t_n];
                for kf in 0..g.k_f {
                    for kt in 0..g.k_t {
                        let wv = w[((co * g.c_in + ci) * g.k_f + kf) * g.k_t + kt];
                        let shift = g.k_t - 1 - kt;
                        if shift >= t_n {
                            continue;
                        }
                        for fo in 0..g.f_out {
                            let Some(fi) = src_bin(fo, kf, spec.stride_f, spec.pad_f, g.f_in) else {
                                continue;
                            };
                            let orow = &mut ob[fo * t_n + shift..fo * t_n + t_n];
                            let irow = &xb[fi * t_n..fi * t_n + t_n - shift];
                            axpy(wv, irow, orow);
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(dx, dw, db)` for the causal convolution.
pub(crate) fn conv_backward<S: Scalar>(
    g: &ConvGeom,
    spec: &ConvSpec,
    x: &[S],
    w: &[S],
    gout: &[S],
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let t_n = g.frames;
    let mut dx = vec![S::zero(); x.len()];
    let mut dw = vec![S::zero(); w.len()];
    let mut db = vec![S::zero(); g.c_out];
    for bi in 0..g.batch {
        for co in 0..g.c_out {
            let gb = &gout[(bi * g.c_out + co) * g.f_out * t_n..][..g.f_out * t_n];
            db[co] += gb.iter().copied().sum::<S>();
            for ci in 0..g.c_in {
                let base = (bi * g.c_in + ci) * g.f_in * t_n;
                for kf in 0..g.k_f {
                    for kt in 0..g.k_t {
                        let widx = ((co * g.c_in + ci) * g.k_f + kf) * g.k_t + kt;
                        let wv = w[widx];
                        let shift = g.k_t - 1 - kt;
                        if shift >= t_n {
                            continue;
                        }
                        let mut acc = S::zero();
                        for fo in 0..g.f_out {
                            let Some(fi) = src_bin(fo, kf, spec.stride_f, spec.pad_f, g.f_in) else {
                                continue;
                            };
                            let grow = &gb[fo * t_n + shift..fo * t_n + t_n];
                            let xrow = &x[base + fi * t_n..base + fi * t_n + t_n - shift];
                            acc += dot(grow, xrow);
                            let dxrow = &mut dx[base + fi * t_n..base + fi * t_n + t_n - shift];
                            axpy(wv, grow, dxrow);
                        }
                        dw[widx] += acc;
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

pub(crate) fn tconv_forward<S: Scalar>(g: &ConvGeom, spec: &TConvSpec, x: &[S], w: &[S], b: &[S]) -> Vec<S> {
    let t_n = g.frames;
    let mut out = vec![S::zero(); g.batch * g.c_out * g.f_out * t_n];
    for bi in 0..g.batch {
        for co in 0..g.c_out {
            let ob = &mut out[(bi * g.c_out + co) * g.f_out * t_n..][..g.f_out * t_n];
            ob.fill(b[co]);
            for ci in 0..g.c_in {
                let xb = &x[(bi * g.c_in + ci) * g.f_in * t_n..][..g.f_in * t_n];
                for kf in 0..g.k_f {
                    for kt in 0..g.k_t {
                        let wv = w[((ci * g.c_out + co) * g.k_f + kf) * g.k_t + kt];
                        if kt >= t_n {
                            continue;
                        }
                        for fi in 0..g.f_in {
                            let Some(fo) = dst_bin(fi, kf, spec.stride_f, spec.pad_f, g.f_out) else {
                                continue;
                            };
                            let orow = &mut ob[fo * t_n + kt..fo * t_n + t_n];
                            let irow = &xb[fi * t_n..fi * t_n + t_n - kt];
                            axpy(wv, irow, orow);
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn tconv_backward<S: Scalar>(
    g: &ConvGeom,
    spec: &TConvSpec,
    x: &[S],
    w: &[S],
    gout: &[S],
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let t_n = g.frames;
    let mut dx = vec![S::zero(); x.len()];
    let mut dw = vec![S::zero(); w.len()];
    let mut db = vec![S::zero(); g.c_out];
    for bi in 0..g.batch {
        for co in 0..g.c_out {
            let gb = &gout[(bi * g.c_out + co) * g.f_out * t_n..][..g.f_out * t_n];
            db[co] += gb.iter().copied().sum::<S>();
            for ci in 0..g.c_in {
                let base = (bi * g.c_in + ci) * g.f_in * t_n;
                for kf in 0..g.k_f {
                    for kt in 0..g.k_t {
                        let widx = ((ci * g.c_out + co) * g.k_f + kf) * g.k_t + kt;
                        let wv = w[widx];
                        if kt >= t_n {
                            continue;
                        }
                        let mut acc = S::zero();
                        for fi in 0..g.f_in {
                            let Some(fo) = dst_bin(fi, kf, spec.stride_f, spec.pad_f, g.f_out) else {
                                continue;
                            };
                            let grow = &gb[fo * t_n + kt..fo * t_n + t_n];
                            let xrow = &x[base + fi * t_n..base + fi * t_n + t_n - kt];
                            acc += dot(grow, xrow);
                            let dxrow = &mut dx[base + fi * t_n..base + fi * t_n + t_n - kt];
                            axpy(wv, grow, dxrow);
                        }
                        dw[widx] += acc;
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

/// One output frame of a causal convolution.
///
/// `frames[kt]` holds the `[C_in, F_in]` input frame aligned with kernel tap
/// `kt` (the last tap is the current frame), or `None` inside the causal
/// zero padding. Writes `[C_out, F_out]` into `out`.
#[allow(clippy::too_many_arguments)]
pub fn conv_frame<S: Scalar>(
    frames: &[Option<&[S]>],
    c_in: usize,
    f_in: usize,
    w: &[S],
    w_shape: [usize; 4],
    b: &[S],
    spec: &ConvSpec,
    out: &mut [S],
) {
    let [c_out, _, k_f, k_t] = w_shape;
    let f_out = out.len() / c_out;
    for co in 0..c_out {
        let ob = &mut out[co * f_out..(co + 1) * f_out];
        ob.fill(b[co]);
        for ci in 0..c_in {
            for kf in 0..k_f {
                for (kt, frame) in frames.iter().enumerate().take(k_t) {
                    let Some(xf) = frame else { continue };
                    let wv = w[((co * c_in + ci) * k_f + kf) * k_t + kt];
                    let xr = &xf[ci * f_in..(ci + 1) * f_in];
                    let bins = valid_bins(f_out, kf, spec.stride_f, spec.pad_f, f_in);
                    if bins.is_empty() {
                        continue;
                    }
                    let first = bins.start * spec.stride_f + kf - spec.pad_f;
                    for (o, &xv) in ob[bins].iter_mut().zip(xr[first..].iter().step_by(spec.stride_f)) {
                        *o += wv * xv;
                    }
                }
            }
        }
    }
}

/// One output frame of a causal transposed convolution.
///
/// `frames[kt]` holds the input frame `kt` steps in the past (`frames[0]`
/// is the current frame), or `None` before the stream start.
#[allow(clippy::too_many_arguments)]
pub fn tconv_frame<S: Scalar>(
    frames: &[Option<&[S]>],
    c_in: usize,
    f_in: usize,
    w: &[S],
    w_shape: [usize; 4],
    b: &[S],
    spec: &TConvSpec,
    out: &mut [S],
) {
    let [_, c_out, k_f, k_t] = w_shape;
    let f_out = out.len() / c_out;
    for co in 0..c_out {
        let ob = &mut out[co * f_out..(co + 1) * f_out];
        ob.fill(b[co]);
        for ci in 0..c_in {
            for kf in 0..k_f {
                for (kt, frame) in frames.iter().enumerate().take(k_t) {
                    let Some(xf) = frame else { continue };
                    let wv = w[((ci * c_out + co) * k_f + kf) * k_t + kt];
                    let xr = &xf[ci * f_in..(ci + 1) * f_in];
                    let bins = valid_bins(f_in, kf, spec.stride_f, spec.pad_f, f_out);
                    if bins.is_empty() {
                        continue;
                    }
                    let first = bins.start * spec.stride_f + kf - spec.pad_f;
                    for (o, &xv) in ob[first..].iter_mut().step_by(spec.stride_f).zip(&xr[bins]) {
                        *o += wv * xv;
                    }
                }
            }
        }
    }
}

/// Convolution weights repacked as `[C_in, k_F, k_T, C_out]`, so that one
/// input value updates every output channel with a single `axpy`. Layers
/// with many output channels run several times faster per frame this way.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMajor<S> {
    data: Vec<S>,
    c_in: usize,
    c_out: usize,
    k_f: usize,
    k_t: usize,
}

impl<S: Scalar> ChannelMajor<S> {
    /// Repacks a `[C_out, C_in, k_F, k_T]` convolution weight.
    pub fn conv(w: &[S], shape: [usize; 4]) -> Self {
        let [c_out, c_in, k_f, k_t] = shape;
        Self::pack(w, c_in, c_out, k_f, k_t, |ci, co| (co * c_in + ci) * k_f * k_t)
    }

    /// Repacks a `[C_in, C_out, k_F, k_T]` transposed-convolution weight.
    pub fn transposed(w: &[S], shape: [usize; 4]) -> Self {
        let [c_in, c_out, k_f, k_t] = shape;
        Self::pack(w, c_in, c_out, k_f, k_t, |ci, co| (ci * c_out + co) * k_f * k_t)
    }

    fn pack(w: &[S], c_in: usize, c_out: usize, k_f: usize, k_t: usize, base: impl Fn(usize, usize) -> usize) -> Self {
        let mut data = vec![S::zero(); w.len()];
        for ci in 0..c_in {
            for co in 0..c_out {
                for kf in 0..k_f {
                    for kt in 0..k_t {
                        data[((ci * k_f + kf) * k_t + kt) * c_out + co] = w[base(ci, co) + kf * k_t + kt];
                    }
                }
            }
        }
        Self { data, c_in, c_out, k_f, k_t }
    }

    fn taps(&self, ci: usize, kf: usize, kt: usize) -> &[S] {
        let at = ((ci * self.k_f + kf) * self.k_t + kt) * self.c_out;
        &self.data[at..at + self.c_out]
    }
}

/// Copies `[F, C]` scratch into the `[C, F]` output layout.
fn to_channel_planes<S: Scalar>(scratch: &[S], c: usize, out: &mut [S]) {
    let f = out.len() / c;
    for (fo, row) in scratch.chunks_exact(c).enumerate().take(f) {
        for (co, &v) in row.iter().enumerate() {
            out[co * f + fo] = v;
        }
    }
}

/// [`conv_frame`] with channel-major weights. `scratch` must hold
/// `out.len()` values. Results are bit-identical to [`conv_frame`].
pub fn conv_frame_packed<S: Scalar>(
    frames: &[Option<&[S]>],
    f_in: usize,
    w: &ChannelMajor<S>,
    b: &[S],
    spec: &ConvSpec,
    scratch: &mut [S],
    out: &mut [S],
) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: AVX2 support was just checked. Without FMA the wider
        // vectors round exactly like the baseline build.
        unsafe { conv_frame_packed_avx2(frames, f_in, w, b, spec, scratch, out) };
        return;
    }
    conv_frame_packed_impl(frames, f_in, w, b, spec, scratch, out);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn conv_frame_packed_avx2<S: Scalar>(
    frames: &[Option<&[S]>],
    f_in: usize,
    w: &ChannelMajor<S>,
    b: &[S],
    spec: &ConvSpec,
    scratch: &mut [S],
    out: &mut [S],
) {
    conv_frame_packed_impl(frames, f_in, w, b, spec, scratch, out);
}

#[inline(always)]
fn conv_frame_packed_impl<S: Scalar>(
    frames: &[Option<&[S]>],
    f_in: usize,
    w: &ChannelMajor<S>,
    b: &[S],
    spec: &ConvSpec,
    scratch: &mut [S],
    out: &mut [S],
) {
    let c_out = w.c_out;
    let f_out = out.len() / c_out;
    for row in scratch.chunks_exact_mut(c_out) {
        row.copy_from_slice(&b[..c_out]);
    }
    for ci in 0..w.c_in {
        for kf in 0..w.k_f {
            let bins = valid_bins(f_out, kf, spec.stride_f, spec.pad_f, f_in);
            for (kt, frame) in frames.iter().enumerate().take(w.k_t) {
                let Some(xf) = frame else { continue };
                let taps = w.taps(ci, kf, kt);
                let xr = &xf[ci * f_in..(ci + 1) * f_in];
                for fo in bins.clone() {
                    let xv = xr[fo * spec.stride_f + kf - spec.pad_f];
                    axpy(xv, taps, &mut scratch[fo * c_out..(fo + 1) * c_out]);
                }
            }
        }
    }
    to_channel_planes(scratch, c_out, out);
}

/// [`tconv_frame`] with channel-major weights. `scratch` must hold
/// `out.len()` values. Results are bit-identical to [`tconv_frame`].
pub fn tconv_frame_packed<S: Scalar>(
    frames: &[Option<&[S]>],
    f_in: usize,
    w: &ChannelMajor<S>,
    b: &[S],
    spec: &TConvSpec,
    scratch: &mut [S],
    out: &mut [S],
) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: AVX2 support was just checked. Without FMA the wider
        // vectors round exactly like the baseline build.
        unsafe { tconv_frame_packed_avx2(frames, f_in, w, b, spec, scratch, out) };
        return;
    }
    tconv_frame_packed_impl(frames, f_in, w, b, spec, scratch, out);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn tconv_frame_packed_avx2<S: Scalar>(
    frames: &[Option<&[S]>],
    f_in: usize,
    w: &ChannelMajor<S>,
    b: &[S],
    spec: &TConvSpec,
    scratch: &mut [S],
    out: &mut [S],
) {
    tconv_frame_packed_impl(frames, f_in, w, b, spec, scratch, out);
}

#[inline(always)]
fn tconv_frame_packed_impl<S: Scalar>(
    frames: &[Option<&[S]>],
    f_in: usize,
    w: &ChannelMajor<S>,
    b: &[S],
    spec: &TConvSpec,
    scratch: &mut [S],
    out: &mut [S],
) {
    let c_out = w.c_out;
    let f_out = out.len() / c_out;
    for row in scratch.chunks_exact_mut(c_out) {
        row.copy_from_slice(&b[..c_out]);
    }
    for ci in 0..w.c_in {
        for kf in 0..w.k_f {
            let bins = valid_bins(f_in, kf, spec.stride_f, spec.pad_f, f_out);
            for (kt, frame) in frames.iter().enumerate().take(w.k_t) {
                let Some(xf) = frame else { continue };
                let taps = w.taps(ci, kf, kt);
                let xr = &xf[ci * f_in..(ci + 1) * f_in];
                for fi in bins.clone() {
                    let fo = fi * spec.stride_f + kf - spec.pad_f;
                    axpy(xr[fi], taps, &mut scratch[fo * c_out..(fo + 1) * c_out]);
                }
            }
        }
    }
    to_channel_planes(scratch, c_out, out);
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn valid_bins_matches_src_bin(n in 0usize..40, k in 0usize..7, stride in 1usize..4, pad in 0usize..5, len in 0usize..40) {
            let expected: Vec<usize> = (0..n).filter(|&i| src_bin(i, k, stride, pad, len).is_some()).collect();
            let got: Vec<usize> = valid_bins(n, k, stride, pad, len).collect();
            prop_assert_eq!(got, expected);
        }
    }
}
