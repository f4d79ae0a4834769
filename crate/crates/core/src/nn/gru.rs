//! Single-direction GRU with gates ordered `r, z, n`:
//!
//! ```text
//! r = σ(W_ir x + b_ir + W_hr h + b_hr)
//! z = σ(W_iz x + b_iz + W_hz h + b_hz)
//! n = tanh(W_in x + b_in + r ∘ (W_hn h + b_hn))
//! h' = (1 - z) ∘ n + z ∘ h
//! ```

use crate::error::{invalid, Result};
use crate::kernels::{axpy, dot, sigmoid};
use crate::nn::Tensor;
use crate::scalar::Scalar;

/// Borrowed GRU weights: `w_ih [3H, I]`, `w_hh [3H, H]`, `b_ih [3H]`, `b_hh [3H]`.
#[derive(Debug, Clone, Copy)]
pub struct GruWeights<'a, S> {
    pub w_ih: &'a [S],
    pub w_hh: &'a [S],
    pub b_ih: &'a [S],
    pub b_hh: &'a [S],
    pub input: usize,
    pub hidden: usize,
}

impl<'a, S: Scalar> GruWeights<'a, S> {
    pub fn new(w_ih: &'a Tensor<S>, w_hh: &'a Tensor<S>, b_ih: &'a Tensor<S>, b_hh: &'a Tensor<S>) -> Result<Self> {
        let [g3, input] = w_ih.dims2()?;
        let [g3h, hidden] = w_hh.dims2()?;
        if g3 != 3 * hidden || g3h != g3 || b_ih.numel() != g3 || b_hh.numel() != g3 {
            return Err(invalid!(
                "inconsistent GRU weights: w_ih {:?}, w_hh {:?}, b_ih {:?}, b_hh {:?}",
                w_ih.shape(),
                w_hh.shape(),
                b_ih.shape(),
                b_hh.shape()
            ));
        }
        Ok(Self { w_ih: w_ih.data(), w_hh: w_hh.data(), b_ih: b_ih.data(), b_hh: b_hh.data(), input, hidden })
    }

    #[inline]
    fn row_ih(&self, r: usize) -> &[S] {
        &self.w_ih[r * self.input..(r + 1) * self.input]
    }

    #[inline]
    fn row_hh(&self, r: usize) -> &[S] {
        &self.w_hh[r * self.hidden..(r + 1) * self.hidden]
    }
}

/// Gate width saved per step: `r, z, n` and `W_hn h + b_hn`.
pub(crate) const TRACE: usize = 4;

/// Advances one step. `gates` receives `[r | z | n | W_hn h + b_hn]` (4H).
pub fn gru_cell<S: Scalar>(w: &GruWeights<'_, S>, x: &[S], h: &[S], gates: &mut [S], h_out: &mut [S]) {
    let hd = w.hidden;
    for j in 0..hd {
        let r = sigmoid((w.b_ih[j] + dot(w.row_ih(j), x)) + (w.b_hh[j] + dot(w.row_hh(j), h)));
        let z = sigmoid((w.b_ih[hd + j] + dot(w.row_ih(hd + j), x)) + (w.b_hh[hd + j] + dot(w.row_hh(hd + j), h)));
        let hn = w.b_hh[2 * hd + j] + dot(w.row_hh(2 * hd + j), h);
        let n = ((w.b_ih[2 * hd + j] + dot(w.row_ih(2 * hd + j), x)) + r * hn).tanh();
        gates[j] = r;
        gates[hd + j] = z;
        gates[2 * hd + j] = n;
        gates[3 * hd + j] = hn;
        h_out[j] = (S::one() - z) * n + z * h[j];
    }
}

/// Runs the GRU over `x [T, I]` from `h0`, returning all hidden states
/// `[T, H]` and the final state for continuing the sequence later.
pub fn gru_forward<S: Scalar>(x: &Tensor<S>, h0: &[S], w: &GruWeights<'_, S>) -> Result<(Tensor<S>, Vec<S>)> {
    let [steps, input] = x.dims2()?;
    if input != w.input || h0.len() != w.hidden {
        return Err(invalid!("GRU expects input {} and hidden {}, got {input} and {}", w.input, w.hidden, h0.len()));
    }
    let hd = w.hidden;
    let mut out = vec![S::zero(); steps * hd];
    let mut gates = vec![S::zero(); TRACE * hd];
    let mut h = h0.to_vec();
    let mut next = vec![S::zero(); hd];
    for t in 0..steps {
        gru_cell(w, &x.data()[t * input..(t + 1) * input], &h, &mut gates, &mut next);
        std::mem::swap(&mut h, &mut next);
        out[t * hd..(t + 1) * hd].copy_from_slice(&h);
    }
    Ok((Tensor::new(vec![steps, hd], out)?, h))
}

/// Saved activations of a batched sequence run.
#[derive(Debug, Clone)]
pub(crate) struct GruTrace<S> {
    pub batch: usize,
    pub steps: usize,
    /// `[B, T, 4H]`
    pub gates: Vec<S>,
    /// `[B, T + 1, H]`, entry 0 is the initial state.
    pub states: Vec<S>,
}

/// Batched forward over `x [B, T, I]` starting from zero state.
pub(crate) fn sequence_forward<S: Scalar>(
    x: &[S],
    batch: usize,
    steps: usize,
    w: &GruWeights<'_, S>,
) -> (Vec<S>, GruTrace<S>) {
    let (hd, input) = (w.hidden, w.input);
    let mut out = vec![S::zero(); batch * steps * hd];
    let mut gates = vec![S::zero(); batch * steps * TRACE * hd];
    let mut states = vec![S::zero(); batch * (steps + 1) * hd];
    for b in 0..batch {
        for t in 0..steps {
            let xs = &x[(b * steps + t) * input..][..input];
            let (prev, rest) = states[(b * (steps + 1) + t) * hd..].split_at_mut(hd);
            let g = &mut gates[(b * steps + t) * TRACE * hd..][..TRACE * hd];
            gru_cell(w, xs, prev, g, &mut rest[..hd]);
            out[(b * steps + t) * hd..][..hd].copy_from_slice(&rest[..hd]);
        }
    }
    (out, GruTrace { batch, steps, gates, states })
}

pub(crate) struct GruGrads<S> {
    pub dx: Vec<S>,
    pub dw_ih: Vec<S>,
    pub dw_hh: Vec<S>,
    pub db_ih: Vec<S>,
    pub db_hh: Vec<S>,
}

/// Backpropagation through time for [`sequence_forward`].
pub(crate) fn sequence_backward<S: Scalar>(
    x: &[S],
    gout: &[S],
    trace: &GruTrace<S>,
    w: &GruWeights<'_, S>,
) -> GruGrads<S> {
    let (hd, input) = (w.hidden, w.input);
    let (batch, steps) = (trace.batch, trace.steps);
    let mut dx = vec![S::zero(); x.len()];
    let mut dw_ih = vec![S::zero(); w.w_ih.len()];
    let mut dw_hh = vec![S::zero(); w.w_hh.len()];
    let mut db_ih = vec![S::zero(); w.b_ih.len()];
    let mut db_hh = vec![S::zero(); w.b_hh.len()];
    let mut dh_next = vec![S::zero(); hd];
    let mut dgi = vec![S::zero(); 3 * hd];
    let mut dgh = vec![S::zero(); 3 * hd];
    for b in 0..batch {
        dh_next.fill(S::zero());
        for t in (0..steps).rev() {
            let g = &trace.gates[(b * steps + t) * TRACE * hd..][..TRACE * hd];
            let h_prev = &trace.states[(b * (steps + 1) + t) * hd..][..hd];
            let xs = &x[(b * steps + t) * input..][..input];
            let go = &gout[(b * steps + t) * hd..][..hd];
            for j in 0..hd {
                let (r, z, n, hn) = (g[j], g[hd + j], g[2 * hd + j], g[3 * hd + j]);
                let dh = go[j] + dh_next[j];
                let dn = dh * (S::one() - z);
                let dz = dh * (h_prev[j] - n);
                let dn_pre = dn * (S::one() - n * n);
                let dr = dn_pre * hn;
                let dr_pre = dr * r * (S::one() - r);
                let dz_pre = dz * z * (S::one() - z);
                dgi[j] = dr_pre;
                dgi[hd + j] = dz_pre;
                dgi[2 * hd + j] = dn_pre;
                dgh[j] = dr_pre;
                dgh[hd + j] = dz_pre;
                dgh[2 * hd + j] = dn_pre * r;
                dh_next[j] = dh * z;
            }
            let dxs = &mut dx[(b * steps + t) * input..][..input];
            for row in 0..3 * hd {
                db_ih[row] += dgi[row];
                db_hh[row] += dgh[row];
                axpy(dgi[row], xs, &mut dw_ih[row * input..(row + 1) * input]);
                axpy(dgh[row], h_prev, &mut dw_hh[row * hd..(row + 1) * hd]);
                axpy(dgi[row], w.row_ih(row), dxs);
                axpy(dgh[row], w.row_hh(row), &mut dh_next);
            }
        }
    }
    GruGrads { dx, dw_ih, dw_hh, db_ih, db_hh }
}
