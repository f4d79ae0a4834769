//! Stateful chunked enhancement.
//!
//! A session consumes samples in arbitrary chunk sizes and emits each
//! enhanced sample as soon as every window overlapping it has been
//! processed. The per-frame network replays the offline computation with the
//! same kernels in the same accumulation order, so the output matches
//! [`ModelParams::enhance`] on the concatenated input.

mod bench;
mod frame_net;

use std::sync::Arc;

pub use bench::{benchmark_rtf, HardwareInfo, RtfReport};

use crate::dsp::{normalize, Stdct, SAMPLE_RATE};
use crate::error::{invalid, Error, Result};
use crate::model::ModelParams;
use crate::scalar::Scalar;
use frame_net::FrameNet;

/// Samples and per-frame VAD scores released by one call.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StreamOutput {
    pub samples: Vec<f64>,
    /// One score per analysis frame completed during the call.
    pub vad: Vec<f64>,
}

impl StreamOutput {
    fn append(&mut self, other: StreamOutput) {
        self.samples.extend(other.samples);
        self.vad.extend(other.vad);
    }
}

/// Causal state of one enhancement session.
///
/// Holds the analysis window, the per-layer frame histories and recurrent
/// states of the network, and the overlap-add accumulators. Its size does
/// not depend on how much audio has been processed.
#[derive(Debug, Clone)]
pub struct StreamState<S: Scalar> {
    params: Arc<ModelParams<S>>,
    plan: Stdct<f64>,
    net: FrameNet<S>,
    /// Last `win_len` samples of the zero-led input.
    window: Vec<f64>,
    /// Input samples not yet forming a full hop.
    pending: Vec<f64>,
    /// Overlap-add sums for padded positions `[next_pos, next_pos + win_len)`.
    acc: Vec<f64>,
    env: Vec<f64>,
    /// Padded position of `acc[0]`.
    next_pos: usize,
    ingested: usize,
    emitted: usize,
    closed: bool,
    scratch: FrameScratch,
}

#[derive(Debug, Clone)]
struct FrameScratch {
    windowed: Vec<f64>,
    coeffs: Vec<f64>,
    mask: Vec<f64>,
    time: Vec<f64>,
}

/// Opens a session whose state matches the implicit zero padding of the
/// offline path.
pub fn open_session<S: Scalar>(params: Arc<ModelParams<S>>) -> Result<StreamState<S>> {
    StreamState::new(params)
}

impl<S: Scalar> StreamState<S> {
    pub fn new(params: Arc<ModelParams<S>>) -> Result<Self> {
        params.config.validate()?;
        let plan = Stdct::<f64>::new(&params.config.frame_config()?)?;
        let net = FrameNet::new(&params)?;
        let n = plan.win_len();
        Ok(Self {
            plan,
            net,
            window: vec![0.0; n],
            pending: Vec::with_capacity(params.config.hop),
            acc: vec![0.0; n],
            env: vec![0.0; n],
            next_pos: 0,
            ingested: 0,
            emitted: 0,
            closed: false,
            scratch: FrameScratch {
                windowed: vec![0.0; n],
                coeffs: vec![0.0; n],
                mask: vec![0.0; n],
                time: vec![0.0; n],
            },
            params,
        })
    }

    pub fn params(&self) -> &Arc<ModelParams<S>> {
        &self.params
    }

    pub fn ingested(&self) -> usize {
        self.ingested
    }

    pub fn emitted(&self) -> usize {
        self.emitted
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    /// Delay in samples between the first input and the first output.
    pub fn latency(&self) -> usize {
        self.plan.win_len()
    }

    /// Number of scalars held as state. Constant for a given config.
    pub fn state_len(&self) -> usize {
        self.window.len() + self.pending.capacity() + self.acc.len() + self.env.len() + self.net.state_len()
    }

    /// Feeds samples at the model rate and returns everything that became final.
    pub fn push(&mut self, chunk: &[f64]) -> Result<StreamOutput> {
        self.push_at(chunk, SAMPLE_RATE)
    }

    /// Like [`StreamState::push`] but checks the rate the chunk was recorded at.
    pub fn push_at(&mut self, chunk: &[f64], sample_rate: u32) -> Result<StreamOutput> {
        if sample_rate != SAMPLE_RATE {
            return Err(Error::UnsupportedRate { rate: sample_rate, expected: SAMPLE_RATE });
        }
        if self.closed {
            return Err(invalid!("session already flushed"));
        }
        if let Some(i) = chunk.iter().position(|v| !v.is_finite()) {
            return Err(invalid!("non-finite sample at chunk index {i}"));
        }
        let hop = self.plan.hop();
        let mut out = StreamOutput::default();
        let mut rest = chunk;
        while !rest.is_empty() {
            let take = (hop - self.pending.len()).min(rest.len());
            self.pending.extend_from_slice(&rest[..take]);
            self.ingested += take;
            rest = &rest[take..];
            if self.pending.len() == hop {
                out.append(self.process_hop()?);
            }
        }
        Ok(out)
    }

    /// Completes the last partial frame, drains the overlap-add tail and
    /// closes the session. Afterwards `emitted() == ingested()`.
    pub fn flush(&mut self) -> Result<StreamOutput> {
        if self.closed {
            return Err(invalid!("session already flushed"));
        }
        self.closed = true;
        let mut out = StreamOutput::default();
        if !self.pending.is_empty() {
            self.pending.resize(self.plan.hop(), 0.0);
            out.append(self.process_hop()?);
        }
        out.samples.extend(self.drain(self.acc.len()));
        Ok(out)
    }

    /// Analyzes, masks and overlap-adds one frame, then releases one hop.
    fn process_hop(&mut self) -> Result<StreamOutput> {
        let n = self.plan.win_len();
        let hop = self.plan.hop();
        self.window.copy_within(hop.., 0);
        self.window[n - hop..].copy_from_slice(&self.pending);
        self.pending.clear();

        let sc = &mut self.scratch;
        self.plan.analyze_frame(&self.window, &mut sc.windowed, &mut sc.coeffs)?;
        let vad = self.net.step(&sc.coeffs, &mut sc.mask)?;
        for (c, m) in sc.coeffs.iter_mut().zip(&sc.mask) {
            *c *= *m;
        }
        self.plan.synthesize_frame(&sc.coeffs, &mut sc.time)?;
        if sc.time.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("enhanced frame contains non-finite samples".into()));
        }
        let win = self.plan.window();
        for (k, &w) in win.iter().enumerate().take(n) {
            self.acc[k] += sc.time[k];
            self.env[k] += w * w;
        }
        Ok(StreamOutput { samples: self.drain(hop), vad: vec![vad] })
    }

    /// Releases the first `count` accumulator positions, dropping the
    /// leading zero padding and anything past the ingested length.
    fn drain(&mut self, count: usize) -> Vec<f64> {
        let lead = self.plan.lead();
        let end = self.ingested + lead;
        let mut out = Vec::with_capacity(count);
        for k in 0..count {
            let p = self.next_pos + k;
            if p >= lead && p < end {
                out.push(normalize(self.acc[k], self.env[k]));
            }
        }
        self.emitted += out.len();
        let n = self.acc.len();
        let count = count.min(n);
        self.acc.copy_within(count.., 0);
        self.env.copy_within(count.., 0);
        self.acc[n - count..].fill(0.0);
        self.env[n - count..].fill(0.0);
        self.next_pos += count;
        out
    }
}

/// Runs a whole signal through a fresh session in chunks of `chunk` samples.
pub fn enhance_chunked<S: Scalar>(params: Arc<ModelParams<S>>, samples: &[f64], chunk: usize) -> Result<StreamOutput> {
    if chunk == 0 {
        return Err(invalid!("chunk size must be positive"));
    }
    let mut session = open_session(params)?;
    let mut out = StreamOutput::default();
    for c in samples.chunks(chunk) {
        out.append(session.push(c)?);
    }
    out.append(session.flush()?);
    Ok(out)
}
