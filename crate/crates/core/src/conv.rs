//! Rate-1/n recursive convolutional codes and Viterbi decoding.
//!
//! The encoder is the feedback shift-register form: with state bits
//! `s1..sm` (s1 newest) and feedback taps `f`,
//!
//! ```text
//! a_t        = u_t ^ (f[1..m] . s)          (a_t = u_t when feedback is off)
//! out_j,t    = g_j[0] * a_t ^ (g_j[1..m] . s)
//! s'         = (a_t, s1, .., s_{m-1})
//! ```
//!
//! so a generator equal to the feedback polynomial reproduces the systematic
//! stream. Tail-biting encoding solves `(I ^ A^K) s0 = s_zs` over GF(2) for
//! the wrap state; when that system is singular for the given block length
//! the encoder falls back to plain zero-state encoding and flags it.
//!
//! Decoding is maximum-likelihood over the trellis. `Full` mode is exact: a
//! single pass for zero-state codes, one constrained pass per candidate wrap
//! state for tail-biting codes. `Windowed { lookahead }` commits bit `t` by
//! backtracking from the best survivor at step `t + w`, which realizes a
//! structural decoder delay of `D = w` at rate 1/n.

use serde::{Deserialize, Serialize};

use crate::channels::{ChannelSpec, NoiseKind};
use crate::common::Rate;
use crate::error::{Error, Result};

/// A rate-1/n convolutional code: memory, per-stream generator taps, and an
/// optional feedback polynomial (present for the recursive systematic codes
/// in the built-in table).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvCodeSpec {
    pub memory: usize,
    /// One tap vector of length `memory + 1` per output stream, most
    /// significant (current input) tap first.
    pub generators: Vec<Vec<u8>>,
    /// Feedback taps of length `memory + 1`; the leading coefficient must be 1.
    pub feedback: Option<Vec<u8>>,
    pub tail_biting: bool,
}

impl ConvCodeSpec {
    pub fn from_octal(memory: usize, generators: &[u32], feedback: Option<u32>, tail_biting: bool) -> Result<Self> {
        let generators = generators
            .iter()
            .map(|&g| octal_to_taps(g, memory))
            .collect::<Result<Vec<_>>>()?;
        let feedback = feedback.map(|f| octal_to_taps(f, memory)).transpose()?;
        let spec = ConvCodeSpec {
            memory,
            generators,
            feedback,
            tail_biting,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Output streams per input bit (n in rate 1/n).
    pub fn n_streams(&self) -> usize {
        self.generators.len()
    }

    pub fn states(&self) -> usize {
        1 << self.memory
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=7).contains(&self.memory) {
            return Err(Error::Config(format!("conv code memory {} not in 1..=7", self.memory)));
        }
        if !(2..=4).contains(&self.generators.len()) {
            return Err(Error::Config(format!(
                "conv code needs 2..=4 output streams, got {}",
                self.generators.len()
            )));
        }
        for taps in self.generators.iter().chain(self.feedback.iter()) {
            if taps.len() != self.memory + 1 {
                return Err(Error::Config(format!(
                    "tap vector length {} does not match memory {} + 1",
                    taps.len(),
                    self.memory
                )));
            }
            if taps.iter().any(|&b| b > 1) {
                return Err(Error::Config("tap vectors must be binary".into()));
            }
        }
        if let Some(fb) = &self.feedback {
            if fb[0] != 1 {
                return Err(Error::Config("feedback polynomial must have leading coefficient 1".into()));
            }
        }
        Ok(())
    }
}

impl std::fmt::Display for ConvCodeSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let octal = |taps: &[u8]| -> String {
            let v = taps.iter().fold(0u32, |acc, &b| (acc << 1) | b as u32);
            format!("{v:o}")
        };
        let gens: Vec<String> = self.generators.iter().map(|g| octal(g)).collect();
        write!(f, "m={} g=({})", self.memory, gens.join(","))?;
        if let Some(fb) = &self.feedback {
            write!(f, " fb={}", octal(fb))?;
        }
        if self.tail_biting {
            write!(f, " tb")?;
        }
        Ok(())
    }
}

/// Decode an octal numeral (written with decimal digits, e.g. `171` for
/// 171 octal) into `m + 1` tap bits, most significant first.
pub fn octal_to_taps(octal: u32, memory: usize) -> Result<Vec<u8>> {
    let mut value: u32 = 0;
    for ch in octal.to_string().chars() {
        let digit = ch.to_digit(10).expect("decimal digit");
        if digit > 7 {
            return Err(Error::Config(format!("octal value {octal} contains digit {digit} > 7")));
        }
        value = (value << 3) | digit;
    }
    let width = memory + 1;
    if value >= (1u32 << width) {
        return Err(Error::Config(format!(
            "octal value {octal} does not fit in {width} taps (memory {memory})"
        )));
    }
    Ok((0..width).rev().map(|i| ((value >> i) & 1) as u8).collect())
}

/// Built-in generator table addressable by (rate, memory).
///
/// Rows: `(m, g for rate 1/2, g for 1/3, g for 1/4, feedback)`, all octal.
const GENERATOR_TABLE: [(usize, [u32; 2], [u32; 3], [u32; 4], u32); 7] = [
    (1, [2, 3], [1, 3, 3], [1, 1, 3, 3], 3),
    (2, [5, 7], [5, 7, 7], [5, 7, 7, 7], 7),
    (3, [15, 17], [13, 15, 17], [13, 15, 15, 17], 17),
    (4, [23, 35], [25, 33, 37], [25, 27, 33, 37], 37),
    (5, [53, 75], [47, 53, 75], [53, 67, 71, 75], 75),
    (6, [133, 171], [133, 145, 175], [135, 135, 147, 163], 163),
    (7, [247, 371], [225, 331, 367], [237, 275, 313, 357], 357),
];

/// Look up the built-in recursive systematic code for a rate and memory.
pub fn builtin_code(rate: Rate, memory: usize, tail_biting: bool) -> Result<ConvCodeSpec> {
    let row = GENERATOR_TABLE
        .iter()
        .find(|r| r.0 == memory)
        .ok_or_else(|| Error::Config(format!("no built-in code with memory {memory}")))?;
    let gens: Vec<u32> = match rate {
        Rate::R12 => row.1.to_vec(),
        Rate::R13 => row.2.to_vec(),
        Rate::R14 => row.3.to_vec(),
    };
    ConvCodeSpec::from_octal(memory, &gens, Some(row.4), tail_biting)
}

// ── Trellis ──────────────────────────────────────────────────────────

/// Precomputed state machine: for each `(state, input)` the successor state
/// and the output bits packed as a mask (stream 0 in bit 0).
pub(crate) struct Trellis {
    pub memory: usize,
    pub n: usize,
    pub states: usize,
    pub next: Vec<u32>,
    pub out_mask: Vec<u8>,
    fb_mask: u32,
    has_feedback: bool,
}

fn parity(x: u32) -> u8 {
    (x.count_ones() & 1) as u8
}

impl Trellis {
    pub fn new(spec: &ConvCodeSpec) -> Result<Self> {
        spec.validate()?;
        let m = spec.memory;
        let states = spec.states();
        // State bit m-i holds s_i, so s1 (the newest bit) is the MSB.
        let mask_of = |taps: &[u8]| -> u32 {
            (1..=m).fold(0u32, |acc, i| acc | ((taps[i] as u32) << (m - i)))
        };
        let fb_mask = spec.feedback.as_deref().map(mask_of).unwrap_or(0);
        let gen_masks: Vec<(u8, u32)> = spec
            .generators
            .iter()
            .map(|g| (g[0], mask_of(g)))
            .collect();
        let mut next = vec![0u32; states * 2];
        let mut out_mask = vec![0u8; states * 2];
        for s in 0..states as u32 {
            for u in 0..2u32 {
                let a = (u as u8) ^ if spec.feedback.is_some() { parity(s & fb_mask) } else { 0 };
                let mut out = 0u8;
                for (j, &(g0, gmask)) in gen_masks.iter().enumerate() {
                    let bit = (g0 & a) ^ parity(s & gmask);
                    out |= bit << j;
                }
                let ns = ((a as u32) << (m - 1)) | (s >> 1);
                next[(s as usize) * 2 + u as usize] = ns;
                out_mask[(s as usize) * 2 + u as usize] = out;
            }
        }
        Ok(Trellis {
            memory: m,
            n: spec.n_streams(),
            states,
            next,
            out_mask,
            fb_mask,
            has_feedback: spec.feedback.is_some(),
        })
    }

    /// Message bit that drives the transition from `state` to a successor
    /// whose newest register bit is `a`.
    fn input_for(&self, state: u32, a: u8) -> u8 {
        if self.has_feedback {
            a ^ parity(state & self.fb_mask)
        } else {
            a
        }
    }

    /// Advance `state` by message bit `u`, returning the packed outputs.
    pub fn step(&self, state: &mut u32, u: u8) -> u8 {
        let idx = (*state as usize) * 2 + u as usize;
        let out = self.out_mask[idx];
        *state = self.next[idx];
        out
    }
}

// ── Encoding ─────────────────────────────────────────────────────────

/// Outcome of one block encode, exposing the wrap-state bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodeDetail {
    pub bits: Vec<u8>,
    pub initial_state: u32,
    pub final_state: u32,
    /// Tail-biting was requested but the wrap system is singular for this
    /// block length; the block was encoded from the zero state instead.
    pub tb_fallback: bool,
}

fn check_binary(msg: &[u8]) -> Result<()> {
    if msg.iter().any(|&b| b > 1) {
        return Err(Error::Input("message bits must be 0 or 1".into()));
    }
    if msg.is_empty() {
        return Err(Error::Input("message must be non-empty".into()));
    }
    Ok(())
}

/// Final state reached from `initial` after `k` zero-input... not message
/// zeros: this drives the *register* with message bits all zero, which for a
/// recursive code still feeds the state back. Used to build `A^K` columns.
fn propagate_zero_message(trellis: &Trellis, initial: u32, k: usize) -> u32 {
    let mut s = initial;
    for _ in 0..k {
        trellis.step(&mut s, 0);
    }
    s
}

/// Solve `(I ^ A^K) s0 = s_zs` over GF(2). Returns `None` when singular.
fn solve_wrap_state(trellis: &Trellis, k: usize, s_zs: u32) -> Option<u32> {
    let m = trellis.memory;
    // Column i of A^K: zero-message propagation of basis state e_i.
    let mut rows = vec![0u32; m]; // rows[r] = bitmask over columns
    for col in 0..m {
        let basis = 1u32 << col;
        let reached = propagate_zero_message(trellis, basis, k) ^ basis; // (I ^ A^K) e_col
        for (r, row) in rows.iter_mut().enumerate() {
            if (reached >> r) & 1 == 1 {
                *row |= 1 << col;
            }
        }
    }
    // Gaussian elimination on [rows | rhs].
    let mut rhs: Vec<u8> = (0..m).map(|r| ((s_zs >> r) & 1) as u8).collect();
    let mut pivot_row_of_col = vec![usize::MAX; m];
    let mut used = vec![false; m];
    for col in 0..m {
        let Some(p) = (0..m).find(|&r| !used[r] && (rows[r] >> col) & 1 == 1) else {
            continue;
        };
        used[p] = true;
        pivot_row_of_col[col] = p;
        for r in 0..m {
            if r != p && (rows[r] >> col) & 1 == 1 {
                rows[r] ^= rows[p];
                rhs[r] ^= rhs[p];
            }
        }
    }
    // Inconsistent or underdetermined systems count as singular.
    for r in 0..m {
        if !used[r] && rhs[r] == 1 {
            return None;
        }
    }
    if pivot_row_of_col.iter().any(|&p| p == usize::MAX) {
        return None;
    }
    let mut s0 = 0u32;
    for col in 0..m {
        if rhs[pivot_row_of_col[col]] == 1 {
            s0 |= 1 << col;
        }
    }
    Some(s0)
}

/// Whether tail-biting has a unique wrap state for every message at this
/// block length. Encoder and decoder both consult this, so they always agree
/// on the codebook in use.
pub fn tb_wrap_solvable(spec: &ConvCodeSpec, k: usize) -> Result<bool> {
    let trellis = Trellis::new(spec)?;
    let m = trellis.memory;
    // Solvable for every message iff (I ^ A^K) is invertible; probing with
    // rhs = 0 cannot distinguish, so test every basis rhs.
    Ok((0..m).all(|r| solve_wrap_state(&trellis, k, 1 << r).is_some()))
}

/// Encode a message block, returning the coded bits plus state bookkeeping.
pub fn conv_encode_detailed(msg: &[u8], spec: &ConvCodeSpec) -> Result<EncodeDetail> {
    check_binary(msg)?;
    let trellis = Trellis::new(spec)?;
    let k = msg.len();
    let (initial_state, tb_fallback) = if spec.tail_biting {
        // Zero-state final state determines the wrap equation's rhs.
        let mut s = 0u32;
        for &u in msg {
            trellis.step(&mut s, u);
        }
        match (tb_wrap_solvable(spec, k)?, solve_wrap_state(&trellis, k, s)) {
            (true, Some(s0)) => (s0, false),
            _ => (0, true),
        }
    } else {
        (0, false)
    };
    let mut bits = Vec::with_capacity(k * trellis.n);
    let mut s = initial_state;
    for &u in msg {
        let out = trellis.step(&mut s, u);
        for j in 0..trellis.n {
            bits.push((out >> j) & 1);
        }
    }
    Ok(EncodeDetail {
        bits,
        initial_state,
        final_state: s,
        tb_fallback,
    })
}

/// Encode a message block of K bits into K*n coded bits.
pub fn conv_encode(msg: &[u8], spec: &ConvCodeSpec) -> Result<Vec<u8>> {
    Ok(conv_encode_detailed(msg, spec)?.bits)
}

/// Map bits to unit-power BPSK symbols: 0 -> -1, 1 -> +1.
pub fn bpsk_modulate(bits: &[u8]) -> Vec<f64> {
    bits.iter().map(|&b| if b == 1 { 1.0 } else { -1.0 }).collect()
}

/// Clamp received symbols to `[-threshold, +threshold]`. The standard
/// heuristic for Viterbi under rare high-power pulses.
pub fn radar_clip_preprocess(y: &[f64], threshold: f64) -> Result<Vec<f64>> {
    if !(threshold > 0.0) {
        return Err(Error::Config(format!("clip threshold must be > 0, got {threshold}")));
    }
    Ok(y.iter().map(|&v| v.clamp(-threshold, threshold)).collect())
}

// ── Branch metrics ───────────────────────────────────────────────────

/// Per-symbol log-likelihood metric used by the trellis decoders.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ViterbiMetric {
    /// Matched to AWGN at scale sigma.
    Gaussian { sigma: f64 },
    /// Channel-state-informed metric for Student-t noise.
    AtnLlr { nu: f64, sigma: f64 },
    /// Clip preprocessing followed by the Gaussian metric; the pulse
    /// heuristic for the Radar channel.
    RadarClipGaussian { threshold: f64, sigma: f64 },
}

impl ViterbiMetric {
    /// The metric a receiver with channel knowledge would pick.
    pub fn matched(spec: &ChannelSpec) -> Self {
        let sigma = spec.sigma();
        match spec.kind {
            NoiseKind::Awgn => ViterbiMetric::Gaussian { sigma },
            NoiseKind::Atn { nu } => ViterbiMetric::AtnLlr { nu, sigma },
            NoiseKind::Radar { .. } => ViterbiMetric::RadarClipGaussian {
                threshold: default_clip_threshold(sigma),
                sigma,
            },
        }
    }

    /// Gaussian metric at the operating SNR regardless of the true channel
    /// (the mismatched receiver used in robustness comparisons).
    pub fn gaussian(spec: &ChannelSpec) -> Self {
        ViterbiMetric::Gaussian { sigma: spec.sigma() }
    }

    /// Log-likelihood of receiving `y` for a candidate symbol `x`.
    pub fn loglik(&self, y: f64, x: f64) -> f64 {
        match *self {
            ViterbiMetric::Gaussian { sigma } => {
                let d = y - x;
                -d * d / (2.0 * sigma * sigma)
            }
            ViterbiMetric::AtnLlr { nu, sigma } => {
                let z = (y - x) / sigma;
                -((nu + 1.0) / 2.0) * (1.0 + z * z / nu).ln()
            }
            ViterbiMetric::RadarClipGaussian { threshold, sigma } => {
                let d = y.clamp(-threshold, threshold) - x;
                -d * d / (2.0 * sigma * sigma)
            }
        }
    }
}

/// Default clip level `1 + 3 sigma1` for the Radar heuristic.
pub fn default_clip_threshold(sigma1: f64) -> f64 {
    1.0 + 3.0 * sigma1
}

/// How much trellis future the decoder may observe before committing a bit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum DecodeMode {
    /// Exact maximum-likelihood over the whole block.
    Full,
    /// Commit bit t after the branch at t + lookahead; structural delay
    /// D = lookahead at rate 1/n.
    Windowed { lookahead: usize },
}

/// Conventional traceback depth `5 * (m + 1)`.
pub fn default_traceback(memory: usize) -> usize {
    5 * (memory + 1)
}

// ── Viterbi ──────────────────────────────────────────────────────────

/// Pre-computed per-step, per-stream log-likelihoods of sending -1 / +1.
fn branch_tables(y: &[f64], n: usize, metric: &ViterbiMetric) -> (Vec<f64>, Vec<f64>) {
    let steps = y.len() / n;
    let mut ll_m = vec![0.0; steps * n];
    let mut ll_p = vec![0.0; steps * n];
    for i in 0..steps * n {
        ll_m[i] = metric.loglik(y[i], -1.0);
        ll_p[i] = metric.loglik(y[i], 1.0);
    }
    (ll_m, ll_p)
}

struct AcsResult {
    /// prev[t * states + s]: predecessor of state s at time t+1.
    prev: Vec<u32>,
    /// Best (max metric, lowest index on ties) state per time step t+1.
    best_state: Vec<u32>,
    /// Final metrics after the last step.
    final_metrics: Vec<f64>,
}

/// One add-compare-select pass over the whole block from the given initial
/// metrics. Ties prefer the lower-numbered predecessor, then the 0-input
/// branch, realized by strict improvement over an in-order scan.
fn acs_pass(trellis: &Trellis, ll_m: &[f64], ll_p: &[f64], init: &[f64]) -> AcsResult {
    let states = trellis.states;
    let n = trellis.n;
    let steps = ll_m.len() / n;
    let mut metrics = init.to_vec();
    let mut next_metrics = vec![f64::NEG_INFINITY; states];
    let mut prev = vec![0u32; steps * states];
    let mut best_state = vec![0u32; steps];
    for t in 0..steps {
        next_metrics.iter_mut().for_each(|m| *m = f64::NEG_INFINITY);
        let base = t * n;
        for s in 0..states {
            let pm = metrics[s];
            if pm == f64::NEG_INFINITY {
                continue;
            }
            for u in 0..2usize {
                let idx = s * 2 + u;
                let out = trellis.out_mask[idx];
                let mut bm = 0.0;
                for j in 0..n {
                    bm += if (out >> j) & 1 == 1 {
                        ll_p[base + j]
                    } else {
                        ll_m[base + j]
                    };
                }
                let ns = trellis.next[idx] as usize;
                let cand = pm + bm;
                if cand > next_metrics[ns] {
                    next_metrics[ns] = cand;
                    prev[t * states + ns] = s as u32;
                }
            }
        }
        std::mem::swap(&mut metrics, &mut next_metrics);
        let mut best = 0usize;
        for s in 1..states {
            if metrics[s] > metrics[best] {
                best = s;
            }
        }
        best_state[t] = best as u32;
    }
    AcsResult {
        prev,
        best_state,
        final_metrics: metrics,
    }
}

/// Walk predecessors from `state` at time `to + 1` back to the branch at
/// time `from`, returning (state at `from`, newest register bit of the
/// branch taken at `from`).
fn backtrack(acs: &AcsResult, states: usize, memory: usize, mut state: u32, to: usize, from: usize) -> (u32, u8) {
    let mut a = 0u8;
    for t in (from..=to).rev() {
        let p = acs.prev[t * states + state as usize];
        a = (state >> (memory - 1)) as u8 & 1;
        state = p;
    }
    (state, a)
}

fn decode_from_traceback(trellis: &Trellis, acs: &AcsResult, end_state: u32, steps: usize) -> Vec<u8> {
    let states = trellis.states;
    let mut msg = vec![0u8; steps];
    let mut state = end_state;
    for t in (0..steps).rev() {
        let p = acs.prev[t * states + state as usize];
        let a = (state >> (trellis.memory - 1)) as u8 & 1;
        msg[t] = trellis.input_for(p, a);
        state = p;
    }
    msg
}

/// Viterbi decoding of BPSK-modulated soft symbols.
///
/// `y` must hold `K * n` received symbols. In `Full` mode the decoder is
/// exact maximum likelihood over the codebook in effect (zero-state or
/// tail-biting, mirroring the encoder's fallback rule). In `Windowed` mode
/// each bit is committed by backtracking from the globally best survivor
/// `lookahead` branches ahead, clamped at the block end.
pub fn viterbi_decode(
    y: &[f64],
    spec: &ConvCodeSpec,
    metric: &ViterbiMetric,
    mode: DecodeMode,
) -> Result<Vec<u8>> {
    let trellis = Trellis::new(spec)?;
    let n = trellis.n;
    if y.is_empty() || y.len() % n != 0 {
        return Err(Error::Input(format!(
            "received length {} is not a non-empty multiple of n = {n}",
            y.len()
        )));
    }
    let steps = y.len() / n;
    let tail_biting = spec.tail_biting && tb_wrap_solvable(spec, steps)?;
    if let DecodeMode::Windowed { .. } = mode {
        if spec.tail_biting {
            return Err(Error::Config(
                "windowed decoding requires a zero-state (non tail-biting) code".into(),
            ));
        }
    }
    let (ll_m, ll_p) = branch_tables(y, n, metric);
    let states = trellis.states;

    match mode {
        DecodeMode::Full if tail_biting => {
            // Exact ML for the tail-biting codebook: one constrained pass
            // per wrap state, keeping the best start == end survivor.
            let mut best: Option<(f64, u32)> = None;
            for s0 in 0..states as u32 {
                let mut init = vec![f64::NEG_INFINITY; states];
                init[s0 as usize] = 0.0;
                let acs = acs_pass(&trellis, &ll_m, &ll_p, &init);
                let m = acs.final_metrics[s0 as usize];
                if m == f64::NEG_INFINITY {
                    continue;
                }
                if best.map_or(true, |(bm, _)| m > bm) {
                    best = Some((m, s0));
                }
            }
            let (_, s0) = best.ok_or_else(|| Error::Input("no tail-biting path through the trellis".into()))?;
            let mut init = vec![f64::NEG_INFINITY; states];
            init[s0 as usize] = 0.0;
            let acs = acs_pass(&trellis, &ll_m, &ll_p, &init);
            Ok(decode_from_traceback(&trellis, &acs, s0, steps))
        }
        DecodeMode::Full => {
            let mut init = vec![f64::NEG_INFINITY; states];
            init[0] = 0.0;
            let acs = acs_pass(&trellis, &ll_m, &ll_p, &init);
            let end = acs.best_state[steps - 1];
            Ok(decode_from_traceback(&trellis, &acs, end, steps))
        }
        DecodeMode::Windowed { lookahead } => {
            let mut init = vec![f64::NEG_INFINITY; states];
            init[0] = 0.0;
            let acs = acs_pass(&trellis, &ll_m, &ll_p, &init);
            let mut msg = vec![0u8; steps];
            for t in 0..steps {
                let horizon = (t + lookahead).min(steps - 1);
                let start = acs.best_state[horizon];
                let (state_at_t, a) = backtrack(&acs, states, trellis.memory, start, horizon, t);
                msg[t] = trellis.input_for(state_at_t, a);
            }
            Ok(msg)
        }
    }
}

/// Exhaustive maximum-likelihood decoding: argmax over all `2^K` messages of
/// the summed branch metric, ties broken toward the lexicographically
/// smallest message. The block length is capped at 16 bits.
pub fn ml_decode_bruteforce(y: &[f64], spec: &ConvCodeSpec, metric: &ViterbiMetric) -> Result<Vec<u8>> {
    let trellis = Trellis::new(spec)?;
    let n = trellis.n;
    if y.is_empty() || y.len() % n != 0 {
        return Err(Error::Input(format!(
            "received length {} is not a non-empty multiple of n = {n}",
            y.len()
        )));
    }
    let k = y.len() / n;
    if k > 16 {
        return Err(Error::Usage(format!("brute-force ML capped at K <= 16, got {k}")));
    }
    let tail_biting = spec.tail_biting && tb_wrap_solvable(spec, k)?;
    let (ll_m, ll_p) = branch_tables(y, n, metric);
    let mut best_msg: Option<Vec<u8>> = None;
    let mut best_metric = f64::NEG_INFINITY;
    let mut msg = vec![0u8; k];
    for m in 0..(1u32 << k) {
        for (i, bit) in msg.iter_mut().enumerate() {
            *bit = ((m >> (k - 1 - i)) & 1) as u8;
        }
        let s0 = if tail_biting {
            let mut s = 0u32;
            for &u in &msg {
                trellis.step(&mut s, u);
            }
            solve_wrap_state(&trellis, k, s).expect("solvability checked above")
        } else {
            0
        };
        // Accumulate in time order so the path metric rounds identically to
        // the Viterbi recursion for the same path.
        let mut total = 0.0;
        let mut s = s0;
        for t in 0..k {
            let out = trellis.step(&mut s, msg[t]);
            let mut bm = 0.0;
            for j in 0..n {
                bm += if (out >> j) & 1 == 1 {
                    ll_p[t * n + j]
                } else {
                    ll_m[t * n + j]
                };
            }
            total += bm;
        }
        if total > best_metric {
            best_metric = total;
            best_msg = Some(msg.clone());
        }
    }
    Ok(best_msg.expect("at least one message"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channels::{apply_channel, NoiseStream};
    use crate::tensor::Tensor;

    fn rsc_m2(tail_biting: bool) -> ConvCodeSpec {
        builtin_code(Rate::R12, 2, tail_biting).unwrap()
    }

    #[test]
    fn octal_examples() {
        assert_eq!(octal_to_taps(7, 2).unwrap(), vec![1, 1, 1]);
        assert_eq!(octal_to_taps(5, 2).unwrap(), vec![1, 0, 1]);
        assert_eq!(octal_to_taps(171, 6).unwrap(), vec![1, 1, 1, 1, 0, 0, 1]);
        assert!(octal_to_taps(7, 1).is_err());
        assert!(octal_to_taps(181, 6).is_err());
    }

    #[test]
    fn generator_table_matches_published_rows() {
        let expected: [(usize, [u32; 2], [u32; 3], [u32; 4], u32); 7] = [
            (1, [2, 3], [1, 3, 3], [1, 1, 3, 3], 3),
            (2, [5, 7], [5, 7, 7], [5, 7, 7, 7], 7),
            (3, [15, 17], [13, 15, 17], [13, 15, 15, 17], 17),
            (4, [23, 35], [25, 33, 37], [25, 27, 33, 37], 37),
            (5, [53, 75], [47, 53, 75], [53, 67, 71, 75], 75),
            (6, [133, 171], [133, 145, 175], [135, 135, 147, 163], 163),
            (7, [247, 371], [225, 331, 367], [237, 275, 313, 357], 357),
        ];
        for (m, r12, r13, r14, fb) in expected {
            for (rate, gens) in [
                (Rate::R12, r12.to_vec()),
                (Rate::R13, r13.to_vec()),
                (Rate::R14, r14.to_vec()),
            ] {
                let spec = builtin_code(rate, m, false).unwrap();
                let want = ConvCodeSpec::from_octal(m, &gens, Some(fb), false).unwrap();
                assert_eq!(spec, want, "table row m={m} rate={rate:?}");
            }
        }
    }

    #[test]
    fn all_zero_message_encodes_to_zero() {
        for m in 1..=7 {
            let spec = builtin_code(Rate::R13, m, false).unwrap();
            let cw = conv_encode(&vec![0; 20], &spec).unwrap();
            assert!(cw.iter().all(|&b| b == 0));
        }
    }

    #[test]
    fn feedforward_hand_example() {
        // g = (7, 5), no feedback, msg = [1, 0, 0].
        let spec = ConvCodeSpec::from_octal(2, &[7, 5], None, false).unwrap();
        let cw = conv_encode(&[1, 0, 0], &spec).unwrap();
        assert_eq!(cw, vec![1, 1, 1, 0, 1, 1]);
    }

    #[test]
    fn rsc_matches_independent_recurrence() {
        // Direct bit-level recurrence, written independently of the trellis.
        let spec = rsc_m2(false);
        let msg = [1, 0, 0, 0, 0, 0];
        let mut s = [0u8, 0u8]; // (s1, s2)
        let mut expected = Vec::new();
        for &u in &msg {
            let a = u ^ (s[0] ^ s[1]); // feedback 7 -> taps (1, 1) on (s1, s2)
            let out5 = a ^ s[1]; // g 5 -> taps (0, 1)
            let out7 = a ^ s[0] ^ s[1]; // g 7 -> taps (1, 1)
            expected.push(out5);
            expected.push(out7);
            s = [a, s[0]];
        }
        assert_eq!(conv_encode(&msg, &spec).unwrap(), expected);
    }

    #[test]
    fn systematic_stream_reproduces_message() {
        // Feedback equals g12 = 7, so stream 2 must be the message itself.
        let spec = rsc_m2(false);
        let msg = [1, 0, 1, 1, 0, 0, 1, 0, 1, 1];
        let cw = conv_encode(&msg, &spec).unwrap();
        for (t, &u) in msg.iter().enumerate() {
            assert_eq!(cw[t * 2 + 1], u);
        }
    }

    #[test]
    fn zero_state_encoding_is_linear() {
        let spec = builtin_code(Rate::R13, 3, false).unwrap();
        let mut rng_state = 0x12345u64;
        let mut next_bit = || {
            rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1);
            ((rng_state >> 33) & 1) as u8
        };
        for _ in 0..50 {
            let u1: Vec<u8> = (0..24).map(|_| next_bit()).collect();
            let u2: Vec<u8> = (0..24).map(|_| next_bit()).collect();
            let x: Vec<u8> = u1.iter().zip(&u2).map(|(&a, &b)| a ^ b).collect();
            let c1 = conv_encode(&u1, &spec).unwrap();
            let c2 = conv_encode(&u2, &spec).unwrap();
            let cx = conv_encode(&x, &spec).unwrap();
            let sum: Vec<u8> = c1.iter().zip(&c2).map(|(&a, &b)| a ^ b).collect();
            assert_eq!(cx, sum);
        }
    }

    #[test]
    fn tail_biting_wraps_when_solvable() {
        // m = 2 wrap matrix has period 3: solvable iff K % 3 != 0.
        let spec = rsc_m2(true);
        assert!(tb_wrap_solvable(&spec, 10).unwrap());
        assert!(!tb_wrap_solvable(&spec, 12).unwrap());
        let mut lcg = 99u64;
        let mut next_bit = || {
            lcg = lcg.wrapping_mul(6364136223846793005).wrapping_add(1);
            ((lcg >> 40) & 1) as u8
        };
        for _ in 0..100 {
            let msg: Vec<u8> = (0..10).map(|_| next_bit()).collect();
            let d = conv_encode_detailed(&msg, &spec).unwrap();
            assert!(!d.tb_fallback);
            assert_eq!(d.initial_state, d.final_state);
        }
        // Singular block length falls back to zero-state encoding.
        let msg: Vec<u8> = (0..12).map(|_| next_bit()).collect();
        let d = conv_encode_detailed(&msg, &spec).unwrap();
        assert!(d.tb_fallback);
        assert_eq!(d.initial_state, 0);
    }

    #[test]
    fn bpsk_examples() {
        assert_eq!(bpsk_modulate(&[0, 1]), vec![-1.0, 1.0]);
        let all_zero = bpsk_modulate(&[0; 16]);
        assert!(all_zero.iter().all(|&s| s == -1.0));
        let power: f64 = all_zero.iter().map(|s| s * s).sum::<f64>() / 16.0;
        assert_eq!(power, 1.0);
        let bits: Vec<u8> = bpsk_modulate(&[1, 0, 1]).iter().map(|&s| (s > 0.0) as u8).collect();
        assert_eq!(bits, vec![1, 0, 1]);
    }

    #[test]
    fn noiseless_viterbi_recovers_message() {
        for tb in [false, true] {
            let spec = rsc_m2(tb);
            let msg = [1, 0, 1, 1, 0, 1, 0, 0, 1, 1];
            let y = bpsk_modulate(&conv_encode(&msg, &spec).unwrap());
            let metric = ViterbiMetric::Gaussian { sigma: 1.0 };
            let out = viterbi_decode(&y, &spec, &metric, DecodeMode::Full).unwrap();
            assert_eq!(out, msg);
        }
        // Windowed mode on the zero-state code, several lookaheads.
        let spec = rsc_m2(false);
        let msg = [1, 1, 0, 1, 0, 0, 1, 0];
        let y = bpsk_modulate(&conv_encode(&msg, &spec).unwrap());
        let metric = ViterbiMetric::Gaussian { sigma: 1.0 };
        for w in [1, 3, 8, 40] {
            let out = viterbi_decode(&y, &spec, &metric, DecodeMode::Windowed { lookahead: w }).unwrap();
            assert_eq!(out, msg, "lookahead {w}");
        }
    }

    #[test]
    fn windowed_rejects_tail_biting() {
        let spec = rsc_m2(true);
        let y = vec![0.5; 20];
        let metric = ViterbiMetric::Gaussian { sigma: 1.0 };
        assert!(matches!(
            viterbi_decode(&y, &spec, &metric, DecodeMode::Windowed { lookahead: 3 }),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn bad_lengths_rejected() {
        let spec = rsc_m2(false);
        let metric = ViterbiMetric::Gaussian { sigma: 1.0 };
        assert!(viterbi_decode(&[0.1; 5], &spec, &metric, DecodeMode::Full).is_err());
        assert!(ml_decode_bruteforce(&[0.1; 5], &spec, &metric).is_err());
        assert!(matches!(
            ml_decode_bruteforce(&vec![0.1; 40], &spec, &metric),
            Err(Error::Usage(_))
        ));
        assert!(conv_encode(&[0, 2, 1], &spec).is_err());
    }

    #[test]
    fn bruteforce_k1_is_threshold_decision() {
        let spec = rsc_m2(false);
        let metric = ViterbiMetric::Gaussian { sigma: 1.0 };
        // K=1 codewords: msg 0 -> (-1,-1)-ish, msg 1 -> both streams 1.
        let y0 = bpsk_modulate(&conv_encode(&[0], &spec).unwrap());
        let y1 = bpsk_modulate(&conv_encode(&[1], &spec).unwrap());
        assert_eq!(ml_decode_bruteforce(&y0, &spec, &metric).unwrap(), vec![0]);
        assert_eq!(ml_decode_bruteforce(&y1, &spec, &metric).unwrap(), vec![1]);
    }

    #[test]
    fn viterbi_matches_bruteforce_on_noisy_blocks() {
        // Cross-check on all three metrics, zero-state and tail-biting.
        let k = 10;
        let mut lcg = 7u64;
        let mut next_bit = || {
            lcg = lcg.wrapping_mul(6364136223846793005).wrapping_add(1);
            ((lcg >> 37) & 1) as u8
        };
        let cases: Vec<(ConvCodeSpec, ChannelSpec, ViterbiMetric)> = vec![
            (
                rsc_m2(false),
                ChannelSpec::awgn(1.0),
                ViterbiMetric::Gaussian { sigma: snr_to_sigma_local(1.0) },
            ),
            (
                rsc_m2(true),
                ChannelSpec::awgn(2.0),
                ViterbiMetric::Gaussian { sigma: snr_to_sigma_local(2.0) },
            ),
            (
                builtin_code(Rate::R13, 3, false).unwrap(),
                ChannelSpec::atn(3.0, 1.0),
                ViterbiMetric::AtnLlr { nu: 3.0, sigma: snr_to_sigma_local(1.0) },
            ),
            (
                rsc_m2(false),
                ChannelSpec::radar(0.05, 5.0, 2.0),
                ViterbiMetric::RadarClipGaussian {
                    threshold: default_clip_threshold(snr_to_sigma_local(2.0)),
                    sigma: snr_to_sigma_local(2.0),
                },
            ),
        ];
        for (case_idx, (spec, channel, metric)) in cases.iter().enumerate() {
            for trial in 0..60u64 {
                let msg: Vec<u8> = (0..k).map(|_| next_bit()).collect();
                let x = bpsk_modulate(&conv_encode(&msg, spec).unwrap());
                let xt = Tensor::matrix(1, x.len(), x).unwrap();
                let ns = NoiseStream::new(1000 + case_idx as u64, trial);
                let y = apply_channel(&xt, channel, &ns).unwrap();
                let vit = viterbi_decode(y.data(), spec, metric, DecodeMode::Full).unwrap();
                let ml = ml_decode_bruteforce(y.data(), spec, metric).unwrap();
                assert_eq!(vit, ml, "case {case_idx} trial {trial}");
            }
        }
    }

    fn snr_to_sigma_local(db: f64) -> f64 {
        crate::channels::snr_to_sigma(db)
    }

    #[test]
    fn clip_preprocess_examples() {
        assert_eq!(radar_clip_preprocess(&[0.5, -2.0], 3.0).unwrap(), vec![0.5, -2.0]);
        assert_eq!(radar_clip_preprocess(&[10.0, -10.0], 3.0).unwrap(), vec![3.0, -3.0]);
        assert!(radar_clip_preprocess(&[1.0], 0.0).is_err());
    }

    #[test]
    fn default_traceback_is_5m1() {
        assert_eq!(default_traceback(2), 15);
        assert_eq!(default_traceback(6), 35);
    }
}
