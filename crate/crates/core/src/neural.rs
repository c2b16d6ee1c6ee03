//! Learned code families and the power-constraint layer.
//!
//! Two architectures share one parameter/checkpoint format:
//!
//! - Block autoencoder: bidirectional GRU stacks on both sides. The encoder
//!   maps `(K, 1)` message bits (fed as +-1) through a 2-layer Bi-GRU and a
//!   linear head to `(K, 1/R)` symbols; the decoder mirrors it with a
//!   sigmoid head back to per-bit probabilities.
//! - Low-latency code: a strictly causal unidirectional GRU encoder, and a
//!   decoder made of two forward GRU stacks. For bit `t` the fusion head
//!   reads stack one at step `t` and stack two at step `t + D` (clamped to
//!   the block end), so the decision cone is exactly `D` received steps of
//!   lookahead and each stack advances once per bit.
//!
//! The power layer keeps transmitted symbols at unit power. Bit-wise and
//! block-wise normalization standardize with batch statistics while
//! training and with frozen precomputed statistics at evaluation time; the
//! hard variant is `tanh` while training and `sign` at evaluation.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channels::NoiseStream;
use crate::common::{bits_to_pm1, random_message_matrix, Rate};
use crate::error::{Error, Result};
use crate::nn::{
    bind_all, dense_apply, dense_vars, glorot_uniform, gru_stack_forward, GruLayerParams,
    ParamMap,
};
use crate::tape::{normalize_columns, normalize_global, Tape, Var, DEGENERATE_STD};
use crate::tensor::Tensor;

/// Checkpoint format version written by this crate.
pub const CHECKPOINT_VERSION: u32 = 1;
const CHECKPOINT_MAGIC: &[u8; 8] = b"CHANLAB1";

/// Power-constraint variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PowerMode {
    Bitwise,
    Blockwise,
    HardTanh,
}

/// Training-time batch statistics vs frozen evaluation statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// Frozen calibration statistics for the power layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum PowerStats {
    Bitwise { mean: Vec<f64>, std: Vec<f64> },
    Blockwise { mean: f64, std: f64 },
    Hard,
}

impl PowerStats {
    fn validate(&self) -> Result<()> {
        let ok = match self {
            PowerStats::Bitwise { mean, std } => {
                mean.iter().all(|v| v.is_finite())
                    && std.iter().all(|v| v.is_finite() && *v > 0.0)
                    && mean.len() == std.len()
            }
            PowerStats::Blockwise { mean, std } => mean.is_finite() && std.is_finite() && *std > 0.0,
            PowerStats::Hard => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Checkpoint("calibration statistics are not finite/positive".into()))
        }
    }
}

/// Block autoencoder hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelAeConfig {
    pub k: usize,
    pub rate: Rate,
    pub enc_units: usize,
    pub dec_units: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub power: PowerMode,
}

impl ChannelAeConfig {
    /// Block-code defaults: 2-layer Bi-GRUs with 25/100 units and bit-wise
    /// power normalization.
    pub fn new(k: usize, rate: Rate) -> Self {
        ChannelAeConfig {
            k,
            rate,
            enc_units: 25,
            dec_units: 100,
            enc_layers: 2,
            dec_layers: 2,
            power: PowerMode::Bitwise,
        }
    }
}

/// Low-latency code hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearnConfig {
    pub k: usize,
    pub rate: Rate,
    pub delay: usize,
    pub enc_units: usize,
    pub dec_units: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub power: PowerMode,
}

impl LearnConfig {
    pub fn new(k: usize, rate: Rate, delay: usize) -> Self {
        LearnConfig {
            k,
            rate,
            delay,
            enc_units: 25,
            dec_units: 100,
            enc_layers: 2,
            dec_layers: 2,
            power: PowerMode::Bitwise,
        }
    }
}

/// Which learned code a parameter set realizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "snake_case")]
pub enum ArchSpec {
    ChannelAe(ChannelAeConfig),
    Learn(LearnConfig),
}

impl ArchSpec {
    pub fn k(&self) -> usize {
        match self {
            ArchSpec::ChannelAe(c) => c.k,
            ArchSpec::Learn(c) => c.k,
        }
    }

    pub fn rate(&self) -> Rate {
        match self {
            ArchSpec::ChannelAe(c) => c.rate,
            ArchSpec::Learn(c) => c.rate,
        }
    }

    pub fn power(&self) -> PowerMode {
        match self {
            ArchSpec::ChannelAe(c) => c.power,
            ArchSpec::Learn(c) => c.power,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ArchSpec::ChannelAe(_) => "channel_ae",
            ArchSpec::Learn(_) => "learn",
        }
    }

    /// Decoder lookahead in received steps (whole block for the Bi-GRU AE).
    pub fn delay(&self) -> usize {
        match self {
            ArchSpec::ChannelAe(c) => c.k.saturating_sub(1),
            ArchSpec::Learn(c) => c.delay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (k, enc_layers, dec_layers, enc_units, dec_units) = match self {
            ArchSpec::ChannelAe(c) => (c.k, c.enc_layers, c.dec_layers, c.enc_units, c.dec_units),
            ArchSpec::Learn(c) => (c.k, c.enc_layers, c.dec_layers, c.enc_units, c.dec_units),
        };
        if k == 0 {
            return Err(Error::Config("block length K must be >= 1".into()));
        }
        if enc_layers == 0 || dec_layers == 0 || enc_units == 0 || dec_units == 0 {
            return Err(Error::Config("layer and unit counts must be >= 1".into()));
        }
        Ok(())
    }
}

/// Named parameter tensors for an encoder/decoder pair plus frozen power
/// calibration. Snapshots are immutable values: evaluation never mutates
/// them and training works on a private copy.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub arch: ArchSpec,
    pub enc: ParamMap,
    pub dec: ParamMap,
    pub calibration: Option<PowerStats>,
    pub seed_lineage: Vec<String>,
}

enum LayerPlan {
    Gru { prefix: String, in_w: usize, units: usize },
    Dense { prefix: String, in_w: usize, out_w: usize },
}

fn encoder_plan(arch: &ArchSpec) -> Vec<LayerPlan> {
    let mut plan = Vec::new();
    match arch {
        ArchSpec::ChannelAe(c) => {
            let mut in_w = 1;
            for l in 0..c.enc_layers {
                for dir in ["fwd", "bwd"] {
                    plan.push(LayerPlan::Gru {
                        prefix: format!("gru.l{l}.{dir}"),
                        in_w,
                        units: c.enc_units,
                    });
                }
                in_w = 2 * c.enc_units;
            }
            plan.push(LayerPlan::Dense {
                prefix: "out".into(),
                in_w,
                out_w: c.rate.n_streams(),
            });
        }
        ArchSpec::Learn(c) => {
            let mut in_w = 1;
            for l in 0..c.enc_layers {
                plan.push(LayerPlan::Gru {
                    prefix: format!("gru.l{l}"),
                    in_w,
                    units: c.enc_units,
                });
                in_w = c.enc_units;
            }
            plan.push(LayerPlan::Dense {
                prefix: "out".into(),
                in_w,
                out_w: c.rate.n_streams(),
            });
        }
    }
    plan
}

fn decoder_plan(arch: &ArchSpec) -> Vec<LayerPlan> {
    let mut plan = Vec::new();
    match arch {
        ArchSpec::ChannelAe(c) => {
            let mut in_w = c.rate.n_streams();
            for l in 0..c.dec_layers {
                for dir in ["fwd", "bwd"] {
                    plan.push(LayerPlan::Gru {
                        prefix: format!("gru.l{l}.{dir}"),
                        in_w,
                        units: c.dec_units,
                    });
                }
                in_w = 2 * c.dec_units;
            }
            plan.push(LayerPlan::Dense {
                prefix: "out".into(),
                in_w,
                out_w: 1,
            });
        }
        ArchSpec::Learn(c) => {
            for stack in ["g1", "g2"] {
                let mut in_w = c.rate.n_streams();
                for l in 0..c.dec_layers {
                    plan.push(LayerPlan::Gru {
                        prefix: format!("{stack}.l{l}"),
                        in_w,
                        units: c.dec_units,
                    });
                    in_w = c.dec_units;
                }
            }
            plan.push(LayerPlan::Dense {
                prefix: "out".into(),
                in_w: 2 * c.dec_units,
                out_w: 1,
            });
        }
    }
    plan
}

fn plan_names(plan: &[LayerPlan]) -> Vec<String> {
    let mut names = Vec::new();
    for entry in plan {
        match entry {
            LayerPlan::Gru { prefix, .. } => {
                for f in ["wz", "uz", "bz", "wr", "ur", "br", "wh", "uh", "bh"] {
                    names.push(format!("{prefix}.{f}"));
                }
            }
            LayerPlan::Dense { prefix, .. } => {
                names.push(format!("{prefix}.w"));
                names.push(format!("{prefix}.b"));
            }
        }
    }
    names
}

fn validate_map(map: &ParamMap, plan: &[LayerPlan], side: &str) -> Result<()> {
    let expected = plan_names(plan);
    if map.len() != expected.len() || expected.iter().any(|n| !map.contains_key(n)) {
        return Err(Error::Checkpoint(format!(
            "{side} parameters do not match the layer plan: expected {} tensors, found {}",
            expected.len(),
            map.len()
        )));
    }
    for entry in plan {
        match entry {
            LayerPlan::Gru { prefix, in_w, units } => {
                let p = GruLayerParams::from_map(map, prefix)?;
                if p.input_width() != *in_w || p.units() != *units {
                    return Err(Error::Checkpoint(format!(
                        "{side} layer {prefix} has shape ({}, {}), expected ({in_w}, {units})",
                        p.input_width(),
                        p.units()
                    )));
                }
            }
            LayerPlan::Dense { prefix, in_w, out_w } => {
                let w = &map[&format!("{prefix}.w")];
                let b = &map[&format!("{prefix}.b")];
                if w.shape() != [*in_w, *out_w] || b.shape() != [1, *out_w] {
                    return Err(Error::Checkpoint(format!(
                        "{side} dense {prefix} has shape {:?}, expected [{in_w}, {out_w}]",
                        w.shape()
                    )));
                }
            }
        }
    }
    Ok(())
}

impl ModelParams {
    /// Randomly initialized parameters for an architecture (no calibration).
    pub fn init(arch: ArchSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        arch.validate()?;
        let mut enc = ParamMap::new();
        let mut dec = ParamMap::new();
        for (map, plan) in [(&mut enc, encoder_plan(&arch)), (&mut dec, decoder_plan(&arch))] {
            for entry in &plan {
                match entry {
                    LayerPlan::Gru { prefix, in_w, units } => {
                        GruLayerParams::random(*in_w, *units, rng).insert_into(map, prefix);
                    }
                    LayerPlan::Dense { prefix, in_w, out_w } => {
                        map.insert(format!("{prefix}.w"), glorot_uniform(*in_w, *out_w, rng));
                        map.insert(format!("{prefix}.b"), Tensor::zeros(vec![1, *out_w]));
                    }
                }
            }
        }
        Ok(ModelParams {
            arch,
            enc,
            dec,
            calibration: None,
            seed_lineage: Vec::new(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        validate_map(&self.enc, &encoder_plan(&self.arch), "encoder")?;
        validate_map(&self.dec, &decoder_plan(&self.arch), "decoder")?;
        if let Some(c) = &self.calibration {
            c.validate()?;
        }
        Ok(())
    }

    /// Coded symbols per block (`K * n`).
    pub fn symbols_per_block(&self) -> usize {
        self.arch.k() * self.arch.rate().n_streams()
    }

    /// Stable identifier used in report metadata.
    pub fn id(&self) -> String {
        format!("{} k={} rate={}", self.arch.name(), self.arch.k(), self.arch.rate())
    }
}

// ── Graph construction ───────────────────────────────────────────────

pub(crate) struct EncoderGraph {
    /// Power-constrained symbols, `B x K*n`.
    pub code: Var,
    pub bound: BTreeMap<String, Var>,
}

/// Build the encoder forward pass on a tape from message bits (0/1).
pub(crate) fn encoder_graph(
    tape: &mut Tape,
    arch: &ArchSpec,
    enc: &ParamMap,
    msgs: &Tensor,
    phase: Phase,
    calibration: Option<&PowerStats>,
    requires_grad: bool,
) -> Result<EncoderGraph> {
    let (raw, bound) = encoder_raw_graph(tape, arch, enc, msgs, requires_grad)?;
    let code = apply_power_on_tape(tape, raw, arch.power(), phase, calibration)?;
    Ok(EncoderGraph { code, bound })
}

fn encoder_raw_graph(
    tape: &mut Tape,
    arch: &ArchSpec,
    enc: &ParamMap,
    msgs: &Tensor,
    requires_grad: bool,
) -> Result<(Var, BTreeMap<String, Var>)> {
    if !msgs.is_matrix() || msgs.cols() == 0 {
        return Err(Error::Input(format!("encoder: message shape {:?}", msgs.shape())));
    }
    if msgs.data().iter().any(|&b| b != 0.0 && b != 1.0) {
        return Err(Error::Input("encoder: message bits must be 0 or 1".into()));
    }
    let k = msgs.cols();
    let bound = bind_all(tape, enc, requires_grad);
    // Bits enter the recurrence as +-1.
    let pm1 = tape.constant(bits_to_pm1(msgs));
    let xs: Vec<Var> = (0..k)
        .map(|t| tape.slice_cols(pm1, t, t + 1))
        .collect::<Result<Vec<_>>>()?;
    let (layers, bidir) = match arch {
        ArchSpec::ChannelAe(c) => (c.enc_layers, true),
        ArchSpec::Learn(c) => (c.enc_layers, false),
    };
    let hidden = gru_stack_forward(tape, &bound, "gru", layers, bidir, &xs)?;
    let head = dense_vars(&bound, "out")?;
    let per_step: Vec<Var> = hidden
        .iter()
        .map(|&h| dense_apply(tape, &head, h))
        .collect::<Result<Vec<_>>>()?;
    let raw = tape.concat_cols(&per_step)?;
    Ok((raw, bound))
}

/// Apply the power-constraint layer to a raw symbol matrix on the tape.
pub(crate) fn apply_power_on_tape(
    tape: &mut Tape,
    raw: Var,
    mode: PowerMode,
    phase: Phase,
    calibration: Option<&PowerStats>,
) -> Result<Var> {
    match (mode, phase) {
        (PowerMode::Bitwise, Phase::Train) => tape.norm_cols(raw),
        (PowerMode::Blockwise, Phase::Train) => tape.norm_all(raw),
        (PowerMode::HardTanh, Phase::Train) => Ok(tape.tanh(raw)),
        (PowerMode::HardTanh, Phase::Eval) => Ok(tape.sign(raw)),
        (PowerMode::Bitwise, Phase::Eval) => match calibration {
            Some(PowerStats::Bitwise { mean, std }) => tape.affine_cols(raw, mean, std),
            _ => Err(Error::Usage(
                "evaluation-phase bitwise power constraint requires frozen calibration".into(),
            )),
        },
        (PowerMode::Blockwise, Phase::Eval) => match calibration {
            Some(PowerStats::Blockwise { mean, std }) => {
                let cols = tape.value(raw).cols();
                tape.affine_cols(raw, &vec![*mean; cols], &vec![*std; cols])
            }
            _ => Err(Error::Usage(
                "evaluation-phase blockwise power constraint requires frozen calibration".into(),
            )),
        },
    }
}

pub(crate) struct DecoderGraph {
    /// Per-bit probabilities, `B x K`.
    pub probs: Var,
    pub bound: BTreeMap<String, Var>,
    /// GRU stack step evaluations consumed by the pass.
    pub gru_stack_steps: usize,
}

/// Build the decoder forward pass on a tape from received symbols
/// (`B x K*n` as a tape value).
pub(crate) fn decoder_graph(
    tape: &mut Tape,
    arch: &ArchSpec,
    dec: &ParamMap,
    y: Var,
    requires_grad: bool,
) -> Result<DecoderGraph> {
    let n = arch.rate().n_streams();
    let cols = tape.value(y).cols();
    if cols % n != 0 || cols == 0 {
        return Err(Error::Input(format!(
            "decoder: received width {cols} is not a multiple of n = {n}"
        )));
    }
    let k = cols / n;
    let bound = bind_all(tape, dec, requires_grad);
    let ys: Vec<Var> = (0..k)
        .map(|t| tape.slice_cols(y, t * n, (t + 1) * n))
        .collect::<Result<Vec<_>>>()?;
    let head = dense_vars(&bound, "out")?;
    let (per_bit, steps_used) = match arch {
        ArchSpec::ChannelAe(c) => {
            let hidden = gru_stack_forward(tape, &bound, "gru", c.dec_layers, true, &ys)?;
            let out: Vec<Var> = hidden
                .iter()
                .map(|&h| dense_apply(tape, &head, h))
                .collect::<Result<Vec<_>>>()?;
            // One bidirectional stack pass over the block.
            (out, 2 * k)
        }
        ArchSpec::Learn(c) => {
            // Two forward stacks, each advanced once per received step; bit t
            // fuses stack one at t with stack two at min(t + D, K-1).
            let out1 = gru_stack_forward(tape, &bound, "g1", c.dec_layers, false, &ys)?;
            let out2 = gru_stack_forward(tape, &bound, "g2", c.dec_layers, false, &ys)?;
            let mut out = Vec::with_capacity(k);
            for t in 0..k {
                let ahead = (t + c.delay).min(k - 1);
                let fused = tape.concat_cols(&[out1[t], out2[ahead]])?;
                out.push(dense_apply(tape, &head, fused)?);
            }
            (out, 2 * k)
        }
    };
    let logits = tape.concat_cols(&per_bit)?;
    let probs = tape.sigmoid(logits);
    Ok(DecoderGraph {
        probs,
        bound,
        gru_stack_steps: steps_used,
    })
}

// ── Forward-only entry points ────────────────────────────────────────

/// Encode a batch of message blocks (`B x K` bits) into power-constrained
/// symbols (`B x K*n`).
pub fn encode(params: &ModelParams, msgs: &Tensor, phase: Phase) -> Result<Tensor> {
    let mut tape = Tape::new();
    let g = encoder_graph(
        &mut tape,
        &params.arch,
        &params.enc,
        msgs,
        phase,
        params.calibration.as_ref(),
        false,
    )?;
    Ok(tape.value(g.code).clone())
}

/// Encoder output before the power constraint (used by calibration and the
/// interpretability probes).
pub fn encode_raw(params: &ModelParams, msgs: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (raw, _) = encoder_raw_graph(&mut tape, &params.arch, &params.enc, msgs, false)?;
    Ok(tape.value(raw).clone())
}

/// Decode received symbols (`B x K*n`) into bit probabilities (`B x K`).
pub fn decode(params: &ModelParams, y: &Tensor) -> Result<Tensor> {
    Ok(decode_with_stats(params, y)?.0)
}

/// Operation counters from one decode pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecodeStats {
    /// GRU stack step evaluations; 2K for both architectures, i.e. O(1)
    /// stack work per decoded bit.
    pub gru_stack_steps: usize,
}

pub fn decode_with_stats(params: &ModelParams, y: &Tensor) -> Result<(Tensor, DecodeStats)> {
    let expected = params.symbols_per_block();
    if !y.is_matrix() || y.cols() != expected {
        return Err(Error::Input(format!(
            "decode: received shape {:?}, expected width {expected}",
            y.shape()
        )));
    }
    let mut tape = Tape::new();
    let yv = tape.constant(y.clone());
    let g = decoder_graph(&mut tape, &params.arch, &params.dec, yv, false)?;
    Ok((
        tape.value(g.probs).clone(),
        DecodeStats {
            gru_stack_steps: g.gru_stack_steps,
        },
    ))
}

/// Apply the power constraint to raw symbols outside a tape.
pub fn apply_power_constraint(
    raw: &Tensor,
    mode: PowerMode,
    phase: Phase,
    calibration: Option<&PowerStats>,
) -> Result<Tensor> {
    match (mode, phase) {
        (PowerMode::Bitwise, Phase::Train) => {
            if raw.rows() < 2 {
                return Err(Error::Input("bitwise power constraint needs batch >= 2".into()));
            }
            Ok(normalize_columns(raw)?.0)
        }
        (PowerMode::Blockwise, Phase::Train) => Ok(normalize_global(raw)?.0),
        (PowerMode::HardTanh, Phase::Train) => Ok(raw.map(f64::tanh)),
        (PowerMode::HardTanh, Phase::Eval) => Ok(raw.map(|x| if x >= 0.0 { 1.0 } else { -1.0 })),
        (PowerMode::Bitwise, Phase::Eval) => match calibration {
            Some(PowerStats::Bitwise { mean, std }) if mean.len() == raw.cols() => {
                let (rows, cols) = (raw.rows(), raw.cols());
                let mut data = vec![0.0; rows * cols];
                for r in 0..rows {
                    for c in 0..cols {
                        data[r * cols + c] = (raw.at(r, c) - mean[c]) / std[c];
                    }
                }
                Tensor::matrix(rows, cols, data)
            }
            Some(PowerStats::Bitwise { .. }) => Err(Error::Input(
                "frozen bitwise statistics do not match the symbol width".into(),
            )),
            _ => Err(Error::Usage(
                "evaluation-phase power constraint requires frozen calibration".into(),
            )),
        },
        (PowerMode::Blockwise, Phase::Eval) => match calibration {
            Some(PowerStats::Blockwise { mean, std }) => Ok(raw.map(|x| (x - mean) / std)),
            _ => Err(Error::Usage(
                "evaluation-phase power constraint requires frozen calibration".into(),
            )),
        },
    }
}

/// Estimate and freeze power statistics from `nblocks` fresh random message
/// blocks. Deterministic given the noise stream.
pub fn calibrate_power(params: &mut ModelParams, nblocks: usize, ns: &NoiseStream) -> Result<()> {
    if nblocks < 1000 {
        return Err(Error::Usage(format!(
            "calibration needs at least 1000 blocks, got {nblocks}"
        )));
    }
    if params.arch.power() == PowerMode::HardTanh {
        params.calibration = Some(PowerStats::Hard);
        return Ok(());
    }
    let k = params.arch.k();
    let cols = params.symbols_per_block();
    let mut rng = ns.rng();
    let mut sum = vec![0.0; cols];
    let mut sumsq = vec![0.0; cols];
    let mut done = 0usize;
    while done < nblocks {
        let batch = (nblocks - done).min(1000);
        let msgs = random_message_matrix(batch, k, &mut rng);
        let raw = encode_raw(params, &msgs)?;
        for r in 0..batch {
            for c in 0..cols {
                let v = raw.at(r, c);
                sum[c] += v;
                sumsq[c] += v * v;
            }
        }
        done += batch;
    }
    let n = nblocks as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std: Vec<f64> = sumsq
        .iter()
        .zip(&mean)
        .map(|(&sq, &m)| (sq / n - m * m).max(0.0).sqrt())
        .collect();
    if let Some(c) = std.iter().position(|&s| s < DEGENERATE_STD) {
        return Err(Error::DegenerateEncoder(format!(
            "calibration found (near-)constant symbol position {c}"
        )));
    }
    params.calibration = Some(match params.arch.power() {
        PowerMode::Bitwise => PowerStats::Bitwise { mean, std },
        PowerMode::Blockwise => {
            let gm = mean.iter().sum::<f64>() / cols as f64;
            let var = sumsq.iter().sum::<f64>() / (n * cols as f64) - gm * gm;
            PowerStats::Blockwise {
                mean: gm,
                std: var.max(0.0).sqrt(),
            }
        }
        PowerMode::HardTanh => unreachable!("handled above"),
    });
    Ok(())
}

// ── Checkpoint format ────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format_version: u32,
    arch: ArchSpec,
    calibration: Option<PowerStats>,
    seed_lineage: Vec<String>,
    tensors: Vec<TensorMeta>,
}

/// Serialize a model to the checkpoint wire format: an 8-byte magic, a
/// length-prefixed JSON header (version, architecture, calibration, seed
/// lineage, tensor directory), then each tensor as little-endian f32 in
/// directory order. Round-trips byte-exactly.
pub fn checkpoint_to_bytes(params: &ModelParams) -> Result<Vec<u8>> {
    params.validate()?;
    let mut tensors = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    for (side, map) in [("enc", &params.enc), ("dec", &params.dec)] {
        for (name, t) in map {
            tensors.push(TensorMeta {
                name: format!("{side}.{name}"),
                shape: t.shape().to_vec(),
            });
            for &v in t.data() {
                payload.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    let header = CheckpointHeader {
        format_version: CHECKPOINT_VERSION,
        arch: params.arch.clone(),
        calibration: params.calibration.clone(),
        seed_lineage: params.seed_lineage.clone(),
        tensors,
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(format!("header encode: {e}")))?;
    let mut out = Vec::with_capacity(8 + 8 + header_json.len() + payload.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<ModelParams> {
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    if bytes.len() < 16 + header_len {
        return Err(Error::Checkpoint("truncated header".into()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[16..16 + header_len])
        .map_err(|e| Error::Checkpoint(format!("header decode: {e}")))?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {}",
            header.format_version
        )));
    }
    let mut offset = 16 + header_len;
    let mut enc = ParamMap::new();
    let mut dec = ParamMap::new();
    for meta in &header.tensors {
        let numel: usize = meta.shape.iter().product();
        let end = offset + numel * 4;
        if bytes.len() < end {
            return Err(Error::Checkpoint(format!("truncated tensor data for {}", meta.name)));
        }
        let data: Vec<f64> = bytes[offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        offset = end;
        let t = Tensor::new(meta.shape.clone(), data)?;
        match meta.name.split_once('.') {
            Some(("enc", rest)) => {
                if enc.insert(rest.to_string(), t).is_some() {
                    return Err(Error::Checkpoint(format!("duplicate tensor {}", meta.name)));
                }
            }
            Some(("dec", rest)) => {
                if dec.insert(rest.to_string(), t).is_some() {
                    return Err(Error::Checkpoint(format!("duplicate tensor {}", meta.name)));
                }
            }
            _ => return Err(Error::Checkpoint(format!("unknown tensor side in {}", meta.name))),
        }
    }
    if offset != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after tensor data".into()));
    }
    let params = ModelParams {
        arch: header.arch,
        enc,
        dec,
        calibration: header.calibration,
        seed_lineage: header.seed_lineage,
    };
    params.validate()?;
    Ok(params)
}

pub fn save_checkpoint(params: &ModelParams, path: &std::path::Path) -> Result<()> {
    std::fs::write(path, checkpoint_to_bytes(params)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &std::path::Path) -> Result<ModelParams> {
    checkpoint_from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn small_ae(k: usize) -> ArchSpec {
        ArchSpec::ChannelAe(ChannelAeConfig {
            k,
            rate: Rate::R12,
            enc_units: 4,
            dec_units: 6,
            enc_layers: 2,
            dec_layers: 2,
            power: PowerMode::Bitwise,
        })
    }

    fn small_learn(k: usize, delay: usize) -> ArchSpec {
        ArchSpec::Learn(LearnConfig {
            k,
            rate: Rate::R12,
            delay,
            enc_units: 4,
            dec_units: 6,
            enc_layers: 2,
            dec_layers: 2,
            power: PowerMode::Bitwise,
        })
    }

    #[test]
    fn encoder_output_shape_is_k_by_n() {
        let mut r = rng(1);
        let params = ModelParams::init(small_ae(10), &mut r).unwrap();
        let msgs = random_message_matrix(8, 10, &mut r);
        let code = encode(&params, &msgs, Phase::Train).unwrap();
        assert_eq!(code.shape(), &[8, 20]);

        // Default block configuration keeps the published (K, 1/R) widths.
        let cfg = ChannelAeConfig::new(100, Rate::R12);
        assert_eq!((cfg.k, cfg.rate.n_streams()), (100, 2));
        assert_eq!((cfg.enc_units, cfg.dec_units), (25, 100));
    }

    #[test]
    fn train_phase_bitwise_norm_is_exact() {
        let mut r = rng(2);
        let params = ModelParams::init(small_ae(6), &mut r).unwrap();
        let msgs = random_message_matrix(64, 6, &mut r);
        let code = encode(&params, &msgs, Phase::Train).unwrap();
        let (mean, sd) = crate::tensor::column_stats(&code);
        for c in 0..code.cols() {
            assert!(mean[c].abs() < 1e-12);
            assert!((sd[c] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn eval_without_calibration_is_usage_error() {
        let mut r = rng(3);
        let params = ModelParams::init(small_ae(6), &mut r).unwrap();
        let msgs = random_message_matrix(4, 6, &mut r);
        assert!(matches!(
            encode(&params, &msgs, Phase::Eval),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn power_constraint_examples() {
        let col = Tensor::matrix(2, 1, vec![1.0, 3.0]).unwrap();
        let out = apply_power_constraint(&col, PowerMode::Bitwise, Phase::Train, None).unwrap();
        assert_eq!(out.data(), &[-1.0, 1.0]);

        let hard = Tensor::matrix(1, 2, vec![0.3, -2.0]).unwrap();
        let out = apply_power_constraint(&hard, PowerMode::HardTanh, Phase::Eval, None).unwrap();
        assert_eq!(out.data(), &[1.0, -1.0]);

        let constant = Tensor::matrix(3, 1, vec![2.0, 2.0, 2.0]).unwrap();
        assert!(matches!(
            apply_power_constraint(&constant, PowerMode::Bitwise, Phase::Train, None),
            Err(Error::DegenerateEncoder(_))
        ));
    }

    #[test]
    fn learn_encoder_is_strictly_causal() {
        let mut r = rng(4);
        let params = ModelParams::init(small_learn(8, 2), &mut r).unwrap();
        let base = random_message_matrix(3, 8, &mut r);
        let raw_base = encode_raw(&params, &base).unwrap();
        for t in 0..8 {
            let mut flipped = base.clone();
            for b in 0..3 {
                flipped.set(b, t, 1.0 - flipped.at(b, t));
            }
            let raw_flip = encode_raw(&params, &flipped).unwrap();
            for b in 0..3 {
                for c in 0..t * 2 {
                    assert_eq!(raw_base.at(b, c), raw_flip.at(b, c), "flip at {t} leaked to col {c}");
                }
                // The first symbol of the flipped step must move for t = 0.
                if t == 0 {
                    assert_ne!(raw_base.at(b, 0), raw_flip.at(b, 0));
                }
            }
        }
    }

    #[test]
    fn learn_recurrent_sharing_across_block_lengths() {
        let mut r = rng(5);
        let params50 = ModelParams::init(small_learn(50, 3), &mut r).unwrap();
        let mut params100 = params50.clone();
        params100.arch = small_learn(100, 3);

        let mut mr = rng(6);
        let msgs50 = random_message_matrix(2, 50, &mut mr);
        let mut long = Tensor::zeros(vec![2, 100]);
        for b in 0..2 {
            for t in 0..50 {
                long.set(b, t, msgs50.at(b, t));
            }
        }
        let raw50 = encode_raw(&params50, &msgs50).unwrap();
        let raw100 = encode_raw(&params100, &long).unwrap();
        for b in 0..2 {
            assert_eq!(raw50.at(b, 0), raw100.at(b, 0));
            assert_eq!(raw50.at(b, 1), raw100.at(b, 1));
        }
    }

    #[test]
    fn zero_parameter_encoder_is_degenerate() {
        let mut r = rng(7);
        let mut params = ModelParams::init(small_learn(6, 1), &mut r).unwrap();
        for t in params.enc.values_mut() {
            *t = Tensor::zeros(t.shape().to_vec());
        }
        let msgs = random_message_matrix(16, 6, &mut r);
        assert!(matches!(
            encode(&params, &msgs, Phase::Train),
            Err(Error::DegenerateEncoder(_))
        ));
        assert!(matches!(
            calibrate_power(&mut params, 1000, &NoiseStream::new(1, 0)),
            Err(Error::DegenerateEncoder(_))
        ));
    }

    #[test]
    fn decoder_outputs_probabilities() {
        let mut r = rng(8);
        let params = ModelParams::init(small_ae(6), &mut r).unwrap();
        let y = Tensor::matrix(5, 12, (0..60).map(|i| ((i * 37 % 17) as f64 - 8.0) / 3.0).collect()).unwrap();
        let probs = decode(&params, &y).unwrap();
        assert_eq!(probs.shape(), &[5, 6]);
        assert!(probs.data().iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn learn_decoder_respects_delay_cone() {
        let mut r = rng(9);
        let k = 9;
        for delay in [0usize, 1, 3] {
            let params = ModelParams::init(small_learn(k, delay), &mut r).unwrap();
            let mut yr = rng(100 + delay as u64);
            let base = random_message_matrix(2, k * 2, &mut yr).map(|b| 2.0 * b - 1.0);
            let probs_base = decode(&params, &base).unwrap();
            for step in 0..k {
                let mut pert = base.clone();
                for b in 0..2 {
                    for j in 0..2 {
                        pert.set(b, step * 2 + j, pert.at(b, step * 2 + j) + 2.5);
                    }
                }
                let probs_pert = decode(&params, &pert).unwrap();
                for bit in 0..k {
                    if step > bit + delay {
                        for b in 0..2 {
                            assert_eq!(
                                probs_base.at(b, bit),
                                probs_pert.at(b, bit),
                                "delay {delay}: perturbation at step {step} leaked into bit {bit}"
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn learn_decode_is_constant_stack_work_per_bit() {
        let mut r = rng(10);
        let k = 12;
        let params = ModelParams::init(small_learn(k, 4), &mut r).unwrap();
        let y = Tensor::zeros(vec![1, k * 2]).map(|_| 0.1);
        let (_, stats) = decode_with_stats(&params, &y).unwrap();
        assert_eq!(stats.gru_stack_steps, 2 * k);
    }

    #[test]
    fn calibration_is_deterministic_and_freezes() {
        let mut r = rng(11);
        let mut a = ModelParams::init(small_ae(5), &mut r).unwrap();
        let mut b = a.clone();
        calibrate_power(&mut a, 1000, &NoiseStream::new(9, 1)).unwrap();
        calibrate_power(&mut b, 1000, &NoiseStream::new(9, 1)).unwrap();
        assert_eq!(a.calibration, b.calibration);
        assert!(matches!(a.calibration, Some(PowerStats::Bitwise { .. })));
        assert!(matches!(
            calibrate_power(&mut b, 10, &NoiseStream::new(9, 1)),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn checkpoint_round_trips_byte_exactly() {
        let mut r = rng(12);
        let mut params = ModelParams::init(small_learn(7, 2), &mut r).unwrap();
        calibrate_power(&mut params, 1000, &NoiseStream::new(5, 0)).unwrap();
        params.seed_lineage.push("train seed=12".into());
        let bytes = checkpoint_to_bytes(&params).unwrap();
        let loaded = checkpoint_from_bytes(&bytes).unwrap();
        let bytes2 = checkpoint_to_bytes(&loaded).unwrap();
        assert_eq!(bytes, bytes2);
        assert_eq!(loaded.arch, params.arch);
        assert_eq!(loaded.seed_lineage, params.seed_lineage);
    }

    #[test]
    fn checkpoint_rejects_missing_tensor() {
        let mut r = rng(13);
        let params = ModelParams::init(small_ae(4), &mut r).unwrap();
        let mut bytes = checkpoint_to_bytes(&params).unwrap();
        bytes[9] ^= 1;
        assert!(checkpoint_from_bytes(&bytes).is_err());

        let mut broken = params.clone();
        broken.enc.remove("out.b");
        assert!(checkpoint_to_bytes(&broken).is_err());
    }
}
