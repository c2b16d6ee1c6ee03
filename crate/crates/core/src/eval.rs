//! Monte-Carlo BER/BLER measurement, SNR sweeps, robustness and adaptivity
//! drivers, and the perturbation probes.
//!
//! Simulation is organized in rounds of fixed-size block batches. Every
//! block owns its own message and noise streams derived from (seed, row
//! index, block index), and the stop rule is checked only between rounds,
//! so the measured counts are a pure function of (codec, spec, seed) and do
//! not depend on how many workers processed the batches.

use serde::{Deserialize, Serialize};

use crate::channels::{apply_channel, ChannelSpec, NoiseKind, NoiseStream, SNR_CONVENTION};
use crate::common::{count_errors, hard_decision, random_message_matrix};
use crate::conv::{conv_encode_detailed, viterbi_decode, ConvCodeSpec, DecodeMode, ViterbiMetric};
use crate::error::{Error, Result};
use crate::neural::{decode as neural_decode, encode as neural_encode, ModelParams, Phase};
use crate::tensor::Tensor;
use crate::training::{adapt, AdaptMode, TrainConfig, TrainHistory};

/// A block codec under test: maps message-bit batches to unit-power symbol
/// batches and back. Rows are blocks. Implementations must be pure
/// functions of their configuration so evaluation stays reproducible.
pub trait Codec: Sync {
    /// Identifier recorded in reports.
    fn id(&self) -> String;
    /// Message bits per block.
    fn message_len(&self) -> usize;
    /// Coded symbols per block.
    fn symbols_per_block(&self) -> usize;
    /// Encode `B x K` bits into `B x S` symbols.
    fn encode_batch(&self, msgs: &Tensor) -> Result<Tensor>;
    /// Decode `B x S` received symbols into `B x K` bits. The channel spec
    /// is available for receivers that use channel state information.
    fn decode_batch(&self, y: &Tensor, channel: &ChannelSpec) -> Result<Tensor>;
    /// Structural decoder delay in received steps, when meaningful.
    fn delay(&self) -> Option<usize> {
        None
    }
}

/// Uncoded BPSK: one symbol per bit, threshold detection.
pub struct UncodedBpsk {
    pub k: usize,
}

impl Codec for UncodedBpsk {
    fn id(&self) -> String {
        format!("uncoded_bpsk k={}", self.k)
    }

    fn message_len(&self) -> usize {
        self.k
    }

    fn symbols_per_block(&self) -> usize {
        self.k
    }

    fn encode_batch(&self, msgs: &Tensor) -> Result<Tensor> {
        Ok(msgs.map(|b| 2.0 * b - 1.0))
    }

    fn decode_batch(&self, y: &Tensor, _channel: &ChannelSpec) -> Result<Tensor> {
        Ok(y.map(|v| if v > 0.0 { 1.0 } else { 0.0 }))
    }
}

/// Receiver metric policy for the convolutional baseline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricPolicy {
    /// Channel-state-informed: Student-t metric on ATN, clip heuristic on
    /// Radar, Gaussian on AWGN.
    Auto,
    /// Always the Gaussian metric (the channel-mismatched receiver).
    Gaussian,
}

/// Convolutional code + windowed Viterbi as a block codec.
pub struct ConvCodec {
    pub spec: ConvCodeSpec,
    pub k: usize,
    pub mode: DecodeMode,
    pub metric: MetricPolicy,
    /// Override for the Radar clip threshold; `None` uses `1 + 3 sigma1`.
    pub clip_threshold: Option<f64>,
}

impl ConvCodec {
    pub fn new(spec: ConvCodeSpec, k: usize, mode: DecodeMode) -> Self {
        ConvCodec {
            spec,
            k,
            mode,
            metric: MetricPolicy::Auto,
            clip_threshold: None,
        }
    }

    fn metric_for(&self, channel: &ChannelSpec) -> ViterbiMetric {
        match self.metric {
            MetricPolicy::Gaussian => ViterbiMetric::gaussian(channel),
            MetricPolicy::Auto => {
                let mut m = ViterbiMetric::matched(channel);
                if let (ViterbiMetric::RadarClipGaussian { threshold, .. }, Some(t)) =
                    (&mut m, self.clip_threshold)
                {
                    *threshold = t;
                }
                m
            }
        }
    }
}

impl Codec for ConvCodec {
    fn id(&self) -> String {
        let mode = match self.mode {
            DecodeMode::Full => "full".to_string(),
            DecodeMode::Windowed { lookahead } => format!("w{lookahead}"),
        };
        let fallback = if self.spec.tail_biting
            && !crate::conv::tb_wrap_solvable(&self.spec, self.k).unwrap_or(false)
        {
            " tb-fallback-zs"
        } else {
            ""
        };
        format!("conv {} k={} {mode}{fallback}", self.spec, self.k)
    }

    fn message_len(&self) -> usize {
        self.k
    }

    fn symbols_per_block(&self) -> usize {
        self.k * self.spec.n_streams()
    }

    fn encode_batch(&self, msgs: &Tensor) -> Result<Tensor> {
        let (rows, k) = (msgs.rows(), msgs.cols());
        let n = self.spec.n_streams();
        let mut data = vec![0.0; rows * k * n];
        let mut msg = vec![0u8; k];
        for r in 0..rows {
            for c in 0..k {
                msg[c] = msgs.at(r, c) as u8;
            }
            let detail = conv_encode_detailed(&msg, &self.spec)?;
            for (i, &b) in detail.bits.iter().enumerate() {
                data[r * k * n + i] = if b == 1 { 1.0 } else { -1.0 };
            }
        }
        Tensor::matrix(rows, k * n, data)
    }

    fn decode_batch(&self, y: &Tensor, channel: &ChannelSpec) -> Result<Tensor> {
        let metric = self.metric_for(channel);
        let (rows, cols) = (y.rows(), y.cols());
        let mut out = vec![0.0; rows * self.k];
        for r in 0..rows {
            let row = &y.data()[r * cols..(r + 1) * cols];
            let bits = viterbi_decode(row, &self.spec, &metric, self.mode)?;
            for (c, &b) in bits.iter().enumerate() {
                out[r * self.k + c] = b as f64;
            }
        }
        Tensor::matrix(rows, self.k, out)
    }

    fn delay(&self) -> Option<usize> {
        match self.mode {
            DecodeMode::Windowed { lookahead } => Some(lookahead),
            DecodeMode::Full => None,
        }
    }
}

/// A trained neural code (block AE or low-latency) as a block codec.
pub struct NeuralCodec {
    pub params: ModelParams,
}

impl NeuralCodec {
    pub fn new(params: ModelParams) -> Result<Self> {
        params.validate()?;
        if params.calibration.is_none() {
            return Err(Error::Usage(
                "neural codec requires frozen power calibration (run calibrate first)".into(),
            ));
        }
        Ok(NeuralCodec { params })
    }
}

impl Codec for NeuralCodec {
    fn id(&self) -> String {
        self.params.id()
    }

    fn message_len(&self) -> usize {
        self.params.arch.k()
    }

    fn symbols_per_block(&self) -> usize {
        self.params.symbols_per_block()
    }

    fn encode_batch(&self, msgs: &Tensor) -> Result<Tensor> {
        neural_encode(&self.params, msgs, Phase::Eval)
    }

    fn decode_batch(&self, y: &Tensor, _channel: &ChannelSpec) -> Result<Tensor> {
        Ok(hard_decision(&neural_decode(&self.params, y)?))
    }

    fn delay(&self) -> Option<usize> {
        Some(self.params.arch.delay())
    }
}

// ── BER measurement ──────────────────────────────────────────────────

/// Stop once at least `min_bit_errors` bit errors were seen, or after
/// `max_blocks` blocks. Rows that stop on the block cap with fewer errors
/// are flagged under-sampled.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StopRule {
    pub min_bit_errors: u64,
    pub max_blocks: u64,
}

impl Default for StopRule {
    fn default() -> Self {
        StopRule {
            min_bit_errors: 100,
            max_blocks: 1_000_000,
        }
    }
}

/// Evaluation knobs shared by every measurement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub seed: u64,
    pub stop: StopRule,
    /// Blocks per batch (one unit of worker dispatch).
    pub batch_blocks: usize,
    /// Batches per stop-rule check. The total simulated block count is a
    /// multiple of `batch_blocks * round_batches` (up to the block cap), so
    /// results are independent of the worker count.
    pub round_batches: usize,
    pub workers: usize,
    /// Share noise realizations across codecs (paired comparison) instead
    /// of deriving per-codec independent streams.
    pub paired: bool,
}

impl EvalOptions {
    pub fn new(seed: u64) -> Self {
        EvalOptions {
            seed,
            stop: StopRule::default(),
            batch_blocks: 500,
            round_batches: 4,
            workers: 1,
            paired: false,
        }
    }
}

/// One measured BER/BLER point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BerPoint {
    pub snr_db: f64,
    pub ber: f64,
    pub bler: f64,
    pub bits: u64,
    pub bit_errors: u64,
    pub blocks: u64,
    pub block_errors: u64,
    pub undersampled: bool,
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derive a stream id from (codec/channel tag, lane, sweep row, block).
/// Kept under 61 bits so the four ChaCha sub-lanes inside `NoiseStream`
/// never collide across derived streams.
fn block_stream(tag: u64, lane: u64, row: u64, block: u64) -> u64 {
    let mut s = splitmix64(tag);
    s = splitmix64(s ^ lane);
    s = splitmix64(s ^ row);
    s = splitmix64(s ^ block);
    s >> 3
}

struct BatchCounts {
    bit_errors: u64,
    block_errors: u64,
    blocks: u64,
    bits: u64,
}

fn run_batch(
    codec: &dyn Codec,
    channel: &ChannelSpec,
    seed: u64,
    tag: u64,
    row: u64,
    first_block: u64,
    blocks: usize,
) -> Result<BatchCounts> {
    let k = codec.message_len();
    // Per-block message bits from per-block streams.
    let mut msgs = Tensor::zeros(vec![blocks, k]);
    for b in 0..blocks {
        let ns = NoiseStream::new(seed, block_stream(tag, 0, row, first_block + b as u64));
        let m = random_message_matrix(1, k, &mut ns.rng());
        for c in 0..k {
            msgs.set(b, c, m.at(0, c));
        }
    }
    let x = codec.encode_batch(&msgs)?;
    let s = codec.symbols_per_block();
    let mut y = Tensor::zeros(vec![blocks, s]);
    for b in 0..blocks {
        let ns = NoiseStream::new(seed, block_stream(tag, 1, row, first_block + b as u64));
        let row_x = Tensor::matrix(1, s, x.data()[b * s..(b + 1) * s].to_vec())?;
        let row_y = apply_channel(&row_x, channel, &ns)?;
        for c in 0..s {
            y.set(b, c, row_y.at(0, c));
        }
    }
    let decoded = codec.decode_batch(&y, channel)?;
    let (bit_errors, block_errors) = count_errors(&decoded, &msgs);
    Ok(BatchCounts {
        bit_errors,
        block_errors,
        blocks: blocks as u64,
        bits: (blocks * k) as u64,
    })
}

/// Measure BER/BLER for one (codec, channel, SNR) configuration by
/// simulating fresh random blocks until the stop rule fires.
pub fn measure_ber(
    codec: &dyn Codec,
    channel: &ChannelSpec,
    opts: &EvalOptions,
    row_idx: u64,
) -> Result<BerPoint> {
    channel.validate()?;
    let tag = if opts.paired { 0 } else { fnv1a(&codec.id()) };
    let mut totals = BatchCounts {
        bit_errors: 0,
        block_errors: 0,
        blocks: 0,
        bits: 0,
    };
    let workers = opts.workers.max(1);
    'rounds: loop {
        // Fixed round layout regardless of worker count.
        let mut batches = Vec::new();
        for i in 0..opts.round_batches.max(1) {
            let first = totals.blocks + (i * opts.batch_blocks) as u64;
            if first >= opts.stop.max_blocks {
                break;
            }
            let count = opts
                .batch_blocks
                .min((opts.stop.max_blocks - first) as usize);
            batches.push((first, count));
        }
        if batches.is_empty() {
            break 'rounds;
        }
        let results: Vec<Result<BatchCounts>> = if workers == 1 {
            batches
                .iter()
                .map(|&(first, count)| run_batch(codec, channel, opts.seed, tag, row_idx, first, count))
                .collect()
        } else {
            std::thread::scope(|scope| {
                let handles: Vec<_> = batches
                    .chunks(batches.len().div_ceil(workers))
                    .map(|chunk| {
                        scope.spawn(move || {
                            chunk
                                .iter()
                                .map(|&(first, count)| {
                                    run_batch(codec, channel, opts.seed, tag, row_idx, first, count)
                                })
                                .collect::<Vec<_>>()
                        })
                    })
                    .collect();
                handles
                    .into_iter()
                    .flat_map(|h| h.join().expect("worker panicked"))
                    .collect()
            })
        };
        for r in results {
            let c = r?;
            totals.bit_errors += c.bit_errors;
            totals.block_errors += c.block_errors;
            totals.blocks += c.blocks;
            totals.bits += c.bits;
        }
        if totals.bit_errors >= opts.stop.min_bit_errors || totals.blocks >= opts.stop.max_blocks {
            break 'rounds;
        }
    }
    Ok(BerPoint {
        snr_db: channel.snr_db,
        ber: totals.bit_errors as f64 / totals.bits as f64,
        bler: totals.block_errors as f64 / totals.blocks as f64,
        bits: totals.bits,
        bit_errors: totals.bit_errors,
        blocks: totals.blocks,
        block_errors: totals.block_errors,
        undersampled: totals.bit_errors < opts.stop.min_bit_errors,
    })
}

// ── Reports and sweeps ───────────────────────────────────────────────

/// Metadata attached to every report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub code_id: String,
    pub channel: NoiseKind,
    pub rate: String,
    pub delay: Option<usize>,
    pub seed: u64,
    pub snr_convention: String,
    /// "sweep", "robustness", or "adaptivity:<mode>".
    pub tag: String,
    pub paired: bool,
}

/// Machine-readable BER table for one (code, channel, delay) configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub meta: ReportMeta,
    pub rows: Vec<BerPoint>,
}

fn meta_for(codec: &dyn Codec, kind: &NoiseKind, opts: &EvalOptions, tag: &str, rate: String) -> ReportMeta {
    ReportMeta {
        code_id: codec.id(),
        channel: kind.clone(),
        rate,
        delay: codec.delay(),
        seed: opts.seed,
        snr_convention: SNR_CONVENTION.to_string(),
        tag: tag.to_string(),
        paired: opts.paired,
    }
}

/// Measure one BER row per SNR point, independent noise streams per row.
pub fn snr_sweep(
    codec: &dyn Codec,
    kind: &NoiseKind,
    snrs_db: &[f64],
    opts: &EvalOptions,
    rate: String,
) -> Result<EvalReport> {
    snr_sweep_tagged(codec, kind, snrs_db, opts, rate, "sweep")
}

fn snr_sweep_tagged(
    codec: &dyn Codec,
    kind: &NoiseKind,
    snrs_db: &[f64],
    opts: &EvalOptions,
    rate: String,
    tag: &str,
) -> Result<EvalReport> {
    if snrs_db.is_empty() {
        return Err(Error::Input("snr_sweep: empty SNR list".into()));
    }
    let mut rows = Vec::with_capacity(snrs_db.len());
    let mut sorted: Vec<(usize, f64)> = snrs_db.iter().copied().enumerate().collect();
    sorted.sort_by(|a, b| a.1.partial_cmp(&b.1).expect("finite SNR"));
    for (row_idx, snr) in sorted {
        let spec = ChannelSpec::new(kind.clone(), snr);
        rows.push(measure_ber(codec, &spec, opts, row_idx as u64)?);
    }
    rows.sort_by(|a, b| a.snr_db.partial_cmp(&b.snr_db).expect("finite SNR"));
    Ok(EvalReport {
        meta: meta_for(codec, kind, opts, tag, rate),
        rows,
    })
}

/// Evaluate a frozen model on a (possibly mismatched) channel without any
/// retraining.
pub fn robustness_eval(
    params: &ModelParams,
    kind: &NoiseKind,
    snrs_db: &[f64],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let rate = params.arch.rate().to_string();
    let codec = NeuralCodec::new(params.clone())?;
    snr_sweep_tagged(&codec, kind, snrs_db, opts, rate, "robustness")
}

/// Retrain on the target channel per the adaptivity mode, then sweep.
/// Returns the report and the retrained checkpoint.
pub fn adaptivity_eval(
    params: &ModelParams,
    kind: &NoiseKind,
    snrs_db: &[f64],
    train_cfg: &TrainConfig,
    mode: AdaptMode,
    opts: &EvalOptions,
) -> Result<(EvalReport, ModelParams, TrainHistory)> {
    let (adapted, history) = adapt(params, kind, train_cfg, mode)?;
    let rate = adapted.arch.rate().to_string();
    let codec = NeuralCodec::new(adapted.clone())?;
    let tag = match mode {
        AdaptMode::DecoderOnly => "adaptivity:decoder_only",
        AdaptMode::Full => "adaptivity:full",
    };
    let report = snr_sweep_tagged(&codec, kind, snrs_db, opts, rate, tag)?;
    Ok((report, adapted, history))
}

// ── Interpretability probes ──────────────────────────────────────────

/// Per-position mean absolute output difference of a perturbation probe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeProfile {
    /// "encoder_flip" or "decoder_pulse".
    pub kind: String,
    pub position: usize,
    pub profile: Vec<f64>,
}

impl ProbeProfile {
    /// CSV with columns `position,mean_abs_diff`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("position,mean_abs_diff\n");
        for (i, v) in self.profile.iter().enumerate() {
            out.push_str(&format!("{i},{v}\n"));
        }
        out
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.profile.iter().enumerate() {
            if v > self.profile[best] {
                best = i;
            }
        }
        best
    }
}

/// Encoder significant-recurrent-length probe: flip message bit `position`
/// across a batch and average |x1 - x2| per block step (aggregating the
/// coded streams of that step). The power constraint runs in evaluation
/// phase with frozen statistics on both batches.
pub fn probe_encoder_flip(
    params: &ModelParams,
    position: usize,
    batch: usize,
    seed: u64,
) -> Result<ProbeProfile> {
    let k = params.arch.k();
    let n = params.arch.rate().n_streams();
    if position >= k {
        return Err(Error::Input(format!("flip position {position} outside block length {k}")));
    }
    let mut rng = NoiseStream::new(seed, 0).rng();
    let msgs = random_message_matrix(batch, k, &mut rng);
    let mut flipped = msgs.clone();
    for b in 0..batch {
        flipped.set(b, position, 1.0 - flipped.at(b, position));
    }
    let x1 = neural_encode(params, &msgs, Phase::Eval)?;
    let x2 = neural_encode(params, &flipped, Phase::Eval)?;
    let mut profile = vec![0.0; k];
    for b in 0..batch {
        for t in 0..k {
            for j in 0..n {
                profile[t] += (x1.at(b, t * n + j) - x2.at(b, t * n + j)).abs();
            }
        }
    }
    for v in &mut profile {
        *v /= (batch * n) as f64;
    }
    Ok(ProbeProfile {
        kind: "encoder_flip".to_string(),
        position,
        profile,
    })
}

/// Decoder probe: add a deterministic pulse `p` to every coded stream at one
/// block step of otherwise noiseless codewords and average |u1 - u2| per bit.
pub fn probe_decoder_pulse(
    params: &ModelParams,
    position: usize,
    pulse: f64,
    batch: usize,
    seed: u64,
) -> Result<ProbeProfile> {
    let k = params.arch.k();
    let n = params.arch.rate().n_streams();
    if position >= k {
        return Err(Error::Input(format!("pulse position {position} outside block length {k}")));
    }
    if !pulse.is_finite() {
        return Err(Error::Input("pulse must be finite".into()));
    }
    let mut rng = NoiseStream::new(seed, 1).rng();
    let msgs = random_message_matrix(batch, k, &mut rng);
    let y1 = neural_encode(params, &msgs, Phase::Eval)?;
    let mut y2 = y1.clone();
    for b in 0..batch {
        for j in 0..n {
            y2.set(b, position * n + j, y2.at(b, position * n + j) + pulse);
        }
    }
    let u1 = neural_decode(params, &y1)?;
    let u2 = neural_decode(params, &y2)?;
    let mut profile = vec![0.0; k];
    for b in 0..batch {
        for t in 0..k {
            profile[t] += (u1.at(b, t) - u2.at(b, t)).abs();
        }
    }
    for v in &mut profile {
        *v /= batch as f64;
    }
    Ok(ProbeProfile {
        kind: "decoder_pulse".to_string(),
        position,
        profile,
    })
}
