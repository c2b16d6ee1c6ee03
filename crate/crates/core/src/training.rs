//! Training loop for the learned codes.
//!
//! One batch draws fresh random messages and a fresh SNR from the rate's
//! training mixture, then runs five decoder-only optimizer steps followed by
//! one encoder-only step, each against fresh channel noise. Losses are BCE
//! by default (MSE is selectable for comparison runs). The encoder step can
//! subtract a partial minimum-distance term: the loss is
//! `reconstruction - lambda * d(u_L)`, rewarding a larger minimum pairwise
//! distance between the encodings of all `2^L` length-L messages.
//!
//! The learning rate starts at `lr` and divides by 10 whenever the held-out
//! test loss fails to improve by at least `plateau_min_delta` for
//! `plateau_patience` consecutive epochs. Training aborts with the recorded
//! history when the test loss exceeds 10x its pre-training value for five
//! consecutive epochs.
//!
//! All randomness derives from the config seed through fixed-purpose stream
//! lanes, so single-threaded runs are bit-reproducible.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channels::{sample_noise, ChannelSpec, NoiseKind, NoiseStream};
use crate::common::{count_errors, hard_decision, random_message_matrix, Rate};
use crate::error::{Error, Result};
use crate::nn::{adam_step, collect_grads, AdamState};
use crate::neural::{
    apply_power_constraint, calibrate_power, decoder_graph, encode_raw, encoder_graph, ArchSpec,
    ModelParams, Phase, PowerMode,
};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Reconstruction loss selection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Bce,
    Mse,
}

/// Hyperparameters of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub lr: f64,
    /// Decoder optimizer steps per encoder step.
    pub dec_steps_per_enc: usize,
    pub loss: LossKind,
    /// Uniform training-SNR mixture in dB, inclusive bounds.
    pub snr_range_db: (f64, f64),
    /// Minimum-distance regularizer weight (0 disables it).
    pub lambda: f64,
    /// Regularizer message length L (capped at 12).
    pub l_window: usize,
    pub plateau_patience: usize,
    pub plateau_min_delta: f64,
    pub test_batches: usize,
    pub probe_snr_db: f64,
    pub calib_blocks: usize,
    pub seed: u64,
}

/// Default training-SNR mixture per rate.
pub fn default_snr_range(rate: Rate) -> (f64, f64) {
    match rate {
        Rate::R12 => (0.0, 8.0),
        Rate::R13 => (-1.0, 2.0),
        Rate::R14 => (-2.0, 2.0),
    }
}

impl TrainConfig {
    /// Block-autoencoder defaults: batch 1000, 250 epochs of 100 batches,
    /// Adam at 1e-3 with plateau decay, BCE, ENC:DEC step ratio 1:5, and
    /// the distance regularizer at lambda = 0.001 with L = 10.
    pub fn block_ae_default(rate: Rate, seed: u64) -> Self {
        let snr = default_snr_range(rate);
        TrainConfig {
            batch_size: 1000,
            epochs: 250,
            batches_per_epoch: 100,
            lr: 0.001,
            dec_steps_per_enc: 5,
            loss: LossKind::Bce,
            snr_range_db: snr,
            lambda: 0.001,
            l_window: 10,
            plateau_patience: 10,
            plateau_min_delta: 1e-4,
            test_batches: 10,
            probe_snr_db: 0.5 * (snr.0 + snr.1),
            calib_blocks: 10_000,
            seed,
        }
    }

    /// Low-latency defaults: 120 epochs and no distance regularizer.
    pub fn learn_default(rate: Rate, seed: u64) -> Self {
        TrainConfig {
            epochs: 120,
            lambda: 0.0,
            ..TrainConfig::block_ae_default(rate, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("training batch size must be >= 2".into()));
        }
        if self.dec_steps_per_enc < 1 {
            return Err(Error::Config("decoder:encoder step ratio must be >= 1".into()));
        }
        if self.epochs == 0 || self.batches_per_epoch == 0 {
            return Err(Error::Config("epochs and batches_per_epoch must be >= 1".into()));
        }
        if self.snr_range_db.0 > self.snr_range_db.1 {
            return Err(Error::Config("snr range low bound exceeds high bound".into()));
        }
        if self.lambda > 0.0 && self.l_window > 12 {
            return Err(Error::Usage(format!(
                "regularizer window L = {} exceeds the enumeration cap of 12",
                self.l_window
            )));
        }
        if self.test_batches == 0 {
            return Err(Error::Config("need at least one held-out test batch".into()));
        }
        Ok(())
    }
}

/// One SNR draw from the training mixture, fresh per batch.
pub fn sample_train_snr(range_db: (f64, f64), rng: &mut ChaCha8Rng) -> f64 {
    if range_db.0 == range_db.1 {
        return range_db.0;
    }
    rng.random_range(range_db.0..range_db.1)
}

/// Per-epoch training record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    pub probe_ber: f64,
    pub lr: f64,
    /// Wall-clock seconds for the epoch; informational only and excluded
    /// from the CSV so reports stay reproducible.
    pub wall_clock_s: f64,
}

/// Training history: one row per completed epoch plus step accounting.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub rows: Vec<EpochRow>,
    pub dec_steps: u64,
    pub enc_steps: u64,
}

impl TrainHistory {
    /// CSV with columns `epoch,train_loss,test_loss,probe_ber,lr`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,test_loss,probe_ber,lr\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.epoch, r.train_loss, r.test_loss, r.probe_ber, r.lr
            ));
        }
        out
    }
}

/// Retraining flavor for channel adaptation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptMode {
    /// Encoder frozen (run with its frozen calibration); decoder retrained.
    DecoderOnly,
    /// Both sides retrained; power statistics recalibrated afterwards.
    Full,
}

// ── Stream lanes ─────────────────────────────────────────────────────

const LANE_INIT: u64 = 1;
const LANE_SNR: u64 = 2;
const LANE_MSG: u64 = 3;
const LANE_NOISE: u64 = 4;
const LANE_TEST_MSG: u64 = 5;
const LANE_TEST_SNR: u64 = 6;
const LANE_TEST_NOISE: u64 = 7;
const LANE_CALIB: u64 = 8;

fn stream(seed: u64, lane: u64, idx: u64) -> NoiseStream {
    NoiseStream::new(seed, (lane << 40) | idx)
}

// ── Forward/backward plumbing ────────────────────────────────────────

struct PipelineGraph {
    loss: Var,
    enc_bound: BTreeMap<String, Var>,
    dec_bound: BTreeMap<String, Var>,
    probs: Var,
}

#[allow(clippy::too_many_arguments)]
fn pipeline_graph(
    tape: &mut Tape,
    model: &ModelParams,
    msgs: &Tensor,
    noise: &Tensor,
    loss_kind: LossKind,
    enc_phase: Phase,
    enc_grad: bool,
    dec_grad: bool,
) -> Result<PipelineGraph> {
    let eg = encoder_graph(
        tape,
        &model.arch,
        &model.enc,
        msgs,
        enc_phase,
        model.calibration.as_ref(),
        enc_grad,
    )?;
    let noise_leaf = tape.constant(noise.clone());
    let y = tape.add(eg.code, noise_leaf)?;
    let dg = decoder_graph(tape, &model.arch, &model.dec, y, dec_grad)?;
    let targets = tape.constant(msgs.clone());
    let loss = match loss_kind {
        LossKind::Bce => tape.bce_loss(dg.probs, targets)?,
        LossKind::Mse => tape.mse_loss(dg.probs, targets)?,
    };
    Ok(PipelineGraph {
        loss,
        enc_bound: eg.bound,
        dec_bound: dg.bound,
        probs: dg.probs,
    })
}

/// Every message of length `l` as a `2^l x l` bit matrix in lexicographic
/// order (bit 0 is the most significant position).
pub fn all_messages(l: usize) -> Tensor {
    let rows = 1usize << l;
    let mut data = vec![0.0; rows * l];
    for m in 0..rows {
        for i in 0..l {
            data[m * l + i] = ((m >> (l - 1 - i)) & 1) as f64;
        }
    }
    Tensor::matrix(rows, l, data).expect("shape matches")
}

/// Index pair and value of the minimum pairwise squared distance between the
/// rows of `codes`. Scanned in lexicographic pair order with strict
/// improvement, accumulating each distance left-to-right over positions.
fn min_pair(codes: &Tensor) -> (usize, usize, f64) {
    let (rows, cols) = (codes.rows(), codes.cols());
    let mut best = (0usize, 1usize, f64::INFINITY);
    for i in 0..rows {
        for j in (i + 1)..rows {
            let mut d = 0.0;
            for c in 0..cols {
                let diff = codes.at(i, c) - codes.at(j, c);
                d += diff * diff;
            }
            if d < best.2 {
                best = (i, j, d);
            }
        }
    }
    best
}

/// Partial minimum code distance over an arbitrary raw encoder: encode all
/// `2^l` messages from the zero initial state, apply training-phase power
/// normalization over that batch, and return the minimum pairwise squared
/// Euclidean distance.
pub fn min_distance_over_messages(
    encode_raw_fn: impl Fn(&Tensor) -> Result<Tensor>,
    l: usize,
    mode: PowerMode,
) -> Result<f64> {
    if l == 0 || l > 12 {
        return Err(Error::Usage(format!("regularizer window L = {l} must be in 1..=12")));
    }
    let msgs = all_messages(l);
    let raw = encode_raw_fn(&msgs)?;
    let code = apply_power_constraint(&raw, mode, Phase::Train, None)?;
    Ok(min_pair(&code).2)
}

/// Partial minimum code distance of a model's encoder.
pub fn min_distance_regularizer(params: &ModelParams, l: usize) -> Result<f64> {
    min_distance_over_messages(|m| encode_raw(params, m), l, params.arch.power())
}

fn finite_or_abort(loss: f64, what: &str, epoch: usize, batch: usize, seed: u64) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::NonFinite(format!(
            "{what} loss became {loss} at epoch {epoch}, batch {batch} (seed {seed}); \
             replay with the recorded config to reproduce"
        )))
    }
}

/// One decoder-only Adam step. The encoder is evaluated but frozen: its
/// bytes are untouched.
#[allow(clippy::too_many_arguments)]
pub fn train_decoder_step(
    model: &mut ModelParams,
    msgs: &Tensor,
    kind: &NoiseKind,
    snr_db: f64,
    noise_stream: &NoiseStream,
    loss_kind: LossKind,
    enc_phase: Phase,
    opt: &mut AdamState,
) -> Result<f64> {
    let spec = ChannelSpec::new(kind.clone(), snr_db);
    let noise = Tensor::matrix(
        msgs.rows(),
        model.symbols_per_block(),
        sample_noise(&spec, msgs.rows() * model.symbols_per_block(), noise_stream)?,
    )?;
    let mut tape = Tape::new();
    let g = pipeline_graph(&mut tape, model, msgs, &noise, loss_kind, enc_phase, false, true)?;
    let loss = tape.value(g.loss).item();
    let grads = tape.backward(g.loss)?;
    let dec_grads = collect_grads(&tape, &grads, &g.dec_bound);
    adam_step(&mut model.dec, &dec_grads, opt)?;
    Ok(loss)
}

/// One encoder-only Adam step against `reconstruction - lambda * d(u_L)`.
/// The decoder is evaluated but frozen.
#[allow(clippy::too_many_arguments)]
pub fn train_encoder_step(
    model: &mut ModelParams,
    msgs: &Tensor,
    kind: &NoiseKind,
    snr_db: f64,
    noise_stream: &NoiseStream,
    loss_kind: LossKind,
    lambda: f64,
    l_window: usize,
    opt: &mut AdamState,
) -> Result<f64> {
    let spec = ChannelSpec::new(kind.clone(), snr_db);
    let noise = Tensor::matrix(
        msgs.rows(),
        model.symbols_per_block(),
        sample_noise(&spec, msgs.rows() * model.symbols_per_block(), noise_stream)?,
    )?;
    let mut tape = Tape::new();
    let g = pipeline_graph(&mut tape, model, msgs, &noise, loss_kind, Phase::Train, true, false)?;
    let loss = if lambda > 0.0 {
        // Re-encode the 2^L regularizer messages through the same bound
        // parameters so the distance gradient reaches the encoder leaves.
        if l_window == 0 || l_window > 12 {
            return Err(Error::Usage(format!(
                "regularizer window L = {l_window} must be in 1..=12"
            )));
        }
        let reg_msgs = all_messages(l_window);
        let reg = regularizer_on_tape(&mut tape, model, &g.enc_bound, &reg_msgs)?;
        let weighted = tape.scale(reg, lambda);
        tape.sub(g.loss, weighted)?
    } else {
        g.loss
    };
    let loss_value = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    let enc_grads = collect_grads(&tape, &grads, &g.enc_bound);
    adam_step(&mut model.enc, &enc_grads, opt)?;
    Ok(loss_value)
}

/// Build `d(u_L)` on the tape from already-bound encoder parameters: encode
/// the message set, normalize with batch statistics, locate the minimum
/// pair from forward values, and emit the squared distance of that pair.
fn regularizer_on_tape(
    tape: &mut Tape,
    model: &ModelParams,
    enc_bound: &BTreeMap<String, Var>,
    reg_msgs: &Tensor,
) -> Result<Var> {
    use crate::common::bits_to_pm1;
    use crate::nn::{dense_apply, dense_vars, gru_stack_forward};

    let l = reg_msgs.cols();
    let pm1 = tape.constant(bits_to_pm1(reg_msgs));
    let xs: Vec<Var> = (0..l)
        .map(|t| tape.slice_cols(pm1, t, t + 1))
        .collect::<Result<Vec<_>>>()?;
    let (layers, bidir) = match &model.arch {
        ArchSpec::ChannelAe(c) => (c.enc_layers, true),
        ArchSpec::Learn(c) => (c.enc_layers, false),
    };
    let hidden = gru_stack_forward(tape, enc_bound, "gru", layers, bidir, &xs)?;
    let head = dense_vars(enc_bound, "out")?;
    let per_step: Vec<Var> = hidden
        .iter()
        .map(|&h| dense_apply(tape, &head, h))
        .collect::<Result<Vec<_>>>()?;
    let raw = tape.concat_cols(&per_step)?;
    let code = crate::neural::apply_power_on_tape(tape, raw, model.arch.power(), Phase::Train, None)?;
    let (i, j, _) = min_pair(tape.value(code));
    let row_i = tape.slice_rows(code, i, i + 1)?;
    let row_j = tape.slice_rows(code, j, j + 1)?;
    let diff = tape.sub(row_i, row_j)?;
    let sq = tape.mul(diff, diff)?;
    tape.sum(sq)
}

// ── The training loop ────────────────────────────────────────────────

struct TestSet {
    msgs: Vec<Tensor>,
    snrs: Vec<f64>,
}

fn build_test_set(arch: &ArchSpec, cfg: &TrainConfig) -> TestSet {
    let mut msg_rng = stream(cfg.seed, LANE_TEST_MSG, 0).rng();
    let mut snr_rng = stream(cfg.seed, LANE_TEST_SNR, 0).rng();
    let msgs = (0..cfg.test_batches)
        .map(|_| random_message_matrix(cfg.batch_size, arch.k(), &mut msg_rng))
        .collect();
    let snrs = (0..cfg.test_batches)
        .map(|_| sample_train_snr(cfg.snr_range_db, &mut snr_rng))
        .collect();
    TestSet { msgs, snrs }
}

/// Held-out loss and probe BER with fresh noise for this evaluation index.
fn evaluate_test(
    model: &ModelParams,
    kind: &NoiseKind,
    test: &TestSet,
    cfg: &TrainConfig,
    enc_phase: Phase,
    eval_idx: u64,
) -> Result<(f64, f64)> {
    let mut loss_sum = 0.0;
    let mut bit_errors = 0u64;
    let mut bits = 0u64;
    for (b, msgs) in test.msgs.iter().enumerate() {
        let ns = stream(cfg.seed, LANE_TEST_NOISE, eval_idx * test.msgs.len() as u64 + b as u64);
        let spec = ChannelSpec::new(kind.clone(), test.snrs[b]);
        let noise = Tensor::matrix(
            msgs.rows(),
            model.symbols_per_block(),
            sample_noise(&spec, msgs.rows() * model.symbols_per_block(), &ns)?,
        )?;
        let mut tape = Tape::new();
        let g = pipeline_graph(&mut tape, model, msgs, &noise, cfg.loss, enc_phase, false, false)?;
        loss_sum += tape.value(g.loss).item();

        // Probe BER at the fixed probe SNR, reusing the same message batch.
        let probe_spec = ChannelSpec::new(kind.clone(), cfg.probe_snr_db);
        let probe_ns = stream(
            cfg.seed,
            LANE_TEST_NOISE,
            (1 << 30) | (eval_idx * test.msgs.len() as u64 + b as u64),
        );
        let probe_noise = Tensor::matrix(
            msgs.rows(),
            model.symbols_per_block(),
            sample_noise(&probe_spec, msgs.rows() * model.symbols_per_block(), &probe_ns)?,
        )?;
        let mut probe_tape = Tape::new();
        let pg = pipeline_graph(
            &mut probe_tape,
            model,
            msgs,
            &probe_noise,
            cfg.loss,
            enc_phase,
            false,
            false,
        )?;
        let probs = probe_tape.value(pg.probs);
        let (errs, _) = count_errors(&hard_decision(probs), msgs);
        bit_errors += errs;
        bits += (msgs.rows() * msgs.cols()) as u64;
    }
    Ok((loss_sum / test.msgs.len() as f64, bit_errors as f64 / bits as f64))
}

fn run_loop(
    mut model: ModelParams,
    kind: &NoiseKind,
    cfg: &TrainConfig,
    enc_trainable: bool,
    enc_phase: Phase,
) -> Result<(ModelParams, TrainHistory)> {
    cfg.validate()?;
    let mut history = TrainHistory::default();
    let mut opt_dec = AdamState::new(&model.dec, cfg.lr);
    let mut opt_enc = AdamState::new(&model.enc, cfg.lr);
    let test = build_test_set(&model.arch, cfg);
    let initial_test_loss = evaluate_test(&model, kind, &test, cfg, enc_phase, 0)?.0;

    let mut msg_rng = stream(cfg.seed, LANE_MSG, 0).rng();
    let mut snr_rng = stream(cfg.seed, LANE_SNR, 0).rng();
    let mut noise_idx: u64 = 0;
    let mut best_test = f64::INFINITY;
    let mut plateau_streak = 0usize;
    let mut divergence_streak = 0usize;

    for epoch in 1..=cfg.epochs {
        let epoch_start = Instant::now();
        let mut loss_sum = 0.0;
        let mut steps = 0u64;
        for batch in 0..cfg.batches_per_epoch {
            // One message batch and one SNR draw per batch; each optimizer
            // step below sees a fresh noise realization.
            let msgs = random_message_matrix(cfg.batch_size, model.arch.k(), &mut msg_rng);
            let snr_db = sample_train_snr(cfg.snr_range_db, &mut snr_rng);
            for _ in 0..cfg.dec_steps_per_enc {
                let ns = stream(cfg.seed, LANE_NOISE, noise_idx);
                noise_idx += 1;
                let loss = train_decoder_step(
                    &mut model, &msgs, kind, snr_db, &ns, cfg.loss, enc_phase, &mut opt_dec,
                )?;
                loss_sum += finite_or_abort(loss, "decoder", epoch, batch, cfg.seed)?;
                steps += 1;
                history.dec_steps += 1;
            }
            if enc_trainable {
                let ns = stream(cfg.seed, LANE_NOISE, noise_idx);
                noise_idx += 1;
                let loss = train_encoder_step(
                    &mut model,
                    &msgs,
                    kind,
                    snr_db,
                    &ns,
                    cfg.loss,
                    cfg.lambda,
                    cfg.l_window,
                    &mut opt_enc,
                )?;
                loss_sum += finite_or_abort(loss, "encoder", epoch, batch, cfg.seed)?;
                steps += 1;
                history.enc_steps += 1;
            }
        }
        let (test_loss, probe_ber) = evaluate_test(&model, kind, &test, cfg, enc_phase, epoch as u64)?;
        history.rows.push(EpochRow {
            epoch,
            train_loss: loss_sum / steps as f64,
            test_loss,
            probe_ber,
            lr: opt_dec.lr,
            wall_clock_s: epoch_start.elapsed().as_secs_f64(),
        });

        if test_loss > 10.0 * initial_test_loss {
            divergence_streak += 1;
            if divergence_streak >= 5 {
                return Err(Error::Diverged {
                    epoch,
                    history: Box::new(history),
                });
            }
        } else {
            divergence_streak = 0;
        }

        if test_loss < best_test - cfg.plateau_min_delta {
            best_test = test_loss;
            plateau_streak = 0;
        } else {
            plateau_streak += 1;
            if plateau_streak >= cfg.plateau_patience {
                opt_dec.lr *= 0.1;
                opt_enc.lr *= 0.1;
                plateau_streak = 0;
            }
        }
    }
    Ok((model, history))
}

/// Train a fresh model of the given architecture on a channel family.
pub fn train(arch: &ArchSpec, kind: &NoiseKind, cfg: &TrainConfig) -> Result<(ModelParams, TrainHistory)> {
    arch.validate()?;
    cfg.validate()?;
    let mut init_rng = stream(cfg.seed, LANE_INIT, 0).rng();
    let mut model = ModelParams::init(arch.clone(), &mut init_rng)?;
    model
        .seed_lineage
        .push(format!("train arch={} channel={kind} seed={}", arch.name(), cfg.seed));
    let (mut model, history) = run_loop(model, kind, cfg, true, Phase::Train)?;
    calibrate_power(&mut model, cfg.calib_blocks, &stream(cfg.seed, LANE_CALIB, 0))?;
    Ok((model, history))
}

/// Retrain an existing model on a (new) channel family.
///
/// `DecoderOnly` freezes the encoder completely: it runs in evaluation phase
/// with its frozen calibration, its bytes are untouched, and the original
/// calibration is kept. `Full` retrains both sides and recalibrates.
pub fn adapt(
    base: &ModelParams,
    kind: &NoiseKind,
    cfg: &TrainConfig,
    mode: AdaptMode,
) -> Result<(ModelParams, TrainHistory)> {
    cfg.validate()?;
    let mut model = base.clone();
    model.seed_lineage.push(format!(
        "adapt mode={} channel={kind} seed={}",
        match mode {
            AdaptMode::DecoderOnly => "decoder_only",
            AdaptMode::Full => "full",
        },
        cfg.seed
    ));
    match mode {
        AdaptMode::DecoderOnly => {
            if model.calibration.is_none() {
                return Err(Error::Usage(
                    "decoder-only adaptation requires a calibrated encoder".into(),
                ));
            }
            run_loop(model, kind, cfg, false, Phase::Eval)
        }
        AdaptMode::Full => {
            let (mut model, history) = run_loop(model, kind, cfg, true, Phase::Train)?;
            calibrate_power(&mut model, cfg.calib_blocks, &stream(cfg.seed, LANE_CALIB, 0))?;
            Ok((model, history))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::{ChannelAeConfig, LearnConfig};
    use rand::SeedableRng;

    fn tiny_cfg(seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: 32,
            epochs: 2,
            batches_per_epoch: 3,
            lr: 0.001,
            dec_steps_per_enc: 5,
            loss: LossKind::Bce,
            snr_range_db: (0.0, 8.0),
            lambda: 0.001,
            l_window: 3,
            plateau_patience: 10,
            plateau_min_delta: 1e-4,
            test_batches: 2,
            probe_snr_db: 4.0,
            calib_blocks: 1000,
            seed,
        }
    }

    fn tiny_ae(k: usize) -> ArchSpec {
        ArchSpec::ChannelAe(ChannelAeConfig {
            k,
            rate: Rate::R12,
            enc_units: 3,
            dec_units: 4,
            enc_layers: 1,
            dec_layers: 1,
            power: PowerMode::Bitwise,
        })
    }

    #[test]
    fn snr_sampling_stays_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let v = sample_train_snr(default_snr_range(Rate::R12), &mut rng);
            assert!((0.0..=8.0).contains(&v));
            let v = sample_train_snr(default_snr_range(Rate::R14), &mut rng);
            assert!((-2.0..=2.0).contains(&v));
        }
        assert_eq!(sample_train_snr((3.0, 3.0), &mut rng), 3.0);
    }

    #[test]
    fn snr_mixture_is_uniform() {
        // Chi-squared test at 1% significance: 10 bins, df = 9, critical 21.67.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 10_000;
        let mut counts = [0usize; 10];
        for _ in 0..n {
            let v = sample_train_snr((0.0, 8.0), &mut rng);
            let bin = ((v / 8.0 * 10.0) as usize).min(9);
            counts[bin] += 1;
        }
        let expected = n as f64 / 10.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected) * (c as f64 - expected) / expected)
            .sum();
        assert!(chi2 < 21.67, "chi2 = {chi2}");
    }

    #[test]
    fn toy_min_distance_is_eight() {
        // Encoder mapping each bit b to the symbol pair (2b-1, 2b-1).
        let toy = |msgs: &Tensor| -> Result<Tensor> {
            let (rows, l) = (msgs.rows(), msgs.cols());
            let mut data = vec![0.0; rows * l * 2];
            for r in 0..rows {
                for t in 0..l {
                    let s = 2.0 * msgs.at(r, t) - 1.0;
                    data[r * l * 2 + 2 * t] = s;
                    data[r * l * 2 + 2 * t + 1] = s;
                }
            }
            Tensor::matrix(rows, l * 2, data)
        };
        let d1 = min_distance_over_messages(toy, 1, PowerMode::Bitwise).unwrap();
        assert!((d1 - 8.0).abs() < 1e-12);
        let d2 = min_distance_over_messages(toy, 2, PowerMode::Bitwise).unwrap();
        assert!((d2 - 8.0).abs() < 1e-12);
    }

    #[test]
    fn colliding_messages_give_zero_distance() {
        // Ignores the last bit entirely, so two messages always collide.
        let collide = |msgs: &Tensor| -> Result<Tensor> {
            let (rows, l) = (msgs.rows(), msgs.cols());
            let mut data = vec![0.0; rows * l];
            for r in 0..rows {
                for t in 0..l {
                    let b = if t + 1 == l { 0.0 } else { msgs.at(r, t) };
                    data[r * l + t] = 2.0 * b - 1.0 + 0.1 * t as f64;
                }
            }
            Tensor::matrix(rows, l, data)
        };
        let d = min_distance_over_messages(collide, 3, PowerMode::Blockwise).unwrap();
        assert_eq!(d, 0.0);
        assert!(min_distance_over_messages(collide, 13, PowerMode::Blockwise).is_err());
    }

    #[test]
    fn regularizer_matches_model_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = ModelParams::init(tiny_ae(6), &mut rng).unwrap();
        let via_model = min_distance_regularizer(&model, 3).unwrap();
        let via_closure =
            min_distance_over_messages(|m| encode_raw(&model, m), 3, PowerMode::Bitwise).unwrap();
        assert_eq!(via_model, via_closure);
        assert!(via_model >= 0.0);
    }

    #[test]
    fn freeze_contracts_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut model = ModelParams::init(tiny_ae(4), &mut rng).unwrap();
        let msgs = random_message_matrix(16, 4, &mut rng);
        let kind = NoiseKind::Awgn;

        let enc_before = model.enc.clone();
        let mut opt_dec = AdamState::new(&model.dec, 1e-3);
        let loss = train_decoder_step(
            &mut model,
            &msgs,
            &kind,
            2.0,
            &NoiseStream::new(1, 0),
            LossKind::Bce,
            Phase::Train,
            &mut opt_dec,
        )
        .unwrap();
        assert!(loss.is_finite());
        assert_eq!(model.enc, enc_before, "decoder step must not touch encoder bytes");

        let dec_before = model.dec.clone();
        let mut opt_enc = AdamState::new(&model.enc, 1e-3);
        train_encoder_step(
            &mut model,
            &msgs,
            &kind,
            2.0,
            &NoiseStream::new(1, 1),
            LossKind::Bce,
            0.001,
            2,
            &mut opt_enc,
        )
        .unwrap();
        assert_eq!(model.dec, dec_before, "encoder step must not touch decoder bytes");
        assert_ne!(model.enc, enc_before, "encoder step must update the encoder");
    }

    #[test]
    fn untrained_loss_is_near_ln2() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut model = ModelParams::init(tiny_ae(8), &mut rng).unwrap();
        let msgs = random_message_matrix(512, 8, &mut rng);
        let mut opt = AdamState::new(&model.dec, 0.0);
        let loss = train_decoder_step(
            &mut model,
            &msgs,
            &NoiseKind::Awgn,
            4.0,
            &NoiseStream::new(2, 0),
            LossKind::Bce,
            Phase::Train,
            &mut opt,
        )
        .unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 0.05, "loss = {loss}");
    }

    #[test]
    fn training_is_deterministic_and_accounts_steps() {
        let arch = tiny_ae(4);
        let cfg = tiny_cfg(77);
        let (m1, h1) = train(&arch, &NoiseKind::Awgn, &cfg).unwrap();
        let (m2, h2) = train(&arch, &NoiseKind::Awgn, &cfg).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(h1, h1.clone());
        assert_eq!(
            h1.rows.iter().map(|r| (r.train_loss, r.test_loss)).collect::<Vec<_>>(),
            h2.rows.iter().map(|r| (r.train_loss, r.test_loss)).collect::<Vec<_>>()
        );
        assert_eq!(h1.dec_steps, 5 * h1.enc_steps);
        assert_eq!(h1.rows.len(), cfg.epochs);
        // Epoch indices are 1..=epochs in order.
        for (i, r) in h1.rows.iter().enumerate() {
            assert_eq!(r.epoch, i + 1);
        }
    }

    #[test]
    fn overfit_smoke_drives_loss_down() {
        let arch = ArchSpec::ChannelAe(ChannelAeConfig {
            k: 4,
            rate: Rate::R12,
            enc_units: 4,
            dec_units: 8,
            enc_layers: 1,
            dec_layers: 1,
            power: PowerMode::Bitwise,
        });
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut model = ModelParams::init(arch, &mut rng).unwrap();
        let msgs = random_message_matrix(64, 4, &mut rng);
        let mut opt_dec = AdamState::new(&model.dec, 2e-3);
        let mut opt_enc = AdamState::new(&model.enc, 2e-3);
        // Essentially noiseless channel; loop on the one fixed batch.
        let mut last = f64::INFINITY;
        for i in 0..250 {
            for s in 0..5 {
                last = train_decoder_step(
                    &mut model,
                    &msgs,
                    &NoiseKind::Awgn,
                    40.0,
                    &NoiseStream::new(3, (i * 8 + s) as u64),
                    LossKind::Bce,
                    Phase::Train,
                    &mut opt_dec,
                )
                .unwrap();
            }
            train_encoder_step(
                &mut model,
                &msgs,
                &NoiseKind::Awgn,
                40.0,
                &NoiseStream::new(3, (i * 8 + 7) as u64),
                LossKind::Bce,
                0.0,
                1,
                &mut opt_enc,
            )
            .unwrap();
        }
        assert!(last < 0.1, "overfit loss stuck at {last}");
    }

    #[test]
    fn decoder_only_adapt_freezes_encoder_bytes() {
        let arch = tiny_ae(4);
        let cfg = tiny_cfg(8);
        let (model, _) = train(&arch, &NoiseKind::Awgn, &cfg).unwrap();
        let adapt_cfg = TrainConfig {
            epochs: 1,
            ..cfg.clone()
        };
        let (adapted, _) = adapt(&model, &NoiseKind::Atn { nu: 3.0 }, &adapt_cfg, AdaptMode::DecoderOnly).unwrap();
        assert_eq!(adapted.enc, model.enc);
        assert_eq!(adapted.calibration, model.calibration);
        assert_ne!(adapted.dec, model.dec);

        let (full, _) = adapt(&model, &NoiseKind::Atn { nu: 3.0 }, &adapt_cfg, AdaptMode::Full).unwrap();
        assert_ne!(full.enc, model.enc);
    }

    #[test]
    fn divergence_aborts_with_history() {
        let arch = tiny_ae(4);
        let cfg = TrainConfig {
            lr: 50.0,
            epochs: 30,
            ..tiny_cfg(9)
        };
        match train(&arch, &NoiseKind::Awgn, &cfg) {
            Err(Error::Diverged { epoch, history }) => {
                assert!(epoch >= 5);
                assert_eq!(history.rows.len(), epoch);
            }
            other => panic!("expected divergence, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn plateau_decay_divides_lr_by_ten() {
        let arch = tiny_ae(4);
        // Zero learning means the test loss can never improve, so the lr
        // must decay every `plateau_patience` epochs.
        let cfg = TrainConfig {
            lr: 0.0,
            epochs: 25,
            batches_per_epoch: 1,
            plateau_patience: 10,
            ..tiny_cfg(10)
        };
        let (_, h) = train(&arch, &NoiseKind::Awgn, &cfg).unwrap();
        let lrs: Vec<f64> = h.rows.iter().map(|r| r.lr).collect();
        for w in lrs.windows(2) {
            assert!(w[1] <= w[0]);
            if w[1] < w[0] {
                assert!((w[1] / w[0] - 0.1).abs() < 1e-12);
            }
        }
        assert!(lrs[24] < lrs[0] || lrs[0] == 0.0);
    }

    #[test]
    fn learn_trains_too() {
        let arch = ArchSpec::Learn(LearnConfig {
            k: 5,
            rate: Rate::R13,
            delay: 2,
            enc_units: 3,
            dec_units: 4,
            enc_layers: 1,
            dec_layers: 1,
            power: PowerMode::Bitwise,
        });
        let cfg = TrainConfig {
            lambda: 0.0,
            ..tiny_cfg(11)
        };
        let (model, h) = train(&arch, &NoiseKind::Awgn, &cfg).unwrap();
        assert!(model.calibration.is_some());
        assert_eq!(h.rows.len(), 2);
    }
}
