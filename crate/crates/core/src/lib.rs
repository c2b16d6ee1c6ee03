//! Channel-coding laboratory.
//!
//! The crate jointly trains recurrent-network channel codes (a block
//! autoencoder and a low-latency causal variant) and benchmarks them against
//! recursive convolutional codes with windowed Viterbi decoding, across
//! Gaussian, heavy-tailed, and bursty noise channels, with reproducible
//! BER/BLER sweeps and perturbation probes.
//!
//! Module map:
//!
//! - [`tensor`] / [`tape`] / [`nn`]: dense f64 tensors, reverse-mode
//!   autodiff, GRU/Bi-GRU layers, and Adam.
//! - [`channels`]: seeded AWGN / Student-t / Radar-pulse samplers, SNR
//!   conversion, and log-likelihoods.
//! - [`conv`]: the convolutional baseline — generator table, tail-biting
//!   encoder, windowed Viterbi, and an exhaustive ML oracle.
//! - [`neural`]: the learned code families and the power-constraint layer,
//!   plus the binary checkpoint format.
//! - [`training`]: alternating encoder/decoder optimization with an SNR
//!   mixture, plateau decay, and the minimum-distance regularizer.
//! - [`eval`] / [`report`]: Monte-Carlo BER measurement, sweeps,
//!   robustness/adaptivity drivers, probes, and CSV/JSON reports.
//! - [`gradcheck`] / [`selfcheck`]: finite-difference gradient verification
//!   and the built-in sanity suite.

pub mod channels;
pub mod common;
pub mod conv;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod neural;
pub mod nn;
pub mod report;
pub mod selfcheck;
pub mod tape;
pub mod tensor;
pub mod training;

pub use channels::{
    apply_channel, channel_loglik, sample_noise, snr_to_sigma, ChannelSpec, NoiseKind, NoiseStream,
    SNR_CONVENTION,
};
pub use common::Rate;
pub use conv::{
    bpsk_modulate, builtin_code, conv_encode, default_clip_threshold, default_traceback,
    ml_decode_bruteforce, octal_to_taps, radar_clip_preprocess, tb_wrap_solvable, viterbi_decode,
    ConvCodeSpec, DecodeMode, ViterbiMetric,
};
pub use error::{Error, Result};
pub use eval::{
    adaptivity_eval, measure_ber, probe_decoder_pulse, probe_encoder_flip, robustness_eval,
    snr_sweep, BerPoint, Codec, ConvCodec, EvalOptions, EvalReport, MetricPolicy, NeuralCodec,
    ProbeProfile, ReportMeta, StopRule, UncodedBpsk,
};
pub use neural::{
    apply_power_constraint, calibrate_power, checkpoint_from_bytes, checkpoint_to_bytes, decode,
    decode_with_stats, encode, encode_raw, load_checkpoint, save_checkpoint, ArchSpec,
    ChannelAeConfig, DecodeStats, LearnConfig, ModelParams, Phase, PowerMode, PowerStats,
};
pub use nn::{adam_step, bigru_forward, gru_forward, AdamState, GruLayerParams, ParamMap};
pub use report::{export_report, report_from_csv, report_from_json, report_to_csv, report_to_json, ReportFormat};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
pub use training::{
    adapt, all_messages, default_snr_range, min_distance_over_messages, min_distance_regularizer,
    sample_train_snr, train, train_decoder_step, train_encoder_step, AdaptMode, EpochRow, LossKind,
    TrainConfig, TrainHistory,
};
