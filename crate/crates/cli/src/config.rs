//! Run configuration: TOML schema, named presets, and flag merging.
//!
//! Precedence is defaults < preset or config file < command-line flags. The
//! fully resolved configuration is echoed to `<out_dir>/config.toml`, and
//! re-running any subcommand from that file reproduces the outputs.

use serde::{Deserialize, Serialize};

use chanlab_core::{
    ArchSpec, ChannelAeConfig, LearnConfig, LossKind, NoiseKind, PowerMode, Rate, TrainConfig,
};

use crate::CliError;

type CfgResult<T> = Result<T, CliError>;

fn cfg_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run: RunSection,
    pub channel: ChannelSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub probe: ProbeSection,
    pub baseline: BaselineSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            run: RunSection::default(),
            channel: ChannelSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
            probe: ProbeSection::default(),
            baseline: BaselineSection::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    /// channel_ae | learn | conv_baseline | uncoded
    pub arch: String,
    pub rate: String,
    pub block_len: usize,
    /// Decoder lookahead: LEARN delay D, or the Viterbi window.
    pub delay: Option<usize>,
    pub seed: u64,
    pub out_dir: String,
    /// csv | json | both
    pub report_format: String,
    pub workers: usize,
    /// Checkpoint consumed by eval/sweep/probe/calibrate.
    pub ckpt: Option<String>,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            arch: "channel_ae".into(),
            rate: "1/2".into(),
            block_len: 100,
            delay: None,
            seed: 0,
            out_dir: "runs/out".into(),
            report_format: "csv".into(),
            workers: 1,
            ckpt: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelSection {
    /// awgn | atn | radar
    pub kind: String,
    pub snr_db: f64,
    /// ATN degrees of freedom.
    pub nu: f64,
    /// Radar pulse probability.
    pub p: f64,
    /// Radar pulse variance; the published captions are ambiguous between
    /// variance and standard deviation, so both spellings are accepted
    /// (`sigma2_sq` wins the default at 5.0; set `sigma2_std` to interpret
    /// the value as a standard deviation instead).
    pub sigma2_sq: Option<f64>,
    pub sigma2_std: Option<f64>,
}

impl Default for ChannelSection {
    fn default() -> Self {
        ChannelSection {
            kind: "awgn".into(),
            snr_db: 2.0,
            nu: 3.0,
            p: 0.05,
            sigma2_sq: None,
            sigma2_std: None,
        }
    }
}

impl ChannelSection {
    pub fn noise_kind(&self) -> CfgResult<NoiseKind> {
        match self.kind.as_str() {
            "awgn" => Ok(NoiseKind::Awgn),
            "atn" => Ok(NoiseKind::Atn { nu: self.nu }),
            "radar" => {
                let sigma2_sq = match (self.sigma2_sq, self.sigma2_std) {
                    (Some(_), Some(_)) => {
                        return Err(cfg_err("channel: set only one of sigma2_sq / sigma2_std"))
                    }
                    (Some(v), None) => v,
                    (None, Some(s)) => s * s,
                    (None, None) => 5.0,
                };
                Ok(NoiseKind::Radar { p: self.p, sigma2_sq })
            }
            other => Err(cfg_err(format!("channel: unknown kind {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub enc_units: usize,
    pub dec_units: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    /// bitwise | blockwise | hard
    pub power: String,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            enc_units: 25,
            dec_units: 100,
            enc_layers: 2,
            dec_layers: 2,
            power: "bitwise".into(),
        }
    }
}

impl ModelSection {
    fn power_mode(&self) -> CfgResult<PowerMode> {
        match self.power.as_str() {
            "bitwise" => Ok(PowerMode::Bitwise),
            "blockwise" => Ok(PowerMode::Blockwise),
            "hard" => Ok(PowerMode::HardTanh),
            other => Err(cfg_err(format!("model: unknown power mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub batch_size: usize,
    /// Defaults per architecture: 250 (block AE) or 120 (low-latency).
    pub epochs: Option<usize>,
    pub batches_per_epoch: usize,
    pub lr: f64,
    /// bce | mse
    pub loss: String,
    pub dec_steps_per_enc: usize,
    /// Training-SNR mixture bounds; defaults depend on the rate.
    pub snr_low: Option<f64>,
    pub snr_high: Option<f64>,
    /// Defaults per architecture: 0.001 (block AE) or 0 (low-latency).
    pub lambda: Option<f64>,
    pub l_window: usize,
    pub plateau_patience: usize,
    pub plateau_min_delta: f64,
    pub test_batches: usize,
    pub probe_snr_db: Option<f64>,
    pub calib_blocks: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            batch_size: 1000,
            epochs: None,
            batches_per_epoch: 100,
            lr: 0.001,
            loss: "bce".into(),
            dec_steps_per_enc: 5,
            snr_low: None,
            snr_high: None,
            lambda: None,
            l_window: 10,
            plateau_patience: 10,
            plateau_min_delta: 1e-4,
            test_batches: 10,
            probe_snr_db: None,
            calib_blocks: 10_000,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// "start:stop:step" in dB, or a comma list, or one value.
    pub snr_grid: String,
    pub min_bit_errors: u64,
    pub max_blocks: u64,
    pub batch_blocks: usize,
    pub round_batches: usize,
    pub paired: bool,
    /// auto | gaussian (convolutional receiver metric policy)
    pub metric: String,
    pub clip_threshold: Option<f64>,
    /// none | decoder_only | full
    pub adapt: String,
    /// Adaptation budget; defaults to the train section values when absent.
    pub adapt_epochs: Option<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            snr_grid: "0:8:2".into(),
            min_bit_errors: 100,
            max_blocks: 1_000_000,
            batch_blocks: 500,
            round_batches: 4,
            paired: false,
            metric: "auto".into(),
            clip_threshold: None,
            adapt: "none".into(),
            adapt_epochs: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeSection {
    /// encoder_flip | decoder_pulse
    pub kind: String,
    pub position: usize,
    pub pulse: f64,
    pub batch: usize,
}

impl Default for ProbeSection {
    fn default() -> Self {
        ProbeSection {
            kind: "encoder_flip".into(),
            position: 0,
            pulse: 5.0,
            batch: 500,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineSection {
    pub m: usize,
    /// Memory sweep; empty means just `m`.
    pub m_list: Vec<usize>,
    /// Window sweep; empty means full-block decoding.
    pub w_list: Vec<usize>,
    pub tail_biting: bool,
}

impl Default for BaselineSection {
    fn default() -> Self {
        BaselineSection {
            m: 2,
            m_list: Vec::new(),
            w_list: Vec::new(),
            tail_biting: false,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> CfgResult<Self> {
        toml::from_str(text).map_err(|e| cfg_err(format!("config file: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn rate(&self) -> CfgResult<Rate> {
        Rate::parse(&self.run.rate).map_err(|e| cfg_err(e.to_string()))
    }

    /// The learned-code architecture requested by this config.
    pub fn arch_spec(&self) -> CfgResult<ArchSpec> {
        let rate = self.rate()?;
        let power = self.model.power_mode()?;
        match self.run.arch.as_str() {
            "channel_ae" => Ok(ArchSpec::ChannelAe(ChannelAeConfig {
                k: self.run.block_len,
                rate,
                enc_units: self.model.enc_units,
                dec_units: self.model.dec_units,
                enc_layers: self.model.enc_layers,
                dec_layers: self.model.dec_layers,
                power,
            })),
            "learn" => {
                let delay = self
                    .run
                    .delay
                    .ok_or_else(|| cfg_err("arch learn requires run.delay (the lookahead D)"))?;
                Ok(ArchSpec::Learn(LearnConfig {
                    k: self.run.block_len,
                    rate,
                    delay,
                    enc_units: self.model.enc_units,
                    dec_units: self.model.dec_units,
                    enc_layers: self.model.enc_layers,
                    dec_layers: self.model.dec_layers,
                    power,
                }))
            }
            other => Err(cfg_err(format!(
                "arch {other:?} is not a trainable architecture (use channel_ae or learn)"
            ))),
        }
    }

    pub fn loss_kind(&self) -> CfgResult<LossKind> {
        match self.train.loss.as_str() {
            "bce" => Ok(LossKind::Bce),
            "mse" => Ok(LossKind::Mse),
            other => Err(cfg_err(format!("train: unknown loss {other:?}"))),
        }
    }

    /// Training hyperparameters with per-arch and per-rate defaults filled.
    pub fn train_config(&self) -> CfgResult<TrainConfig> {
        let rate = self.rate()?;
        let is_learn = self.run.arch == "learn";
        let base = if is_learn {
            TrainConfig::learn_default(rate, self.run.seed)
        } else {
            TrainConfig::block_ae_default(rate, self.run.seed)
        };
        let snr_range = match (self.train.snr_low, self.train.snr_high) {
            (Some(a), Some(b)) => (a, b),
            (None, None) => base.snr_range_db,
            _ => return Err(cfg_err("train: set both snr_low and snr_high or neither")),
        };
        Ok(TrainConfig {
            batch_size: self.train.batch_size,
            epochs: self.train.epochs.unwrap_or(base.epochs),
            batches_per_epoch: self.train.batches_per_epoch,
            lr: self.train.lr,
            dec_steps_per_enc: self.train.dec_steps_per_enc,
            loss: self.loss_kind()?,
            snr_range_db: snr_range,
            lambda: self.train.lambda.unwrap_or(base.lambda),
            l_window: self.train.l_window,
            plateau_patience: self.train.plateau_patience,
            plateau_min_delta: self.train.plateau_min_delta,
            test_batches: self.train.test_batches,
            probe_snr_db: self
                .train
                .probe_snr_db
                .unwrap_or(0.5 * (snr_range.0 + snr_range.1)),
            calib_blocks: self.train.calib_blocks,
            seed: self.run.seed,
        })
    }
}

/// Parse an SNR grid: `start:stop:step` (inclusive), a comma list, or a
/// single value.
pub fn parse_snr_grid(s: &str) -> CfgResult<Vec<f64>> {
    let s = s.trim();
    if s.is_empty() {
        return Err(cfg_err("empty SNR grid"));
    }
    if s.contains(':') {
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 3 {
            return Err(cfg_err(format!("SNR grid {s:?} must be start:stop:step")));
        }
        let nums: Vec<f64> = parts
            .iter()
            .map(|p| p.parse::<f64>().map_err(|e| cfg_err(format!("SNR grid: {e}"))))
            .collect::<CfgResult<_>>()?;
        let (start, stop, step) = (nums[0], nums[1], nums[2]);
        if step <= 0.0 || stop < start {
            return Err(cfg_err(format!("SNR grid {s:?}: need step > 0 and stop >= start")));
        }
        let mut out = Vec::new();
        let mut v = start;
        while v <= stop + 1e-9 {
            out.push(v);
            v += step;
        }
        Ok(out)
    } else {
        s.split(',')
            .map(|p| p.trim().parse::<f64>().map_err(|e| cfg_err(format!("SNR grid: {e}"))))
            .collect()
    }
}

// ── Presets ──────────────────────────────────────────────────────────

/// Named presets covering the published experiment families plus the
/// desk-scale configurations used by the acceptance suite.
pub const PRESET_NAMES: &[(&str, &str)] = &[
    ("ae_r12_awgn_k100", "block AE, rate 1/2, K=100, AWGN training"),
    ("ae_r13_awgn_k100", "block AE, rate 1/3, K=100, AWGN training"),
    ("ae_r14_awgn_k100", "block AE, rate 1/4, K=100, AWGN training"),
    ("learn_r12_d1_awgn", "low-latency code, rate 1/2, D=1"),
    ("learn_r12_d10_awgn", "low-latency code, rate 1/2, D=10"),
    ("learn_r13_d10_awgn", "low-latency code, rate 1/3, D=10"),
    ("learn_r14_d10_awgn", "low-latency code, rate 1/4, D=10"),
    ("tbcc_r12_m2_awgn_k100", "sweep: tail-biting m=2 baseline on AWGN"),
    ("conv_lowlat_r12_awgn", "baseline: conv delay sweep m in 1..7, w in {1,3,10}"),
    ("robust_ae_r12_atn3", "eval: AWGN-trained model on ATN(3), no retraining"),
    ("adapt_ae_r12_atn3_dec", "eval: decoder-only adaptation to ATN(3)"),
    ("adapt_ae_r12_atn3_full", "eval: full adaptation to ATN(3)"),
    ("probe_learn_enc_flip0", "probe: encoder flip at position 0"),
    ("probe_ae_dec_pulse50", "probe: decoder pulse 5.0 at position 50"),
    ("desk_ae_r12_awgn", "desk-scale block AE (K=10) used by the acceptance suite"),
    ("desk_adapt_atn3", "desk-scale adaptation budget on ATN(3)"),
    ("micro_ae_awgn", "minutes-scale miniature for determinism checks"),
];

pub fn preset(name: &str) -> CfgResult<RunConfig> {
    let mut c = RunConfig::default();
    match name {
        "ae_r12_awgn_k100" | "ae_r13_awgn_k100" | "ae_r14_awgn_k100" => {
            c.run.arch = "channel_ae".into();
            c.run.rate = match name {
                "ae_r13_awgn_k100" => "1/3".into(),
                "ae_r14_awgn_k100" => "1/4".into(),
                _ => "1/2".into(),
            };
            c.run.block_len = 100;
            c.run.out_dir = format!("runs/{name}");
        }
        "learn_r12_d1_awgn" | "learn_r12_d10_awgn" | "learn_r13_d10_awgn" | "learn_r14_d10_awgn" => {
            c.run.arch = "learn".into();
            c.run.rate = match name {
                "learn_r13_d10_awgn" => "1/3".into(),
                "learn_r14_d10_awgn" => "1/4".into(),
                _ => "1/2".into(),
            };
            c.run.delay = Some(if name.contains("_d1_") { 1 } else { 10 });
            c.run.block_len = 100;
            c.run.out_dir = format!("runs/{name}");
        }
        "tbcc_r12_m2_awgn_k100" => {
            c.run.arch = "conv_baseline".into();
            c.run.block_len = 100;
            c.baseline.m = 2;
            c.baseline.tail_biting = true;
            c.eval.snr_grid = "0:8:1".into();
            c.run.out_dir = format!("runs/{name}");
        }
        "conv_lowlat_r12_awgn" => {
            c.run.arch = "conv_baseline".into();
            c.run.block_len = 100;
            c.baseline.m_list = vec![1, 2, 3, 4, 5, 6, 7];
            c.baseline.w_list = vec![1, 3, 10];
            c.eval.snr_grid = "0:6:2".into();
            c.run.out_dir = format!("runs/{name}");
        }
        "robust_ae_r12_atn3" | "adapt_ae_r12_atn3_dec" | "adapt_ae_r12_atn3_full" => {
            c.channel.kind = "atn".into();
            c.channel.nu = 3.0;
            c.eval.snr_grid = "-1:4:1".into();
            c.eval.adapt = match name {
                "adapt_ae_r12_atn3_dec" => "decoder_only".into(),
                "adapt_ae_r12_atn3_full" => "full".into(),
                _ => "none".into(),
            };
            c.run.out_dir = format!("runs/{name}");
        }
        "probe_learn_enc_flip0" => {
            c.probe.kind = "encoder_flip".into();
            c.probe.position = 0;
            c.run.out_dir = format!("runs/{name}");
        }
        "probe_ae_dec_pulse50" => {
            c.probe.kind = "decoder_pulse".into();
            c.probe.position = 50;
            c.probe.pulse = 5.0;
            c.run.out_dir = format!("runs/{name}");
        }
        "desk_ae_r12_awgn" => {
            c.run.arch = "channel_ae".into();
            c.run.block_len = 10;
            c.model.enc_units = 12;
            c.model.dec_units = 24;
            c.train.batch_size = 500;
            c.train.epochs = Some(25);
            c.train.batches_per_epoch = 40;
            c.train.test_batches = 4;
            c.eval.snr_grid = "0:6:2".into();
            c.run.out_dir = format!("runs/{name}");
        }
        "desk_adapt_atn3" => {
            c.run.block_len = 10;
            c.model.enc_units = 12;
            c.model.dec_units = 24;
            c.channel.kind = "atn".into();
            c.channel.nu = 3.0;
            c.train.batch_size = 500;
            c.train.batches_per_epoch = 40;
            c.train.test_batches = 4;
            c.eval.adapt_epochs = Some(12);
            c.eval.snr_grid = "2".into();
            c.eval.min_bit_errors = 400;
            c.run.out_dir = format!("runs/{name}");
        }
        "micro_ae_awgn" => {
            c.run.arch = "channel_ae".into();
            c.run.block_len = 6;
            c.model.enc_units = 3;
            c.model.dec_units = 4;
            c.model.enc_layers = 1;
            c.model.dec_layers = 1;
            c.train.batch_size = 16;
            c.train.epochs = Some(2);
            c.train.batches_per_epoch = 3;
            c.train.test_batches = 2;
            c.train.calib_blocks = 1000;
            c.eval.snr_grid = "0:4:2".into();
            c.eval.min_bit_errors = 50;
            c.eval.max_blocks = 2000;
            c.run.out_dir = format!("runs/{name}");
        }
        other => {
            let known: Vec<&str> = PRESET_NAMES.iter().map(|(n, _)| *n).collect();
            return Err(cfg_err(format!(
                "unknown preset {other:?}; available: {}",
                known.join(", ")
            )));
        }
    }
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected_with_the_key_name() {
        let err = RunConfig::from_toml("[train]\nbatchsz = 10\n").unwrap_err();
        let msg = format!("{err:?}");
        assert!(msg.contains("batchsz"), "{msg}");
    }

    #[test]
    fn toml_round_trip() {
        let c = preset("desk_ae_r12_awgn").unwrap();
        let text = c.to_toml();
        let parsed = RunConfig::from_toml(&text).unwrap();
        assert_eq!(parsed.to_toml(), text);
    }

    #[test]
    fn snr_grid_forms() {
        assert_eq!(parse_snr_grid("0:8:2").unwrap(), vec![0.0, 2.0, 4.0, 6.0, 8.0]);
        assert_eq!(parse_snr_grid("2").unwrap(), vec![2.0]);
        assert_eq!(parse_snr_grid("-1, 0.5, 3").unwrap(), vec![-1.0, 0.5, 3.0]);
        assert!(parse_snr_grid("4:0:1").is_err());
        assert!(parse_snr_grid("0:8:0").is_err());
    }

    #[test]
    fn every_preset_builds() {
        for (name, _) in PRESET_NAMES {
            let c = preset(name).unwrap();
            // Presets must themselves survive a TOML round trip.
            assert!(RunConfig::from_toml(&c.to_toml()).is_ok(), "preset {name}");
        }
        assert!(preset("nope").is_err());
    }

    #[test]
    fn radar_sigma_spelling_is_exclusive() {
        let mut c = RunConfig::default();
        c.channel.kind = "radar".into();
        assert_eq!(
            c.channel.noise_kind().unwrap(),
            NoiseKind::Radar { p: 0.05, sigma2_sq: 5.0 }
        );
        c.channel.sigma2_std = Some(5.0);
        assert_eq!(
            c.channel.noise_kind().unwrap(),
            NoiseKind::Radar { p: 0.05, sigma2_sq: 25.0 }
        );
        c.channel.sigma2_sq = Some(5.0);
        assert!(c.channel.noise_kind().is_err());
    }
}
