//! Subcommand drivers. Every run resolves its configuration, echoes it to
//! `<out_dir>/config.toml`, executes, writes its artifacts inside the output
//! directory only, and prints a one-line summary.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use chanlab_core::{
    adaptivity_eval, builtin_code, calibrate_power, load_checkpoint, probe_decoder_pulse,
    probe_encoder_flip, robustness_eval, save_checkpoint, snr_sweep, AdaptMode, ConvCodec,
    DecodeMode, EvalOptions, EvalReport, MetricPolicy, ModelParams, NeuralCodec, NoiseStream,
    Rate, ReportFormat, StopRule, TrainConfig, UncodedBpsk,
};

use crate::config::{parse_snr_grid, RunConfig};
use crate::CliError;

type CmdResult<T> = Result<T, CliError>;

fn runtime_err(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

/// Create the output directory and echo the resolved config next to the
/// artifacts so the run can be reproduced from it.
pub fn prepare_out_dir(cfg: &RunConfig) -> CmdResult<PathBuf> {
    let out = PathBuf::from(&cfg.run.out_dir);
    std::fs::create_dir_all(&out).map_err(runtime_err)?;
    std::fs::write(out.join("config.toml"), cfg.to_toml()).map_err(runtime_err)?;
    Ok(out)
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn eval_options(cfg: &RunConfig) -> EvalOptions {
    EvalOptions {
        seed: cfg.run.seed,
        stop: StopRule {
            min_bit_errors: cfg.eval.min_bit_errors,
            max_blocks: cfg.eval.max_blocks,
        },
        batch_blocks: cfg.eval.batch_blocks,
        round_batches: cfg.eval.round_batches,
        workers: cfg.run.workers,
        paired: cfg.eval.paired,
    }
}

fn report_formats(cfg: &RunConfig) -> CmdResult<Vec<(ReportFormat, &'static str)>> {
    match cfg.run.report_format.as_str() {
        "csv" => Ok(vec![(ReportFormat::Csv, "csv")]),
        "json" => Ok(vec![(ReportFormat::Json, "json")]),
        "both" => Ok(vec![(ReportFormat::Csv, "csv"), (ReportFormat::Json, "json")]),
        other => Err(config_err(format!("unknown report format {other:?}"))),
    }
}

fn write_report(cfg: &RunConfig, out: &Path, stem: &str, report: &EvalReport) -> CmdResult<PathBuf> {
    let mut first = PathBuf::new();
    for (format, ext) in report_formats(cfg)? {
        let path = out.join(format!("{stem}.{ext}"));
        chanlab_core::export_report(report, format, &path).map_err(runtime_err)?;
        if first.as_os_str().is_empty() {
            first = path;
        }
    }
    Ok(first)
}

fn load_ckpt(cfg: &RunConfig) -> CmdResult<ModelParams> {
    let path = cfg
        .run
        .ckpt
        .as_ref()
        .ok_or_else(|| config_err("this subcommand needs run.ckpt (--ckpt <file>)"))?;
    load_checkpoint(Path::new(path)).map_err(runtime_err)
}

pub fn cmd_train(cfg: &RunConfig) -> CmdResult<()> {
    let out = prepare_out_dir(cfg)?;
    let arch = cfg.arch_spec()?;
    let kind = cfg.channel.noise_kind()?;
    let train_cfg = cfg.train_config()?;
    let (model, history) = chanlab_core::train(&arch, &kind, &train_cfg).map_err(runtime_err)?;
    let ckpt_path = out.join("model.ckpt");
    save_checkpoint(&model, &ckpt_path).map_err(runtime_err)?;
    std::fs::write(out.join("history.csv"), history.to_csv()).map_err(runtime_err)?;
    let bytes = chanlab_core::checkpoint_to_bytes(&model).map_err(runtime_err)?;
    let last = history.rows.last().expect("at least one epoch");
    println!(
        "train: {} on {kind} -> {} (sha256 {}) after {} epochs, test_loss {:.5}, probe_ber {:.5}",
        arch.name(),
        ckpt_path.display(),
        &sha256_hex(&bytes)[..16],
        history.rows.len(),
        last.test_loss,
        last.probe_ber
    );
    Ok(())
}

fn conv_codec(cfg: &RunConfig, m: usize, window: Option<usize>) -> CmdResult<ConvCodec> {
    let rate = cfg.rate()?;
    let spec = builtin_code(rate, m, cfg.baseline.tail_biting).map_err(config_err)?;
    let mode = match window {
        Some(w) => DecodeMode::Windowed { lookahead: w },
        None => DecodeMode::Full,
    };
    let metric = match cfg.eval.metric.as_str() {
        "auto" => MetricPolicy::Auto,
        "gaussian" => MetricPolicy::Gaussian,
        other => return Err(config_err(format!("unknown metric policy {other:?}"))),
    };
    Ok(ConvCodec {
        spec,
        k: cfg.run.block_len,
        mode,
        metric,
        clip_threshold: cfg.eval.clip_threshold,
    })
}

pub fn cmd_sweep(cfg: &RunConfig) -> CmdResult<()> {
    let out = prepare_out_dir(cfg)?;
    let kind = cfg.channel.noise_kind()?;
    let snrs = parse_snr_grid(&cfg.eval.snr_grid)?;
    let opts = eval_options(cfg);
    let report = match cfg.run.arch.as_str() {
        "conv_baseline" => {
            let codec = conv_codec(cfg, cfg.baseline.m, cfg.run.delay)?;
            snr_sweep(&codec, &kind, &snrs, &opts, cfg.run.rate.clone()).map_err(runtime_err)?
        }
        "uncoded" => {
            let codec = UncodedBpsk { k: cfg.run.block_len };
            snr_sweep(&codec, &kind, &snrs, &opts, "1".into()).map_err(runtime_err)?
        }
        "channel_ae" | "learn" => {
            let params = load_ckpt(cfg)?;
            let codec = NeuralCodec::new(params).map_err(runtime_err)?;
            let rate = codec.params.arch.rate().to_string();
            snr_sweep(&codec, &kind, &snrs, &opts, rate).map_err(runtime_err)?
        }
        other => return Err(config_err(format!("unknown arch {other:?}"))),
    };
    let path = write_report(cfg, &out, "report", &report)?;
    println!(
        "sweep: {} on {kind}, {} SNR points -> {}",
        report.meta.code_id,
        report.rows.len(),
        path.display()
    );
    Ok(())
}

pub fn cmd_eval(cfg: &RunConfig) -> CmdResult<()> {
    let out = prepare_out_dir(cfg)?;
    let kind = cfg.channel.noise_kind()?;
    let snrs = parse_snr_grid(&cfg.eval.snr_grid)?;
    let opts = eval_options(cfg);
    let params = load_ckpt(cfg)?;
    match cfg.eval.adapt.as_str() {
        "none" => {
            let report = robustness_eval(&params, &kind, &snrs, &opts).map_err(runtime_err)?;
            let path = write_report(cfg, &out, "report", &report)?;
            println!(
                "eval: robustness of {} on {kind} -> {}",
                report.meta.code_id,
                path.display()
            );
        }
        mode_str @ ("decoder_only" | "full") => {
            let mode = if mode_str == "full" {
                AdaptMode::Full
            } else {
                AdaptMode::DecoderOnly
            };
            let mut train_cfg: TrainConfig = cfg.train_config_for_arch(&params)?;
            if let Some(e) = cfg.eval.adapt_epochs {
                train_cfg.epochs = e;
            }
            let (report, adapted, history) =
                adaptivity_eval(&params, &kind, &snrs, &train_cfg, mode, &opts).map_err(runtime_err)?;
            let path = write_report(cfg, &out, "report", &report)?;
            let ckpt_path = out.join("adapted.ckpt");
            save_checkpoint(&adapted, &ckpt_path).map_err(runtime_err)?;
            std::fs::write(out.join("history.csv"), history.to_csv()).map_err(runtime_err)?;
            println!(
                "eval: {mode_str} adaptation of {} to {kind} -> {} (adapted ckpt {})",
                report.meta.code_id,
                path.display(),
                ckpt_path.display()
            );
        }
        other => return Err(config_err(format!("unknown adapt mode {other:?}"))),
    }
    Ok(())
}

pub fn cmd_baseline(cfg: &RunConfig) -> CmdResult<()> {
    let out = prepare_out_dir(cfg)?;
    let kind = cfg.channel.noise_kind()?;
    let snrs = parse_snr_grid(&cfg.eval.snr_grid)?;
    let opts = eval_options(cfg);
    let ms = if cfg.baseline.m_list.is_empty() {
        vec![cfg.baseline.m]
    } else {
        cfg.baseline.m_list.clone()
    };
    let windows: Vec<Option<usize>> = if cfg.baseline.w_list.is_empty() {
        vec![cfg.run.delay]
    } else {
        cfg.baseline.w_list.iter().map(|&w| Some(w)).collect()
    };
    let mut written = 0usize;
    for &m in &ms {
        for &w in &windows {
            let codec = conv_codec(cfg, m, w)?;
            let report =
                snr_sweep(&codec, &kind, &snrs, &opts, cfg.run.rate.clone()).map_err(runtime_err)?;
            let stem = match w {
                Some(w) => format!("report_m{m}_w{w}"),
                None => format!("report_m{m}_full"),
            };
            write_report(cfg, &out, &stem, &report)?;
            written += 1;
            for row in &report.rows {
                println!(
                    "baseline m={m} w={} snr={} ber={:.6e} ({} errors / {} bits)",
                    w.map(|v| v.to_string()).unwrap_or_else(|| "full".into()),
                    row.snr_db,
                    row.ber,
                    row.bit_errors,
                    row.bits
                );
            }
        }
    }
    println!("baseline: wrote {written} reports to {}", out.display());
    Ok(())
}

pub fn cmd_probe(cfg: &RunConfig) -> CmdResult<()> {
    let out = prepare_out_dir(cfg)?;
    let params = load_ckpt(cfg)?;
    let profile = match cfg.probe.kind.as_str() {
        "encoder_flip" => {
            probe_encoder_flip(&params, cfg.probe.position, cfg.probe.batch, cfg.run.seed)
                .map_err(runtime_err)?
        }
        "decoder_pulse" => probe_decoder_pulse(
            &params,
            cfg.probe.position,
            cfg.probe.pulse,
            cfg.probe.batch,
            cfg.run.seed,
        )
        .map_err(runtime_err)?,
        other => return Err(config_err(format!("unknown probe kind {other:?}"))),
    };
    let path = out.join("probe.csv");
    std::fs::write(&path, profile.to_csv()).map_err(runtime_err)?;
    println!(
        "probe: {} at position {} -> {} (argmax {})",
        profile.kind,
        profile.position,
        path.display(),
        profile.argmax()
    );
    Ok(())
}

pub fn cmd_calibrate(cfg: &RunConfig) -> CmdResult<()> {
    let out = prepare_out_dir(cfg)?;
    let mut params = load_ckpt(cfg)?;
    calibrate_power(
        &mut params,
        cfg.train.calib_blocks,
        &NoiseStream::new(cfg.run.seed, 0),
    )
    .map_err(runtime_err)?;
    let path = out.join("model.ckpt");
    save_checkpoint(&params, &path).map_err(runtime_err)?;
    println!(
        "calibrate: {} blocks -> {}",
        cfg.train.calib_blocks,
        path.display()
    );
    Ok(())
}

pub fn cmd_selfcheck(cfg: &RunConfig) -> CmdResult<()> {
    let results = chanlab_core::selfcheck::run(cfg.run.seed).map_err(runtime_err)?;
    let mut failed = 0;
    for r in &results {
        println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
        if !r.passed {
            failed += 1;
        }
    }
    if failed > 0 {
        return Err(CliError::Runtime(format!("{failed} selfcheck(s) failed")));
    }
    println!("selfcheck: all {} checks passed", results.len());
    Ok(())
}

impl RunConfig {
    /// Training config matched to a loaded checkpoint's architecture (the
    /// adaptation budget reuses the checkpoint's rate and family defaults).
    fn train_config_for_arch(&self, params: &ModelParams) -> CmdResult<TrainConfig> {
        let rate: Rate = params.arch.rate();
        let is_learn = params.arch.name() == "learn";
        let base = if is_learn {
            TrainConfig::learn_default(rate, self.run.seed)
        } else {
            TrainConfig::block_ae_default(rate, self.run.seed)
        };
        let snr_range = match (self.train.snr_low, self.train.snr_high) {
            (Some(a), Some(b)) => (a, b),
            (None, None) => base.snr_range_db,
            _ => return Err(config_err("train: set both snr_low and snr_high or neither")),
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
