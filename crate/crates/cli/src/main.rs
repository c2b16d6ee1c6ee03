//! `chanlab`: reproducible batch front-end for the channel-coding lab.
//!
//! Subcommands: train, eval, sweep, probe, baseline, calibrate, selfcheck.
//! Runs are driven by a TOML config file and/or a named preset, with flags
//! overriding both. Exit codes: 0 success, 1 runtime failure, 2 bad
//! configuration or usage.

mod commands;
mod config;

use clap::{Args, Parser, Subcommand};

use config::{parse_snr_grid, preset, RunConfig, PRESET_NAMES};

/// Errors split by exit code: configuration problems exit 2, runtime
/// failures exit 1.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "chanlab",
    about = "Channel-coding laboratory: train and benchmark recurrent neural codes against convolutional baselines",
    after_help = preset_help()
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

fn preset_help() -> String {
    let mut s = String::from("Presets (use with --preset):\n");
    for (name, desc) in PRESET_NAMES {
        s.push_str(&format!("  {name:<24} {desc}\n"));
    }
    s
}

#[derive(Subcommand)]
enum Command {
    /// Train a learned code and write its checkpoint + history
    Train(CommonArgs),
    /// Evaluate a checkpoint: robustness sweep or channel adaptation
    Eval(CommonArgs),
    /// BER/BLER sweep of one codec over an SNR grid
    Sweep(CommonArgs),
    /// Perturbation probes of a trained encoder/decoder
    Probe(CommonArgs),
    /// Convolutional-baseline sweeps over memory and decoding window
    Baseline(CommonArgs),
    /// Re-estimate a checkpoint's frozen power statistics
    Calibrate(CommonArgs),
    /// Run the built-in gradient / oracle / moment sanity suite
    Selfcheck(CommonArgs),
}

impl Command {
    fn common(&self) -> &CommonArgs {
        match self {
            Command::Train(a)
            | Command::Eval(a)
            | Command::Sweep(a)
            | Command::Probe(a)
            | Command::Baseline(a)
            | Command::Calibrate(a)
            | Command::Selfcheck(a) => a,
        }
    }
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// TOML config file (see the README for the schema)
    #[arg(long)]
    config: Option<String>,
    /// Named preset (see --help footer for the list)
    #[arg(long)]
    preset: Option<String>,
    /// Output directory; every artifact of the run lands here
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// channel_ae | learn | conv_baseline | uncoded
    #[arg(long)]
    arch: Option<String>,
    /// Code rate: 1/2, 1/3, or 1/4
    #[arg(long)]
    rate: Option<String>,
    /// Block length K (message bits per block)
    #[arg(long)]
    k: Option<usize>,
    /// Decoder lookahead: LEARN delay D or the Viterbi window w
    #[arg(long)]
    delay: Option<usize>,
    /// Channel kind: awgn | atn | radar
    #[arg(long)]
    channel: Option<String>,
    /// Single-point SNR in dB (channel section)
    #[arg(long)]
    snr: Option<f64>,
    /// Sweep grid "start:stop:step" dB, comma list, or single value
    #[arg(long)]
    snr_grid: Option<String>,
    /// ATN degrees of freedom
    #[arg(long)]
    nu: Option<f64>,
    /// Radar pulse probability
    #[arg(long)]
    p: Option<f64>,
    /// Radar pulse variance
    #[arg(long)]
    sigma2_sq: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    batches_per_epoch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Minimum-distance regularizer weight
    #[arg(long)]
    lambda: Option<f64>,
    /// bce | mse
    #[arg(long)]
    loss: Option<String>,
    /// Evaluation worker threads (determinism holds for any count; training
    /// is always single-threaded)
    #[arg(long)]
    workers: Option<usize>,
    /// Checkpoint path for eval/sweep/probe/calibrate
    #[arg(long)]
    ckpt: Option<String>,
    /// Convolutional code memory m
    #[arg(long)]
    m: Option<usize>,
    /// Tail-biting convolutional baseline
    #[arg(long)]
    tail_biting: Option<bool>,
    /// Receiver metric policy for conv codes: auto | gaussian
    #[arg(long)]
    metric: Option<String>,
    /// Clip threshold override for the Radar heuristic
    #[arg(long)]
    clip_threshold: Option<f64>,
    /// Report format: csv | json | both
    #[arg(long)]
    format: Option<String>,
    /// Probe position
    #[arg(long)]
    position: Option<usize>,
    /// Probe pulse amplitude
    #[arg(long)]
    pulse: Option<f64>,
    /// encoder_flip | decoder_pulse
    #[arg(long)]
    probe_kind: Option<String>,
    /// Stop rule: minimum bit errors per BER point
    #[arg(long)]
    min_errors: Option<u64>,
    /// Stop rule: block cap per BER point
    #[arg(long)]
    max_blocks: Option<u64>,
    /// Adaptation mode for eval: none | decoder_only | full
    #[arg(long)]
    adapt: Option<String>,
    /// Power constraint: bitwise | blockwise | hard
    #[arg(long)]
    power: Option<String>,
    #[arg(long)]
    enc_units: Option<usize>,
    #[arg(long)]
    dec_units: Option<usize>,
}

fn resolve_config(args: &CommonArgs) -> Result<RunConfig, CliError> {
    let mut cfg = match (&args.preset, &args.config) {
        (Some(_), Some(_)) => {
            return Err(CliError::Config(
                "pass either --preset or --config, not both".into(),
            ))
        }
        (Some(name), None) => preset(name)?,
        (None, Some(path)) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("reading {path}: {e}")))?;
            RunConfig::from_toml(&text)?
        }
        (None, None) => RunConfig::default(),
    };

    // Flags override preset/file values.
    let a = args.clone();
    if let Some(v) = a.out {
        cfg.run.out_dir = v;
    }
    if let Some(v) = a.seed {
        cfg.run.seed = v;
    }
    if let Some(v) = a.arch {
        cfg.run.arch = v;
    }
    if let Some(v) = a.rate {
        cfg.run.rate = v;
    }
    if let Some(v) = a.k {
        cfg.run.block_len = v;
    }
    if let Some(v) = a.delay {
        cfg.run.delay = Some(v);
    }
    if let Some(v) = a.channel {
        cfg.channel.kind = v;
    }
    if let Some(v) = a.snr {
        cfg.channel.snr_db = v;
    }
    if let Some(v) = a.snr_grid {
        cfg.eval.snr_grid = v;
    }
    if let Some(v) = a.nu {
        cfg.channel.nu = v;
    }
    if let Some(v) = a.p {
        cfg.channel.p = v;
    }
    if let Some(v) = a.sigma2_sq {
        cfg.channel.sigma2_sq = Some(v);
    }
    if let Some(v) = a.epochs {
        cfg.train.epochs = Some(v);
    }
    if let Some(v) = a.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = a.batches_per_epoch {
        cfg.train.batches_per_epoch = v;
    }
    if let Some(v) = a.lr {
        cfg.train.lr = v;
    }
    if let Some(v) = a.lambda {
        cfg.train.lambda = Some(v);
    }
    if let Some(v) = a.loss {
        cfg.train.loss = v;
    }
    if let Some(v) = a.workers {
        cfg.run.workers = v;
    }
    if let Some(v) = a.ckpt {
        cfg.run.ckpt = Some(v);
    }
    if let Some(v) = a.m {
        cfg.baseline.m = v;
    }
    if let Some(v) = a.tail_biting {
        cfg.baseline.tail_biting = v;
    }
    if let Some(v) = a.metric {
        cfg.eval.metric = v;
    }
    if let Some(v) = a.clip_threshold {
        cfg.eval.clip_threshold = Some(v);
    }
    if let Some(v) = a.format {
        cfg.run.report_format = v;
    }
    if let Some(v) = a.position {
        cfg.probe.position = v;
    }
    if let Some(v) = a.pulse {
        cfg.probe.pulse = v;
    }
    if let Some(v) = a.probe_kind {
        cfg.probe.kind = v;
    }
    if let Some(v) = a.min_errors {
        cfg.eval.min_bit_errors = v;
    }
    if let Some(v) = a.max_blocks {
        cfg.eval.max_blocks = v;
    }
    if let Some(v) = a.adapt {
        cfg.eval.adapt = v;
    }
    if let Some(v) = a.power {
        cfg.model.power = v;
    }
    if let Some(v) = a.enc_units {
        cfg.model.enc_units = v;
    }
    if let Some(v) = a.dec_units {
        cfg.model.dec_units = v;
    }

    // Early cross-field validation so config mistakes exit with code 2.
    cfg.channel.noise_kind()?;
    parse_snr_grid(&cfg.eval.snr_grid)?;
    cfg.rate()?;
    Ok(cfg)
}

fn main() {
    let cli = Cli::parse();
    let cfg = match resolve_config(cli.command.common()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{e}");
            std::process::exit(2);
        }
    };
    let result = match &cli.command {
        Command::Train(_) => commands::cmd_train(&cfg),
        Command::Eval(_) => commands::cmd_eval(&cfg),
        Command::Sweep(_) => commands::cmd_sweep(&cfg),
        Command::Probe(_) => commands::cmd_probe(&cfg),
        Command::Baseline(_) => commands::cmd_baseline(&cfg),
        Command::Calibrate(_) => commands::cmd_calibrate(&cfg),
        Command::Selfcheck(_) => commands::cmd_selfcheck(&cfg),
    };
    match result {
        Ok(()) => {}
        Err(e @ CliError::Config(_)) => {
            eprintln!("{e}");
            std::process::exit(2);
        }
        Err(e @ CliError::Runtime(_)) => {
            eprintln!("{e}");
            std::process::exit(1);
        }
    }
}
