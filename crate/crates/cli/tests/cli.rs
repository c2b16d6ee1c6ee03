//! End-to-end tests of the `chanlab` binary: exit codes, file outputs,
//! flag/config precedence, and byte-level reproducibility.

use std::path::Path;
use std::process::{Command, Output};

fn chanlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_chanlab"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn conv_sweep_writes_five_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("sweep");
    let out = chanlab(&[
        "sweep",
        "--arch",
        "conv_baseline",
        "--rate",
        "1/2",
        "--m",
        "2",
        "--channel",
        "awgn",
        "--snr-grid",
        "0:8:2",
        "--k",
        "32",
        "--max-blocks",
        "500",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_ok(&out);
    let csv = std::fs::read_to_string(out_dir.join("report.csv")).unwrap();
    let data_rows = csv
        .lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with("snr_db") && !l.is_empty())
        .count();
    assert_eq!(data_rows, 5, "{csv}");
    assert!(out_dir.join("config.toml").exists(), "resolved config must be echoed");
}

#[test]
fn selfcheck_exits_zero() {
    let out = chanlab(&["selfcheck"]);
    assert_ok(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("all") && stdout.contains("passed"), "{stdout}");
}

#[test]
fn unknown_config_key_exits_two_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[train]\nbatchsz = 10\n").unwrap();
    let out = chanlab(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("batchsz"), "{stderr}");
}

#[test]
fn train_is_bit_reproducible_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out_dir in [&a, &b] {
        let out = chanlab(&[
            "train",
            "--preset",
            "micro_ae_awgn",
            "--seed",
            "7",
            "--out",
            out_dir.to_str().unwrap(),
        ]);
        assert_ok(&out);
    }
    let ckpt_a = std::fs::read(a.join("model.ckpt")).unwrap();
    let ckpt_b = std::fs::read(b.join("model.ckpt")).unwrap();
    assert_eq!(ckpt_a, ckpt_b, "checkpoints must be byte-identical");
    let hist_a = std::fs::read(a.join("history.csv")).unwrap();
    let hist_b = std::fs::read(b.join("history.csv")).unwrap();
    assert_eq!(hist_a, hist_b);
}

#[test]
fn rerunning_from_the_echoed_config_reproduces_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first");
    let out = chanlab(&[
        "train",
        "--preset",
        "micro_ae_awgn",
        "--seed",
        "3",
        "--out",
        first.to_str().unwrap(),
    ]);
    assert_ok(&out);
    let ckpt_first = std::fs::read(first.join("model.ckpt")).unwrap();

    // Re-run purely from the echoed config (which still points at `first`),
    // after moving the original artifacts away.
    let cfg = dir.path().join("replay.toml");
    std::fs::copy(first.join("config.toml"), &cfg).unwrap();
    std::fs::remove_file(first.join("model.ckpt")).unwrap();
    let out = chanlab(&["train", "--config", cfg.to_str().unwrap()]);
    assert_ok(&out);
    let ckpt_replayed = std::fs::read(first.join("model.ckpt")).unwrap();
    assert_eq!(ckpt_first, ckpt_replayed);
}

#[test]
fn flags_override_config_file_values() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.toml");
    std::fs::write(&cfg, "[train]\nlr = 0.001\n").unwrap();
    let out_dir = dir.path().join("out");
    // Passing both a preset and a config file is ambiguous.
    let out = chanlab(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--preset",
        "micro_ae_awgn",
    ]);
    assert_eq!(out.status.code(), Some(2));

    let mut full = String::from("[run]\narch = \"channel_ae\"\nblock_len = 6\nseed = 1\n");
    full.push_str(&format!("out_dir = \"{}\"\n", out_dir.display()));
    full.push_str("[model]\nenc_units = 3\ndec_units = 4\nenc_layers = 1\ndec_layers = 1\n");
    full.push_str("[train]\nlr = 0.001\nbatch_size = 16\nepochs = 1\nbatches_per_epoch = 2\ntest_batches = 1\ncalib_blocks = 1000\n");
    std::fs::write(&cfg, &full).unwrap();
    let out = chanlab(&["train", "--config", cfg.to_str().unwrap(), "--lr", "0.0005"]);
    assert_ok(&out);
    let echoed = std::fs::read_to_string(out_dir.join("config.toml")).unwrap();
    assert!(echoed.contains("lr = 0.0005"), "{echoed}");
}

#[test]
fn empty_config_plus_flags_is_valid() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("empty.toml");
    std::fs::write(&cfg, "").unwrap();
    let out_dir = dir.path().join("out");
    let out = chanlab(&[
        "sweep",
        "--config",
        cfg.to_str().unwrap(),
        "--arch",
        "uncoded",
        "--k",
        "64",
        "--snr-grid",
        "0:2:2",
        "--max-blocks",
        "200",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_ok(&out);
    assert!(out_dir.join("report.csv").exists());
}

#[test]
fn worker_count_leaves_reports_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("w1"), dir.path().join("w4"));
    for (out_dir, workers) in [(&a, "1"), (&b, "4")] {
        let out = chanlab(&[
            "sweep",
            "--arch",
            "conv_baseline",
            "--m",
            "2",
            "--k",
            "64",
            "--snr-grid",
            "0:4:2",
            "--max-blocks",
            "2000",
            "--workers",
            workers,
            "--seed",
            "5",
            "--out",
            out_dir.to_str().unwrap(),
        ]);
        assert_ok(&out);
    }
    let ra = std::fs::read_to_string(a.join("report.csv")).unwrap();
    let rb = std::fs::read_to_string(b.join("report.csv")).unwrap();
    assert_eq!(ra, rb);
}

#[test]
fn probe_and_calibrate_work_on_a_trained_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let train_dir = dir.path().join("train");
    let out = chanlab(&[
        "train",
        "--preset",
        "micro_ae_awgn",
        "--out",
        train_dir.to_str().unwrap(),
    ]);
    assert_ok(&out);
    let ckpt = train_dir.join("model.ckpt");

    let probe_dir = dir.path().join("probe");
    let out = chanlab(&[
        "probe",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--probe-kind",
        "decoder_pulse",
        "--position",
        "2",
        "--pulse",
        "5.0",
        "--out",
        probe_dir.to_str().unwrap(),
    ]);
    assert_ok(&out);
    let probe_csv = std::fs::read_to_string(probe_dir.join("probe.csv")).unwrap();
    assert!(probe_csv.starts_with("position,mean_abs_diff\n"));
    assert_eq!(probe_csv.lines().count(), 7, "{probe_csv}"); // header + 6 positions

    let cal_dir = dir.path().join("cal");
    let out = chanlab(&[
        "calibrate",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--out",
        cal_dir.to_str().unwrap(),
    ]);
    assert_ok(&out);
    assert!(cal_dir.join("model.ckpt").exists());
}

#[test]
fn json_report_format_has_metadata() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("json");
    let out = chanlab(&[
        "sweep",
        "--arch",
        "uncoded",
        "--k",
        "32",
        "--snr-grid",
        "0",
        "--max-blocks",
        "200",
        "--format",
        "json",
        "--seed",
        "9",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_ok(&out);
    let json = std::fs::read_to_string(out_dir.join("report.json")).unwrap();
    for key in ["snr_convention", "seed", "code_id", "tag"] {
        assert!(json.contains(key), "missing {key}: {json}");
    }
    assert!(!Path::new("report.json").exists(), "must not write outside out_dir");
}
