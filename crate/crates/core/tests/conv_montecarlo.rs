//! Monte-Carlo properties of the convolutional baseline that need real
//! sample sizes: window-length monotonicity, the Radar clip heuristic, and
//! the tail-biting sweep shape.

use chanlab_core::{
    builtin_code, snr_sweep, ChannelSpec, ConvCodec, DecodeMode, EvalOptions, MetricPolicy,
    NoiseKind, Rate, StopRule,
};

fn opts(seed: u64, max_blocks: u64) -> EvalOptions {
    let mut o = EvalOptions::new(seed);
    o.stop = StopRule {
        min_bit_errors: 100,
        max_blocks,
    };
    o.batch_blocks = 1000;
    o.round_batches = 10;
    o
}

#[test]
fn shorter_viterbi_windows_degrade_ber() {
    // Rate 1/2, m=2, AWGN at 4 dB, one million message bits per window.
    let spec = builtin_code(Rate::R12, 2, false).unwrap();
    let k = 100;
    let channel = ChannelSpec::awgn(4.0);
    let mut o = opts(11, 10_000);
    o.stop.min_bit_errors = u64::MAX; // fixed-size runs: always 10^6 bits
    o.paired = true; // shared noise isolates the window effect
    let mut bers = Vec::new();
    for w in [0usize, 3, 10] {
        let codec = ConvCodec::new(spec.clone(), k, DecodeMode::Windowed { lookahead: w });
        let p = chanlab_core::measure_ber(&codec, &channel, &o, 0).unwrap();
        assert_eq!(p.bits, 1_000_000);
        println!("window {w}: ber {:.6e} ({} errors)", p.ber, p.bit_errors);
        bers.push(p.ber);
    }
    assert!(bers[0] > bers[1], "w=0 ({}) must degrade vs w=3 ({})", bers[0], bers[1]);
    assert!(bers[1] >= bers[2], "w=3 ({}) must not beat w=10 ({})", bers[1], bers[2]);
    assert!(bers[0] > bers[2]);
}

#[test]
fn radar_clip_heuristic_lowers_ber() {
    // Rate 1/3, m=2 on the Radar channel at 2 dB over one million bits:
    // clipping at 1 + 3*sigma1 before the Gaussian metric must help.
    let spec = builtin_code(Rate::R13, 2, false).unwrap();
    let k = 100;
    let channel = ChannelSpec::radar(0.05, 5.0, 2.0);
    let mut o = opts(13, 10_000);
    o.stop.min_bit_errors = u64::MAX;
    o.paired = true;

    let clipped = ConvCodec::new(spec.clone(), k, DecodeMode::Full); // Auto => clip + gaussian
    let unclipped = ConvCodec {
        metric: MetricPolicy::Gaussian,
        ..ConvCodec::new(spec, k, DecodeMode::Full)
    };
    let p_clip = chanlab_core::measure_ber(&clipped, &channel, &o, 0).unwrap();
    let p_raw = chanlab_core::measure_ber(&unclipped, &channel, &o, 0).unwrap();
    println!(
        "radar 2dB: clipped ber {:.6e}, unclipped ber {:.6e}",
        p_clip.ber, p_raw.ber
    );
    assert!(p_clip.bit_errors >= 100 && p_raw.bit_errors >= 100);
    assert!(p_clip.ber < p_raw.ber);
}

#[test]
fn tbcc_sweep_is_strictly_decreasing() {
    // Rate 1/2 m=2 tail-biting code on AWGN across 0..6 dB. The 6 dB point
    // sits near BER 2e-5, so the cap must admit several million bits.
    let spec = builtin_code(Rate::R12, 2, true).unwrap();
    let codec = ConvCodec::new(spec, 100, DecodeMode::Full);
    let o = opts(17, 200_000);
    let report = snr_sweep(&codec, &NoiseKind::Awgn, &[0.0, 2.0, 4.0, 6.0], &o, "1/2".into()).unwrap();
    for w in report.rows.windows(2) {
        assert!(
            w[0].ber > w[1].ber,
            "ber not strictly decreasing: {} -> {}",
            w[0].ber,
            w[1].ber
        );
    }
    for row in &report.rows {
        assert!(row.bit_errors >= 100, "undersampled at {} dB", row.snr_db);
    }
}
