//! Shared fixtures for the kernel benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use chanlab_core::{
    builtin_code, bpsk_modulate, conv_encode, ArchSpec, ChannelAeConfig, ConvCodeSpec, ModelParams,
    PowerMode, Rate,
};

pub fn bench_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A mid-size block autoencoder for forward-pass benchmarks.
pub fn bench_model() -> ModelParams {
    let arch = ArchSpec::ChannelAe(ChannelAeConfig {
        k: 10,
        rate: Rate::R12,
        enc_units: 12,
        dec_units: 24,
        enc_layers: 2,
        dec_layers: 2,
        power: PowerMode::Bitwise,
    });
    ModelParams::init(arch, &mut bench_rng(42)).expect("valid architecture")
}

/// A noiseless received block for decoder benchmarks.
pub fn bench_codeword(spec: &ConvCodeSpec, k: usize) -> Vec<f64> {
    let msg: Vec<u8> = (0..k).map(|i| ((i * 5 + 3) % 2) as u8).collect();
    bpsk_modulate(&conv_encode(&msg, spec).expect("encodes"))
}

pub fn bench_conv_spec(m: usize) -> ConvCodeSpec {
    builtin_code(Rate::R12, m, false).expect("table row exists")
}
