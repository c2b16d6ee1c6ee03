//! Built-in sanity suite behind the `selfcheck` CLI subcommand: gradient
//! checks, the Viterbi-vs-exhaustive-ML oracle, channel moments, and the
//! Adam closed form. Sized to finish in seconds.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::channels::{apply_channel, sample_noise, ChannelSpec, NoiseStream};
use crate::common::Rate;
use crate::conv::{
    builtin_code, bpsk_modulate, conv_encode, ml_decode_bruteforce, viterbi_decode, DecodeMode,
    ViterbiMetric,
};
use crate::error::Result;
use crate::gradcheck::{gru_stack_gradient_check, primitive_gradient_suite};
use crate::nn::{adam_step, AdamState, ParamMap};
use crate::tensor::Tensor;

/// Outcome of one named check.
#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Run the full suite; every entry reports pass/fail with a short detail.
pub fn run(seed: u64) -> Result<Vec<CheckResult>> {
    let mut results = Vec::new();

    for (name, err) in primitive_gradient_suite(seed)? {
        results.push(CheckResult {
            name: format!("gradient:{name}"),
            passed: err <= 1e-4,
            detail: format!("max relative error {err:.2e}"),
        });
    }
    let stack = gru_stack_gradient_check(seed ^ 0x5a5a)?;
    results.push(CheckResult {
        name: "gradient:gru_stack_bce".into(),
        passed: stack.max_rel_err <= 1e-4,
        detail: format!("max relative error {:.2e} at {}", stack.max_rel_err, stack.worst_param),
    });

    results.push(viterbi_oracle_check(seed)?);
    results.push(channel_moment_check(seed)?);
    results.push(adam_closed_form_check());
    Ok(results)
}

fn viterbi_oracle_check(seed: u64) -> Result<CheckResult> {
    use rand::Rng;
    let spec = builtin_code(Rate::R12, 2, false)?;
    let channel = ChannelSpec::awgn(1.0);
    let metric = ViterbiMetric::Gaussian { sigma: channel.sigma() };
    let k = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = 0;
    let trials = 200;
    for t in 0..trials {
        let msg: Vec<u8> = (0..k).map(|_| rng.random_range(0..2u8)).collect();
        let x = bpsk_modulate(&conv_encode(&msg, &spec)?);
        let xt = Tensor::matrix(1, x.len(), x)?;
        let y = apply_channel(&xt, &channel, &NoiseStream::new(seed, t))?;
        let vit = viterbi_decode(y.data(), &spec, &metric, DecodeMode::Full)?;
        let ml = ml_decode_bruteforce(y.data(), &spec, &metric)?;
        if vit != ml {
            mismatches += 1;
        }
    }
    Ok(CheckResult {
        name: "viterbi:ml_oracle".into(),
        passed: mismatches == 0,
        detail: format!("{mismatches}/{trials} mismatches vs exhaustive ML"),
    })
}

fn channel_moment_check(seed: u64) -> Result<CheckResult> {
    let n = 1_000_000;
    let awgn = sample_noise(&ChannelSpec::awgn(0.0), n, &NoiseStream::new(seed, 100))?;
    let var = awgn.iter().map(|v| v * v).sum::<f64>() / n as f64;
    let atn = sample_noise(&ChannelSpec::atn(5.0, 0.0), n, &NoiseStream::new(seed, 101))?;
    let var_atn = atn.iter().map(|v| v * v).sum::<f64>() / n as f64;
    let ok = (var - 1.0).abs() < 0.01 && (var_atn - 5.0 / 3.0).abs() < 0.1;
    Ok(CheckResult {
        name: "channels:moments".into(),
        passed: ok,
        detail: format!("awgn var {var:.4} (want 1), atn(5) var {var_atn:.4} (want 1.667)"),
    })
}

fn adam_closed_form_check() -> CheckResult {
    let mut params = ParamMap::new();
    params.insert("w".into(), Tensor::scalar(0.0));
    let mut grads = ParamMap::new();
    grads.insert("w".into(), Tensor::scalar(1.0));
    let mut state = AdamState::new(&params, 0.001);
    let ok = adam_step(&mut params, &grads, &mut state).is_ok()
        && (params["w"].item() + 0.001 / (1.0 + 1e-8)).abs() < 1e-15;
    CheckResult {
        name: "optimizer:adam_first_step".into(),
        passed: ok,
        detail: format!("first step delta {}", params["w"].item()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selfcheck_passes() {
        let results = run(2024).unwrap();
        assert!(!results.is_empty());
        for r in &results {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
    }
}
