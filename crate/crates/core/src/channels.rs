//! Noise channels and seeded sampling.
//!
//! Three noise families are supported on unit-power symbols:
//!
//! - AWGN: `y = x + sigma * g`, `g` standard normal.
//! - ATN:  `y = x + sigma * t`, `t` standard Student-t with `nu` degrees of
//!   freedom (`nu > 2` so the variance is finite). `sigma` is a scale
//!   multiplier, so the noise variance is `sigma^2 * nu / (nu - 2)`.
//! - Radar: `y = x + sigma * g + b * sqrt(sigma2_sq) * g2` with
//!   `b ~ Bernoulli(p)` gating a rare high-variance pulse.
//!
//! SNR convention: per-coded-symbol SNR at unit symbol power, so
//! `sigma = 10^(-snr_db / 20)`. Every report header repeats this string so
//! curves are comparable within the artifact.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// The SNR convention string recorded in report metadata.
pub const SNR_CONVENTION: &str = "per-symbol SNR at unit power; sigma = 10^(-snr_db/20)";

/// Noise family and its parameters, without the operating SNR.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseKind {
    Awgn,
    Atn { nu: f64 },
    Radar { p: f64, sigma2_sq: f64 },
}

impl NoiseKind {
    pub fn name(&self) -> &'static str {
        match self {
            NoiseKind::Awgn => "awgn",
            NoiseKind::Atn { .. } => "atn",
            NoiseKind::Radar { .. } => "radar",
        }
    }

    /// Noise variance per symbol at scale `sigma`.
    pub fn variance(&self, sigma: f64) -> f64 {
        match self {
            NoiseKind::Awgn => sigma * sigma,
            NoiseKind::Atn { nu } => sigma * sigma * nu / (nu - 2.0),
            NoiseKind::Radar { p, sigma2_sq } => sigma * sigma + p * sigma2_sq,
        }
    }
}

impl std::fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            NoiseKind::Awgn => write!(f, "awgn"),
            NoiseKind::Atn { nu } => write!(f, "atn(nu={nu})"),
            NoiseKind::Radar { p, sigma2_sq } => write!(f, "radar(p={p},sigma2_sq={sigma2_sq})"),
        }
    }
}

/// A noise family at a concrete operating SNR.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelSpec {
    pub kind: NoiseKind,
    pub snr_db: f64,
}

impl ChannelSpec {
    pub fn new(kind: NoiseKind, snr_db: f64) -> Self {
        ChannelSpec { kind, snr_db }
    }

    pub fn awgn(snr_db: f64) -> Self {
        ChannelSpec::new(NoiseKind::Awgn, snr_db)
    }

    pub fn atn(nu: f64, snr_db: f64) -> Self {
        ChannelSpec::new(NoiseKind::Atn { nu }, snr_db)
    }

    pub fn radar(p: f64, sigma2_sq: f64, snr_db: f64) -> Self {
        ChannelSpec::new(NoiseKind::Radar { p, sigma2_sq }, snr_db)
    }

    /// Gaussian scale implied by the SNR convention.
    pub fn sigma(&self) -> f64 {
        snr_to_sigma(self.snr_db)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.snr_db.is_finite() {
            return Err(Error::Config("channel: snr_db must be finite".into()));
        }
        match self.kind {
            NoiseKind::Awgn => Ok(()),
            NoiseKind::Atn { nu } => {
                if nu > 2.0 && nu.is_finite() {
                    Ok(())
                } else {
                    Err(Error::Config(format!(
                        "channel: ATN requires nu > 2 for finite variance, got {nu}"
                    )))
                }
            }
            NoiseKind::Radar { p, sigma2_sq } => {
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::Config(format!("channel: radar pulse probability {p} not in [0, 1]")));
                }
                if sigma2_sq <= 0.0 {
                    return Err(Error::Config(format!("channel: radar pulse variance {sigma2_sq} must be > 0")));
                }
                let s1 = self.sigma();
                if sigma2_sq <= s1 * s1 {
                    return Err(Error::Config(format!(
                        "channel: radar requires sigma2_sq > sigma1^2 ({sigma2_sq} <= {:.4})",
                        s1 * s1
                    )));
                }
                Ok(())
            }
        }
    }
}

/// `sigma = 10^(-snr_db / 20)` under unit symbol power.
pub fn snr_to_sigma(snr_db: f64) -> f64 {
    10f64.powf(-snr_db / 20.0)
}

/// Deterministic random source identified by a seed and a stream index.
/// The same `(seed, stream, count)` always yields the same samples. Each
/// logical stream owns four ChaCha sub-streams so that mixture channels can
/// gate pulses without shifting the base Gaussian lane: with `p = 0` the
/// Radar channel is bit-identical to AWGN.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NoiseStream {
    pub seed: u64,
    pub stream: u64,
}

const LANE_PRIMARY: u64 = 0;
const LANE_GATE: u64 = 1;
const LANE_PULSE: u64 = 2;

impl NoiseStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        NoiseStream { seed, stream }
    }

    fn lane(&self, lane: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream.wrapping_mul(4).wrapping_add(lane));
        rng
    }

    /// A general-purpose RNG on this stream's primary lane.
    pub fn rng(&self) -> ChaCha8Rng {
        self.lane(LANE_PRIMARY)
    }
}

/// Sample `n` noise values (the `y - x` part) for a channel.
pub fn sample_noise(spec: &ChannelSpec, n: usize, ns: &NoiseStream) -> Result<Vec<f64>> {
    spec.validate()?;
    let sigma = spec.sigma();
    let mut out = vec![0.0; n];
    match spec.kind {
        NoiseKind::Awgn => {
            let mut rng = ns.lane(LANE_PRIMARY);
            for o in &mut out {
                let g: f64 = rng.sample(StandardNormal);
                *o = sigma * g;
            }
        }
        NoiseKind::Atn { nu } => {
            let t_dist = StudentT::new(nu)
                .map_err(|e| Error::Config(format!("channel: bad Student-t parameter: {e}")))?;
            let mut rng = ns.lane(LANE_PRIMARY);
            for o in &mut out {
                let t: f64 = rng.sample(t_dist);
                *o = sigma * t;
            }
        }
        NoiseKind::Radar { p, sigma2_sq } => {
            let gate = Bernoulli::new(p)
                .map_err(|e| Error::Config(format!("channel: bad pulse probability: {e}")))?;
            let mut base = ns.lane(LANE_PRIMARY);
            let mut gates = ns.lane(LANE_GATE);
            let mut pulses = ns.lane(LANE_PULSE);
            let s2 = sigma2_sq.sqrt();
            for o in &mut out {
                let g: f64 = base.sample(StandardNormal);
                *o = sigma * g;
                if gates.sample(gate) {
                    let g2: f64 = pulses.sample(StandardNormal);
                    *o += s2 * g2;
                }
            }
        }
    }
    Ok(out)
}

/// Pass unit-power symbols through the channel: `y = x + noise`.
pub fn apply_channel(x: &Tensor, spec: &ChannelSpec, ns: &NoiseStream) -> Result<Tensor> {
    if !x.is_finite() {
        return Err(Error::Input("apply_channel: input symbols must be finite".into()));
    }
    let noise = sample_noise(spec, x.numel(), ns)?;
    let data = x.data().iter().zip(&noise).map(|(&xi, &ni)| xi + ni).collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Log density of a noise value `d = y - x`, up to additive constants that
/// are identical across candidate symbols (normalization constants that do
/// not depend on `d` are dropped).
pub fn loglik_value(d: f64, spec: &ChannelSpec) -> f64 {
    let sigma = spec.sigma();
    match spec.kind {
        NoiseKind::Awgn => -d * d / (2.0 * sigma * sigma),
        NoiseKind::Atn { nu } => {
            let z = d / sigma;
            -((nu + 1.0) / 2.0) * (1.0 + z * z / nu).ln()
        }
        NoiseKind::Radar { p, sigma2_sq } => {
            // Two-component Gaussian mixture, normalized so the p = 0 limit
            // reduces exactly to the AWGN expression.
            let s1sq = sigma * sigma;
            let ssq = s1sq + sigma2_sq;
            let a = (1.0 - p).ln() - d * d / (2.0 * s1sq);
            let b = p.ln() - 0.5 * (ssq / s1sq).ln() - d * d / (2.0 * ssq);
            log_sum_exp(a, b)
        }
    }
}

fn log_sum_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Per-symbol log-likelihood tensor of observing `y` given transmitted `x`.
pub fn channel_loglik(y: &Tensor, x: &Tensor, spec: &ChannelSpec) -> Result<Tensor> {
    spec.validate()?;
    if y.shape() != x.shape() {
        return Err(Error::Input(format!(
            "channel_loglik: shapes {:?} and {:?} differ",
            y.shape(),
            x.shape()
        )));
    }
    let data = y
        .data()
        .iter()
        .zip(x.data())
        .map(|(&yi, &xi)| loglik_value(yi - xi, spec))
        .collect();
    Tensor::new(y.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snr_conversion_examples() {
        assert_eq!(snr_to_sigma(0.0), 1.0);
        assert!((snr_to_sigma(20.0) - 0.1).abs() < 1e-15);
        // 20*log10(2) = 6.0206 dB, so -6.0206 dB doubles the noise scale.
        assert!((snr_to_sigma(-6.0206) - 2.0).abs() < 1e-4);
        assert!((snr_to_sigma(-6.0) - 1.99526).abs() < 1e-5);
    }

    #[test]
    fn same_stream_is_bit_identical() {
        let spec = ChannelSpec::atn(3.0, 1.0);
        let ns = NoiseStream::new(42, 7);
        let a = sample_noise(&spec, 1000, &ns).unwrap();
        let b = sample_noise(&spec, 1000, &ns).unwrap();
        assert_eq!(a, b);
        let other = sample_noise(&spec, 1000, &NoiseStream::new(42, 8)).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn radar_p0_matches_awgn_bitwise() {
        let ns = NoiseStream::new(3, 11);
        let awgn = sample_noise(&ChannelSpec::awgn(2.0), 512, &ns).unwrap();
        let radar = sample_noise(&ChannelSpec::radar(0.0, 5.0, 2.0), 512, &ns).unwrap();
        assert_eq!(awgn, radar);
    }

    #[test]
    fn noiseless_limit_returns_input() {
        // 300 dB -> sigma = 1e-15; scaled standard normals underflow well
        // below f64 visibility on unit-power symbols.
        let x = Tensor::matrix(1, 8, vec![1.0, -1.0, 1.0, 1.0, -1.0, -1.0, 1.0, -1.0]).unwrap();
        let y = apply_channel(&x, &ChannelSpec::awgn(300.0), &NoiseStream::new(1, 0)).unwrap();
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn awgn_loglik_difference_is_2y_over_sigma_sq() {
        let spec = ChannelSpec::awgn(3.0);
        let s2 = spec.sigma() * spec.sigma();
        for &y in &[0.3, -1.7, 2.4] {
            let diff = loglik_value(y - 1.0, &spec) - loglik_value(y + 1.0, &spec);
            assert!((diff - 2.0 * y / s2).abs() < 1e-12);
        }
    }

    #[test]
    fn radar_p0_loglik_equals_awgn_exactly() {
        let awgn = ChannelSpec::awgn(1.5);
        let radar = ChannelSpec::radar(0.0, 5.0, 1.5);
        for &d in &[0.0, 0.4, -2.3, 6.0] {
            assert_eq!(loglik_value(d, &awgn), loglik_value(d, &radar));
        }
    }

    #[test]
    fn atn_large_nu_orders_candidates_like_gaussian() {
        let atn = ChannelSpec::atn(1e6, 0.0);
        let awgn = ChannelSpec::awgn(0.0);
        for i in 0..200 {
            let y = -3.0 + 0.03 * i as f64;
            let atn_pick = loglik_value(y - 1.0, &atn) > loglik_value(y + 1.0, &atn);
            let awgn_pick = loglik_value(y - 1.0, &awgn) > loglik_value(y + 1.0, &awgn);
            assert_eq!(atn_pick, awgn_pick);
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(ChannelSpec::atn(2.0, 0.0).validate().is_err());
        assert!(ChannelSpec::radar(1.5, 5.0, 0.0).validate().is_err());
        assert!(ChannelSpec::radar(0.05, -1.0, 0.0).validate().is_err());
        // sigma1 = 1 at 0 dB, so pulse variance 0.5 violates sigma2 >> sigma1.
        assert!(ChannelSpec::radar(0.05, 0.5, 0.0).validate().is_err());
    }

    #[test]
    fn moment_smoke_awgn() {
        let spec = ChannelSpec::awgn(0.0);
        let n = 200_000;
        let noise = sample_noise(&spec, n, &NoiseStream::new(17, 0)).unwrap();
        let var = noise.iter().map(|v| v * v).sum::<f64>() / n as f64;
        assert!((var - 1.0).abs() < 0.02);
    }
}
