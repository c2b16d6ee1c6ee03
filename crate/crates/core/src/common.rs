//! Small shared domain types and bit utilities.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Supported code rates 1/n.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Rate {
    #[serde(rename = "1/2")]
    R12,
    #[serde(rename = "1/3")]
    R13,
    #[serde(rename = "1/4")]
    R14,
}

impl Rate {
    /// Coded symbols per message bit (n in rate 1/n).
    pub fn n_streams(&self) -> usize {
        match self {
            Rate::R12 => 2,
            Rate::R13 => 3,
            Rate::R14 => 4,
        }
    }

    pub fn as_f64(&self) -> f64 {
        1.0 / self.n_streams() as f64
    }

    pub fn parse(s: &str) -> Result<Rate> {
        match s.trim() {
            "1/2" => Ok(Rate::R12),
            "1/3" => Ok(Rate::R13),
            "1/4" => Ok(Rate::R14),
            other => Err(Error::Config(format!("unsupported rate {other:?} (use 1/2, 1/3, or 1/4)"))),
        }
    }
}

impl std::fmt::Display for Rate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "1/{}", self.n_streams())
    }
}

/// Draw a `blocks x k` matrix of fair message bits (stored as 0.0 / 1.0).
pub fn random_message_matrix(blocks: usize, k: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..blocks * k)
        .map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 })
        .collect();
    Tensor::matrix(blocks, k, data).expect("shape matches")
}

/// Map message bits {0,1} to the +-1 encoder input convention.
pub fn bits_to_pm1(bits: &Tensor) -> Tensor {
    bits.map(|b| 2.0 * b - 1.0)
}

/// Hard decision at probability 0.5 (>= 0.5 decodes to 1).
pub fn hard_decision(probs: &Tensor) -> Tensor {
    probs.map(|p| if p >= 0.5 { 1.0 } else { 0.0 })
}

/// Count (bit errors, block errors) between two bit matrices of equal shape.
pub fn count_errors(decoded: &Tensor, reference: &Tensor) -> (u64, u64) {
    assert_eq!(decoded.shape(), reference.shape());
    let (rows, cols) = (decoded.rows(), decoded.cols());
    let mut bit_errors = 0u64;
    let mut block_errors = 0u64;
    for r in 0..rows {
        let mut block_bad = false;
        for c in 0..cols {
            if decoded.at(r, c) != reference.at(r, c) {
                bit_errors += 1;
                block_bad = true;
            }
        }
        if block_bad {
            block_errors += 1;
        }
    }
    (bit_errors, block_errors)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rate_roundtrip() {
        for (s, n) in [("1/2", 2), ("1/3", 3), ("1/4", 4)] {
            let r = Rate::parse(s).unwrap();
            assert_eq!(r.n_streams(), n);
            assert_eq!(r.to_string(), s);
        }
        assert!(Rate::parse("2/3").is_err());
    }

    #[test]
    fn error_counting() {
        let a = Tensor::matrix(2, 3, vec![0.0, 1.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::matrix(2, 3, vec![0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(count_errors(&a, &b), (1, 1));
        assert_eq!(count_errors(&a, &a), (0, 0));
    }
}
