//! Shamir secret sharing over [`Fp`].

use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::field::Fp;
use super::SecureAggError;
use crate::types::AgentId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SecretShare {
    /// Evaluation point, never zero.
    pub index: u32,
    pub value: Fp,
    /// The agent whose secret this share belongs to.
    pub owner: AgentId,
}

/// Splits `secret` into `n` shares at points `1..=n` on a random polynomial
/// of degree `t - 1`.
pub fn shamir_share<R: RngCore + ?Sized>(
    secret: Fp,
    t: usize,
    n: usize,
    owner: AgentId,
    rng: &mut R,
) -> Result<Vec<SecretShare>, SecureAggError> {
    if t == 0 || t > n || n as u64 >= super::field::MODULUS || n > u32::MAX as usize {
        return Err(SecureAggError::InvalidThreshold { t, n });
    }
    let mut coeffs = Vec::with_capacity(t);
    coeffs.push(secret);
    for _ in 1..t {
        coeffs.push(Fp::random(rng));
    }
    Ok((1..=n as u32)
        .map(|index| SecretShare {
            index,
            value: horner(&coeffs, Fp::new(u64::from(index))),
            owner,
        })
        .collect())
}

fn horner(coeffs: &[Fp], x: Fp) -> Fp {
    coeffs.iter().rev().fold(Fp::ZERO, |acc, &c| acc * x + c)
}

/// Lagrange interpolation at zero from the first `t` of `shares`.
pub fn shamir_reconstruct(shares: &[SecretShare], t: usize) -> Result<Fp, SecureAggError> {
    if t == 0 || shares.len() < t {
        return Err(SecureAggError::TooFewShares {
            needed: t,
            got: shares.len(),
        });
    }
    let mut seen = std::collections::BTreeSet::new();
    for s in shares {
        if s.index == 0 || !seen.insert(s.index) {
            return Err(SecureAggError::DuplicateIndex(s.index));
        }
    }
    let points: Vec<(Fp, Fp)> = shares[..t]
        .iter()
        .map(|s| (Fp::new(u64::from(s.index)), s.value))
        .collect();
    Ok(interpolate_at_zero(&points))
}

/// `sum_i y_i * prod_{j != i} x_j / (x_j - x_i)` for distinct nonzero `x`.
pub(crate) fn interpolate_at_zero(points: &[(Fp, Fp)]) -> Fp {
    let mut acc = Fp::ZERO;
    for (i, &(xi, yi)) in points.iter().enumerate() {
        let mut num = Fp::ONE;
        let mut den = Fp::ONE;
        for (j, &(xj, _)) in points.iter().enumerate() {
            if i != j {
                num = num * xj;
                den = den * (xj - xi);
            }
        }
        acc += yi * num * den.inverse().expect("distinct evaluation points");
    }
    acc
}
