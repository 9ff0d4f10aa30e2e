//! Pairwise-masked secure aggregation with threshold dropout recovery.
//!
//! The aggregator only ever sees [`MaskedUpdate`]s, each indistinguishable
//! from uniform field noise, yet the sum over a subgroup unmasks to the exact
//! fixed-point sum of the plaintext updates. Only the honest-but-curious
//! server is modelled: there is no per-participant self-mask.

pub mod codec;
pub mod field;
pub mod masking;
pub mod shamir;
pub mod wire;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use codec::FixedPointCodec;
pub use field::{Fp, MODULUS};
pub use masking::{
    derive_pairwise_masks, recover_pair_seed, share_pair_seeds, PairSeed, SeedBook,
    SeedShareBundle,
};
pub use shamir::{shamir_reconstruct, shamir_share, SecretShare};

use crate::types::AgentId;
use field::add_assign_vec;

#[derive(Debug, Error, PartialEq)]
pub enum SecureAggError {
    #[error("no shared seed between {0} and {1}")]
    MissingSeed(AgentId, AgentId),
    #[error("value {0} is outside the codec range")]
    OutOfRange(f64),
    #[error("invalid threshold t={t} for n={n}")]
    InvalidThreshold { t: usize, n: usize },
    #[error("need {needed} shares, got {got}")]
    TooFewShares { needed: usize, got: usize },
    #[error("duplicate or zero share index {0}")]
    DuplicateIndex(u32),
    #[error("cannot recover seeds of dropout {dropout}: need {needed} shares, got {got}")]
    InsufficientShares {
        dropout: AgentId,
        needed: usize,
        got: usize,
    },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("masked updates from different rounds")]
    RoundMismatch,
    #[error("no masked updates to aggregate")]
    Empty,
    #[error("{0} summands could wrap the field")]
    SumOverflow(usize),
    #[error("malformed blob: {0}")]
    MalformedBlob(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedUpdate {
    pub participant: AgentId,
    pub round: u64,
    pub vector: Vec<Fp>,
}

impl MaskedUpdate {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn to_blob(&self) -> Vec<u8> {
        wire::encode_blob(&self.vector)
    }
}

/// `encode(update[i]) + masks[i]` for every coordinate.
pub fn mask(
    participant: AgentId,
    round: u64,
    update: &[f64],
    masks: &[Fp],
    codec: &FixedPointCodec,
) -> Result<MaskedUpdate, SecureAggError> {
    if update.len() != masks.len() {
        return Err(SecureAggError::DimensionMismatch {
            expected: update.len(),
            got: masks.len(),
        });
    }
    let mut vector = codec.encode_vec(update)?;
    add_assign_vec(&mut vector, masks);
    Ok(MaskedUpdate {
        participant,
        round,
        vector,
    })
}

/// Unmasked subgroup sum.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregateSum {
    pub field: Vec<Fp>,
    pub decoded: Vec<f64>,
    pub count: usize,
}

/// Recovers the plaintext sum over `masked` (the survivors).
///
/// Every agent in `dropouts` was part of the mask setup but contributed no
/// update; `revealed` carries, per dropout, the seed-share bundles handed over
/// by survivors. Masks survivors applied against dropouts are regenerated from
/// the recovered seeds and removed.
pub fn unmask_aggregate(
    masked: &[MaskedUpdate],
    dropouts: &[AgentId],
    revealed: &BTreeMap<AgentId, Vec<SeedShareBundle>>,
    threshold: usize,
    codec: &FixedPointCodec,
) -> Result<AggregateSum, SecureAggError> {
    let first = masked.first().ok_or(SecureAggError::Empty)?;
    let (round, dim) = (first.round, first.dim());
    for m in masked {
        if m.round != round {
            return Err(SecureAggError::RoundMismatch);
        }
        if m.dim() != dim {
            return Err(SecureAggError::DimensionMismatch {
                expected: dim,
                got: m.dim(),
            });
        }
    }
    if masked.len() as u64 > codec.max_summands() {
        return Err(SecureAggError::SumOverflow(masked.len()));
    }
    let survivors: BTreeSet<AgentId> = masked.iter().map(|m| m.participant).collect();

    let mut sum = vec![Fp::ZERO; dim];
    for m in masked {
        add_assign_vec(&mut sum, &m.vector);
    }

    let dropped: BTreeSet<AgentId> = dropouts.iter().copied().collect();
    for &d in &dropped {
        let bundles: Vec<SeedShareBundle> = revealed
            .get(&d)
            .map(|bs| {
                bs.iter()
                    .filter(|b| survivors.contains(&b.holder))
                    .cloned()
                    .collect()
            })
            .unwrap_or_default();
        let holders: BTreeSet<AgentId> = bundles.iter().map(|b| b.holder).collect();
        if holders.len() < threshold {
            return Err(SecureAggError::InsufficientShares {
                dropout: d,
                needed: threshold,
                got: holders.len(),
            });
        }
        for &s in &survivors {
            let seed = recover_pair_seed(d, s, &bundles, threshold)?;
            let orphan = masking::orphaned_mask(s, d, &seed, round, dim);
            masking::strip(&mut sum, &orphan);
        }
    }

    Ok(AggregateSum {
        decoded: codec.decode_vec(&sum),
        field: sum,
        count: masked.len(),
    })
}
