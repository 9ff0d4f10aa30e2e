//! Pairwise additive masks and dropout recovery.
//!
//! Each unordered pair `{i, j}` in a subgroup shares a seed. Agent `i` adds
//! `PRG(seed, round)` for every peer `j > i` and subtracts it for every peer
//! `j < i`, so the masks cancel in the subgroup sum. Every agent also deals
//! Shamir shares of its pair seeds to the subgroup; when an agent drops out,
//! survivors reveal their shares of the dropout's seeds so the aggregator
//! can regenerate and strip the masks that no longer cancel.

use std::collections::BTreeMap;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::field::{add_assign_vec, sub_assign_vec, Fp};
use super::shamir::{shamir_reconstruct, shamir_share, SecretShare};
use super::SecureAggError;
use crate::types::AgentId;

/// Number of field limbs in a pair seed (about 244 bits).
pub const SEED_LIMBS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairSeed(pub [Fp; SEED_LIMBS]);

impl PairSeed {
    pub fn random<R: RngCore + ?Sized>(rng: &mut R) -> Self {
        PairSeed(std::array::from_fn(|_| Fp::random(rng)))
    }

    /// Pseudorandom mask stream for one round.
    pub fn expand(&self, round: u64, dim: usize) -> Vec<Fp> {
        let mut h = Sha256::new();
        h.update(b"din/mask/v1");
        for limb in &self.0 {
            h.update(limb.value().to_le_bytes());
        }
        h.update(round.to_le_bytes());
        let mut prg = ChaCha20Rng::from_seed(h.finalize().into());
        (0..dim).map(|_| Fp::random(&mut prg)).collect()
    }
}

fn pair_key(a: AgentId, b: AgentId) -> (AgentId, AgentId) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

/// Pair seeds established by the trusted simulator setup.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SeedBook {
    seeds: BTreeMap<(AgentId, AgentId), PairSeed>,
}

impl SeedBook {
    /// Draws a fresh seed for every unordered pair of `members`.
    pub fn trusted_setup<R: RngCore + ?Sized>(members: &[AgentId], rng: &mut R) -> Self {
        let mut sorted = members.to_vec();
        sorted.sort();
        sorted.dedup();
        let mut book = SeedBook::default();
        for (i, &a) in sorted.iter().enumerate() {
            for &b in &sorted[i + 1..] {
                book.seeds.insert((a, b), PairSeed::random(rng));
            }
        }
        book
    }

    pub fn insert(&mut self, a: AgentId, b: AgentId, seed: PairSeed) {
        self.seeds.insert(pair_key(a, b), seed);
    }

    pub fn get(&self, a: AgentId, b: AgentId) -> Option<&PairSeed> {
        self.seeds.get(&pair_key(a, b))
    }
}

/// The mask agent `me` contributes for one peer: `+PRG` if `me < peer`,
/// `-PRG` otherwise.
fn signed_pair_mask(me: AgentId, peer: AgentId, seed: &PairSeed, round: u64, dim: usize) -> Vec<Fp> {
    let stream = seed.expand(round, dim);
    if me < peer {
        stream
    } else {
        stream.into_iter().map(|v| -v).collect()
    }
}

/// Sum of all pairwise masks `me` applies against `peers` in `round`.
pub fn derive_pairwise_masks(
    me: AgentId,
    peers: &[AgentId],
    round: u64,
    dim: usize,
    seeds: &SeedBook,
) -> Result<Vec<Fp>, SecureAggError> {
    let mut total = vec![Fp::ZERO; dim];
    for &peer in peers {
        if peer == me {
            continue;
        }
        let seed = seeds.get(me, peer).ok_or(SecureAggError::MissingSeed(me, peer))?;
        add_assign_vec(&mut total, &signed_pair_mask(me, peer, seed, round, dim));
    }
    Ok(total)
}

/// One holder's shares of one dealer's pair seeds, keyed by the dealer's peer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedShareBundle {
    pub dealer: AgentId,
    pub holder: AgentId,
    pub index: u32,
    pub per_peer: BTreeMap<AgentId, [Fp; SEED_LIMBS]>,
}

/// Deals Shamir shares of every seed `dealer` holds with the other members.
/// The holder at sorted position `k` receives evaluation point `k + 1`.
pub fn share_pair_seeds<R: RngCore + ?Sized>(
    dealer: AgentId,
    members: &[AgentId],
    seeds: &SeedBook,
    threshold: usize,
    rng: &mut R,
) -> Result<BTreeMap<AgentId, SeedShareBundle>, SecureAggError> {
    let mut holders = members.to_vec();
    holders.sort();
    holders.dedup();
    let n = holders.len();
    let mut bundles: BTreeMap<AgentId, SeedShareBundle> = holders
        .iter()
        .enumerate()
        .map(|(k, &h)| {
            (
                h,
                SeedShareBundle {
                    dealer,
                    holder: h,
                    index: k as u32 + 1,
                    per_peer: BTreeMap::new(),
                },
            )
        })
        .collect();
    for &peer in &holders {
        if peer == dealer {
            continue;
        }
        let seed = seeds
            .get(dealer, peer)
            .ok_or(SecureAggError::MissingSeed(dealer, peer))?;
        let limb_shares: Vec<Vec<SecretShare>> = seed
            .0
            .iter()
            .map(|&limb| shamir_share(limb, threshold, n, dealer, rng))
            .collect::<Result<_, _>>()?;
        for (k, h) in holders.iter().enumerate() {
            let values = std::array::from_fn(|l| limb_shares[l][k].value);
            bundles.get_mut(h).expect("holder").per_peer.insert(peer, values);
        }
    }
    Ok(bundles)
}

/// Rebuilds the seed `dealer` shared with `peer` from revealed bundles.
pub fn recover_pair_seed(
    dealer: AgentId,
    peer: AgentId,
    bundles: &[SeedShareBundle],
    threshold: usize,
) -> Result<PairSeed, SecureAggError> {
    let usable: Vec<&SeedShareBundle> = bundles
        .iter()
        .filter(|b| b.dealer == dealer && b.per_peer.contains_key(&peer))
        .collect();
    if usable.len() < threshold {
        return Err(SecureAggError::InsufficientShares {
            dropout: dealer,
            needed: threshold,
            got: usable.len(),
        });
    }
    let mut limbs = [Fp::ZERO; SEED_LIMBS];
    for (l, limb) in limbs.iter_mut().enumerate() {
        let shares: Vec<SecretShare> = usable
            .iter()
            .map(|b| SecretShare {
                index: b.index,
                value: b.per_peer[&peer][l],
                owner: dealer,
            })
            .collect();
        *limb = shamir_reconstruct(&shares, threshold)?;
    }
    Ok(PairSeed(limbs))
}

/// The mask component survivor `survivor` applied for the dropped `dropout`.
pub(crate) fn orphaned_mask(
    survivor: AgentId,
    dropout: AgentId,
    seed: &PairSeed,
    round: u64,
    dim: usize,
) -> Vec<Fp> {
    signed_pair_mask(survivor, dropout, seed, round, dim)
}

pub(crate) fn strip(acc: &mut [Fp], mask: &[Fp]) {
    sub_assign_vec(acc, mask);
}
