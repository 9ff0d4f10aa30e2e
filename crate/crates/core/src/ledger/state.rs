use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{LedgerError, TaskConfig};
use crate::auditing::{Attestation, AttestationKey, Report, ScoreBoard};
use crate::content_store::ContentId;
use crate::types::{AgentId, Score, TaskId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "phase", content = "round", rename_all = "snake_case")]
pub enum Phase {
    Deployed,
    TrainingRound(u32),
    Aggregating(u32),
    FinalRoundSignaled,
    Evaluating,
    Settled,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Phase::Deployed => f.write_str("deployed"),
            Phase::TrainingRound(r) => write!(f, "training_round({r})"),
            Phase::Aggregating(r) => write!(f, "aggregating({r})"),
            Phase::FinalRoundSignaled => f.write_str("final_round_signaled"),
            Phase::Evaluating => f.write_str("evaluating"),
            Phase::Settled => f.write_str("settled"),
        }
    }
}

/// Result of one subgroup's secure aggregation as published by the aggregator.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubgroupResult {
    pub index: usize,
    /// Blob holding the decoded sum. `None` when aggregation aborted.
    pub sum_cid: Option<ContentId>,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GlobalPointer {
    Open(ContentId),
    /// Digest commitment to a CID that stays hidden until settlement.
    Sealed(String),
}

pub fn seal_cid(cid: &ContentId) -> String {
    let mut h = Sha256::new();
    h.update(b"din/seal/v1");
    h.update(cid.as_bytes());
    hex::encode(h.finalize())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PublishedAggregate {
    pub subgroups: Vec<SubgroupResult>,
    pub global: GlobalPointer,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundState {
    pub round: u32,
    pub subgroups: Vec<Vec<AgentId>>,
    pub registry: BTreeMap<AgentId, ContentId>,
    /// Reporter to the subgroup peers whose models it loaded.
    pub availability: BTreeMap<AgentId, BTreeSet<AgentId>>,
    /// Subgroup index to admitted members, filled by the availability check.
    pub admitted: BTreeMap<usize, BTreeSet<AgentId>>,
    pub aggregate: Option<PublishedAggregate>,
    pub disputes: BTreeMap<usize, BTreeSet<AgentId>>,
}

impl RoundState {
    pub fn subgroup_of(&self, agent: AgentId) -> Option<usize> {
        self.subgroups.iter().position(|g| g.contains(&agent))
    }

    pub fn registered_in(&self, subgroup: usize) -> Vec<AgentId> {
        self.subgroups
            .get(subgroup)
            .map(|g| g.iter().copied().filter(|a| self.registry.contains_key(a)).collect())
            .unwrap_or_default()
    }

    /// Strict-majority availability rule. With `N` registered members, a
    /// member is admitted iff it loaded more than `N/2` of the registered
    /// models and more than `N/2` other members loaded its model.
    pub fn compute_admitted(&self, subgroup: usize) -> BTreeSet<AgentId> {
        let registered = self.registered_in(subgroup);
        let n = registered.len();
        let empty = BTreeSet::new();
        registered
            .iter()
            .copied()
            .filter(|p| {
                let loaded = self.availability.get(p).unwrap_or(&empty);
                let loads = registered.iter().filter(|q| loaded.contains(q)).count();
                let loaded_by = registered
                    .iter()
                    .filter(|q| *q != p && self.availability.get(q).is_some_and(|s| s.contains(p)))
                    .count();
                2 * loads > n && 2 * loaded_by > n
            })
            .collect()
    }

    pub fn admitted_all(&self) -> BTreeSet<AgentId> {
        self.admitted.values().flatten().copied().collect()
    }
}

/// Deterministic partition into `floor(n / k)` groups. The first `n mod g`
/// groups take one extra member so every group keeps at least `k`.
pub fn partition(participants: &[AgentId], k: usize, seed: u64) -> Result<Vec<Vec<AgentId>>, LedgerError> {
    let mut sorted = participants.to_vec();
    sorted.sort();
    if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
        return Err(LedgerError::DuplicateParticipant(w[0]));
    }
    let n = sorted.len();
    if n < k || k == 0 {
        return Err(LedgerError::TooFewParticipants { needed: k, got: n });
    }
    sorted.shuffle(&mut ChaCha20Rng::seed_from_u64(seed));
    let g = n / k;
    let (base, extra) = (n / g, n % g);
    let mut groups = Vec::with_capacity(g);
    let mut rest = &sorted[..];
    for i in 0..g {
        let size = base + usize::from(i < extra);
        let (head, tail) = rest.split_at(size);
        let mut group = head.to_vec();
        group.sort();
        groups.push(group);
        rest = tail;
    }
    Ok(groups)
}

/// Commitment to a score: binds the evaluator, the participant, the ppm
/// value and a secret salt.
pub fn score_commitment(evaluator: AgentId, participant: AgentId, score: Score, salt: &str) -> String {
    let mut h = Sha256::new();
    h.update(b"din/commit/v1");
    h.update(evaluator.0.to_le_bytes());
    h.update(participant.0.to_le_bytes());
    h.update(score.ppm().to_le_bytes());
    h.update(salt.as_bytes());
    hex::encode(h.finalize())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reveal {
    pub score: Score,
    pub attestation: Attestation,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verification {
    pub accepted: Vec<Report>,
    pub rejected: Vec<(AgentId, AgentId)>,
    pub valid_evaluators: Vec<AgentId>,
    pub voided: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalGroup {
    pub index: usize,
    pub targets: Vec<AgentId>,
    pub evaluators: Vec<AgentId>,
    /// Evaluator to participant to commitment.
    pub commits: BTreeMap<AgentId, BTreeMap<AgentId, String>>,
    pub commits_closed: bool,
    pub reveals: BTreeMap<AgentId, BTreeMap<AgentId, Reveal>>,
    pub reveals_closed: bool,
    pub verification: Option<Verification>,
}

impl EvalGroup {
    fn commit_count(&self) -> usize {
        self.commits.values().map(|m| m.len()).sum()
    }

    fn reveal_count(&self) -> usize {
        self.reveals.values().map(|m| m.len()).sum()
    }

    pub(crate) fn all_committed(&self) -> bool {
        self.commit_count() == self.targets.len() * self.evaluators.len()
    }

    pub(crate) fn all_revealed(&self) -> bool {
        self.reveal_count() == self.commit_count()
    }

    /// Evaluators that left at least one assigned participant unrevealed.
    pub fn abstainers(&self) -> Vec<AgentId> {
        self.evaluators
            .iter()
            .copied()
            .filter(|e| self.reveals.get(e).map_or(0, |m| m.len()) < self.targets.len())
            .collect()
    }

    pub(crate) fn verify(
        &self,
        key: &AttestationKey,
        control: &ContentId,
        config: &TaskConfig,
    ) -> Verification {
        let mut accepted = Vec::new();
        let mut rejected = Vec::new();
        let mut valid_evaluators = Vec::new();
        let empty = BTreeMap::new();
        for &e in &self.evaluators {
            let reveals = self.reveals.get(&e).unwrap_or(&empty);
            let mut all_valid = reveals.len() == self.targets.len();
            for (&p, r) in reveals {
                let a = &r.attestation;
                let ok = a.verify(key)
                    && a.control_digest == *control
                    && a.evaluator == e
                    && a.participant == p
                    && a.claimed_score == r.score
                    && a.metric == config.metric
                    && a.backend == config.scoring;
                if ok {
                    accepted.push(Report {
                        evaluator: e,
                        participant: p,
                        score: r.score,
                    });
                } else {
                    rejected.push((e, p));
                    all_valid = false;
                }
            }
            if all_valid {
                valid_evaluators.push(e);
            }
        }
        let voided = !self.evaluators.is_empty() && 2 * valid_evaluators.len() <= self.evaluators.len();
        if voided {
            accepted.clear();
        }
        Verification {
            accepted,
            rejected,
            valid_evaluators,
            voided,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvaluationState {
    pub round: u32,
    pub assigned: bool,
    pub groups: Vec<EvalGroup>,
    pub scoreboard: Option<ScoreBoard>,
}

impl EvaluationState {
    pub fn group_of_evaluator(&self, evaluator: AgentId) -> Option<usize> {
        self.groups.iter().position(|g| g.evaluators.contains(&evaluator))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Settlement {
    pub participants: BTreeMap<AgentId, u64>,
    pub evaluators: BTreeMap<AgentId, u64>,
    pub public_goods: u64,
}

impl Settlement {
    pub fn total(&self) -> u64 {
        self.participants.values().sum::<u64>() + self.evaluators.values().sum::<u64>() + self.public_goods
    }
}

/// State of one intelligence contract.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskState {
    pub id: TaskId,
    pub owner: AgentId,
    pub config: TaskConfig,
    pub phase: Phase,
    pub genesis_cid: ContentId,
    pub control_digest: ContentId,
    pub attestation_key: AttestationKey,
    pub escrow: u64,
    pub final_round: Option<u32>,
    #[serde(skip)]
    pub rounds: Vec<RoundState>,
    pub evaluation: Option<EvaluationState>,
    pub settlement: Option<Settlement>,
    final_global: Option<ContentId>,
}

impl TaskState {
    pub(crate) fn new(
        id: TaskId,
        owner: AgentId,
        config: TaskConfig,
        genesis_cid: ContentId,
        control_digest: ContentId,
        attestation_key: AttestationKey,
    ) -> Self {
        TaskState {
            id,
            owner,
            escrow: config.reward_pool,
            config,
            phase: Phase::Deployed,
            genesis_cid,
            control_digest,
            attestation_key,
            final_round: None,
            rounds: Vec::new(),
            evaluation: None,
            settlement: None,
            final_global: None,
        }
    }

    pub fn current_round(&self) -> u32 {
        self.rounds.len() as u32
    }

    pub fn round(&self, r: u32) -> Option<&RoundState> {
        r.checked_sub(1).and_then(|i| self.rounds.get(i as usize))
    }

    pub(crate) fn round_mut(&mut self, r: u32) -> Option<&mut RoundState> {
        r.checked_sub(1).and_then(|i| self.rounds.get_mut(i as usize))
    }

    pub fn is_final(&self, r: u32) -> bool {
        self.final_round == Some(r) || r == self.config.rounds_max
    }

    /// Publicly readable global model of a non-final round.
    pub fn global_model_cid(&self, r: u32) -> Option<ContentId> {
        match self.round(r)?.aggregate.as_ref()?.global {
            GlobalPointer::Open(cid) => Some(cid),
            GlobalPointer::Sealed(_) => None,
        }
    }

    pub fn global_model_cids(&self) -> Vec<ContentId> {
        (1..=self.current_round()).filter_map(|r| self.global_model_cid(r)).collect()
    }

    /// The final model, readable by the owner once the task settles.
    pub fn final_model(&self, requester: AgentId) -> Result<ContentId, LedgerError> {
        if requester != self.owner {
            return Err(LedgerError::NotOwner(requester));
        }
        match (self.phase, self.final_global) {
            (Phase::Settled, Some(cid)) => Ok(cid),
            _ => Err(LedgerError::NotYetRevealed),
        }
    }

    pub(crate) fn reveal_final(&mut self, cid: ContentId) {
        self.final_global = Some(cid);
    }

    pub fn scores(&self) -> Option<&ScoreBoard> {
        self.evaluation.as_ref()?.scoreboard.as_ref()
    }

    pub fn evaluator_assignment(&self) -> BTreeMap<AgentId, usize> {
        self.evaluation
            .iter()
            .flat_map(|e| e.groups.iter())
            .flat_map(|g| g.evaluators.iter().map(move |e| (*e, g.index)))
            .collect()
    }

    /// `(round, participant) -> cid` over every round.
    pub fn update_registry(&self) -> BTreeMap<(u32, AgentId), ContentId> {
        self.rounds
            .iter()
            .flat_map(|r| r.registry.iter().map(move |(p, c)| ((r.round, *p), *c)))
            .collect()
    }
}
