//! Simulated public chain hosting the intelligence contract.
//!
//! The chain is a single serialized state machine. Every accepted
//! transaction is appended to the log together with the digest of the state
//! it produced, and replaying the log must reproduce every digest. Rejected
//! transactions leave no trace: handlers check all preconditions before
//! they mutate anything.

mod config;
mod ops;
mod state;

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::ToPrimitive;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use config::TaskConfig;
pub use ops::{LogRecord, Op};
pub use state::{
    partition, score_commitment, seal_cid, EvalGroup, EvaluationState, GlobalPointer, Phase, PublishedAggregate,
    Reveal, RoundState, Settlement, SubgroupResult, TaskState, Verification,
};

use crate::auditing::ScoreBoard;
use crate::economics::{Economics, EconomicsEntry, EconomicsError};
use crate::types::{AgentId, TaskId};

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum LedgerError {
    #[error("invalid task config: {0}")]
    InvalidConfig(String),
    #[error("deposit {got} is below the reward pool {needed}")]
    InsufficientDeposit { needed: u64, got: u64 },
    #[error("unknown task {0}")]
    UnknownTask(TaskId),
    #[error("{0} is not the task owner")]
    NotOwner(AgentId),
    #[error("{0} is not the task aggregator")]
    NotAggregator(AgentId),
    #[error("{op} is not allowed in phase {phase}")]
    WrongPhase { op: &'static str, phase: Phase },
    #[error("round {got} does not match the current round {expected}")]
    RoundMismatch { expected: u32, got: u32 },
    #[error("need at least {needed} participants, got {got}")]
    TooFewParticipants { needed: usize, got: usize },
    #[error("{0} listed twice")]
    DuplicateParticipant(AgentId),
    #[error("subgroups for this round are already formed")]
    AlreadyFormed,
    #[error("{0} is not on this round's roster")]
    UnknownParticipant(AgentId),
    #[error("{0} already registered an update this round")]
    DuplicateRegistration(AgentId),
    #[error("{0} already reported availability")]
    DuplicateReport(AgentId),
    #[error("unknown subgroup {0}")]
    UnknownSubgroup(usize),
    #[error("subgroup {0} was already checked")]
    AlreadyChecked(usize),
    #[error("availability of subgroup {0} has not been checked")]
    NotChecked(usize),
    #[error("aggregate for this round was already published")]
    AlreadyPublished,
    #[error("aggregate for this round has not been published")]
    NotPublished,
    #[error("malformed aggregate: {0}")]
    MalformedAggregate(String),
    #[error("round limit reached")]
    RoundLimit,
    #[error("need {needed} evaluators, {available} available")]
    InsufficientEvaluators { needed: usize, available: usize },
    #[error("{0} holds no active stake")]
    IneligibleEvaluator(AgentId),
    #[error("evaluators are already assigned")]
    AlreadyAssigned,
    #[error("{evaluator} is not assigned to {participant}")]
    NotAssigned { evaluator: AgentId, participant: AgentId },
    #[error("{evaluator} already committed a score for {participant}")]
    DuplicateCommit { evaluator: AgentId, participant: AgentId },
    #[error("commit phase of subgroup {0} is closed")]
    CommitPhaseClosed(usize),
    #[error("commit phase of subgroup {0} is still open")]
    CommitPhaseOpen(usize),
    #[error("no commitment from {evaluator} for {participant}")]
    NoCommitment { evaluator: AgentId, participant: AgentId },
    #[error("{evaluator} already revealed a score for {participant}")]
    DuplicateReveal { evaluator: AgentId, participant: AgentId },
    #[error("revealed score does not match the commitment")]
    RevealMismatch,
    #[error("reveal carries no attestation")]
    MissingAttestation,
    #[error("reveal phase of subgroup {0} is closed")]
    RevealPhaseClosed(usize),
    #[error("reveal phase of subgroup {0} is still open")]
    RevealPhaseOpen(usize),
    #[error("subgroup {0} was already verified")]
    AlreadyVerified(usize),
    #[error("evaluation scores are incomplete")]
    ScoresIncomplete,
    #[error("scores were already finalized")]
    AlreadyFinalized,
    #[error("revealed model does not match the sealed commitment")]
    SealMismatch,
    #[error("final model is not revealed before settlement")]
    NotYetRevealed,
    #[error("{0} has no open flag on this task")]
    NotFlagged(AgentId),
    #[error("{0} was already slashed for this task")]
    AlreadySlashed(AgentId),
    #[error("{0} did not participate in that subgroup")]
    NotInSubgroup(AgentId),
    #[error("expected nonce {expected} from {sender}, got {got}")]
    BadNonce { sender: AgentId, expected: u64, got: u64 },
    #[error(transparent)]
    Economics(#[from] EconomicsError),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum ChainEvent {
    TaskDeployed { task: TaskId },
    PhaseChanged { task: TaskId, phase: Phase },
    SubgroupsFormed { task: TaskId, round: u32, sizes: Vec<usize> },
    AvailabilityChecked { task: TaskId, round: u32, subgroup: usize, admitted: Vec<AgentId>, excluded: Vec<AgentId> },
    DisputeRaised { task: TaskId, round: u32, subgroup: usize, by: AgentId },
    EvaluatorsAssigned { task: TaskId, assignment: BTreeMap<AgentId, usize> },
    CommitsClosed { task: TaskId, subgroup: usize },
    RevealsClosed { task: TaskId, subgroup: usize },
    ReportsVerified { task: TaskId, subgroup: usize, accepted: usize, rejected: usize },
    DisputeEscalation { task: TaskId, subgroup: usize },
    EvaluatorFlagged { task: TaskId, evaluator: AgentId, reason: String },
    ScoresFinalized { task: TaskId },
    Settled { task: TaskId, settlement: Settlement },
    Economics { entry: EconomicsEntry },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transaction {
    pub sender: AgentId,
    pub nonce: u64,
    pub payload: Op,
    pub block_height: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Receipt {
    pub seq: u64,
    pub height: u64,
    pub events: Vec<ChainEvent>,
    pub task: Option<TaskId>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Flag {
    pub task: TaskId,
    pub reason: String,
}

/// Chain-wide state outside individual tasks.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Globals {
    pub height: u64,
    pub seq: u64,
    pub nonces: BTreeMap<AgentId, u64>,
    pub next_task: u64,
    pub economics: Economics,
    pub flags: BTreeMap<AgentId, Vec<Flag>>,
    pub slashed: BTreeSet<(TaskId, AgentId)>,
}

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("record {seq}: {source}")]
    Rejected { seq: u64, source: LedgerError },
    #[error("record {seq}: state digest {got} differs from logged {expected}")]
    DigestMismatch { seq: u64, expected: String, got: String },
    #[error("record {seq} is out of order")]
    OutOfOrder { seq: u64 },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, Default)]
pub struct Chain {
    globals: Globals,
    tasks: BTreeMap<TaskId, TaskState>,
    log: Vec<LogRecord>,
    round_digests: BTreeMap<(TaskId, u32), [u8; 32]>,
    group_digests: BTreeMap<(TaskId, usize), [u8; 32]>,
}

fn evaluation_header(ev: &EvaluationState) -> Vec<u8> {
    json_bytes(&(ev.round, ev.assigned, ev.groups.len(), &ev.scoreboard))
}

fn json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    serde_json::to_vec(value).expect("ledger state serializes")
}

impl Chain {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn height(&self) -> u64 {
        self.globals.height
    }

    /// Closes the current block.
    pub fn seal_block(&mut self) {
        self.globals.height += 1;
    }

    pub fn globals(&self) -> &Globals {
        &self.globals
    }

    pub fn economics(&self) -> &Economics {
        &self.globals.economics
    }

    pub fn task(&self, id: TaskId) -> Option<&TaskState> {
        self.tasks.get(&id)
    }

    pub fn tasks(&self) -> impl Iterator<Item = &TaskState> {
        self.tasks.values()
    }

    pub fn log(&self) -> &[LogRecord] {
        &self.log
    }

    pub fn flags(&self, agent: AgentId) -> &[Flag] {
        self.globals.flags.get(&agent).map_or(&[], Vec::as_slice)
    }

    pub fn next_nonce(&self, sender: AgentId) -> u64 {
        self.globals.nonces.get(&sender).copied().unwrap_or(0)
    }

    /// Money held in task escrows.
    pub fn escrowed(&self) -> u64 {
        self.tasks.values().map(|t| t.escrow).sum()
    }

    /// Submits `op` from `sender` with its next nonce.
    pub fn submit(&mut self, sender: AgentId, op: Op) -> Result<Receipt, LedgerError> {
        let nonce = self.next_nonce(sender);
        self.submit_tx(Transaction {
            sender,
            nonce,
            payload: op,
            block_height: self.globals.height,
        })
    }

    pub fn submit_tx(&mut self, tx: Transaction) -> Result<Receipt, LedgerError> {
        let expected = self.next_nonce(tx.sender);
        if tx.nonce != expected {
            return Err(LedgerError::BadNonce {
                sender: tx.sender,
                expected,
                got: tx.nonce,
            });
        }
        self.globals.height = self.globals.height.max(tx.block_height);
        let (events, task) = self.apply(tx.sender, &tx.payload)?;
        if let Some(key) = tx.payload.touched_round() {
            self.round_digests.remove(&key);
        }
        match tx.payload {
            Op::CommitScore { task, .. } | Op::RevealScore { task, .. } => {
                let group = self
                    .tasks
                    .get(&task)
                    .and_then(|t| t.evaluation.as_ref())
                    .and_then(|e| e.group_of_evaluator(tx.sender));
                if let Some(g) = group {
                    self.group_digests.remove(&(task, g));
                }
            }
            _ => self.group_digests.clear(),
        }
        let seq = self.globals.seq;
        self.globals.seq += 1;
        self.globals.nonces.insert(tx.sender, expected + 1);
        let phase = task.and_then(|t| self.tasks.get(&t)).map(|t| t.phase.to_string());
        let state_digest = self.state_digest();
        self.log.push(LogRecord {
            seq,
            height: self.globals.height,
            sender: tx.sender,
            nonce: tx.nonce,
            op: tx.payload,
            phase,
            state_digest,
        });
        Ok(Receipt {
            seq,
            height: self.globals.height,
            events,
            task,
        })
    }

    fn round_digest(&mut self, task: TaskId, round: &RoundState) -> [u8; 32] {
        *self
            .round_digests
            .entry((task, round.round))
            .or_insert_with(|| Sha256::digest(json_bytes(round)).into())
    }

    /// Digest of the complete chain state. Rounds and evaluation groups are
    /// hashed separately and cached until a transaction touches them.
    pub fn state_digest(&mut self) -> String {
        let mut h = Sha256::new();
        h.update(b"din/state/v1");
        h.update(json_bytes(&self.globals));
        let ids: Vec<TaskId> = self.tasks.keys().copied().collect();
        for id in ids {
            let mut task = self.tasks.remove(&id).expect("listed");
            let evaluation = task.evaluation.take();
            h.update(json_bytes(&task));
            for round in &task.rounds {
                let d = self.round_digest(id, round);
                h.update(d);
            }
            if let Some(ev) = &evaluation {
                h.update(evaluation_header(ev));
                for g in &ev.groups {
                    let d = *self
                        .group_digests
                        .entry((id, g.index))
                        .or_insert_with(|| Sha256::digest(json_bytes(g)).into());
                    h.update(d);
                }
            }
            task.evaluation = evaluation;
            self.tasks.insert(id, task);
        }
        hex::encode(h.finalize())
    }

    /// The same digest without the cache.
    pub fn state_digest_uncached(&self) -> String {
        let mut h = Sha256::new();
        h.update(b"din/state/v1");
        h.update(json_bytes(&self.globals));
        for task in self.tasks.values() {
            let mut bare = task.clone();
            let evaluation = bare.evaluation.take();
            h.update(json_bytes(&bare));
            for round in &task.rounds {
                h.update(Sha256::digest(json_bytes(round)));
            }
            if let Some(ev) = &evaluation {
                h.update(evaluation_header(ev));
                for g in &ev.groups {
                    h.update(Sha256::digest(json_bytes(g)));
                }
            }
        }
        hex::encode(h.finalize())
    }

    pub fn export_jsonl(&self, mut w: impl Write) -> std::io::Result<()> {
        for rec in &self.log {
            serde_json::to_writer(&mut w, rec)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl(r: impl BufRead) -> Result<Vec<LogRecord>, ReplayError> {
        let mut out = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            out.push(serde_json::from_str(&line).map_err(|e| ReplayError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?);
        }
        Ok(out)
    }

    /// Rebuilds a chain from its log, checking every recorded digest.
    pub fn replay(records: impl IntoIterator<Item = LogRecord>) -> Result<Chain, ReplayError> {
        let mut chain = Chain::new();
        for rec in records {
            if rec.seq != chain.globals.seq {
                return Err(ReplayError::OutOfOrder { seq: rec.seq });
            }
            let seq = rec.seq;
            chain.globals.height = rec.height;
            chain
                .submit_tx(Transaction {
                    sender: rec.sender,
                    nonce: rec.nonce,
                    payload: rec.op,
                    block_height: rec.height,
                })
                .map_err(|source| ReplayError::Rejected { seq, source })?;
            let got = &chain.log.last().expect("appended").state_digest;
            if *got != rec.state_digest {
                return Err(ReplayError::DigestMismatch {
                    seq,
                    expected: rec.state_digest,
                    got: got.clone(),
                });
            }
        }
        Ok(chain)
    }

    fn task_mut(&mut self, id: TaskId) -> Result<&mut TaskState, LedgerError> {
        self.tasks.get_mut(&id).ok_or(LedgerError::UnknownTask(id))
    }

    fn flag(&mut self, task: TaskId, evaluator: AgentId, reason: &str, events: &mut Vec<ChainEvent>) {
        self.globals.flags.entry(evaluator).or_default().push(Flag {
            task,
            reason: reason.to_string(),
        });
        events.push(ChainEvent::EvaluatorFlagged {
            task,
            evaluator,
            reason: reason.to_string(),
        });
    }

    fn apply(&mut self, sender: AgentId, op: &Op) -> Result<(Vec<ChainEvent>, Option<TaskId>), LedgerError> {
        let mut events = Vec::new();
        let econ = |entries: Vec<EconomicsEntry>| -> Vec<ChainEvent> {
            entries.into_iter().map(|entry| ChainEvent::Economics { entry }).collect()
        };
        let task = match op {
            Op::Mint { to, amount } => {
                let e = self.globals.economics.mint(*to, *amount);
                events.extend(econ(vec![e]));
                None
            }
            Op::Stake { value, tax_rate } => {
                let nft = self.globals.economics.stake(sender, *value, *tax_rate)?;
                events.extend(econ(vec![EconomicsEntry::Staked {
                    nft: nft.id,
                    owner: sender,
                    value: *value,
                }]));
                None
            }
            Op::Reassess { nft, value } => {
                let e = self.globals.economics.reassess(sender, *nft, *value)?;
                events.extend(econ(vec![e]));
                None
            }
            Op::ForceSale { nft } => {
                let e = self.globals.economics.force_sale(sender, *nft)?;
                events.extend(econ(vec![e]));
                None
            }
            Op::ChargeTax { epoch } => {
                let entries = self.globals.economics.charge_tax(*epoch)?;
                events.extend(econ(entries));
                None
            }
            Op::Slash { task, evaluator } => {
                let t = self.tasks.get(task).ok_or(LedgerError::UnknownTask(*task))?;
                let fraction = t.config.slash_fraction;
                if !self.flags(*evaluator).iter().any(|f| f.task == *task) {
                    return Err(LedgerError::NotFlagged(*evaluator));
                }
                if self.globals.slashed.contains(&(*task, *evaluator)) {
                    return Err(LedgerError::AlreadySlashed(*evaluator));
                }
                let entries = self.globals.economics.slash(*evaluator, fraction)?;
                self.globals.slashed.insert((*task, *evaluator));
                events.extend(econ(entries));
                Some(*task)
            }
            Op::Deploy {
                config,
                genesis_cid,
                deposit,
                control_digest,
                attestation_key,
            } => {
                config.validate()?;
                if *deposit < config.reward_pool {
                    return Err(LedgerError::InsufficientDeposit {
                        needed: config.reward_pool,
                        got: *deposit,
                    });
                }
                self.globals.economics.treasury.debit(sender, config.reward_pool)?;
                let id = TaskId(self.globals.next_task);
                self.globals.next_task += 1;
                self.tasks.insert(
                    id,
                    TaskState::new(id, sender, config.clone(), *genesis_cid, *control_digest, *attestation_key),
                );
                events.push(ChainEvent::TaskDeployed { task: id });
                Some(id)
            }
            Op::StartRound { task } => {
                let t = self.task_mut(*task)?;
                if sender != t.owner {
                    return Err(LedgerError::NotOwner(sender));
                }
                let r = t.current_round();
                let ready = match t.phase {
                    Phase::Deployed => true,
                    Phase::FinalRoundSignaled => true,
                    Phase::Aggregating(cur) => t.round(cur).is_some_and(|s| s.aggregate.is_some()),
                    _ => false,
                };
                if !ready {
                    return Err(LedgerError::WrongPhase {
                        op: op.name(),
                        phase: t.phase,
                    });
                }
                if r >= t.config.rounds_max {
                    return Err(LedgerError::RoundLimit);
                }
                t.rounds.push(RoundState {
                    round: r + 1,
                    ..Default::default()
                });
                t.phase = Phase::TrainingRound(r + 1);
                events.push(ChainEvent::PhaseChanged {
                    task: *task,
                    phase: t.phase,
                });
                Some(*task)
            }
            Op::FormSubgroups {
                task,
                round,
                participants,
                seed,
            } => {
                let t = self.task_mut(*task)?;
                if sender != t.owner && sender != t.config.aggregator {
                    return Err(LedgerError::NotAggregator(sender));
                }
                training_guard(t, *round, op.name())?;
                let rs = t.round(*round).expect("current");
                if !rs.subgroups.is_empty() {
                    return Err(LedgerError::AlreadyFormed);
                }
                let groups = partition(participants, t.config.k_min_subgroup, *seed)?;
                events.push(ChainEvent::SubgroupsFormed {
                    task: *task,
                    round: *round,
                    sizes: groups.iter().map(Vec::len).collect(),
                });
                t.round_mut(*round).expect("current").subgroups = groups;
                Some(*task)
            }
            Op::RegisterUpdate { task, round, cid } => {
                let t = self.task_mut(*task)?;
                training_guard(t, *round, op.name())?;
                let rs = t.round_mut(*round).expect("current");
                if rs.subgroup_of(sender).is_none() {
                    return Err(LedgerError::UnknownParticipant(sender));
                }
                if rs.registry.contains_key(&sender) {
                    return Err(LedgerError::DuplicateRegistration(sender));
                }
                rs.registry.insert(sender, *cid);
                Some(*task)
            }
            Op::CloseRound { task, round } => {
                let t = self.task_mut(*task)?;
                if sender != t.owner && sender != t.config.aggregator {
                    return Err(LedgerError::NotAggregator(sender));
                }
                training_guard(t, *round, op.name())?;
                t.phase = Phase::Aggregating(*round);
                events.push(ChainEvent::PhaseChanged {
                    task: *task,
                    phase: t.phase,
                });
                Some(*task)
            }
            Op::ReportAvailability { task, round, loaded } => {
                let t = self.task_mut(*task)?;
                let rs = aggregating_guard(t, *round, op.name())?;
                if !rs.registry.contains_key(&sender) {
                    return Err(LedgerError::UnknownParticipant(sender));
                }
                if rs.availability.contains_key(&sender) {
                    return Err(LedgerError::DuplicateReport(sender));
                }
                let group = &rs.subgroups[rs.subgroup_of(sender).expect("registered")];
                if let Some(stranger) = loaded.iter().find(|a| !group.contains(a)) {
                    return Err(LedgerError::NotInSubgroup(*stranger));
                }
                let set = loaded.iter().copied().collect();
                t.round_mut(*round).expect("current").availability.insert(sender, set);
                Some(*task)
            }
            Op::CheckAvailability { task, round, subgroup } => {
                let t = self.task_mut(*task)?;
                let rs = aggregating_guard(t, *round, op.name())?;
                if *subgroup >= rs.subgroups.len() {
                    return Err(LedgerError::UnknownSubgroup(*subgroup));
                }
                if rs.admitted.contains_key(subgroup) {
                    return Err(LedgerError::AlreadyChecked(*subgroup));
                }
                let admitted = rs.compute_admitted(*subgroup);
                let excluded = rs.subgroups[*subgroup]
                    .iter()
                    .copied()
                    .filter(|a| !admitted.contains(a))
                    .collect();
                events.push(ChainEvent::AvailabilityChecked {
                    task: *task,
                    round: *round,
                    subgroup: *subgroup,
                    admitted: admitted.iter().copied().collect(),
                    excluded,
                });
                t.round_mut(*round).expect("current").admitted.insert(*subgroup, admitted);
                Some(*task)
            }
            Op::PublishAggregate {
                task,
                round,
                subgroups,
                global,
            } => {
                let t = self.task_mut(*task)?;
                if sender != t.config.aggregator {
                    return Err(LedgerError::NotAggregator(sender));
                }
                let is_final = t.is_final(*round);
                let rs = aggregating_guard(t, *round, op.name())?;
                if let Some(g) = (0..rs.subgroups.len()).find(|g| !rs.admitted.contains_key(g)) {
                    return Err(LedgerError::NotChecked(g));
                }
                if subgroups.len() != rs.subgroups.len() {
                    return Err(LedgerError::MalformedAggregate(format!(
                        "{} results for {} subgroups",
                        subgroups.len(),
                        rs.subgroups.len()
                    )));
                }
                for (i, res) in subgroups.iter().enumerate() {
                    let admitted = rs.admitted[&i].len();
                    let ok = res.index == i
                        && match res.sum_cid {
                            Some(_) => res.count == admitted && admitted > 0,
                            None => res.count == 0,
                        };
                    if !ok {
                        return Err(LedgerError::MalformedAggregate(format!("subgroup {i}")));
                    }
                }
                if is_final != matches!(global, GlobalPointer::Sealed(_)) {
                    return Err(LedgerError::MalformedAggregate(
                        "the final round's global model must be sealed, earlier ones open".into(),
                    ));
                }
                t.round_mut(*round).expect("current").aggregate = Some(PublishedAggregate {
                    subgroups: subgroups.clone(),
                    global: global.clone(),
                });
                if is_final {
                    t.phase = Phase::Evaluating;
                    t.evaluation = Some(EvaluationState {
                        round: *round,
                        ..Default::default()
                    });
                } else if t.final_round == Some(*round + 1) {
                    t.phase = Phase::FinalRoundSignaled;
                }
                if t.phase != Phase::Aggregating(*round) {
                    events.push(ChainEvent::PhaseChanged {
                        task: *task,
                        phase: t.phase,
                    });
                }
                Some(*task)
            }
            Op::Dispute { task, round, subgroup } => {
                let t = self.task_mut(*task)?;
                if t.phase == Phase::Settled {
                    return Err(LedgerError::WrongPhase {
                        op: op.name(),
                        phase: t.phase,
                    });
                }
                let rs = t.round(*round).ok_or(LedgerError::RoundMismatch {
                    expected: t.current_round(),
                    got: *round,
                })?;
                if rs.aggregate.is_none() {
                    return Err(LedgerError::NotPublished);
                }
                if !rs.admitted.get(subgroup).is_some_and(|s| s.contains(&sender)) {
                    return Err(LedgerError::NotInSubgroup(sender));
                }
                let rs = t.round_mut(*round).expect("exists");
                if !rs.disputes.entry(*subgroup).or_default().insert(sender) {
                    return Err(LedgerError::DuplicateReport(sender));
                }
                events.push(ChainEvent::DisputeRaised {
                    task: *task,
                    round: *round,
                    subgroup: *subgroup,
                    by: sender,
                });
                Some(*task)
            }
            Op::SignalFinalRound { task } => {
                let t = self.task_mut(*task)?;
                if sender != t.owner {
                    return Err(LedgerError::NotOwner(sender));
                }
                let r = match t.phase {
                    Phase::TrainingRound(r) | Phase::Aggregating(r) if t.final_round.is_none() => r,
                    _ => {
                        return Err(LedgerError::WrongPhase {
                            op: op.name(),
                            phase: t.phase,
                        })
                    }
                };
                if r >= t.config.rounds_max {
                    return Err(LedgerError::RoundLimit);
                }
                t.final_round = Some(r + 1);
                if t.round(r).is_some_and(|s| s.aggregate.is_some()) {
                    t.phase = Phase::FinalRoundSignaled;
                    events.push(ChainEvent::PhaseChanged {
                        task: *task,
                        phase: t.phase,
                    });
                }
                Some(*task)
            }
            Op::AssignEvaluators { task, evaluators, seed } => {
                self.assign_evaluators(sender, *task, evaluators, *seed, &mut events)?;
                Some(*task)
            }
            Op::CommitScore {
                task,
                participant,
                commitment,
            } => {
                let t = self.task_mut(*task)?;
                let g = eval_group_for(t, sender, *participant, op.name())?;
                let group = &mut t.evaluation.as_mut().expect("evaluating").groups[g];
                if group.commits_closed {
                    return Err(LedgerError::CommitPhaseClosed(g));
                }
                let mine = group.commits.entry(sender).or_default();
                if mine.contains_key(participant) {
                    return Err(LedgerError::DuplicateCommit {
                        evaluator: sender,
                        participant: *participant,
                    });
                }
                mine.insert(*participant, commitment.clone());
                if group.all_committed() {
                    group.commits_closed = true;
                    events.push(ChainEvent::CommitsClosed {
                        task: *task,
                        subgroup: g,
                    });
                }
                Some(*task)
            }
            Op::CloseCommits { task, subgroup } => {
                let t = self.task_mut(*task)?;
                let group = eval_group(t, *subgroup, op.name())?;
                if group.commits_closed {
                    return Err(LedgerError::CommitPhaseClosed(*subgroup));
                }
                group.commits_closed = true;
                events.push(ChainEvent::CommitsClosed {
                    task: *task,
                    subgroup: *subgroup,
                });
                Some(*task)
            }
            Op::RevealScore {
                task,
                participant,
                score,
                salt,
                attestation,
            } => {
                let t = self.task_mut(*task)?;
                let g = eval_group_for(t, sender, *participant, op.name())?;
                let group = &mut t.evaluation.as_mut().expect("evaluating").groups[g];
                if !group.commits_closed {
                    return Err(LedgerError::CommitPhaseOpen(g));
                }
                if group.reveals_closed {
                    return Err(LedgerError::RevealPhaseClosed(g));
                }
                let commitment = group
                    .commits
                    .get(&sender)
                    .and_then(|m| m.get(participant))
                    .ok_or(LedgerError::NoCommitment {
                        evaluator: sender,
                        participant: *participant,
                    })?;
                if group.reveals.get(&sender).is_some_and(|m| m.contains_key(participant)) {
                    return Err(LedgerError::DuplicateReveal {
                        evaluator: sender,
                        participant: *participant,
                    });
                }
                if score_commitment(sender, *participant, *score, salt) != *commitment {
                    return Err(LedgerError::RevealMismatch);
                }
                let attestation = attestation.clone().ok_or(LedgerError::MissingAttestation)?;
                group.reveals.entry(sender).or_default().insert(
                    *participant,
                    Reveal {
                        score: *score,
                        attestation,
                    },
                );
                if group.all_revealed() && group.all_committed() {
                    group.reveals_closed = true;
                    events.push(ChainEvent::RevealsClosed {
                        task: *task,
                        subgroup: g,
                    });
                }
                Some(*task)
            }
            Op::CloseReveals { task, subgroup } => {
                let t = self.task_mut(*task)?;
                let group = eval_group(t, *subgroup, op.name())?;
                if !group.commits_closed {
                    return Err(LedgerError::CommitPhaseOpen(*subgroup));
                }
                if group.reveals_closed {
                    return Err(LedgerError::RevealPhaseClosed(*subgroup));
                }
                group.reveals_closed = true;
                let abstainers = group.abstainers();
                events.push(ChainEvent::RevealsClosed {
                    task: *task,
                    subgroup: *subgroup,
                });
                for e in abstainers {
                    self.flag(*task, e, "missing reveal", &mut events);
                }
                Some(*task)
            }
            Op::VerifyAttestations { task, subgroup } => {
                let t = self.task_mut(*task)?;
                let (key, control, config) = (t.attestation_key, t.control_digest, t.config.clone());
                let group = eval_group(t, *subgroup, op.name())?;
                if !group.reveals_closed {
                    return Err(LedgerError::RevealPhaseOpen(*subgroup));
                }
                if group.verification.is_some() {
                    return Err(LedgerError::AlreadyVerified(*subgroup));
                }
                let v = group.verify(&key, &control, &config);
                let mut cheaters: Vec<AgentId> = v.rejected.iter().map(|(e, _)| *e).collect();
                cheaters.dedup();
                events.push(ChainEvent::ReportsVerified {
                    task: *task,
                    subgroup: *subgroup,
                    accepted: v.accepted.len(),
                    rejected: v.rejected.len(),
                });
                if v.voided {
                    events.push(ChainEvent::DisputeEscalation {
                        task: *task,
                        subgroup: *subgroup,
                    });
                }
                group.verification = Some(v);
                for e in cheaters {
                    self.flag(*task, e, "invalid attestation", &mut events);
                }
                Some(*task)
            }
            Op::FinalizeScores { task } => {
                let t = self.task_mut(*task)?;
                if t.phase != Phase::Evaluating {
                    return Err(LedgerError::WrongPhase {
                        op: op.name(),
                        phase: t.phase,
                    });
                }
                let bound = t.config.acceptable_bound;
                let ev = t.evaluation.as_mut().expect("evaluating");
                if !ev.assigned || ev.groups.iter().any(|g| g.verification.is_none()) {
                    return Err(LedgerError::ScoresIncomplete);
                }
                if ev.scoreboard.is_some() {
                    return Err(LedgerError::AlreadyFinalized);
                }
                let participants: Vec<AgentId> = ev.groups.iter().flat_map(|g| g.targets.iter().copied()).collect();
                let evaluators: Vec<AgentId> = ev.groups.iter().flat_map(|g| g.evaluators.iter().copied()).collect();
                let accepted: Vec<_> = ev
                    .groups
                    .iter()
                    .flat_map(|g| g.verification.as_ref().expect("verified").accepted.iter().copied())
                    .collect();
                let mut board = ScoreBoard::compute(&participants, &evaluators, &accepted);
                board.apply_bound_filter(bound);
                ev.scoreboard = Some(board);
                events.push(ChainEvent::ScoresFinalized { task: *task });
                Some(*task)
            }
            Op::Settle { task, final_global } => {
                self.settle(sender, *task, *final_global, &mut events)?;
                Some(*task)
            }
        };
        Ok((events, task))
    }

    fn assign_evaluators(
        &mut self,
        sender: AgentId,
        task: TaskId,
        evaluators: &[AgentId],
        seed: u64,
        events: &mut Vec<ChainEvent>,
    ) -> Result<(), LedgerError> {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;

        let t = self.tasks.get(&task).ok_or(LedgerError::UnknownTask(task))?;
        if sender != t.owner {
            return Err(LedgerError::NotOwner(sender));
        }
        if t.phase != Phase::Evaluating {
            return Err(LedgerError::WrongPhase {
                op: "assign_evaluators",
                phase: t.phase,
            });
        }
        let ev = t.evaluation.as_ref().expect("evaluating");
        if ev.assigned {
            return Err(LedgerError::AlreadyAssigned);
        }
        let mut pool = evaluators.to_vec();
        pool.sort();
        if let Some(w) = pool.windows(2).find(|w| w[0] == w[1]) {
            return Err(LedgerError::DuplicateParticipant(w[0]));
        }
        if let Some(e) = pool.iter().find(|e| !self.globals.economics.is_eligible(**e)) {
            return Err(LedgerError::IneligibleEvaluator(*e));
        }
        let rs = t.round(ev.round).expect("final round");
        let targets: Vec<Vec<AgentId>> = (0..rs.subgroups.len())
            .map(|g| rs.admitted[&g].iter().copied().collect())
            .collect();
        let needs: Vec<usize> = targets.iter().map(|ts| t.config.evaluators_needed(ts.len())).collect();
        let needed: usize = needs.iter().sum();
        if needed > pool.len() {
            return Err(LedgerError::InsufficientEvaluators {
                needed,
                available: pool.len(),
            });
        }
        pool.shuffle(&mut rand_chacha::ChaCha20Rng::seed_from_u64(seed));
        let mut next = pool.into_iter();
        let mut groups = Vec::with_capacity(targets.len());
        for (index, (targets, need)) in targets.into_iter().zip(needs).enumerate() {
            let mut evs: Vec<AgentId> = next.by_ref().take(need).collect();
            evs.sort();
            let empty = targets.is_empty();
            groups.push(EvalGroup {
                index,
                targets,
                evaluators: evs,
                commits_closed: empty,
                reveals_closed: empty,
                ..Default::default()
            });
        }
        let t = self.tasks.get_mut(&task).expect("checked");
        let ev = t.evaluation.as_mut().expect("evaluating");
        ev.groups = groups;
        ev.assigned = true;
        events.push(ChainEvent::EvaluatorsAssigned {
            task,
            assignment: t.evaluator_assignment(),
        });
        Ok(())
    }

    fn settle(
        &mut self,
        sender: AgentId,
        task: TaskId,
        final_global: crate::content_store::ContentId,
        events: &mut Vec<ChainEvent>,
    ) -> Result<(), LedgerError> {
        let t = self.tasks.get(&task).ok_or(LedgerError::UnknownTask(task))?;
        if sender != t.config.aggregator {
            return Err(LedgerError::NotAggregator(sender));
        }
        if t.phase != Phase::Evaluating {
            return Err(LedgerError::WrongPhase {
                op: "settle",
                phase: t.phase,
            });
        }
        let ev = t.evaluation.as_ref().expect("evaluating");
        let board = ev.scoreboard.as_ref().ok_or(LedgerError::ScoresIncomplete)?;
        let sealed = t
            .round(ev.round)
            .and_then(|r| r.aggregate.as_ref())
            .map(|a| a.global.clone());
        if sealed != Some(GlobalPointer::Sealed(seal_cid(&final_global))) {
            return Err(LedgerError::SealMismatch);
        }
        let pool = t.escrow;
        let fractions = board.reward_fractions(t.config.fee_split_participants);
        let big_pool = BigRational::from_integer(BigInt::from(pool));
        let payout = |f: &crate::types::Rational| -> u64 {
            (&big_pool * &f.0).floor().to_integer().to_u64().expect("within pool")
        };
        let mut settlement = Settlement {
            participants: fractions.participants.iter().map(|(a, f)| (*a, payout(f))).collect(),
            evaluators: fractions.evaluators.iter().map(|(a, f)| (*a, payout(f))).collect(),
            public_goods: 0,
        };
        let paid = settlement.total();
        settlement.public_goods = pool - paid;

        let treasury = &mut self.globals.economics.treasury;
        for (a, amount) in settlement.participants.iter().chain(&settlement.evaluators) {
            treasury.credit(*a, *amount);
        }
        treasury.public_goods_pool += settlement.public_goods;
        let t = self.tasks.get_mut(&task).expect("checked");
        t.escrow = 0;
        t.phase = Phase::Settled;
        t.reveal_final(final_global);
        t.settlement = Some(settlement.clone());
        events.push(ChainEvent::Settled { task, settlement });
        events.push(ChainEvent::PhaseChanged {
            task,
            phase: Phase::Settled,
        });
        Ok(())
    }
}

fn training_guard(t: &TaskState, round: u32, op: &'static str) -> Result<(), LedgerError> {
    match t.phase {
        Phase::TrainingRound(r) if r == round => Ok(()),
        Phase::TrainingRound(r) => Err(LedgerError::RoundMismatch {
            expected: r,
            got: round,
        }),
        phase => Err(LedgerError::WrongPhase { op, phase }),
    }
}

fn aggregating_guard<'a>(t: &'a TaskState, round: u32, op: &'static str) -> Result<&'a RoundState, LedgerError> {
    match t.phase {
        Phase::Aggregating(r) if r == round => {
            let rs = t.round(r).expect("current");
            if rs.aggregate.is_some() {
                Err(LedgerError::AlreadyPublished)
            } else {
                Ok(rs)
            }
        }
        Phase::Aggregating(r) => Err(LedgerError::RoundMismatch {
            expected: r,
            got: round,
        }),
        phase => Err(LedgerError::WrongPhase { op, phase }),
    }
}

fn eval_group<'a>(t: &'a mut TaskState, subgroup: usize, op: &'static str) -> Result<&'a mut EvalGroup, LedgerError> {
    if t.phase != Phase::Evaluating {
        return Err(LedgerError::WrongPhase { op, phase: t.phase });
    }
    let ev = t.evaluation.as_mut().expect("evaluating");
    if !ev.assigned {
        return Err(LedgerError::ScoresIncomplete);
    }
    ev.groups.get_mut(subgroup).ok_or(LedgerError::UnknownSubgroup(subgroup))
}

fn eval_group_for(t: &TaskState, evaluator: AgentId, participant: AgentId, op: &'static str) -> Result<usize, LedgerError> {
    if t.phase != Phase::Evaluating {
        return Err(LedgerError::WrongPhase { op, phase: t.phase });
    }
    let ev = t.evaluation.as_ref().expect("evaluating");
    let not_assigned = LedgerError::NotAssigned {
        evaluator,
        participant,
    };
    let g = ev.group_of_evaluator(evaluator).ok_or(not_assigned.clone())?;
    if !ev.groups[g].targets.contains(&participant) {
        return Err(not_assigned);
    }
    Ok(g)
}
