use serde::{Deserialize, Serialize};

use super::state::{GlobalPointer, SubgroupResult};
use super::TaskConfig;
use crate::auditing::{Attestation, AttestationKey};
use crate::content_store::ContentId;
use crate::economics::NftId;
use crate::types::{AgentId, Ratio, Score, TaskId};

/// Transaction payloads. Any randomness an operation needs travels in the
/// payload so that replay is a pure function of the log.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", content = "payload", rename_all = "snake_case")]
pub enum Op {
    Mint {
        to: AgentId,
        amount: u64,
    },
    Stake {
        value: u64,
        tax_rate: Ratio,
    },
    Reassess {
        nft: NftId,
        value: u64,
    },
    ForceSale {
        nft: NftId,
    },
    ChargeTax {
        epoch: u64,
    },
    Slash {
        task: TaskId,
        evaluator: AgentId,
    },
    Deploy {
        config: TaskConfig,
        genesis_cid: ContentId,
        deposit: u64,
        control_digest: ContentId,
        attestation_key: AttestationKey,
    },
    StartRound {
        task: TaskId,
    },
    FormSubgroups {
        task: TaskId,
        round: u32,
        participants: Vec<AgentId>,
        seed: u64,
    },
    RegisterUpdate {
        task: TaskId,
        round: u32,
        cid: ContentId,
    },
    CloseRound {
        task: TaskId,
        round: u32,
    },
    ReportAvailability {
        task: TaskId,
        round: u32,
        loaded: Vec<AgentId>,
    },
    CheckAvailability {
        task: TaskId,
        round: u32,
        subgroup: usize,
    },
    PublishAggregate {
        task: TaskId,
        round: u32,
        subgroups: Vec<SubgroupResult>,
        global: GlobalPointer,
    },
    Dispute {
        task: TaskId,
        round: u32,
        subgroup: usize,
    },
    SignalFinalRound {
        task: TaskId,
    },
    AssignEvaluators {
        task: TaskId,
        evaluators: Vec<AgentId>,
        seed: u64,
    },
    CommitScore {
        task: TaskId,
        participant: AgentId,
        commitment: String,
    },
    CloseCommits {
        task: TaskId,
        subgroup: usize,
    },
    RevealScore {
        task: TaskId,
        participant: AgentId,
        score: Score,
        salt: String,
        attestation: Option<Attestation>,
    },
    CloseReveals {
        task: TaskId,
        subgroup: usize,
    },
    VerifyAttestations {
        task: TaskId,
        subgroup: usize,
    },
    FinalizeScores {
        task: TaskId,
    },
    Settle {
        task: TaskId,
        final_global: ContentId,
    },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Mint { .. } => "mint",
            Op::Stake { .. } => "stake",
            Op::Reassess { .. } => "reassess",
            Op::ForceSale { .. } => "force_sale",
            Op::ChargeTax { .. } => "charge_tax",
            Op::Slash { .. } => "slash",
            Op::Deploy { .. } => "deploy",
            Op::StartRound { .. } => "start_round",
            Op::FormSubgroups { .. } => "form_subgroups",
            Op::RegisterUpdate { .. } => "register_update",
            Op::CloseRound { .. } => "close_round",
            Op::ReportAvailability { .. } => "report_availability",
            Op::CheckAvailability { .. } => "check_availability",
            Op::PublishAggregate { .. } => "publish_aggregate",
            Op::Dispute { .. } => "dispute",
            Op::SignalFinalRound { .. } => "signal_final_round",
            Op::AssignEvaluators { .. } => "assign_evaluators",
            Op::CommitScore { .. } => "commit_score",
            Op::CloseCommits { .. } => "close_commits",
            Op::RevealScore { .. } => "reveal_score",
            Op::CloseReveals { .. } => "close_reveals",
            Op::VerifyAttestations { .. } => "verify_attestations",
            Op::FinalizeScores { .. } => "finalize_scores",
            Op::Settle { .. } => "settle",
        }
    }

    /// The training round whose state this operation may change, if any.
    pub(crate) fn touched_round(&self) -> Option<(TaskId, u32)> {
        match *self {
            Op::FormSubgroups { task, round, .. }
            | Op::RegisterUpdate { task, round, .. }
            | Op::CloseRound { task, round }
            | Op::ReportAvailability { task, round, .. }
            | Op::CheckAvailability { task, round, .. }
            | Op::PublishAggregate { task, round, .. }
            | Op::Dispute { task, round, .. } => Some((task, round)),
            _ => None,
        }
    }
}

/// One accepted transaction in the exported log.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogRecord {
    pub seq: u64,
    pub height: u64,
    pub sender: AgentId,
    pub nonce: u64,
    #[serde(flatten)]
    pub op: Op,
    pub phase: Option<String>,
    pub state_digest: String,
}
