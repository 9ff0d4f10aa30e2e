//! Decentralized auditing: benchmarking inside a simulated secure
//! environment, attestation records, median scoring and reward fractions.

pub mod environment;
pub mod scoring;
pub mod shapley;

use thiserror::Error;

use crate::content_store::ContentId;
use crate::fl::{FlError, ModelKind};
use crate::types::AgentId;

pub use environment::{Attestation, AttestationKey, MetricKind, ScoringBackend, SecureEnvironment};
pub use scoring::{
    evaluator_credit, median, participant_overall_score, EvaluatorRecord, ParticipantRecord, Report,
    RewardFractions, ScoreBoard,
};
pub use shapley::{shapley_exact, shapley_oracle, MAX_SHAPLEY_PLAYERS};

#[derive(Debug, Error, PartialEq)]
pub enum AuditError {
    #[error("{evaluator} is not assigned to evaluate {participant}")]
    NotAssigned { evaluator: AgentId, participant: AgentId },
    #[error("model {0:?} was never deposited in the secure environment")]
    UnknownModel(ContentId),
    #[error("metric {metric:?} does not apply to {kind:?}")]
    UnsupportedMetric { metric: MetricKind, kind: ModelKind },
    #[error("no control dataset has been delivered to the secure environment")]
    NoControl,
    #[error("exact Shapley values need at most {max} players, got {got}")]
    TooManyParticipants { max: usize, got: usize },
    #[error(transparent)]
    Fl(#[from] FlError),
}
