use serde::{Deserialize, Serialize};

use crate::auditing::{MetricKind, ScoringBackend};
use crate::types::{AgentId, Ratio, Score};

use super::LedgerError;

fn default_split() -> Ratio {
    Ratio::new(97, 100)
}

fn default_slash() -> Ratio {
    Ratio::new(1, 2)
}

/// Parameters fixed at deployment.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub rounds_max: u32,
    pub k_min_subgroup: usize,
    /// Evaluators per participant.
    pub evaluator_ratio: Ratio,
    pub reward_pool: u64,
    #[serde(default = "default_split")]
    pub fee_split_participants: Ratio,
    #[serde(default)]
    pub acceptable_bound: Score,
    /// Minimum Shamir threshold. Defaults to `floor(k / 2) + 1`.
    #[serde(default)]
    pub shamir_threshold: Option<usize>,
    pub aggregator: AgentId,
    pub metric: MetricKind,
    #[serde(default)]
    pub scoring: ScoringBackend,
    /// Fraction of assessed stake confiscated per flagged evaluator.
    #[serde(default = "default_slash")]
    pub slash_fraction: Ratio,
}

impl TaskConfig {
    pub fn validate(&self) -> Result<(), LedgerError> {
        let bad = |m: String| Err(LedgerError::InvalidConfig(m));
        if self.rounds_max == 0 {
            return bad("rounds_max must be positive".into());
        }
        if self.k_min_subgroup < 3 {
            return bad(format!("k_min_subgroup must be at least 3, got {}", self.k_min_subgroup));
        }
        if self.evaluator_ratio.num == 0 {
            return bad("evaluator_ratio must be positive".into());
        }
        if !self.fee_split_participants.is_unit_interval() {
            return bad(format!("fee_split_participants {} exceeds 1", self.fee_split_participants));
        }
        if !self.slash_fraction.is_unit_interval() {
            return bad(format!("slash_fraction {} exceeds 1", self.slash_fraction));
        }
        if let Some(t) = self.shamir_threshold {
            let k = self.k_min_subgroup;
            if 2 * t <= k || t > k {
                return bad(format!("shamir_threshold {t} must satisfy {k}/2 < t <= {k}"));
            }
        }
        Ok(())
    }

    pub fn base_threshold(&self) -> usize {
        self.shamir_threshold.unwrap_or(self.k_min_subgroup / 2 + 1)
    }

    /// Threshold for a subgroup of `size`: a strict majority of the group and
    /// never below the configured minimum.
    pub fn threshold_for(&self, size: usize) -> usize {
        self.base_threshold().max(size / 2 + 1).min(size)
    }

    /// `ceil(evaluator_ratio * participants)`.
    pub fn evaluators_needed(&self, participants: usize) -> usize {
        let n = participants as u128 * u128::from(self.evaluator_ratio.num);
        let d = u128::from(self.evaluator_ratio.den);
        n.div_ceil(d) as usize
    }
}
