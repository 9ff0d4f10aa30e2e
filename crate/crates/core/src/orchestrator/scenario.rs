//! Scenario files: one TOML document per experiment.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::OrchestratorError;
use crate::adversary::{AdversaryConfig, ParticipantStrategy, Strategy, ThreatModel};
use crate::auditing::{MetricKind, ScoringBackend, MAX_SHAPLEY_PLAYERS};
use crate::content_store::Reachability;
use crate::fl::PopulationSpec;
use crate::ledger::TaskConfig;
use crate::types::{AgentId, Ratio, Score};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub seed: u64,
    pub population: PopulationSpec,
    pub training: TrainingSpec,
    pub task: TaskSpec,
    pub economics: EconomicsSpec,
    #[serde(default)]
    pub network: NetworkSpec,
    #[serde(default)]
    pub adversary: AdversarySpec,
    #[serde(default)]
    pub output: OutputSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSpec {
    pub rounds: u32,
    pub local_epochs: usize,
    pub learning_rate: f64,
    /// Round after which the owner announces that the next round is the last.
    /// Defaults to `rounds - 1`; the round budget alone ends single-round runs.
    #[serde(default)]
    pub final_signal_after: Option<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub k_min_subgroup: usize,
    pub evaluator_ratio: Ratio,
    pub reward_pool: u64,
    #[serde(default = "default_split")]
    pub fee_split_participants: Ratio,
    /// Participants whose overall score falls below this are eliminated.
    #[serde(default)]
    pub acceptable_bound: f64,
    #[serde(default)]
    pub shamir_threshold: Option<usize>,
    /// Defaults to inverse MSE for regression and accuracy for classification.
    #[serde(default)]
    pub metric: Option<MetricKind>,
    #[serde(default)]
    pub scoring: ScoringBackend,
    #[serde(default = "default_slash")]
    pub slash_fraction: Ratio,
}

fn default_split() -> Ratio {
    Ratio::new(97, 100)
}

fn default_slash() -> Ratio {
    Ratio::new(1, 2)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EconomicsSpec {
    /// Evaluator accounts created for the run, all of which stake.
    pub evaluators: usize,
    pub initial_balance: u64,
    pub stake_value: u64,
    pub tax_rate: Ratio,
}

/// Participant indices refer to positions `0..population.participants`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    /// Pairs of participants that cannot reach each other.
    #[serde(default)]
    pub blocked: Vec<[usize; 2]>,
    /// Participants that serve their own uploads but never forward others'.
    #[serde(default)]
    pub non_resharing: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdversarySpec {
    #[serde(default)]
    pub threat_model: ThreatModel,
    /// Entries index participants.
    #[serde(default)]
    pub participants: Vec<StrategyEntry>,
    /// Entries index evaluators `0..economics.evaluators`; `targets` index
    /// participants.
    #[serde(default)]
    pub evaluators: Vec<StrategyEntry>,
    #[serde(default)]
    pub dropouts: Vec<DropoutEntry>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyEntry {
    pub agents: Vec<usize>,
    pub strategy: String,
    #[serde(default)]
    pub with: Option<usize>,
    #[serde(default)]
    pub targets: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DropoutEntry {
    pub round: u32,
    pub agents: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(default)]
    pub dir: Option<PathBuf>,
}

/// Account numbering used by every run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AgentLayout {
    pub participants: usize,
    pub evaluators: usize,
}

const PARTICIPANT_BASE: u32 = 1_000_000;
const EVALUATOR_BASE: u32 = 2_000_000;
const MAX_ACCOUNTS: usize = 1_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Owner,
    Aggregator,
    Participant,
    Evaluator,
}

impl AgentLayout {
    pub const OWNER: AgentId = AgentId(1);
    pub const AGGREGATOR: AgentId = AgentId(2);

    pub fn participant(&self, i: usize) -> AgentId {
        AgentId(PARTICIPANT_BASE + i as u32)
    }

    pub fn evaluator(&self, j: usize) -> AgentId {
        AgentId(EVALUATOR_BASE + j as u32)
    }

    pub fn participant_ids(&self) -> Vec<AgentId> {
        (0..self.participants).map(|i| self.participant(i)).collect()
    }

    pub fn evaluator_ids(&self) -> Vec<AgentId> {
        (0..self.evaluators).map(|j| self.evaluator(j)).collect()
    }

    /// Role and index within the role.
    pub fn role_of(&self, agent: AgentId) -> Option<(Role, usize)> {
        match agent {
            Self::OWNER => Some((Role::Owner, 0)),
            Self::AGGREGATOR => Some((Role::Aggregator, 0)),
            AgentId(a) if a >= EVALUATOR_BASE && ((a - EVALUATOR_BASE) as usize) < self.evaluators => {
                Some((Role::Evaluator, (a - EVALUATOR_BASE) as usize))
            }
            AgentId(a) if a >= PARTICIPANT_BASE && ((a - PARTICIPANT_BASE) as usize) < self.participants => {
                Some((Role::Participant, (a - PARTICIPANT_BASE) as usize))
            }
            _ => None,
        }
    }
}

fn invalid(msg: impl Into<String>) -> OrchestratorError {
    OrchestratorError::ScenarioInvalid(msg.into())
}

impl Scenario {
    pub fn from_toml_str(text: &str) -> Result<Self, OrchestratorError> {
        let s: Scenario = toml::from_str(text).map_err(|e| invalid(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, OrchestratorError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| invalid(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn layout(&self) -> AgentLayout {
        AgentLayout {
            participants: self.population.participants,
            evaluators: self.economics.evaluators,
        }
    }

    pub fn metric(&self) -> MetricKind {
        self.task
            .metric
            .unwrap_or_else(|| MetricKind::default_for(self.population.model))
    }

    /// The round after which the owner signals the final round, if any.
    pub fn final_signal_after(&self) -> Option<u32> {
        match self.training.final_signal_after {
            Some(r) => Some(r),
            None if self.training.rounds >= 2 => Some(self.training.rounds - 1),
            None => None,
        }
    }

    pub fn task_config(&self) -> TaskConfig {
        TaskConfig {
            rounds_max: self.training.rounds,
            k_min_subgroup: self.task.k_min_subgroup,
            evaluator_ratio: self.task.evaluator_ratio,
            reward_pool: self.task.reward_pool,
            fee_split_participants: self.task.fee_split_participants,
            acceptable_bound: Score::from_f64(self.task.acceptable_bound),
            shamir_threshold: self.task.shamir_threshold,
            aggregator: AgentLayout::AGGREGATOR,
            metric: self.metric(),
            scoring: self.task.scoring,
            slash_fraction: self.task.slash_fraction,
        }
    }

    pub fn reachability(&self) -> Reachability {
        let layout = self.layout();
        let mut r = Reachability::fully_connected();
        for [a, b] in &self.network.blocked {
            r.block(layout.participant(*a), layout.participant(*b));
        }
        r
    }

    /// Sizes of the subgroups a partition of every participant produces.
    pub fn subgroup_sizes(&self) -> Vec<usize> {
        let n = self.population.participants;
        let g = n / self.task.k_min_subgroup;
        (0..g).map(|i| n / g + usize::from(i < n % g)).collect()
    }

    /// Evaluators needed when every participant survives to evaluation.
    pub fn evaluators_needed(&self) -> usize {
        let config = self.task_config();
        self.subgroup_sizes()
            .into_iter()
            .map(|s| config.evaluators_needed(s))
            .sum()
    }

    pub fn adversary_config(&self) -> Result<AdversaryConfig, OrchestratorError> {
        let layout = self.layout();
        let n = self.population.participants;
        let e = self.economics.evaluators;
        let participant_at = |i: usize| -> Result<AgentId, OrchestratorError> {
            if i < n {
                Ok(layout.participant(i))
            } else {
                Err(invalid(format!("participant index {i} out of range 0..{n}")))
            }
        };
        let mut cfg = AdversaryConfig {
            threat_model: self.adversary.threat_model,
            ..Default::default()
        };
        for entry in &self.adversary.participants {
            let with = entry.with.map(participant_at).transpose()?;
            let strategy = Strategy::parse(&entry.strategy, with, None).map_err(|e| invalid(e.to_string()))?;
            let Strategy::Participant(strategy) = strategy else {
                return Err(invalid(format!("`{}` is not a participant strategy", entry.strategy)));
            };
            for &i in &entry.agents {
                let agent = participant_at(i)?;
                if let ParticipantStrategy::ColludingShare { with } = strategy {
                    if with == agent {
                        return Err(invalid(format!("participant {i} cannot collude with itself")));
                    }
                }
                if cfg.participants.insert(agent, strategy.clone()).is_some() {
                    return Err(invalid(format!("participant {i} has two strategies")));
                }
            }
        }
        for entry in &self.adversary.evaluators {
            let targets = entry
                .targets
                .as_ref()
                .map(|t| t.iter().map(|&i| participant_at(i)).collect::<Result<Vec<_>, _>>())
                .transpose()?;
            let strategy = Strategy::parse(&entry.strategy, None, targets).map_err(|e| invalid(e.to_string()))?;
            let Strategy::Evaluator(strategy) = strategy else {
                return Err(invalid(format!("`{}` is not an evaluator strategy", entry.strategy)));
            };
            for &j in &entry.agents {
                if j >= e {
                    return Err(invalid(format!("evaluator index {j} out of range 0..{e}")));
                }
                if cfg.evaluators.insert(layout.evaluator(j), strategy.clone()).is_some() {
                    return Err(invalid(format!("evaluator {j} has two strategies")));
                }
            }
        }
        let mut dropouts: BTreeMap<u32, BTreeSet<AgentId>> = BTreeMap::new();
        for entry in &self.adversary.dropouts {
            if entry.round == 0 || entry.round > self.training.rounds {
                return Err(invalid(format!("dropout round {} outside 1..={}", entry.round, self.training.rounds)));
            }
            for &i in &entry.agents {
                dropouts.entry(entry.round).or_default().insert(participant_at(i)?);
            }
        }
        cfg.dropouts = dropouts;
        cfg.validate(n, e).map_err(|e| invalid(e.to_string()))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), OrchestratorError> {
        if self.name.trim().is_empty() {
            return Err(invalid("name must not be empty"));
        }
        self.population.validate().map_err(|e| invalid(e.to_string()))?;
        let n = self.population.participants;
        let e = self.economics.evaluators;
        if n >= MAX_ACCOUNTS || e >= MAX_ACCOUNTS {
            return Err(invalid(format!("at most {} participants and evaluators", MAX_ACCOUNTS - 1)));
        }
        let t = &self.training;
        if t.rounds == 0 || t.local_epochs == 0 {
            return Err(invalid("training.rounds and training.local_epochs must be positive"));
        }
        if !(t.learning_rate.is_finite() && t.learning_rate > 0.0) {
            return Err(invalid("training.learning_rate must be a positive real"));
        }
        if let Some(r) = t.final_signal_after {
            if r == 0 || r >= t.rounds {
                return Err(invalid(format!("training.final_signal_after must lie in 1..{}", t.rounds)));
            }
        }
        if !(0.0..=1.0).contains(&self.task.acceptable_bound) {
            return Err(invalid("task.acceptable_bound must lie in [0, 1]"));
        }
        let config = self.task_config();
        config.validate().map_err(|e| invalid(e.to_string()))?;
        if n < config.k_min_subgroup {
            return Err(invalid(format!(
                "{n} participants cannot fill one subgroup of {}",
                config.k_min_subgroup
            )));
        }
        let metric = self.metric();
        if !metric.supports(self.population.model) {
            return Err(invalid(format!("metric {metric:?} does not apply to {:?}", self.population.model)));
        }
        if self.task.scoring == ScoringBackend::Shapley {
            let largest = self.subgroup_sizes().into_iter().max().unwrap_or(0);
            if largest > MAX_SHAPLEY_PLAYERS {
                return Err(invalid(format!(
                    "Shapley scoring handles subgroups of at most {MAX_SHAPLEY_PLAYERS}, partition yields {largest}"
                )));
            }
        }
        let needed = self.evaluators_needed();
        if e < needed {
            return Err(invalid(format!("{needed} evaluators needed, {e} configured")));
        }
        let econ = &self.economics;
        let tax = econ.tax_rate.floor_mul(econ.stake_value);
        let epochs = u64::from(t.rounds) + 1;
        if econ.initial_balance < tax.saturating_mul(epochs) {
            return Err(invalid(format!(
                "initial_balance {} cannot cover {epochs} epochs of tax at {tax}",
                econ.initial_balance
            )));
        }
        for &[a, b] in &self.network.blocked {
            if a >= n || b >= n {
                return Err(invalid(format!("blocked pair [{a}, {b}] out of range")));
            }
        }
        if let Some(i) = self.network.non_resharing.iter().find(|&&i| i >= n) {
            return Err(invalid(format!("non_resharing index {i} out of range")));
        }
        self.adversary_config()?;
        Ok(())
    }
}
