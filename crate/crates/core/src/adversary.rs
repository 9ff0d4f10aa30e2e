//! Misbehaviour strategies, fixed per agent when a scenario is loaded.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::auditing::Attestation;
use crate::fl::{local_train, FlError, ModelParams, PrivateDataset, Samples};
use crate::types::{AgentId, Score};

#[derive(Debug, Error, PartialEq)]
pub enum AdversaryError {
    #[error("unknown strategy `{0}`")]
    UnknownStrategy(String),
    #[error("strategy `{strategy}` needs field `{field}`")]
    MissingField { strategy: String, field: &'static str },
    #[error("colluder {0} produced no honest update this round")]
    MissingColluder(AgentId),
    #[error("leak strategy used without leaked control rows")]
    MissingLeak,
    #[error("{malicious} of {total} {role} are malicious; the threat model needs fewer than half")]
    OutOfThreatModel { role: &'static str, malicious: usize, total: usize },
    #[error(transparent)]
    Fl(#[from] FlError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThreatModel {
    #[default]
    Within,
    OutOfModel,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "strategy")]
pub enum ParticipantStrategy {
    /// Uniform weights over the codec's clamp range.
    RandomWeights,
    /// Trains on label-flipped data.
    InvertedLabels,
    /// Submits a byte-identical copy of another participant's honest update.
    ColludingShare { with: AgentId },
    /// Trains on its own data plus control rows leaked by a colluding evaluator.
    ControlLeak,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "strategy")]
pub enum EvaluatorStrategy {
    /// 1.0 for the targets, 0.0 for everyone else.
    ExtremeScores { targets: BTreeSet<AgentId> },
    /// Reuses a peer's commitment and later its opening.
    Copycat,
    /// Reveals a score other than the one the environment attested.
    FalseAttestation,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Strategy {
    Participant(ParticipantStrategy),
    Evaluator(EvaluatorStrategy),
}

impl Strategy {
    /// Builds a strategy from its configuration name and optional arguments.
    pub fn parse(name: &str, with: Option<AgentId>, targets: Option<Vec<AgentId>>) -> Result<Self, AdversaryError> {
        let missing = |field| AdversaryError::MissingField {
            strategy: name.to_string(),
            field,
        };
        Ok(match name {
            "random_weights" => Strategy::Participant(ParticipantStrategy::RandomWeights),
            "inverted_labels" => Strategy::Participant(ParticipantStrategy::InvertedLabels),
            "colluding_share" => Strategy::Participant(ParticipantStrategy::ColludingShare {
                with: with.ok_or_else(|| missing("with"))?,
            }),
            "control_leak" => Strategy::Participant(ParticipantStrategy::ControlLeak),
            "extreme_scores" => Strategy::Evaluator(EvaluatorStrategy::ExtremeScores {
                targets: targets.ok_or_else(|| missing("targets"))?.into_iter().collect(),
            }),
            "copycat" => Strategy::Evaluator(EvaluatorStrategy::Copycat),
            "false_attestation" => Strategy::Evaluator(EvaluatorStrategy::FalseAttestation),
            other => return Err(AdversaryError::UnknownStrategy(other.to_string())),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Participant(p) => p.name(),
            Strategy::Evaluator(e) => e.name(),
        }
    }
}

impl ParticipantStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            ParticipantStrategy::RandomWeights => "random_weights",
            ParticipantStrategy::InvertedLabels => "inverted_labels",
            ParticipantStrategy::ColludingShare { .. } => "colluding_share",
            ParticipantStrategy::ControlLeak => "control_leak",
        }
    }
}

impl EvaluatorStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            EvaluatorStrategy::ExtremeScores { .. } => "extreme_scores",
            EvaluatorStrategy::Copycat => "copycat",
            EvaluatorStrategy::FalseAttestation => "false_attestation",
        }
    }
}

/// Who misbehaves, how, and when who drops out.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdversaryConfig {
    pub threat_model: ThreatModel,
    pub participants: BTreeMap<AgentId, ParticipantStrategy>,
    pub evaluators: BTreeMap<AgentId, EvaluatorStrategy>,
    /// Round to participants that go silent in that round.
    pub dropouts: BTreeMap<u32, BTreeSet<AgentId>>,
}

impl AdversaryConfig {
    /// Malicious participants, `M`.
    pub fn malicious_count(&self) -> usize {
        self.participants.len()
    }

    /// Enforces `2M < N` for participants and evaluators alike, unless the
    /// scenario is explicitly out of model.
    pub fn validate(&self, participants: usize, evaluators: usize) -> Result<(), AdversaryError> {
        if self.threat_model == ThreatModel::OutOfModel {
            return Ok(());
        }
        for (role, malicious, total) in [
            ("participants", self.participants.len(), participants),
            ("evaluators", self.evaluators.len(), evaluators),
        ] {
            if malicious > 0 && 2 * malicious >= total {
                return Err(AdversaryError::OutOfThreatModel { role, malicious, total });
            }
        }
        Ok(())
    }

    pub fn participant_strategy(&self, agent: AgentId) -> Option<&ParticipantStrategy> {
        self.participants.get(&agent)
    }

    pub fn evaluator_strategy(&self, agent: AgentId) -> Option<&EvaluatorStrategy> {
        self.evaluators.get(&agent)
    }

    pub fn drops_out(&self, round: u32, agent: AgentId) -> bool {
        self.dropouts.get(&round).is_some_and(|s| s.contains(&agent))
    }
}

/// Inputs available to a participant when it builds its round update.
pub struct UpdateContext<'a> {
    pub global: &'a ModelParams,
    pub data: &'a PrivateDataset,
    pub epochs: usize,
    pub learning_rate: f64,
    pub clamp: f64,
    /// Honest updates of the round, for collusion.
    pub peer_updates: &'a BTreeMap<AgentId, ModelParams>,
    pub leaked_control: Option<&'a Samples>,
}

pub fn malicious_update<R: Rng + ?Sized>(
    strategy: &Strategy,
    honest_update: &ModelParams,
    ctx: &UpdateContext<'_>,
    rng: &mut R,
) -> Result<ModelParams, AdversaryError> {
    let Strategy::Participant(strategy) = strategy else {
        return Err(AdversaryError::UnknownStrategy(strategy.name().to_string()));
    };
    match strategy {
        ParticipantStrategy::RandomWeights => Ok(ModelParams {
            weights: (0..honest_update.dim())
                .map(|_| rng.random_range(-ctx.clamp..=ctx.clamp))
                .collect(),
            kind: honest_update.kind,
        }),
        ParticipantStrategy::InvertedLabels => {
            let flipped = ctx.data.with_inverted_labels(ctx.global.kind);
            Ok(local_train(ctx.global, &flipped.samples, ctx.epochs, ctx.learning_rate)?)
        }
        ParticipantStrategy::ColludingShare { with } => ctx
            .peer_updates
            .get(with)
            .cloned()
            .ok_or(AdversaryError::MissingColluder(*with)),
        ParticipantStrategy::ControlLeak => {
            let leak = ctx.leaked_control.ok_or(AdversaryError::MissingLeak)?;
            let joined = ctx.data.samples.concat(leak)?;
            Ok(local_train(ctx.global, &joined, ctx.epochs, ctx.learning_rate)?)
        }
    }
}

/// What a misbehaving evaluator does for one assigned participant.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ReportIntent {
    /// Commit to `score` and reveal it alongside `attestation`.
    Reveal {
        participant: AgentId,
        score: Score,
        attestation: Attestation,
    },
    /// Copy a peer's commitment, then try to open it with the peer's opening.
    CopyPeer { participant: AgentId },
}

/// Turns the genuine attestations an evaluator obtained into its reports.
pub fn malicious_report<R: Rng + ?Sized>(
    strategy: &Strategy,
    assignments: &[Attestation],
    rng: &mut R,
) -> Result<Vec<ReportIntent>, AdversaryError> {
    let Strategy::Evaluator(strategy) = strategy else {
        return Err(AdversaryError::UnknownStrategy(strategy.name().to_string()));
    };
    Ok(assignments
        .iter()
        .map(|a| match strategy {
            EvaluatorStrategy::ExtremeScores { targets } => ReportIntent::Reveal {
                participant: a.participant,
                score: if targets.contains(&a.participant) {
                    Score::ONE
                } else {
                    Score::ZERO
                },
                attestation: a.clone(),
            },
            EvaluatorStrategy::Copycat => ReportIntent::CopyPeer {
                participant: a.participant,
            },
            EvaluatorStrategy::FalseAttestation => {
                let genuine = a.claimed_score.ppm();
                let mut forged = rng.random_range(0..=Score::ONE.ppm());
                if forged == genuine {
                    forged = if genuine == 0 { 1 } else { genuine - 1 };
                }
                let score = Score::from_ppm(forged);
                let mut attestation = a.clone();
                attestation.claimed_score = score;
                ReportIntent::Reveal {
                    participant: a.participant,
                    score,
                    attestation,
                }
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::auditing::environment::attest_for_test;
    use crate::auditing::{AttestationKey, MetricKind, ScoringBackend, SecureEnvironment};
    use crate::content_store::ContentId;
    use crate::fl::{generate_synthetic_population, ModelKind, PopulationSpec};
    use crate::ledger::score_commitment;
    use crate::rng::RngStreams;
    use proptest::prelude::{any, prop_assert, prop_assert_ne, proptest, ProptestConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn ids(n: u32) -> Vec<AgentId> {
        (0..n).map(AgentId).collect()
    }

    fn population(kind: ModelKind) -> crate::fl::Population {
        let spec = PopulationSpec {
            participants: 4,
            samples_per_participant: 300,
            feature_dim: 3,
            label_noise: 0.1,
            heterogeneity: 0.0,
            clusters: 1,
            cluster_shift: 2.0,
            model: kind,
            control_samples: 400,
        };
        generate_synthetic_population(&spec, &ids(4), &RngStreams::new(11)).unwrap()
    }

    fn ctx<'a>(
        global: &'a ModelParams,
        data: &'a PrivateDataset,
        peers: &'a BTreeMap<AgentId, ModelParams>,
    ) -> UpdateContext<'a> {
        UpdateContext {
            global,
            data,
            epochs: 200,
            learning_rate: 0.5,
            clamp: 64.0,
            peer_updates: peers,
            leaked_control: None,
        }
    }

    #[test]
    fn parse_known_and_unknown() {
        assert_eq!(
            Strategy::parse("random_weights", None, None).unwrap(),
            Strategy::Participant(ParticipantStrategy::RandomWeights)
        );
        assert_eq!(
            Strategy::parse("colluding_share", Some(AgentId(4)), None).unwrap(),
            Strategy::Participant(ParticipantStrategy::ColludingShare { with: AgentId(4) })
        );
        assert!(matches!(
            Strategy::parse("colluding_share", None, None),
            Err(AdversaryError::MissingField { field: "with", .. })
        ));
        assert_eq!(
            Strategy::parse("gradient_inversion", None, None),
            Err(AdversaryError::UnknownStrategy("gradient_inversion".into()))
        );
    }

    #[test]
    fn wrong_role_is_unknown_strategy() {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let pop = population(ModelKind::LinearRegression);
        let g = ModelParams::zeros(ModelKind::LinearRegression, 4);
        let peers = BTreeMap::new();
        let err = malicious_update(
            &Strategy::Evaluator(EvaluatorStrategy::Copycat),
            &g,
            &ctx(&g, &pop.datasets[0], &peers),
            &mut rng,
        )
        .unwrap_err();
        assert_eq!(err, AdversaryError::UnknownStrategy("copycat".into()));
        let err = malicious_report(&Strategy::Participant(ParticipantStrategy::RandomWeights), &[], &mut rng)
            .unwrap_err();
        assert_eq!(err, AdversaryError::UnknownStrategy("random_weights".into()));
    }

    #[test]
    fn threat_model_majority_rule() {
        let mut cfg = AdversaryConfig::default();
        for i in 0..5 {
            cfg.participants.insert(AgentId(i), ParticipantStrategy::RandomWeights);
        }
        assert!(cfg.validate(11, 3).is_ok());
        assert_eq!(
            cfg.validate(10, 3),
            Err(AdversaryError::OutOfThreatModel {
                role: "participants",
                malicious: 5,
                total: 10
            })
        );
        cfg.threat_model = ThreatModel::OutOfModel;
        assert!(cfg.validate(10, 3).is_ok());

        let mut cfg = AdversaryConfig::default();
        cfg.evaluators.insert(AgentId(0), EvaluatorStrategy::Copycat);
        assert!(cfg.validate(10, 3).is_ok());
        assert!(cfg.validate(10, 2).is_err());
    }

    #[test]
    fn random_weights_stay_in_clamp_and_score_poorly() {
        let pop = population(ModelKind::LinearRegression);
        let mut env = SecureEnvironment::new(AttestationKey::from_seed(1));
        env.load_control(pop.control.clone());
        let g = ModelParams::zeros(ModelKind::LinearRegression, 4);
        let peers = BTreeMap::new();
        let c = ctx(&g, &pop.datasets[0], &peers);
        let honest = local_train(&g, &pop.datasets[0].samples, c.epochs, c.learning_rate).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let bad = malicious_update(&Strategy::Participant(ParticipantStrategy::RandomWeights), &honest, &c, &mut rng)
            .unwrap();
        assert_eq!(bad.dim(), honest.dim());
        assert!(bad.weights.iter().all(|w| w.abs() <= 64.0));
        let metric = MetricKind::InverseMse;
        let margin = 0.5;
        assert!(env.evaluate(&bad, metric).unwrap() <= env.evaluate(&honest, metric).unwrap() - margin);
    }

    #[test]
    fn inverted_labels_fall_below_chance() {
        let pop = population(ModelKind::LogisticRegression);
        let mut env = SecureEnvironment::new(AttestationKey::from_seed(1));
        env.load_control(pop.control.clone());
        let g = ModelParams::zeros(ModelKind::LogisticRegression, 4);
        let peers = BTreeMap::new();
        let c = ctx(&g, &pop.datasets[0], &peers);
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let bad = malicious_update(&Strategy::Participant(ParticipantStrategy::InvertedLabels), &g, &c, &mut rng)
            .unwrap();
        assert!(env.evaluate(&bad, MetricKind::Accuracy).unwrap() < 0.5);
    }

    #[test]
    fn colluding_share_copies_bytes() {
        let pop = population(ModelKind::LinearRegression);
        let g = ModelParams::zeros(ModelKind::LinearRegression, 4);
        let honest = local_train(&g, &pop.datasets[1].samples, 5, 0.1).unwrap();
        let peers = BTreeMap::from([(AgentId(1), honest.clone())]);
        let c = ctx(&g, &pop.datasets[0], &peers);
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let s = Strategy::Participant(ParticipantStrategy::ColludingShare { with: AgentId(1) });
        let copy = malicious_update(&s, &g, &c, &mut rng).unwrap();
        let mut env = SecureEnvironment::new(AttestationKey::from_seed(1));
        assert_eq!(env.deposit_model(AgentId(0), copy), env.deposit_model(AgentId(1), honest));

        let s = Strategy::Participant(ParticipantStrategy::ColludingShare { with: AgentId(2) });
        assert_eq!(
            malicious_update(&s, &g, &c, &mut rng),
            Err(AdversaryError::MissingColluder(AgentId(2)))
        );
    }

    #[test]
    fn control_leak_needs_rows() {
        let pop = population(ModelKind::LinearRegression);
        let g = ModelParams::zeros(ModelKind::LinearRegression, 4);
        let peers = BTreeMap::new();
        let mut c = ctx(&g, &pop.datasets[0], &peers);
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let s = Strategy::Participant(ParticipantStrategy::ControlLeak);
        assert_eq!(malicious_update(&s, &g, &c, &mut rng), Err(AdversaryError::MissingLeak));
        let mut env = SecureEnvironment::new(AttestationKey::from_seed(1));
        env.load_control(pop.control.clone());
        let leak = env.leak_control().unwrap();
        c.leaked_control = Some(&leak);
        assert!(malicious_update(&s, &g, &c, &mut rng).unwrap().is_finite());
    }

    fn genuine(key: &AttestationKey, e: u32, p: u32, ppm: u32) -> Attestation {
        attest_for_test(
            key,
            AgentId(e),
            AgentId(p),
            ContentId::of(&[p as u8]),
            ContentId::of(b"control"),
            MetricKind::Accuracy,
            ScoringBackend::Median,
            Score::from_ppm(ppm),
        )
    }

    #[test]
    fn extreme_scores_follow_targets() {
        let key = AttestationKey::from_seed(5);
        let atts: Vec<_> = (0..4).map(|p| genuine(&key, 9, p, 400_000)).collect();
        let s = Strategy::Evaluator(EvaluatorStrategy::ExtremeScores {
            targets: [AgentId(1), AgentId(3)].into(),
        });
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let scores: Vec<u32> = malicious_report(&s, &atts, &mut rng)
            .unwrap()
            .into_iter()
            .map(|r| match r {
                ReportIntent::Reveal { score, .. } => score.ppm(),
                ReportIntent::CopyPeer { .. } => unreachable!(),
            })
            .collect();
        assert_eq!(scores, vec![0, 1_000_000, 0, 1_000_000]);
    }

    #[test]
    fn copycat_intends_to_copy() {
        let key = AttestationKey::from_seed(5);
        let atts = vec![genuine(&key, 9, 2, 1)];
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        assert_eq!(
            malicious_report(&Strategy::Evaluator(EvaluatorStrategy::Copycat), &atts, &mut rng).unwrap(),
            vec![ReportIntent::CopyPeer { participant: AgentId(2) }]
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn false_attestation_never_verifies(ppm in 0u32..=1_000_000, seed in any::<u64>()) {
            let key = AttestationKey::from_seed(5);
            let atts = vec![genuine(&key, 9, 2, ppm)];
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let out = malicious_report(&Strategy::Evaluator(EvaluatorStrategy::FalseAttestation), &atts, &mut rng).unwrap();
            let ReportIntent::Reveal { score, attestation, .. } = &out[0] else {
                panic!("expected a reveal");
            };
            prop_assert_ne!(score.ppm(), ppm);
            prop_assert!(!attestation.verify(&key));
        }

        #[test]
        fn copied_opening_never_matches(peer in 0u32..50, copier in 50u32..100, ppm in 0u32..=1_000_000, salt in "[a-f0-9]{16}") {
            let c = score_commitment(AgentId(peer), AgentId(7), Score::from_ppm(ppm), &salt);
            prop_assert_ne!(c, score_commitment(AgentId(copier), AgentId(7), Score::from_ppm(ppm), &salt));
        }
    }
}
