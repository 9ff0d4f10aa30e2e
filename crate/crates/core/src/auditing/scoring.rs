//! Median-based contributivity scoring over accepted evaluation reports.
//!
//! Participants are capped at the accepted report furthest from their
//! median. Evaluators earn `1 - |s - median|` per report, or nothing when
//! the deviation exceeds one half. All arithmetic is exact.

use std::collections::BTreeMap;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{Signed, Zero};
use serde::{Deserialize, Serialize};

use crate::types::{AgentId, Ratio, Rational, Score};

/// A revealed score whose commitment and attestation both verified.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Report {
    pub evaluator: AgentId,
    pub participant: AgentId,
    pub score: Score,
}

fn half() -> BigRational {
    BigRational::new(BigInt::from(1), BigInt::from(2))
}

/// Middle value, or the mean of the two middle values for even counts.
pub fn median(scores: &[Score]) -> Option<BigRational> {
    if scores.is_empty() {
        return None;
    }
    let mut sorted = scores.to_vec();
    sorted.sort_unstable();
    let n = sorted.len();
    Some(if n % 2 == 1 {
        sorted[n / 2].to_rational()
    } else {
        (sorted[n / 2 - 1].to_rational() + sorted[n / 2].to_rational()) * half()
    })
}

/// The accepted score furthest from the median, the lower one on ties.
/// With no accepted reports the participant gets the a priori 0.5.
pub fn participant_overall_score(scores: &[Score]) -> BigRational {
    let Some(m) = median(scores) else {
        return half();
    };
    let mut best: Option<(BigRational, Score)> = None;
    for &s in scores {
        let d = (s.to_rational() - &m).abs();
        best = match best {
            Some((bd, bs)) if bd > d || (bd == d && bs <= s) => Some((bd, bs)),
            _ => Some((d, s)),
        };
    }
    best.expect("non-empty").1.to_rational()
}

/// Credit for one report against the participant's median.
pub fn evaluator_credit(revealed: Score, median: &BigRational) -> BigRational {
    let d = (revealed.to_rational() - median).abs();
    if d > half() {
        BigRational::zero()
    } else {
        BigRational::from_integer(BigInt::from(1)) - d
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParticipantRecord {
    pub participant: AgentId,
    /// `(evaluator, score)` in evaluator order.
    pub reports: Vec<(AgentId, Score)>,
    pub median: Option<Rational>,
    pub overall: Rational,
    pub a_priori: bool,
    pub eliminated: bool,
}

impl ParticipantRecord {
    pub fn settlement_score(&self) -> BigRational {
        if self.eliminated {
            BigRational::zero()
        } else {
            self.overall.0.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvaluatorRecord {
    pub evaluator: AgentId,
    /// `(participant, credit)` in participant order.
    pub credits: Vec<(AgentId, Rational)>,
    pub score: Rational,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreBoard {
    pub participants: BTreeMap<AgentId, ParticipantRecord>,
    pub evaluators: BTreeMap<AgentId, EvaluatorRecord>,
    pub bound: Option<Score>,
}

/// Exact reward fractions. Together with `public_goods` they sum to 1.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewardFractions {
    pub participants: BTreeMap<AgentId, Rational>,
    pub evaluators: BTreeMap<AgentId, Rational>,
    pub public_goods: Rational,
}

impl ScoreBoard {
    /// Builds the board for the given rosters. Reports naming agents outside
    /// the rosters are ignored.
    pub fn compute(participants: &[AgentId], evaluators: &[AgentId], accepted: &[Report]) -> Self {
        let mut by_participant: BTreeMap<AgentId, Vec<(AgentId, Score)>> =
            participants.iter().map(|p| (*p, Vec::new())).collect();
        for r in accepted {
            if evaluators.contains(&r.evaluator) {
                if let Some(list) = by_participant.get_mut(&r.participant) {
                    list.push((r.evaluator, r.score));
                }
            }
        }
        let mut credits: BTreeMap<AgentId, Vec<(AgentId, Rational)>> =
            evaluators.iter().map(|e| (*e, Vec::new())).collect();
        let mut board = ScoreBoard::default();
        for (participant, mut reports) in by_participant {
            reports.sort();
            let scores: Vec<Score> = reports.iter().map(|(_, s)| *s).collect();
            let med = median(&scores);
            if let Some(m) = &med {
                for (e, s) in &reports {
                    credits
                        .get_mut(e)
                        .expect("roster")
                        .push((participant, evaluator_credit(*s, m).into()));
                }
            }
            board.participants.insert(
                participant,
                ParticipantRecord {
                    participant,
                    a_priori: reports.is_empty(),
                    overall: participant_overall_score(&scores).into(),
                    median: med.map(Rational::from),
                    reports,
                    eliminated: false,
                },
            );
        }
        for (evaluator, mut list) in credits {
            list.sort();
            let score = if list.is_empty() {
                BigRational::zero()
            } else {
                let total: BigRational = list.iter().map(|(_, c)| c.0.clone()).sum();
                total / BigRational::from_integer(BigInt::from(list.len()))
            };
            board.evaluators.insert(
                evaluator,
                EvaluatorRecord {
                    evaluator,
                    credits: list,
                    score: score.into(),
                },
            );
        }
        board
    }

    /// Eliminates participants whose overall score is below `bound`.
    pub fn apply_bound_filter(&mut self, bound: Score) {
        let b = bound.to_rational();
        for rec in self.participants.values_mut() {
            rec.eliminated = rec.overall.0 < b;
        }
        self.bound = Some(bound);
    }

    pub fn survivors(&self) -> impl Iterator<Item = AgentId> + '_ {
        self.participants.values().filter(|r| !r.eliminated).map(|r| r.participant)
    }

    /// Splits the pool: `split` goes to participants by settlement score and
    /// the rest to evaluators by evaluator score. A side whose scores sum to
    /// zero forfeits its share to the public-goods pool.
    pub fn reward_fractions(&self, split: Ratio) -> RewardFractions {
        let split = split.to_big();
        let one = BigRational::from_integer(BigInt::from(1));
        let mut public_goods = BigRational::zero();

        let p_scores: Vec<(AgentId, BigRational)> =
            self.participants.values().map(|r| (r.participant, r.settlement_score())).collect();
        let p_total: BigRational = p_scores.iter().map(|(_, s)| s.clone()).sum();
        let mut participants = BTreeMap::new();
        if p_total.is_zero() {
            public_goods += &split;
        } else {
            for (p, s) in p_scores {
                participants.insert(p, Rational(s / &p_total * &split));
            }
        }

        let e_share = &one - &split;
        let e_total: BigRational = self.evaluators.values().map(|r| r.score.0.clone()).sum();
        let mut evaluators = BTreeMap::new();
        if e_total.is_zero() {
            public_goods += &e_share;
        } else {
            for r in self.evaluators.values() {
                evaluators.insert(r.evaluator, Rational(&r.score.0 / &e_total * &e_share));
            }
        }
        RewardFractions {
            participants,
            evaluators,
            public_goods: public_goods.into(),
        }
    }

    pub fn participant_rows(&self) -> Vec<ParticipantRow> {
        self.participants
            .values()
            .map(|r| ParticipantRow {
                participant: r.participant,
                reports: r.reports.len(),
                median: r.median.as_ref().map(Rational::to_f64),
                overall: r.overall.to_f64(),
                overall_exact: r.overall.to_string(),
                a_priori: r.a_priori,
                eliminated: r.eliminated,
            })
            .collect()
    }

    pub fn evaluator_rows(&self) -> Vec<EvaluatorRow> {
        self.evaluators
            .values()
            .map(|r| EvaluatorRow {
                evaluator: r.evaluator,
                reports: r.credits.len(),
                credit: r.score.to_f64(),
                credit_exact: r.score.to_string(),
            })
            .collect()
    }
}

/// Flat export record for one participant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParticipantRow {
    pub participant: AgentId,
    pub reports: usize,
    pub median: Option<f64>,
    pub overall: f64,
    pub overall_exact: String,
    pub a_priori: bool,
    pub eliminated: bool,
}

/// Flat export record for one evaluator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluatorRow {
    pub evaluator: AgentId,
    pub reports: usize,
    pub credit: f64,
    pub credit_exact: String,
}
