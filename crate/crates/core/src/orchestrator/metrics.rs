//! Run metrics, file exports and run-to-run comparison.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::scenario::Role;
use super::OrchestratorError;
use crate::auditing::scoring::{EvaluatorRow, ParticipantRow};
use crate::ledger::{Chain, ChainEvent, LogRecord, Settlement};
use crate::types::AgentId;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: u32,
    /// Pooled training loss of the round's global model over every
    /// participant's private data.
    pub train_loss: f64,
    /// The task metric of the global model on the control set.
    pub control_metric: f64,
    pub registered: usize,
    pub admitted: usize,
    pub excluded: usize,
    pub dropped: usize,
    pub aborted_subgroups: usize,
    pub disputes: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PayoutRow {
    /// `None` for the public-goods row.
    pub agent: Option<AgentId>,
    pub role: String,
    pub index: Option<usize>,
    pub strategy: String,
    pub amount: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreasurySnapshot {
    pub label: String,
    pub balances: u64,
    pub public_goods: u64,
    pub escrow: u64,
    pub minted: u64,
}

impl TreasurySnapshot {
    pub fn capture(label: impl Into<String>, chain: &Chain) -> Self {
        let econ = chain.economics();
        TreasurySnapshot {
            label: label.into(),
            balances: econ.treasury.total_balances(),
            public_goods: econ.treasury.public_goods_pool,
            escrow: chain.escrowed(),
            minted: econ.minted,
        }
    }

    pub fn conserved(&self) -> bool {
        self.balances + self.public_goods + self.escrow == self.minted
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Incident {
    pub seq: u64,
    pub event: ChainEvent,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseDigest {
    pub seq: u64,
    pub phase: String,
    pub state_digest: String,
}

/// Digest at the last record of every run of equal phase tags.
pub fn phase_boundaries(log: &[LogRecord]) -> Vec<PhaseDigest> {
    let mut out: Vec<PhaseDigest> = Vec::new();
    for (i, rec) in log.iter().enumerate() {
        let next_differs = log.get(i + 1).is_none_or(|n| n.phase != rec.phase);
        if next_differs {
            out.push(PhaseDigest {
                seq: rec.seq,
                phase: rec.phase.clone().unwrap_or_else(|| "none".into()),
                state_digest: rec.state_digest.clone(),
            });
        }
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CopycatTally {
    pub attempts: usize,
    pub accepted: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub scenario: String,
    pub seed: u64,
    pub participants: usize,
    pub evaluators: usize,
    pub rounds: Vec<RoundMetrics>,
    /// Pooled loss of centralized gradient descent with the same step budget.
    pub centralized_loss: f64,
    pub final_train_loss: f64,
    pub final_control_metric: f64,
    pub settlement: Settlement,
    pub payouts: Vec<PayoutRow>,
    pub participant_scores: Vec<ParticipantRow>,
    pub evaluator_scores: Vec<EvaluatorRow>,
    pub treasury: Vec<TreasurySnapshot>,
    pub incidents: Vec<Incident>,
    pub slashed: Vec<AgentId>,
    pub copycat: CopycatTally,
    pub phase_digests: Vec<PhaseDigest>,
    pub final_state_digest: String,
    pub transactions: usize,
}

impl RunMetrics {
    pub fn payout_of(&self, agent: AgentId) -> u64 {
        self.payouts
            .iter()
            .filter(|r| r.agent == Some(agent))
            .map(|r| r.amount)
            .sum()
    }

    pub fn payout_total(&self) -> u64 {
        self.payouts.iter().map(|r| r.amount).sum()
    }

    pub fn overall_score(&self, agent: AgentId) -> Option<f64> {
        self.participant_scores
            .iter()
            .find(|r| r.participant == agent)
            .map(|r| r.overall)
    }

    pub fn participant_payouts(&self) -> impl Iterator<Item = &PayoutRow> {
        self.payouts.iter().filter(|r| r.role == role_name(Role::Participant))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }

    pub fn from_json(text: &str) -> Result<Self, OrchestratorError> {
        serde_json::from_str(text).map_err(|e| OrchestratorError::IncompatibleRuns(format!("unreadable metrics: {e}")))
    }

    /// Reads `metrics.json` from a run directory or a direct path.
    pub fn load(path: &Path) -> Result<Self, OrchestratorError> {
        let file = if path.is_dir() { path.join("metrics.json") } else { path.to_path_buf() };
        Self::from_json(&fs::read_to_string(&file)?)
    }
}

pub(crate) fn role_name(role: Role) -> &'static str {
    match role {
        Role::Owner => "owner",
        Role::Aggregator => "aggregator",
        Role::Participant => "participant",
        Role::Evaluator => "evaluator",
    }
}

#[derive(Serialize)]
struct Summary<'a> {
    scenario: &'a str,
    seed: u64,
    participants: usize,
    evaluators: usize,
    rounds: usize,
    transactions: usize,
    final_train_loss: f64,
    centralized_loss: f64,
    final_control_metric: f64,
    payout_total: u64,
    public_goods: u64,
    slashed: usize,
    disputes: usize,
    copycat_attempts: usize,
    copycat_accepted: usize,
    final_state_digest: &'a str,
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), OrchestratorError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_io)?;
    for row in rows {
        w.serialize(row).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> OrchestratorError {
    OrchestratorError::Io(std::io::Error::other(e.to_string()))
}

#[derive(Serialize)]
struct ParticipantCsv {
    participant: u32,
    reports: usize,
    median: Option<f64>,
    overall: f64,
    overall_exact: String,
    a_priori: bool,
    eliminated: bool,
}

#[derive(Serialize)]
struct EvaluatorCsv {
    evaluator: u32,
    reports: usize,
    credit: f64,
    credit_exact: String,
}

#[derive(Serialize)]
struct PayoutCsv<'a> {
    agent: Option<u32>,
    role: &'a str,
    index: Option<usize>,
    strategy: &'a str,
    amount: u64,
}

/// Writes the transaction log, metric tables and summary into `dir`.
pub fn export(dir: &Path, metrics: &RunMetrics, chain: &Chain) -> Result<(), OrchestratorError> {
    fs::create_dir_all(dir)?;
    let mut log = std::io::BufWriter::new(fs::File::create(dir.join("txlog.jsonl"))?);
    chain.export_jsonl(&mut log)?;
    log.flush()?;
    fs::write(dir.join("metrics.json"), metrics.to_json())?;
    write_csv(&dir.join("rounds.csv"), &metrics.rounds)?;
    write_csv(&dir.join("treasury.csv"), &metrics.treasury)?;
    write_csv(&dir.join("phase_digests.csv"), &metrics.phase_digests)?;
    let payouts: Vec<PayoutCsv> = metrics
        .payouts
        .iter()
        .map(|p| PayoutCsv {
            agent: p.agent.map(|a| a.0),
            role: &p.role,
            index: p.index,
            strategy: &p.strategy,
            amount: p.amount,
        })
        .collect();
    write_csv(&dir.join("payouts.csv"), &payouts)?;
    let parts: Vec<ParticipantCsv> = metrics
        .participant_scores
        .iter()
        .map(|r| ParticipantCsv {
            participant: r.participant.0,
            reports: r.reports,
            median: r.median,
            overall: r.overall,
            overall_exact: r.overall_exact.clone(),
            a_priori: r.a_priori,
            eliminated: r.eliminated,
        })
        .collect();
    write_csv(&dir.join("participants.csv"), &parts)?;
    let evals: Vec<EvaluatorCsv> = metrics
        .evaluator_scores
        .iter()
        .map(|r| EvaluatorCsv {
            evaluator: r.evaluator.0,
            reports: r.reports,
            credit: r.credit,
            credit_exact: r.credit_exact.clone(),
        })
        .collect();
    write_csv(&dir.join("evaluators.csv"), &evals)?;
    let summary = Summary {
        scenario: &metrics.scenario,
        seed: metrics.seed,
        participants: metrics.participants,
        evaluators: metrics.evaluators,
        rounds: metrics.rounds.len(),
        transactions: metrics.transactions,
        final_train_loss: metrics.final_train_loss,
        centralized_loss: metrics.centralized_loss,
        final_control_metric: metrics.final_control_metric,
        payout_total: metrics.payout_total(),
        public_goods: metrics.settlement.public_goods,
        slashed: metrics.slashed.len(),
        disputes: metrics.rounds.iter().map(|r| r.disputes).sum(),
        copycat_attempts: metrics.copycat.attempts,
        copycat_accepted: metrics.copycat.accepted,
        final_state_digest: &metrics.final_state_digest,
    };
    fs::write(
        dir.join("summary.json"),
        serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParticipantDelta {
    pub participant: AgentId,
    pub reward_baseline: u64,
    pub reward_variant: u64,
    pub reward_delta: i64,
    pub overall_baseline: Option<f64>,
    pub overall_variant: Option<f64>,
    pub overall_abs_diff: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossDelta {
    pub round: u32,
    pub baseline: f64,
    pub variant: f64,
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub baseline: String,
    pub variant: String,
    pub seed: u64,
    pub participants: Vec<ParticipantDelta>,
    pub loss: Vec<LossDelta>,
    pub mean_abs_overall_diff: f64,
    pub max_abs_overall_diff: f64,
    /// Kolmogorov-Smirnov distance between the two overall-score samples.
    pub score_ks_distance: f64,
}

fn ks_distance(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return if a.len() == b.len() { 0.0 } else { 1.0 };
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    d
}

/// Per-participant reward and score differences between two runs over the
/// same population.
pub fn compare(baseline: &RunMetrics, variant: &RunMetrics) -> Result<CompareReport, OrchestratorError> {
    if baseline.seed != variant.seed {
        return Err(OrchestratorError::IncompatibleRuns(format!(
            "seeds differ: {} vs {}",
            baseline.seed, variant.seed
        )));
    }
    if baseline.participants != variant.participants {
        return Err(OrchestratorError::IncompatibleRuns(format!(
            "population sizes differ: {} vs {}",
            baseline.participants, variant.participants
        )));
    }
    let agents: BTreeSet<AgentId> = baseline
        .participant_payouts()
        .chain(variant.participant_payouts())
        .filter_map(|r| r.agent)
        .chain(baseline.participant_scores.iter().map(|r| r.participant))
        .chain(variant.participant_scores.iter().map(|r| r.participant))
        .collect();
    let mut participants = Vec::with_capacity(agents.len());
    let mut diffs = Vec::new();
    for a in agents {
        let (ra, rb) = (baseline.payout_of(a), variant.payout_of(a));
        let (oa, ob) = (baseline.overall_score(a), variant.overall_score(a));
        let diff = oa.zip(ob).map(|(x, y)| (x - y).abs());
        if let Some(d) = diff {
            diffs.push(d);
        }
        participants.push(ParticipantDelta {
            participant: a,
            reward_baseline: ra,
            reward_variant: rb,
            reward_delta: rb as i64 - ra as i64,
            overall_baseline: oa,
            overall_variant: ob,
            overall_abs_diff: diff,
        });
    }
    let by_round = |m: &RunMetrics| -> BTreeMap<u32, f64> { m.rounds.iter().map(|r| (r.round, r.train_loss)).collect() };
    let (la, lb) = (by_round(baseline), by_round(variant));
    let loss = la
        .iter()
        .filter_map(|(r, a)| {
            lb.get(r).map(|b| LossDelta {
                round: *r,
                baseline: *a,
                variant: *b,
                delta: b - a,
            })
        })
        .collect();
    let scores = |m: &RunMetrics| -> Vec<f64> { m.participant_scores.iter().map(|r| r.overall).collect() };
    Ok(CompareReport {
        baseline: baseline.scenario.clone(),
        variant: variant.scenario.clone(),
        seed: baseline.seed,
        participants,
        loss,
        mean_abs_overall_diff: if diffs.is_empty() {
            0.0
        } else {
            diffs.iter().sum::<f64>() / diffs.len() as f64
        },
        max_abs_overall_diff: diffs.iter().copied().fold(0.0, f64::max),
        score_ks_distance: ks_distance(&scores(baseline), &scores(variant)),
    })
}

impl CompareReport {
    pub fn is_zero(&self) -> bool {
        self.participants
            .iter()
            .all(|p| p.reward_delta == 0 && p.overall_abs_diff.is_none_or(|d| d == 0.0))
            && self.loss.iter().all(|l| l.delta == 0.0)
            && self.score_ks_distance == 0.0
    }

    /// The per-participant table as CSV.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "participant",
            "reward_baseline",
            "reward_variant",
            "reward_delta",
            "overall_baseline",
            "overall_variant",
            "overall_abs_diff",
        ])
        .expect("in-memory write");
        let opt = |x: Option<f64>| x.map(|v| format!("{v:.6}")).unwrap_or_default();
        for p in &self.participants {
            w.write_record([
                p.participant.0.to_string(),
                p.reward_baseline.to_string(),
                p.reward_variant.to_string(),
                p.reward_delta.to_string(),
                opt(p.overall_baseline),
                opt(p.overall_variant),
                opt(p.overall_abs_diff),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }

    pub fn render(&self) -> String {
        let mut out = format!(
            "baseline: {}\nvariant: {}\nseed: {}\nmean |overall diff|: {:.6}\nmax |overall diff|: {:.6}\nscore KS distance: {:.6}\n\n",
            self.baseline,
            self.variant,
            self.seed,
            self.mean_abs_overall_diff,
            self.max_abs_overall_diff,
            self.score_ks_distance
        );
        out.push_str(&self.to_csv());
        if !self.loss.is_empty() {
            out.push_str("\nround,loss_baseline,loss_variant,delta\n");
            for l in &self.loss {
                out.push_str(&format!("{},{:.8},{:.8},{:.8}\n", l.round, l.baseline, l.variant, l.delta));
            }
        }
        out
    }
}
