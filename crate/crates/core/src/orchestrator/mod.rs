//! Scenario-driven protocol runs.
//!
//! [`run`] executes one full task: deployment, the training rounds with
//! masked uploads, availability checks and hierarchical aggregation, the
//! final-round signal, evaluator assignment, benchmarking, commit and reveal,
//! attestation checks, scoring, settlement and the closing tax epoch. All
//! state changes go through the simulated chain; heavy compute (local
//! training, benchmarking) fans out over a thread pool and joins in a fixed
//! order.

pub mod metrics;
pub mod scenario;

use std::collections::{BTreeMap, BTreeSet};
use std::io::BufReader;
use std::path::Path;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use thiserror::Error;

use crate::adversary::{
    malicious_report, malicious_update, AdversaryConfig, AdversaryError, ParticipantStrategy, ReportIntent, Strategy, UpdateContext,
};
use crate::auditing::{Attestation, AttestationKey, MetricKind, ScoringBackend, SecureEnvironment};
use crate::content_store::{ContentId, ContentStore};
use crate::fl::{
    generate_synthetic_population, local_train, loss, master_aggregate, pooled_loss, verify_subgroup_mean, FlError,
    ModelKind, ModelParams, Population, Samples, SubgroupSum,
};
use crate::ledger::{
    score_commitment, seal_cid, Chain, ChainEvent, GlobalPointer, LedgerError, Op, Receipt, ReplayError,
    SubgroupResult, TaskConfig,
};
use crate::economics::EconomicsEntry;
use crate::rng::RngStreams;
use crate::secure_agg::{
    derive_pairwise_masks, mask, share_pair_seeds, unmask_aggregate, wire, FixedPointCodec, MaskedUpdate,
    SecureAggError, SeedBook, SeedShareBundle,
};
use crate::types::{AgentId, TaskId};

pub use metrics::{
    compare, export, phase_boundaries, CompareReport, CopycatTally, Incident, PayoutRow, PhaseDigest, RoundMetrics,
    RunMetrics, TreasurySnapshot,
};
pub use scenario::{AgentLayout, Role, Scenario};

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("invalid scenario: {0}")]
    ScenarioInvalid(String),
    #[error("protocol abort during {phase}: {message}")]
    Abort { phase: String, message: String },
    #[error("runs are not comparable: {0}")]
    IncompatibleRuns(String),
    #[error("replay failed: {0}")]
    Replay(#[from] ReplayError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl OrchestratorError {
    /// Process exit status for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            OrchestratorError::ScenarioInvalid(_) | OrchestratorError::IncompatibleRuns(_) => 2,
            OrchestratorError::Abort { .. } | OrchestratorError::Replay(_) => 3,
            OrchestratorError::Io(_) => 1,
        }
    }
}

pub struct RunOutput {
    pub metrics: RunMetrics,
    pub chain: Chain,
    /// Every blob published during the run.
    pub store: ContentStore,
    /// The model the owner downloads after settlement.
    pub final_model: ModelParams,
    /// Not part of [`RunMetrics`], which must be reproducible byte for byte.
    pub wall_clock: Duration,
}

pub fn run(scenario: &Scenario) -> Result<RunOutput, OrchestratorError> {
    let started = Instant::now();
    scenario.validate()?;
    let mut runner = Runner::new(scenario)?;
    let (metrics, final_model) = runner.execute()?;
    Ok(RunOutput {
        metrics,
        chain: runner.chain,
        store: runner.store,
        final_model,
        wall_clock: started.elapsed(),
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReplayReport {
    pub transactions: usize,
    pub phase_digests: Vec<PhaseDigest>,
    pub final_state_digest: String,
}

/// Re-executes a transaction log, checking every recorded state digest.
pub fn replay_log(path: &Path) -> Result<ReplayReport, OrchestratorError> {
    let records = Chain::read_jsonl(BufReader::new(std::fs::File::open(path)?))?;
    let phase_digests = phase_boundaries(&records);
    let transactions = records.len();
    let chain = Chain::replay(records)?;
    Ok(ReplayReport {
        transactions,
        phase_digests,
        final_state_digest: last_digest(&chain),
    })
}

/// Full-batch gradient descent on the pooled data of every participant,
/// from zero weights, for `steps` steps. Returns the model and its pooled loss.
pub fn centralized_baseline(
    datasets: &[&Samples],
    kind: ModelKind,
    steps: usize,
    learning_rate: f64,
) -> Result<(ModelParams, f64), FlError> {
    let (first, rest) = datasets.split_first().ok_or(FlError::EmptyInput)?;
    let mut pooled = (*first).clone();
    for s in rest {
        pooled = pooled.concat(s)?;
    }
    let start = ModelParams::zeros(kind, pooled.dim() + 1);
    let model = local_train(&start, &pooled, steps, learning_rate)?;
    let l = loss(&model, &pooled)?;
    Ok((model, l))
}

/// State digest recorded with the last accepted transaction.
fn last_digest(chain: &Chain) -> String {
    chain.log().last().map(|r| r.state_digest.clone()).unwrap_or_default()
}

fn abort(phase: impl Into<String>, message: impl std::fmt::Display) -> OrchestratorError {
    OrchestratorError::Abort {
        phase: phase.into(),
        message: message.to_string(),
    }
}

/// Per-subgroup secret material of one round, kept off chain.
struct SubgroupSecrets {
    threshold: usize,
    /// Dealer to holder to bundle.
    bundles: BTreeMap<AgentId, BTreeMap<AgentId, SeedShareBundle>>,
}

struct Runner<'a> {
    sc: &'a Scenario,
    layout: AgentLayout,
    adversary: AdversaryConfig,
    config: TaskConfig,
    streams: RngStreams,
    codec: FixedPointCodec,
    pop: Population,
    kind: ModelKind,
    dim: usize,
    metric: MetricKind,
    store: ContentStore,
    env: SecureEnvironment,
    key: AttestationKey,
    chain: Chain,
    task: Option<TaskId>,
    leak: Option<Samples>,
    incidents: Vec<Incident>,
    treasury: Vec<TreasurySnapshot>,
    rounds: Vec<RoundMetrics>,
    copycat: CopycatTally,
}

impl<'a> Runner<'a> {
    fn new(sc: &'a Scenario) -> Result<Self, OrchestratorError> {
        let layout = sc.layout();
        let adversary = sc.adversary_config()?;
        let streams = RngStreams::new(sc.seed);
        let pop = generate_synthetic_population(&sc.population, &layout.participant_ids(), &streams)
            .map_err(|e| OrchestratorError::ScenarioInvalid(e.to_string()))?;
        let mut store = ContentStore::new(sc.reachability());
        for a in [AgentLayout::OWNER, AgentLayout::AGGREGATOR]
            .into_iter()
            .chain(layout.participant_ids())
            .chain(layout.evaluator_ids())
        {
            store.register_agent(a);
        }
        for &i in &sc.network.non_resharing {
            store.set_resharing(layout.participant(i), false);
        }
        let key = AttestationKey::from_seed(streams.fork_seed("attestation/key", 0, 0));
        let mut env = SecureEnvironment::new(key);
        env.load_control(pop.control.clone());
        let leak = if adversary
            .participants
            .values()
            .any(|s| matches!(s, ParticipantStrategy::ControlLeak))
        {
            Some(env.leak_control().map_err(|e| abort("setup", e))?)
        } else {
            None
        };
        Ok(Runner {
            sc,
            layout,
            adversary,
            config: sc.task_config(),
            streams,
            codec: FixedPointCodec::default(),
            kind: sc.population.model,
            dim: sc.population.feature_dim + 1,
            metric: sc.metric(),
            pop,
            store,
            env,
            key,
            chain: Chain::new(),
            task: None,
            leak,
            incidents: Vec::new(),
            treasury: Vec::new(),
            rounds: Vec::new(),
            copycat: CopycatTally::default(),
        })
    }

    fn task(&self) -> TaskId {
        self.task.expect("task deployed")
    }

    fn phase_label(&self) -> String {
        self.task
            .and_then(|t| self.chain.task(t))
            .map_or_else(|| "setup".to_string(), |t| t.phase.to_string())
    }

    fn try_submit(&mut self, sender: AgentId, op: Op) -> Result<Receipt, LedgerError> {
        let receipt = self.chain.submit(sender, op)?;
        for event in &receipt.events {
            let notable = match event {
                ChainEvent::DisputeRaised { .. }
                | ChainEvent::DisputeEscalation { .. }
                | ChainEvent::EvaluatorFlagged { .. } => true,
                ChainEvent::Economics { entry } => matches!(
                    entry,
                    EconomicsEntry::Slashed { .. } | EconomicsEntry::SlashSkipped { .. } | EconomicsEntry::Deactivated { .. }
                ),
                _ => false,
            };
            if notable {
                self.incidents.push(Incident {
                    seq: receipt.seq,
                    event: event.clone(),
                });
            }
        }
        Ok(receipt)
    }

    fn submit(&mut self, sender: AgentId, op: Op) -> Result<Receipt, OrchestratorError> {
        let phase = self.phase_label();
        let name = op.name();
        self.try_submit(sender, op)
            .map_err(|e| abort(phase, format!("{name} from {sender} rejected: {e}")))
    }

    fn snapshot(&mut self, label: String) {
        let s = TreasurySnapshot::capture(label, &self.chain);
        self.treasury.push(s);
    }

    fn execute(&mut self) -> Result<(RunMetrics, ModelParams), OrchestratorError> {
        self.setup()?;
        let mut global = ModelParams::zeros(self.kind, self.dim);
        let mut previous = global.clone();
        let mut last = None;
        for r in 1..=self.sc.training.rounds {
            let out = self.training_round(r, &global)?;
            previous = std::mem::replace(&mut global, out.global.clone());
            let done = out.is_final;
            last = Some(out);
            if done {
                break;
            }
        }
        let last = last.expect("at least one round");
        self.evaluation(&last, &previous)?;
        let final_model = self.settle(&last)?;
        Ok((self.collect_metrics()?, final_model))
    }

    fn setup(&mut self) -> Result<(), OrchestratorError> {
        let owner = AgentLayout::OWNER;
        let econ = &self.sc.economics;
        let (pool, balance, stake, rate) = (self.config.reward_pool, econ.initial_balance, econ.stake_value, econ.tax_rate);
        self.submit(owner, Op::Mint { to: owner, amount: pool })?;
        for e in self.layout.evaluator_ids() {
            self.submit(e, Op::Mint { to: e, amount: balance })?;
        }
        self.chain.seal_block();
        for e in self.layout.evaluator_ids() {
            self.submit(e, Op::Stake { value: stake, tax_rate: rate })?;
        }
        let genesis = ModelParams::zeros(self.kind, self.dim);
        let blob = genesis.to_blob(&self.codec).map_err(|e| abort("setup", e))?;
        let genesis_cid = self.store.put(&blob, owner).map_err(|e| abort("setup", e))?;
        let control_digest = self.env.control_digest().ok_or_else(|| abort("setup", "no control set"))?;
        let receipt = self.submit(
            owner,
            Op::Deploy {
                config: self.config.clone(),
                genesis_cid,
                deposit: pool,
                control_digest,
                attestation_key: self.key,
            },
        )?;
        self.task = receipt.task;
        self.snapshot("deployed".into());
        self.chain.seal_block();
        Ok(())
    }

    fn training_round(&mut self, r: u32, global: &ModelParams) -> Result<RoundOutcome, OrchestratorError> {
        let task = self.task();
        let (owner, agg) = (AgentLayout::OWNER, AgentLayout::AGGREGATOR);
        self.submit(owner, Op::StartRound { task })?;
        self.submit(
            agg,
            Op::FormSubgroups {
                task,
                round: r,
                participants: self.layout.participant_ids(),
                seed: self.streams.fork_seed("subgroups", r.into(), 0),
            },
        )?;
        let groups = self.chain.task(task).and_then(|t| t.round(r)).expect("formed").subgroups.clone();
        let phase = format!("training_round({r})");

        let active: Vec<(usize, AgentId)> = self
            .layout
            .participant_ids()
            .into_iter()
            .enumerate()
            .filter(|(_, a)| !self.adversary.drops_out(r, *a))
            .collect();
        let dropped = self.layout.participants - active.len();
        let (epochs, lr) = (self.sc.training.local_epochs, self.sc.training.learning_rate);
        let honest: BTreeMap<AgentId, ModelParams> = active
            .par_iter()
            .map(|&(i, a)| local_train(global, &self.pop.datasets[i].samples, epochs, lr).map(|m| (a, m)))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| abort(phase.clone(), e))?
            .into_iter()
            .collect();
        let mut plain = BTreeMap::new();
        for &(i, a) in &active {
            let honest_update = &honest[&a];
            let update = match self.adversary.participant_strategy(a) {
                None => honest_update.clone(),
                Some(s) => {
                    let ctx = UpdateContext {
                        global,
                        data: &self.pop.datasets[i],
                        epochs,
                        learning_rate: lr,
                        clamp: self.codec.clamp,
                        peer_updates: &honest,
                        leaked_control: self.leak.as_ref(),
                    };
                    let mut rng = self.streams.fork("adversary/update", r.into(), a.0.into());
                    match malicious_update(&Strategy::Participant(s.clone()), honest_update, &ctx, &mut rng) {
                        Ok(m) => m,
                        // Nothing to copy while the colluder is offline.
                        Err(AdversaryError::MissingColluder(_)) => honest_update.clone(),
                        Err(e) => return Err(abort(phase.clone(), format!("{a}: {e}"))),
                    }
                }
            };
            plain.insert(a, update.quantized(&self.codec).map_err(|e| abort(phase.clone(), e))?);
        }

        // Pair seeds, Shamir shares and masked uploads, one subgroup at a time.
        let round64 = u64::from(r);
        let mut secrets = Vec::with_capacity(groups.len());
        let mut masked: BTreeMap<AgentId, MaskedUpdate> = BTreeMap::new();
        for (g, members) in groups.iter().enumerate() {
            let threshold = self.config.threshold_for(members.len());
            let book = SeedBook::trusted_setup(members, &mut self.streams.fork("masking/pair-seeds", round64, g as u64));
            let mut bundles = BTreeMap::new();
            for &dealer in members {
                let mut rng = self.streams.fork("masking/shares", round64, dealer.0.into());
                let dealt = share_pair_seeds(dealer, members, &book, threshold, &mut rng)
                    .map_err(|e| abort(phase.clone(), e))?;
                bundles.insert(dealer, dealt);
            }
            for &p in members {
                let Some(update) = plain.get(&p) else { continue };
                let masks = derive_pairwise_masks(p, members, round64, self.dim, &book)
                    .map_err(|e| abort(phase.clone(), e))?;
                let m = mask(p, round64, &update.weights, &masks, &self.codec).map_err(|e| abort(phase.clone(), e))?;
                let cid = self.store.put(&m.to_blob(), p).map_err(|e| abort(phase.clone(), e))?;
                self.submit(p, Op::RegisterUpdate { task, round: r, cid })?;
                masked.insert(p, m);
            }
            secrets.push(SubgroupSecrets { threshold, bundles });
        }
        self.submit(agg, Op::CloseRound { task, round: r })?;

        // Availability: each uploader reports which subgroup uploads it can load.
        let registry = self.chain.task(task).and_then(|t| t.round(r)).expect("round").registry.clone();
        for members in &groups {
            for &p in members.iter().filter(|p| registry.contains_key(p)) {
                let loaded: Vec<AgentId> = members
                    .iter()
                    .copied()
                    .filter(|q| registry.get(q).is_some_and(|cid| self.store.get(cid, p).is_ok()))
                    .collect();
                self.submit(p, Op::ReportAvailability { task, round: r, loaded })?;
            }
        }
        for g in 0..groups.len() {
            self.submit(agg, Op::CheckAvailability { task, round: r, subgroup: g })?;
        }
        let admitted: BTreeMap<usize, BTreeSet<AgentId>> =
            self.chain.task(task).and_then(|t| t.round(r)).expect("round").admitted.clone();

        // Secure aggregation per subgroup, then the master aggregate.
        let phase = format!("aggregating({r})");
        let mut results = Vec::with_capacity(groups.len());
        let mut sums = Vec::new();
        let mut aborted = 0;
        for (g, members) in groups.iter().enumerate() {
            let ok = &admitted[&g];
            if ok.is_empty() {
                aborted += 1;
                results.push(SubgroupResult { index: g, sum_cid: None, count: 0 });
                continue;
            }
            let mut inputs = Vec::with_capacity(ok.len());
            for &p in ok {
                let bytes = self.store.get(&registry[&p], agg).map_err(|e| abort(phase.clone(), e))?;
                let vector = wire::decode_blob(bytes).map_err(|e| abort(phase.clone(), e))?;
                inputs.push(MaskedUpdate { participant: p, round: round64, vector });
            }
            let dropouts: Vec<AgentId> = members.iter().copied().filter(|m| !ok.contains(m)).collect();
            let s = &secrets[g];
            let revealed: BTreeMap<AgentId, Vec<SeedShareBundle>> = dropouts
                .iter()
                .map(|d| (*d, ok.iter().map(|h| s.bundles[d][h].clone()).collect()))
                .collect();
            match unmask_aggregate(&inputs, &dropouts, &revealed, s.threshold, &self.codec) {
                Ok(sum) => {
                    let cid = self
                        .store
                        .put(&wire::encode_blob(&sum.field), agg)
                        .map_err(|e| abort(phase.clone(), e))?;
                    results.push(SubgroupResult { index: g, sum_cid: Some(cid), count: sum.count });
                    sums.push(SubgroupSum {
                        sum: ModelParams { weights: sum.decoded, kind: self.kind },
                        count: sum.count,
                    });
                }
                Err(SecureAggError::InsufficientShares { .. }) => {
                    aborted += 1;
                    results.push(SubgroupResult { index: g, sum_cid: None, count: 0 });
                }
                Err(e) => return Err(abort(phase, e)),
            }
        }
        let new_global = if sums.is_empty() {
            global.clone()
        } else {
            master_aggregate(&sums)
                .and_then(|m| m.quantized(&self.codec))
                .map_err(|e| abort(phase.clone(), e))?
        };
        let blob = new_global.to_blob(&self.codec).map_err(|e| abort(phase.clone(), e))?;
        let is_final = self.chain.task(task).expect("task").is_final(r);
        let pointer = if is_final {
            GlobalPointer::Sealed(seal_cid(&ContentId::of(&blob)))
        } else {
            GlobalPointer::Open(self.store.put(&blob, agg).map_err(|e| abort(phase.clone(), e))?)
        };
        self.submit(agg, Op::PublishAggregate { task, round: r, subgroups: results.clone(), global: pointer.clone() })?;

        let disputes = match pointer {
            GlobalPointer::Open(gcid) => self.audit_global(r, &groups, &admitted, &registry, &results, &gcid)?,
            GlobalPointer::Sealed(_) => 0,
        };

        let all: Vec<&Samples> = self.pop.datasets.iter().map(|d| &d.samples).collect();
        let train_loss = pooled_loss(&new_global, all).map_err(|e| abort(phase.clone(), e))?;
        let control_metric = self.env.evaluate(&new_global, self.metric).map_err(|e| abort(phase.clone(), e))?;
        let n_admitted: usize = admitted.values().map(BTreeSet::len).sum();
        self.rounds.push(RoundMetrics {
            round: r,
            train_loss,
            control_metric,
            registered: registry.len(),
            admitted: n_admitted,
            excluded: registry.len() - n_admitted,
            dropped,
            aborted_subgroups: aborted,
            disputes,
        });

        if !is_final && self.sc.final_signal_after() == Some(r) {
            self.submit(owner, Op::SignalFinalRound { task })?;
        }
        self.submit(owner, Op::ChargeTax { epoch: r.into() })?;
        self.snapshot(format!("round {r}"));
        self.chain.seal_block();

        let admitted_all: BTreeSet<AgentId> = admitted.values().flatten().copied().collect();
        plain.retain(|a, _| admitted_all.contains(a));
        Ok(RoundOutcome {
            round: r,
            global: new_global,
            blob,
            is_final,
            final_models: plain,
        })
    }

    /// Honest admitted participants recompute the published global model and
    /// dispute on mismatch. Returns the number of disputes raised.
    #[allow(clippy::too_many_arguments)]
    fn audit_global(
        &mut self,
        r: u32,
        groups: &[Vec<AgentId>],
        admitted: &BTreeMap<usize, BTreeSet<AgentId>>,
        registry: &BTreeMap<AgentId, ContentId>,
        results: &[SubgroupResult],
        global: &ContentId,
    ) -> Result<usize, OrchestratorError> {
        let task = self.task();
        let mut disputes = 0;
        for (g, members) in groups.iter().enumerate() {
            let complete = admitted[&g].len() == members.len();
            for &p in &admitted[&g] {
                if self.adversary.participant_strategy(p).is_some() {
                    continue;
                }
                let sums_except = |skip: Option<usize>| -> Vec<(ContentId, usize)> {
                    results
                        .iter()
                        .filter(|s| Some(s.index) != skip)
                        .filter_map(|s| s.sum_cid.map(|c| (c, s.count)))
                        .collect()
                };
                let full = if complete {
                    let own: Vec<ContentId> = members.iter().map(|m| registry[m]).collect();
                    verify_subgroup_mean(&self.store, p, &own, &sums_except(Some(g)), global, &self.codec).ok()
                } else {
                    None
                };
                let verdict = full
                    .or_else(|| verify_subgroup_mean(&self.store, p, &[], &sums_except(None), global, &self.codec).ok());
                if verdict == Some(false) {
                    self.submit(p, Op::Dispute { task, round: r, subgroup: g })?;
                    disputes += 1;
                }
            }
        }
        Ok(disputes)
    }

    fn salt(&self, evaluator: AgentId, participant: AgentId) -> String {
        hex::encode(&self.streams.derive("evaluation/salt", evaluator.0.into(), participant.0.into())[..16])
    }

    fn evaluation(&mut self, last: &RoundOutcome, previous: &ModelParams) -> Result<(), OrchestratorError> {
        let task = self.task();
        let owner = AgentLayout::OWNER;
        let phase = "evaluating";
        let mut model_cid = BTreeMap::new();
        for (p, m) in &last.final_models {
            model_cid.insert(*p, self.env.deposit_model(*p, m.clone()));
        }
        if self.config.scoring == ScoringBackend::Shapley {
            self.env.set_baseline(previous.clone());
        }
        let eligible: Vec<AgentId> = self
            .layout
            .evaluator_ids()
            .into_iter()
            .filter(|e| self.chain.economics().is_eligible(*e))
            .collect();
        self.submit(
            owner,
            Op::AssignEvaluators {
                task,
                evaluators: eligible,
                seed: self.streams.fork_seed("evaluation/assignment", last.round.into(), 0),
            },
        )?;
        let groups = self
            .chain
            .task(task)
            .and_then(|t| t.evaluation.as_ref())
            .expect("evaluating")
            .groups
            .clone();

        let jobs: Vec<(usize, AgentId)> = groups
            .iter()
            .flat_map(|g| g.evaluators.iter().map(move |e| (g.index, *e)))
            .collect();
        let env = &self.env;
        let metric = self.metric;
        let scoring = self.config.scoring;
        let genuine: Vec<Vec<Attestation>> = jobs
            .par_iter()
            .map(|&(g, e)| {
                let targets = &groups[g].targets;
                match scoring {
                    ScoringBackend::Median => targets
                        .iter()
                        .map(|p| env.secure_benchmark(e, *p, &model_cid[p], metric, targets))
                        .collect(),
                    ScoringBackend::Shapley => {
                        let cids: Vec<(AgentId, ContentId)> = targets.iter().map(|p| (*p, model_cid[p])).collect();
                        env.shapley_benchmark(e, &cids, metric, targets)
                    }
                }
            })
            .collect::<Result<_, _>>()
            .map_err(|e| abort(phase, e))?;

        let mut intents: BTreeMap<AgentId, Vec<ReportIntent>> = BTreeMap::new();
        for (&(_, e), atts) in jobs.iter().zip(genuine) {
            let plan = match self.adversary.evaluator_strategy(e) {
                None => atts
                    .into_iter()
                    .map(|a| ReportIntent::Reveal {
                        participant: a.participant,
                        score: a.claimed_score,
                        attestation: a,
                    })
                    .collect(),
                Some(s) => {
                    let mut rng = self.streams.fork("adversary/report", last.round.into(), e.0.into());
                    malicious_report(&Strategy::Evaluator(s.clone()), &atts, &mut rng)
                        .map_err(|err| abort(phase, format!("{e}: {err}")))?
                }
            };
            intents.insert(e, plan);
        }

        for group in &groups {
            let g = group.index;
            for e in &group.evaluators {
                for intent in &intents[e] {
                    if let ReportIntent::Reveal { participant, score, .. } = intent {
                        let salt = self.salt(*e, *participant);
                        let commitment = score_commitment(*e, *participant, *score, &salt);
                        self.submit(*e, Op::CommitScore { task, participant: *participant, commitment })?;
                    }
                }
            }
            // Copycats copy the first peer commitment they can read on chain.
            let mut copies: Vec<(AgentId, AgentId, AgentId)> = Vec::new();
            for e in &group.evaluators {
                for intent in &intents[e] {
                    let ReportIntent::CopyPeer { participant } = intent else { continue };
                    let commits = &self.chain.task(task).and_then(|t| t.evaluation.as_ref()).expect("evaluating").groups[g].commits;
                    let source = group
                        .evaluators
                        .iter()
                        .filter(|peer| *peer != e)
                        .find_map(|peer| commits.get(peer).and_then(|m| m.get(participant)).map(|c| (*peer, c.clone())));
                    if let Some((peer, commitment)) = source {
                        if self
                            .try_submit(*e, Op::CommitScore { task, participant: *participant, commitment })
                            .is_ok()
                        {
                            copies.push((*e, peer, *participant));
                        }
                    }
                }
            }
            if !self.eval_group(g).commits_closed {
                self.submit(owner, Op::CloseCommits { task, subgroup: g })?;
            }
            for e in &group.evaluators {
                for intent in &intents[e] {
                    if let ReportIntent::Reveal { participant, score, attestation } = intent {
                        let salt = self.salt(*e, *participant);
                        self.submit(
                            *e,
                            Op::RevealScore {
                                task,
                                participant: *participant,
                                score: *score,
                                salt,
                                attestation: Some(attestation.clone()),
                            },
                        )?;
                    }
                }
            }
            for (e, peer, participant) in copies {
                let Some(opened) = self.eval_group(g).reveals.get(&peer).and_then(|m| m.get(&participant)).cloned() else {
                    continue;
                };
                self.copycat.attempts += 1;
                let salt = self.salt(peer, participant);
                let attempt = Op::RevealScore {
                    task,
                    participant,
                    score: opened.score,
                    salt,
                    attestation: Some(opened.attestation),
                };
                if self.try_submit(e, attempt).is_ok() {
                    self.copycat.accepted += 1;
                }
            }
            if !self.eval_group(g).reveals_closed {
                self.submit(owner, Op::CloseReveals { task, subgroup: g })?;
            }
            self.submit(owner, Op::VerifyAttestations { task, subgroup: g })?;
        }
        self.submit(owner, Op::FinalizeScores { task })?;
        for e in self.layout.evaluator_ids() {
            let flagged = self.chain.flags(e).iter().any(|f| f.task == task);
            if flagged && !self.chain.globals().slashed.contains(&(task, e)) {
                self.submit(owner, Op::Slash { task, evaluator: e })?;
            }
        }
        self.chain.seal_block();
        Ok(())
    }

    fn eval_group(&self, g: usize) -> &crate::ledger::EvalGroup {
        &self
            .chain
            .task(self.task())
            .and_then(|t| t.evaluation.as_ref())
            .expect("evaluating")
            .groups[g]
    }

    fn settle(&mut self, last: &RoundOutcome) -> Result<ModelParams, OrchestratorError> {
        let task = self.task();
        let (owner, agg) = (AgentLayout::OWNER, AgentLayout::AGGREGATOR);
        let cid = self.store.put(&last.blob, agg).map_err(|e| abort("evaluating", e))?;
        self.submit(agg, Op::Settle { task, final_global: cid })?;
        let revealed = self
            .chain
            .task(task)
            .expect("task")
            .final_model(owner)
            .map_err(|e| abort("settled", e))?;
        let bytes = self.store.get(&revealed, owner).map_err(|e| abort("settled", e))?;
        let model = ModelParams::from_blob(bytes, self.kind, &self.codec).map_err(|e| abort("settled", e))?;
        self.submit(owner, Op::ChargeTax { epoch: u64::from(last.round) + 1 })?;
        self.snapshot("settled".into());
        self.chain.seal_block();
        Ok(model)
    }

    fn collect_metrics(&mut self) -> Result<RunMetrics, OrchestratorError> {
        let task = self.task();
        let t = self.chain.task(task).expect("task");
        let settlement = t.settlement.clone().ok_or_else(|| abort("settled", "no settlement recorded"))?;
        let board = t.scores().ok_or_else(|| abort("settled", "no scoreboard"))?;
        let (participant_scores, evaluator_scores) = (board.participant_rows(), board.evaluator_rows());

        let layout = self.layout;
        let mut payouts = Vec::new();
        let mut row = |agent: AgentId, amount: u64, strategy: &str| {
            let (role, index) = layout.role_of(agent).expect("known agent");
            payouts.push(PayoutRow {
                agent: Some(agent),
                role: metrics::role_name(role).to_string(),
                index: Some(index),
                strategy: strategy.to_string(),
                amount,
            });
        };
        for (&p, &amount) in &settlement.participants {
            row(p, amount, self.adversary.participant_strategy(p).map_or("honest", |s| s.name()));
        }
        for (&e, &amount) in &settlement.evaluators {
            row(e, amount, self.adversary.evaluator_strategy(e).map_or("honest", |s| s.name()));
        }
        payouts.push(PayoutRow {
            agent: None,
            role: "public_goods".into(),
            index: None,
            strategy: String::new(),
            amount: settlement.public_goods,
        });

        let all: Vec<&Samples> = self.pop.datasets.iter().map(|d| &d.samples).collect();
        let steps = self.rounds.len() * self.sc.training.local_epochs;
        let (_, centralized_loss) = centralized_baseline(&all, self.kind, steps, self.sc.training.learning_rate)
            .map_err(|e| abort("settled", e))?;
        let last = self.rounds.last().expect("rounds ran");
        let slashed = self
            .chain
            .globals()
            .slashed
            .iter()
            .filter(|(t, _)| *t == task)
            .map(|(_, e)| *e)
            .collect();
        Ok(RunMetrics {
            scenario: self.sc.name.clone(),
            seed: self.sc.seed,
            participants: self.layout.participants,
            evaluators: self.layout.evaluators,
            centralized_loss,
            final_train_loss: last.train_loss,
            final_control_metric: last.control_metric,
            rounds: self.rounds.clone(),
            settlement,
            payouts,
            participant_scores,
            evaluator_scores,
            treasury: self.treasury.clone(),
            incidents: self.incidents.clone(),
            slashed,
            copycat: self.copycat.clone(),
            phase_digests: phase_boundaries(self.chain.log()),
            final_state_digest: last_digest(&self.chain),
            transactions: self.chain.log().len(),
        })
    }
}

struct RoundOutcome {
    round: u32,
    global: ModelParams,
    blob: Vec<u8>,
    is_final: bool,
    /// Plaintext updates of the participants admitted this round.
    final_models: BTreeMap<AgentId, ModelParams>,
}
