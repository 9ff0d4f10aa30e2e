//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::Zero;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use din_core::auditing::{median, shapley_exact, Report, ScoreBoard, ScoringBackend};
use din_core::content_store::ContentId;
use din_core::fl::{fedavg, master_aggregate, ModelKind, ModelParams, SubgroupSum};
use din_core::ledger::{Chain, LedgerError, LogRecord, Op, RoundState};
use din_core::orchestrator::scenario::{DropoutEntry, StrategyEntry};
use din_core::orchestrator::{compare, phase_boundaries, run, RunMetrics, RunOutput, Scenario};
use din_core::secure_agg::{
    derive_pairwise_masks, mask, share_pair_seeds, unmask_aggregate, FixedPointCodec, SecureAggError, SeedBook,
    SeedShareBundle, MODULUS,
};
use din_core::{AgentId, Score};

type Outcome = Result<String, String>;
type Check<'a> = Box<dyn Fn() -> Outcome + 'a>;

fn scenarios_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn bundled(name: &str) -> Scenario {
    Scenario::load(&scenarios_dir().join(format!("{name}.toml"))).unwrap_or_else(|e| panic!("{name}: {e}"))
}

const BUNDLED: [&str; 9] = [
    "honest_tiny",
    "honest_iid_small",
    "adversarial_20pct",
    "adversarial_evaluators",
    "dropouts_and_firewalls",
    "control_leak",
    "out_of_model_majority",
    "ratio_1to10",
    "ratio_1to1",
];

/// First run of every bundled scenario, shared by several criteria.
struct Runs {
    first: BTreeMap<&'static str, Result<RunOutput, String>>,
}

impl Runs {
    fn get(&self, name: &str) -> Result<&RunOutput, String> {
        match self.first.get(name) {
            Some(Ok(o)) => Ok(o),
            Some(Err(e)) => Err(format!("{name} failed: {e}")),
            None => Err(format!("{name} not run")),
        }
    }
}

fn ids(n: usize) -> Vec<AgentId> {
    (1..=n as u32).map(AgentId).collect()
}

/// `sum(round(x * 2^16)) mod p`, computed without the codec.
fn field_sum_oracle(values: &[f64]) -> u64 {
    let s: i128 = values.iter().map(|x| (x * 65536.0).round() as i128).sum();
    s.rem_euclid(MODULUS as i128) as u64
}

fn masked_round(
    members: &[AgentId],
    updates: &[Vec<f64>],
    seeds: &SeedBook,
    round: u64,
    codec: &FixedPointCodec,
) -> Vec<din_core::secure_agg::MaskedUpdate> {
    members
        .iter()
        .zip(updates)
        .map(|(&a, u)| {
            let masks = derive_pairwise_masks(a, members, round, u.len(), seeds).unwrap();
            mask(a, round, u, &masks, codec).unwrap()
        })
        .collect()
}

fn c1_secure_aggregation() -> Outcome {
    let started = Instant::now();
    let codec = FixedPointCodec::default();
    let mut rng = ChaCha20Rng::seed_from_u64(0xA11CE);
    for trial in 0..1000 {
        let n = rng.random_range(3..=50);
        let dim = rng.random_range(1..=64);
        let members = ids(n);
        let seeds = SeedBook::trusted_setup(&members, &mut rng);
        let updates: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..dim).map(|_| rng.random_range(-10.0..10.0)).collect())
            .collect();
        let masked = masked_round(&members, &updates, &seeds, trial, &codec);
        let sum = unmask_aggregate(&masked, &[], &BTreeMap::new(), 2, &codec).map_err(|e| e.to_string())?;
        for c in 0..dim {
            let column: Vec<f64> = updates.iter().map(|u| u[c]).collect();
            if sum.field[c].value() != field_sum_oracle(&column) {
                return Err(format!("trial {trial}: field sum differs at coordinate {c}"));
            }
            let plain: f64 = column.iter().sum();
            if (sum.decoded[c] - plain).abs() > n as f64 / codec.scale() {
                return Err(format!("trial {trial}: decoded {} vs plaintext {plain}", sum.decoded[c]));
            }
        }
    }
    let took = started.elapsed();
    if took > Duration::from_secs(30) {
        return Err(format!("1000 trials took {took:.1?}"));
    }
    Ok(format!("1000 trials exact, {took:.1?}"))
}

fn c2_dropout_recovery() -> Outcome {
    let codec = FixedPointCodec::default();
    let mut rng = ChaCha20Rng::seed_from_u64(0xD209);
    let (mut recovered, mut refused) = (0, 0);
    for trial in 0..1000u64 {
        let n = rng.random_range(3..=16);
        let t = rng.random_range(2..=n);
        let dim = rng.random_range(1..=8);
        let members = ids(n);
        let seeds = SeedBook::trusted_setup(&members, &mut rng);
        let bundles: BTreeMap<AgentId, BTreeMap<AgentId, SeedShareBundle>> = members
            .iter()
            .map(|&m| (m, share_pair_seeds(m, &members, &seeds, t, &mut rng).unwrap()))
            .collect();
        let updates: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..dim).map(|_| rng.random_range(-5.0..5.0)).collect())
            .collect();
        let d = rng.random_range(1..n);
        let mut order = members.clone();
        order.shuffle(&mut rng);
        let dropped: BTreeSet<AgentId> = order[..d].iter().copied().collect();
        let (surv_ids, surv_updates): (Vec<AgentId>, Vec<Vec<f64>>) = members
            .iter()
            .zip(&updates)
            .filter(|(a, _)| !dropped.contains(a))
            .map(|(a, u)| (*a, u.clone()))
            .unzip();
        // Survivors masked against the full roster before the others vanished.
        let masked: Vec<_> = masked_round(&members, &updates, &seeds, trial, &codec)
            .into_iter()
            .filter(|m| !dropped.contains(&m.participant))
            .collect();
        let revealed: BTreeMap<AgentId, Vec<SeedShareBundle>> = dropped
            .iter()
            .map(|dr| (*dr, surv_ids.iter().map(|h| bundles[dr][h].clone()).collect()))
            .collect();
        let drops: Vec<AgentId> = dropped.iter().copied().collect();
        let result = unmask_aggregate(&masked, &drops, &revealed, t, &codec);
        if surv_ids.len() >= t {
            let sum = result.map_err(|e| format!("trial {trial}: {e}"))?;
            for c in 0..dim {
                let column: Vec<f64> = surv_updates.iter().map(|u| u[c]).collect();
                if sum.field[c].value() != field_sum_oracle(&column) {
                    return Err(format!("trial {trial}: wrong recovered sum"));
                }
            }
            recovered += 1;
        } else {
            match result {
                Err(SecureAggError::InsufficientShares { .. }) => refused += 1,
                other => return Err(format!("trial {trial}: {} survivors < t={t} gave {other:?}", surv_ids.len())),
            }
        }
    }
    Ok(format!("{recovered} recovered exactly, {refused} refused with InsufficientShares"))
}

fn c3_median_robustness() -> Outcome {
    let mut rng = ChaCha20Rng::seed_from_u64(0x3ED1);
    for trial in 0..10_000 {
        let q = rng.random_range(1..=25usize);
        let m = rng.random_range(0..=(q - 1) / 2);
        let honest: Vec<Score> = (0..q - m).map(|_| Score::from_ppm(rng.random_range(0..=1_000_000))).collect();
        let mut all = honest.clone();
        for _ in 0..m {
            all.push(match rng.random_range(0..3) {
                0 => Score::ONE,
                1 => Score::ZERO,
                _ => Score::from_ppm(rng.random_range(0..=1_000_000)),
            });
        }
        all.shuffle(&mut rng);
        let med = median(&all).ok_or("empty")?;
        let lo = honest.iter().min().unwrap().to_rational();
        let hi = honest.iter().max().unwrap().to_rational();
        if med < lo || med > hi {
            return Err(format!("trial {trial}: median outside honest range (Q={q}, M={m})"));
        }
    }
    Ok("10000 trials, 0 violations".into())
}

fn rat(n: i64, d: i64) -> BigRational {
    BigRational::new(BigInt::from(n), BigInt::from(d))
}

fn c4_threshold_rules() -> Outcome {
    let participant = AgentId(100);
    let grid = [0u32, 250_000, 499_999, 500_000, 500_001, 750_000, 1_000_000];
    let mut cases = 0usize;
    for n in 3..=5usize {
        let evaluators = ids(n);
        let mut tuple = vec![0usize; n];
        loop {
            let ppm: Vec<u32> = tuple.iter().map(|&i| grid[i]).collect();
            let reports: Vec<Report> = evaluators
                .iter()
                .zip(&ppm)
                .map(|(&e, &s)| Report { evaluator: e, participant, score: Score::from_ppm(s) })
                .collect();
            let board = ScoreBoard::compute(&[participant], &evaluators, &reports);
            // Integer oracle in half-ppm units.
            let mut sorted = ppm.clone();
            sorted.sort_unstable();
            let med2 = if n % 2 == 1 {
                2 * sorted[n / 2] as i64
            } else {
                sorted[n / 2 - 1] as i64 + sorted[n / 2] as i64
            };
            for (e, &s) in evaluators.iter().zip(&ppm) {
                let dev2 = (2 * s as i64 - med2).abs();
                let want = if dev2 > 1_000_000 { BigRational::zero() } else { rat(2_000_000 - dev2, 2_000_000) };
                let got = &board.evaluators[e].credits[0].1 .0;
                if *got != want {
                    return Err(format!("scores {ppm:?}: credit {got} for {e}, expected {want}"));
                }
            }
            let far = ppm
                .iter()
                .copied()
                .max_by(|a, b| {
                    let (da, db) = ((2 * *a as i64 - med2).abs(), (2 * *b as i64 - med2).abs());
                    da.cmp(&db).then(b.cmp(a))
                })
                .unwrap();
            if board.participants[&participant].overall.0 != rat(far as i64, 1_000_000) {
                return Err(format!("scores {ppm:?}: overall score is not the furthest report"));
            }
            cases += 1;
            let mut i = 0;
            while i < n {
                tuple[i] += 1;
                if tuple[i] < grid.len() {
                    break;
                }
                tuple[i] = 0;
                i += 1;
            }
            if i == n {
                break;
            }
        }
        let silent = ScoreBoard::compute(&[participant], &evaluators, &[]);
        let rec = &silent.participants[&participant];
        if !rec.a_priori || rec.overall.0 != rat(1, 2) {
            return Err("missing reports did not yield the a priori 0.5".into());
        }
    }

    // Availability: every loading relation at N = 3 and 4, and at N = 5 with
    // every member loading its own model.
    let mut configs = 0usize;
    for n in 3..=5usize {
        let members = ids(n);
        let free: Vec<(usize, usize)> = (0..n)
            .flat_map(|a| (0..n).map(move |b| (a, b)))
            .filter(|&(a, b)| n < 5 || a != b)
            .collect();
        for bits in 0u64..(1u64 << free.len()) {
            let mut loaded = vec![vec![n == 5; n]; n];
            for (k, &(a, b)) in free.iter().enumerate() {
                loaded[a][b] = bits >> k & 1 == 1;
            }
            let mut state = RoundState {
                subgroups: vec![members.clone()],
                ..RoundState::default()
            };
            for (i, m) in members.iter().enumerate() {
                state.registry.insert(*m, ContentId::of(&[i as u8]));
                let set: BTreeSet<AgentId> = (0..n).filter(|&j| loaded[i][j]).map(|j| members[j]).collect();
                state.availability.insert(*m, set);
            }
            let expected: BTreeSet<AgentId> = (0..n)
                .filter(|&i| {
                    let loads = (0..n).filter(|&j| loaded[i][j]).count();
                    let loaded_by = (0..n).filter(|&j| j != i && loaded[j][i]).count();
                    2 * loads > n && 2 * loaded_by > n
                })
                .map(|i| members[i])
                .collect();
            if state.compute_admitted(0) != expected {
                return Err(format!("availability N={n}, relation {bits:b}"));
            }
            configs += 1;
        }
    }
    Ok(format!("{cases} score tuples, {configs} availability relations"))
}

const FUZZ_BASE: &str = r#"
name = "fuzz"
seed = 0

[population]
participants = 12
samples_per_participant = 20
feature_dim = 3
model = "linear_regression"

[training]
rounds = 3
local_epochs = 2
learning_rate = 0.1

[task]
k_min_subgroup = 4
evaluator_ratio = "1/4"
reward_pool = 1000

[economics]
evaluators = 3
initial_balance = 1000
stake_value = 50
tax_rate = "1/50"
"#;

fn fuzz_scenario(i: u64) -> Scenario {
    let mut rng = ChaCha20Rng::seed_from_u64(0xC0_5E47 + i);
    let mut sc = Scenario::from_toml_str(FUZZ_BASE).unwrap();
    sc.name = format!("fuzz_{i}");
    sc.seed = rng.random();
    let n = rng.random_range(8..=16usize);
    sc.population.participants = n;
    if rng.random_bool(0.5) {
        sc.population.model = ModelKind::LogisticRegression;
    }
    sc.training.rounds = rng.random_range(2..=4);
    sc.task.reward_pool = rng.random_range(1_000..=1_000_000);
    sc.task.evaluator_ratio = if rng.random_bool(0.5) { "1/4" } else { "1/2" }.parse().unwrap();
    sc.task.acceptable_bound = [0.0, 0.3, 0.6, 0.9][rng.random_range(0..4)];
    if rng.random_bool(0.3) {
        sc.task.scoring = ScoringBackend::Shapley;
    }
    let needed = sc.evaluators_needed();
    let evaluators = needed + rng.random_range(0..=2);
    sc.economics.evaluators = evaluators;

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let bad = rng.random_range(0..=(n - 1) / 2);
    for &a in &order[..bad] {
        let strategy = ["random_weights", "inverted_labels", "colluding_share", "control_leak"][rng.random_range(0..4)];
        sc.adversary.participants.push(StrategyEntry {
            agents: vec![a],
            strategy: strategy.into(),
            with: (strategy == "colluding_share").then_some(order[n - 1]),
            targets: None,
        });
    }
    let mut e_order: Vec<usize> = (0..evaluators).collect();
    e_order.shuffle(&mut rng);
    let bad_e = rng.random_range(0..=(evaluators - 1) / 2);
    for &e in &e_order[..bad_e] {
        let strategy = ["extreme_scores", "copycat", "false_attestation"][rng.random_range(0..3)];
        sc.adversary.evaluators.push(StrategyEntry {
            agents: vec![e],
            strategy: strategy.into(),
            with: None,
            targets: (strategy == "extreme_scores").then(|| order[..2].to_vec()),
        });
    }
    for round in 1..=sc.training.rounds {
        if rng.random_bool(0.4) {
            sc.adversary.dropouts.push(DropoutEntry { round, agents: vec![rng.random_range(0..n)] });
        }
    }
    sc
}

fn check_settlement(m: &RunMetrics, pool: u64) -> Result<(), String> {
    let p: u64 = m.settlement.participants.values().sum();
    let e: u64 = m.settlement.evaluators.values().sum();
    if p + e + m.settlement.public_goods != pool {
        return Err(format!("{p} + {e} + {} != {pool}", m.settlement.public_goods));
    }
    if m.payout_total() != pool {
        return Err(format!("payout rows sum to {} of {pool}", m.payout_total()));
    }
    let (np, ne) = (m.settlement.participants.len() as u64, m.settlement.evaluators.len() as u64);
    let (pool, p, e) = (pool as u128, p as u128, e as u128);
    if p * 100 > pool * 97 || (p > 0 && (p + np as u128) * 100 <= pool * 97) {
        return Err(format!("participant side {p} of {pool}"));
    }
    if e * 100 > pool * 3 || (e > 0 && (e + ne as u128) * 100 <= pool * 3) {
        return Err(format!("evaluator side {e} of {pool}"));
    }
    if !m.treasury.iter().all(|t| t.conserved()) {
        return Err("treasury snapshot out of balance".into());
    }
    Ok(())
}

fn c5_reward_conservation() -> Outcome {
    let (mut shapley, mut eliminated) = (0, 0);
    for i in 0..100 {
        let sc = fuzz_scenario(i);
        let out = run(&sc).map_err(|e| format!("{}: {e}", sc.name))?;
        check_settlement(&out.metrics, sc.task.reward_pool).map_err(|e| format!("{}: {e}", sc.name))?;
        shapley += (sc.task.scoring == ScoringBackend::Shapley) as usize;
        eliminated += out.chain.tasks().next().and_then(|t| t.scores()).map_or(0, |b| {
            b.participants.values().filter(|r| r.eliminated).count()
        });
    }
    Ok(format!("100 scenarios balanced ({shapley} Shapley, {eliminated} eliminations)"))
}

fn c6_hierarchy() -> Outcome {
    let codec = FixedPointCodec::default();
    let mut rng = ChaCha20Rng::seed_from_u64(0x41E2);
    let mut checks = 0;
    for n in 1..=30usize {
        for _ in 0..5 {
            let dim = rng.random_range(1..=6);
            let members = ids(n);
            let updates: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..dim).map(|_| codec.quantize(rng.random_range(-3.0..3.0)).unwrap()).collect())
                .collect();
            let admitted: Vec<bool> = (0..n).map(|_| rng.random_bool(0.85)).collect();
            if !admitted.iter().any(|a| *a) {
                continue;
            }
            let groups = rng.random_range(1..=n);
            let mut assignment: Vec<usize> = (0..n).map(|i| i % groups).collect();
            assignment.shuffle(&mut rng);

            let mut sums = Vec::new();
            for g in 0..groups {
                let in_group: Vec<usize> = (0..n).filter(|&i| assignment[i] == g && admitted[i]).collect();
                if in_group.is_empty() {
                    continue;
                }
                let ms: Vec<AgentId> = in_group.iter().map(|&i| members[i]).collect();
                let us: Vec<Vec<f64>> = in_group.iter().map(|&i| updates[i].clone()).collect();
                let seeds = SeedBook::trusted_setup(&ms, &mut rng);
                let masked = masked_round(&ms, &us, &seeds, 1, &codec);
                let sum = unmask_aggregate(&masked, &[], &BTreeMap::new(), 1, &codec).map_err(|e| e.to_string())?;
                sums.push(SubgroupSum {
                    sum: ModelParams { weights: sum.decoded, kind: ModelKind::LinearRegression },
                    count: sum.count,
                });
            }
            let hierarchical = master_aggregate(&sums).map_err(|e| e.to_string())?;
            let flat: Vec<ModelParams> = (0..n)
                .filter(|&i| admitted[i])
                .map(|i| ModelParams { weights: updates[i].clone(), kind: ModelKind::LinearRegression })
                .collect();
            let reference = fedavg(&flat, &vec![1.0; flat.len()]).map_err(|e| e.to_string())?;
            if hierarchical != reference {
                return Err(format!("N={n}: {:?} != {:?}", hierarchical.weights, reference.weights));
            }
            checks += 1;
        }
    }
    Ok(format!("{checks} partitions for N = 1..30, bit-identical"))
}

fn c7_effectiveness(runs: &Runs) -> Outcome {
    let out = runs.get("honest_iid_small")?;
    let m = &out.metrics;
    let sc = bundled("honest_iid_small");
    let sizes = sc.subgroup_sizes();
    if sc.population.participants != 100 || sizes.len() != 10 || sc.training.rounds != 20 {
        return Err(format!("scenario shape N={} groups={} rounds={}", sc.population.participants, sizes.len(), sc.training.rounds));
    }
    let ratio = m.final_train_loss / m.centralized_loss;
    if ratio > 1.05 {
        return Err(format!("MSE {:.6} vs centralized {:.6}", m.final_train_loss, m.centralized_loss));
    }
    if out.wall_clock > Duration::from_secs(60) {
        return Err(format!("run took {:.1?}", out.wall_clock));
    }
    Ok(format!(
        "MSE {:.6} vs centralized {:.6} (ratio {ratio:.4}), {:.1?}",
        m.final_train_loss, m.centralized_loss, out.wall_clock
    ))
}

fn adversarial_evaluator_runs() -> Result<Vec<(Scenario, RunMetrics)>, String> {
    let base = bundled("adversarial_evaluators");
    (0..5)
        .map(|k| {
            let mut sc = base.clone();
            sc.seed = base.seed + k;
            let m = run(&sc).map_err(|e| format!("seed {}: {e}", sc.seed))?.metrics;
            Ok((sc, m))
        })
        .collect()
}

fn c8_adversary_economics(runs: &Runs, eval_runs: &Result<Vec<(Scenario, RunMetrics)>, String>) -> Outcome {
    let m = &runs.get("adversarial_20pct")?.metrics;
    let rows: Vec<_> = m.participant_payouts().collect();
    let honest: Vec<u64> = rows.iter().filter(|r| r.strategy == "honest").map(|r| r.amount).collect();
    let mean = honest.iter().sum::<u64>() as f64 / honest.len().max(1) as f64;
    let malicious: Vec<_> = rows.iter().filter(|r| r.strategy != "honest").collect();
    if malicious.is_empty() || honest.is_empty() {
        return Err("scenario lacks honest or malicious participants".into());
    }
    if let Some(r) = malicious.iter().find(|r| r.amount as f64 >= mean) {
        return Err(format!("{} ({}) earned {} >= honest mean {mean:.1}", r.index.unwrap_or(0), r.strategy, r.amount));
    }
    let best = malicious.iter().map(|r| r.amount).max().unwrap();

    let eval_runs = eval_runs.as_ref().map_err(|e| e.clone())?;
    let mut forgers = 0;
    for (sc, m) in eval_runs {
        let layout = sc.layout();
        for entry in sc.adversary.evaluators.iter().filter(|e| e.strategy == "false_attestation") {
            for &j in &entry.agents {
                forgers += 1;
                if !m.slashed.contains(&layout.evaluator(j)) {
                    return Err(format!("seed {}: false_attestation evaluator {j} not slashed", sc.seed));
                }
            }
        }
    }
    Ok(format!(
        "{} malicious all below honest mean {mean:.1} (best {best}); {forgers}/{forgers} forgers slashed over {} runs",
        malicious.len(),
        eval_runs.len()
    ))
}

fn c9_shapley_axioms() -> Outcome {
    let mut rng = ChaCha20Rng::seed_from_u64(0x5A91);
    for game in 0..100 {
        let n = rng.random_range(2..=6usize);
        let full = (1u32 << n) - 1;
        let mut v: Vec<BigRational> = (0..=full).map(|_| rat(rng.random_range(-50..=100), rng.random_range(1..=6))).collect();
        v[0] = BigRational::zero();
        let phi = shapley_exact(n, |s| v[s as usize].clone()).map_err(|e| e.to_string())?;
        let total: BigRational = phi.iter().cloned().sum();
        if total != &v[full as usize] - &v[0] {
            return Err(format!("game {game}: efficiency"));
        }

        let i = rng.random_range(0..n);
        let j = (i + rng.random_range(1..n)) % n;
        let swap = |s: u32| {
            let (bi, bj) = (s >> i & 1, s >> j & 1);
            (s & !(1 << i) & !(1 << j)) | (bj << i) | (bi << j)
        };
        let sym = shapley_exact(n, |s| &v[s as usize] + &v[swap(s) as usize]).map_err(|e| e.to_string())?;
        if sym[i] != sym[j] {
            return Err(format!("game {game}: symmetry of {i} and {j}"));
        }

        let k = rng.random_range(0..n);
        let null = shapley_exact(n, |s| v[(s & !(1 << k)) as usize].clone()).map_err(|e| e.to_string())?;
        if !null[k].is_zero() {
            return Err(format!("game {game}: null player {k} got {}", null[k]));
        }
    }
    Ok("100 games: efficiency, symmetry, null player exact".into())
}

fn replay_matches(out: &RunOutput) -> Result<(), String> {
    let mut bytes = Vec::new();
    out.chain.export_jsonl(&mut bytes).map_err(|e| e.to_string())?;
    let records = Chain::read_jsonl(&bytes[..]).map_err(|e| e.to_string())?;
    let replayed = Chain::replay(records).map_err(|e| e.to_string())?;
    if phase_boundaries(replayed.log()) != out.metrics.phase_digests {
        return Err("phase digests differ after replay".into());
    }
    Ok(())
}

fn c10_determinism(runs: &Runs) -> Outcome {
    let mut phases = 0;
    for name in BUNDLED {
        let first = runs.get(name)?;
        replay_matches(first).map_err(|e| format!("{name}: {e}"))?;
        let second = run(&bundled(name)).map_err(|e| format!("{name}: {e}"))?;
        if first.chain.log() != second.chain.log() {
            return Err(format!("{name}: transaction logs differ"));
        }
        if first.metrics.to_json() != second.metrics.to_json() {
            return Err(format!("{name}: metrics differ"));
        }
        phases += first.metrics.phase_digests.len();
    }
    Ok(format!("{} scenarios replayed and rerun, {phases} phase digests identical", BUNDLED.len()))
}

fn c11_commit_reveal(runs: &Runs, eval_runs: &Result<Vec<(Scenario, RunMetrics)>, String>) -> Outcome {
    let log = runs.get("honest_tiny")?.chain.log();
    let first = log.iter().position(|r| matches!(r.op, Op::RevealScore { .. })).ok_or("no reveals in log")?;
    let window: Vec<&LogRecord> = log[first..]
        .iter()
        .take_while(|r| matches!(r.op, Op::RevealScore { .. }))
        .collect();
    let base = Chain::replay(log[..first].iter().cloned()).map_err(|e| e.to_string())?;
    let mut rng = ChaCha20Rng::seed_from_u64(0xC0117);
    for trial in 0..1000 {
        let rec = window[rng.random_range(0..window.len())];
        let Op::RevealScore { task, participant, score, salt, attestation } = rec.op.clone() else {
            unreachable!()
        };
        let (score, salt) = if rng.random_bool(0.5) {
            let delta = rng.random_range(1..=1_000_000u32);
            let ppm = if score.ppm() >= delta { score.ppm() - delta } else { score.ppm() + delta };
            if ppm > 1_000_000 {
                continue;
            }
            (Score::from_ppm(ppm), salt)
        } else {
            let mut chars: Vec<char> = salt.chars().collect();
            let at = rng.random_range(0..chars.len());
            let pool: Vec<char> = "0123456789abcdef".chars().filter(|c| *c != chars[at]).collect();
            chars[at] = pool[rng.random_range(0..pool.len())];
            (score, chars.into_iter().collect())
        };
        let mut chain = base.clone();
        let op = Op::RevealScore { task, participant, score, salt, attestation };
        match chain.submit(rec.sender, op) {
            Err(LedgerError::RevealMismatch) => {}
            other => return Err(format!("trial {trial}: tampered reveal gave {other:?}")),
        }
    }
    let mut control = base.clone();
    control.submit(window[0].sender, window[0].op.clone()).map_err(|e| format!("genuine reveal refused: {e}"))?;

    let eval_runs = eval_runs.as_ref().map_err(|e| e.clone())?;
    let attempts: usize = eval_runs.iter().map(|(_, m)| m.copycat.attempts).sum();
    let accepted: usize = eval_runs.iter().map(|(_, m)| m.copycat.accepted).sum();
    if attempts == 0 || accepted != 0 {
        return Err(format!("copycat accepted {accepted} of {attempts}"));
    }
    Ok(format!("1000 tampered reveals rejected; copycat 0 of {attempts} copies accepted"))
}

fn c12_ratio_harness(runs: &Runs) -> Outcome {
    let mut lines = Vec::new();
    for offset in [0u64, 1] {
        let mut tables = Vec::new();
        for pass in 0..2 {
            let pair: Vec<RunMetrics> = ["ratio_1to10", "ratio_1to1"]
                .iter()
                .map(|name| {
                    if offset == 0 && pass == 0 {
                        return runs.get(name).map(|o| o.metrics.clone());
                    }
                    let mut sc = bundled(name);
                    sc.seed += offset;
                    run(&sc).map(|o| o.metrics).map_err(|e| format!("{name}: {e}"))
                })
                .collect::<Result<_, _>>()?;
            let report = compare(&pair[0], &pair[1]).map_err(|e| e.to_string())?;
            if report.participants.len() != pair[0].participants {
                return Err("table is missing participants".into());
            }
            tables.push((report.to_csv(), report.mean_abs_overall_diff, report.max_abs_overall_diff));
        }
        if tables[0].0 != tables[1].0 {
            return Err(format!("seed offset {offset}: tables differ between passes"));
        }
        lines.push(format!("mean |diff| {:.4}, max {:.4}", tables[0].1, tables[0].2));
    }
    Ok(format!("deterministic over 2 seeds ({})", lines.join("; ")))
}

fn main() {
    let started = Instant::now();
    let runs = Runs {
        first: BUNDLED
            .iter()
            .map(|&name| {
                let out = catch_unwind(AssertUnwindSafe(|| run(&bundled(name))))
                    .map_err(|_| "panicked".to_string())
                    .and_then(|r| r.map_err(|e| e.to_string()));
                (name, out)
            })
            .collect(),
    };
    let eval_runs = catch_unwind(adversarial_evaluator_runs).unwrap_or_else(|_| Err("panicked".into()));

    let criteria: Vec<(&str, Check)> = vec![
        ("secure aggregation exactness", Box::new(c1_secure_aggregation)),
        ("dropout recovery", Box::new(c2_dropout_recovery)),
        ("median robustness", Box::new(c3_median_robustness)),
        ("threshold rules", Box::new(c4_threshold_rules)),
        ("reward conservation", Box::new(c5_reward_conservation)),
        ("hierarchy equivalence", Box::new(c6_hierarchy)),
        ("FL effectiveness", Box::new(|| c7_effectiveness(&runs))),
        ("adversary economics", Box::new(|| c8_adversary_economics(&runs, &eval_runs))),
        ("Shapley axioms", Box::new(c9_shapley_axioms)),
        ("determinism", Box::new(|| c10_determinism(&runs))),
        ("commit-reveal soundness", Box::new(|| c11_commit_reveal(&runs, &eval_runs))),
        ("ratio experiment harness", Box::new(|| c12_ratio_harness(&runs))),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {detail}", i + 1);
            }
        }
    }
    println!(
        "{} of {} criteria passed in {:.1?}",
        criteria.len() - failed,
        criteria.len(),
        started.elapsed()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
