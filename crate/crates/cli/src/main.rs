use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use din_core::orchestrator::{self, compare, export, OrchestratorError, RunMetrics, Scenario};

#[derive(Parser)]
#[command(name = "din", version, about = "Deterministic federated-learning protocol simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute a scenario and write its outputs.
    Run {
        scenario: PathBuf,
        /// Override the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory. Defaults to the scenario's `output.dir`, then `out/<name>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Diff two runs (directories or metrics.json files) over the same population.
    Compare {
        baseline: PathBuf,
        variant: PathBuf,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Re-execute a transaction log and check every state digest.
    Replay { txlog: PathBuf },
    /// Parse and check a scenario without running it.
    Validate { scenario: PathBuf },
}

fn run(scenario: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<(), OrchestratorError> {
    let mut sc = Scenario::load(scenario)?;
    if let Some(s) = seed {
        sc.seed = s;
    }
    let dir = out
        .or_else(|| sc.output.dir.clone())
        .unwrap_or_else(|| PathBuf::from("out").join(&sc.name));
    let result = orchestrator::run(&sc)?;
    export(&dir, &result.metrics, &result.chain)?;
    let m = &result.metrics;
    println!("scenario {} (seed {})", m.scenario, m.seed);
    println!("  rounds          {}", m.rounds.len());
    println!("  transactions    {}", m.transactions);
    println!("  final loss      {:.6} (centralized {:.6})", m.final_train_loss, m.centralized_loss);
    println!("  control metric  {:.6}", m.final_control_metric);
    println!("  payouts         {} (public goods {})", m.payout_total(), m.settlement.public_goods);
    println!("  slashed         {}", m.slashed.len());
    println!("  state digest    {}", m.final_state_digest);
    println!("  wall clock      {:.2?}", result.wall_clock);
    println!("  outputs         {}", dir.display());
    Ok(())
}

fn execute(cli: Cli) -> Result<(), OrchestratorError> {
    match cli.command {
        Command::Run { scenario, seed, out } => run(&scenario, seed, out),
        Command::Compare { baseline, variant, json } => {
            let report = compare(&RunMetrics::load(&baseline)?, &RunMetrics::load(&variant)?)?;
            print!("{}", report.render());
            if let Some(path) = json {
                std::fs::write(path, serde_json::to_string_pretty(&report).expect("report serializes"))?;
            }
            Ok(())
        }
        Command::Replay { txlog } => {
            let report = orchestrator::replay_log(&txlog)?;
            println!("replayed {} transactions", report.transactions);
            for d in &report.phase_digests {
                println!("{:>8}  {:<24} {}", d.seq, d.phase, d.state_digest);
            }
            println!("final state digest {}", report.final_state_digest);
            Ok(())
        }
        Command::Validate { scenario } => {
            let sc = Scenario::load(&scenario)?;
            println!(
                "{}: valid ({} participants, {} evaluators, {} rounds)",
                sc.name, sc.population.participants, sc.economics.evaluators, sc.training.rounds
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
