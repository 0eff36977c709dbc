use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use aoi_core::experiment::{error_json, exit_code, run, ExperimentKind, ExperimentSpec, PolicyKind};

/// Optimal and structure-aware scheduling for multi-packet AoI systems.
#[derive(Parser)]
#[command(name = "aoi-sched", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the joint problem by relative value iteration.
    SolveOptimal(Common),
    /// Solve per-device problems and build the improved policy.
    SolveSuboptimal(Common),
    /// Simulate one policy.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = PolicyArg::Suboptimal)]
        policy: PolicyArg,
    },
    /// Simulate every policy under common random numbers.
    Compare(Common),
    /// Emit policy maps and fresh-sampling thresholds.
    StructureMap(Common),
    /// Evaluate all policies over the grid in the [sweep] table.
    Sweep(Common),
}

#[derive(Args)]
struct Common {
    /// Fleet file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// RVIA span tolerance.
    #[arg(long)]
    tol: Option<f64>,
    /// Slots per replication.
    #[arg(long)]
    horizon: Option<u64>,
    /// Replications.
    #[arg(long)]
    reps: Option<u32>,
    /// Worker threads (0 = one per CPU).
    #[arg(long, default_value_t = 0)]
    threads: u32,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    Optimal,
    Suboptimal,
    Base,
    Greedy,
}

impl From<PolicyArg> for PolicyKind {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::Optimal => PolicyKind::Optimal,
            PolicyArg::Suboptimal => PolicyKind::Suboptimal,
            PolicyArg::Base => PolicyKind::Base,
            PolicyArg::Greedy => PolicyKind::Greedy,
        }
    }
}

fn spec(common: Common, kind: ExperimentKind) -> ExperimentSpec {
    ExperimentSpec {
        config: common.config,
        out_dir: common.out,
        kind,
        seed: common.seed,
        tol: common.tol,
        horizon: common.horizon,
        reps: common.reps,
        threads: common.threads as usize,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let spec = match cli.command {
        Command::SolveOptimal(c) => spec(c, ExperimentKind::SolveOptimal),
        Command::SolveSuboptimal(c) => spec(c, ExperimentKind::SolveSuboptimal),
        Command::Simulate { common, policy } => spec(common, ExperimentKind::Simulate(policy.into())),
        Command::Compare(c) => spec(c, ExperimentKind::Compare),
        Command::StructureMap(c) => spec(c, ExperimentKind::StructureMap),
        Command::Sweep(c) => spec(c, ExperimentKind::Sweep),
    };
    match run(&spec) {
        Ok(outcome) => {
            for f in &outcome.files {
                println!("{}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", error_json(&e));
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
