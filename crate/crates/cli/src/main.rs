//! Command-line experiment runner.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numeric failure,
//! 4 missing artifact.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use driftflow::config::{ExperimentConfig, TrainMode};
use driftflow::experiment::{
    reproduce_table1, run_experiment, stage_compare_laws, stage_evaluate, stage_simulate,
    stage_train, ArtifactDir, TableCell,
};
use driftflow::Error;

#[derive(Parser)]
#[command(
    name = "driftflow",
    about = "Learn effective drift of multiscale stochastic systems from slow-component data",
    version
)]
struct Cli {
    /// Worker threads (default: DRIFTFLOW_THREADS env var, else all cores).
    /// Results never depend on the thread count.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct StageArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Artifact directory.
    #[arg(long)]
    out: PathBuf,
    /// Override the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TableArgs {
    #[command(flatten)]
    stage: StageArgs,
    /// Table cells as `d:N:n` triples, comma separated.
    #[arg(long, default_value = "1:10:100,1:10:1000")]
    cells: String,
}

#[derive(Subcommand)]
enum Command {
    /// Full pipeline: simulate, train, evaluate, compare laws.
    Run(StageArgs),
    /// Simulate the multiscale system and write observations.
    Simulate(StageArgs),
    /// Penalized maximum-likelihood training (config mode must be `mle`).
    TrainMle(StageArgs),
    /// Flow-based variational inference (config mode must be `vi`).
    TrainVi(StageArgs),
    /// Unstructured direct-drift baseline (config mode must be `baseline`).
    Baseline(StageArgs),
    /// Evaluate the fitted estimator against the sample oracle.
    Evaluate(StageArgs),
    /// Finite-time law comparison under shared noise (d = 1).
    CompareLaws(StageArgs),
    /// Run the MSE table cells and aggregate `reports/table1.csv`.
    ReproduceTable1(TableArgs),
}

fn load_config(args: &StageArgs) -> Result<ExperimentConfig, Error> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seeds.master = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn require_mode(cfg: &ExperimentConfig, expected: TrainMode, subcommand: &str) -> Result<(), Error> {
    if cfg.train.mode != expected {
        return Err(Error::config(format!(
            "`{subcommand}` needs train.mode = {expected:?} in the config (found {:?}); \
             keeping them aligned keeps config snapshots consistent across stages",
            cfg.train.mode
        )));
    }
    Ok(())
}

fn parse_cells(text: &str) -> Result<Vec<TableCell>, Error> {
    text.split(',')
        .map(|cell| {
            let parts: Vec<&str> = cell.trim().split(':').collect();
            if parts.len() != 3 {
                return Err(Error::config(format!("bad cell `{cell}`; expected d:N:n")));
            }
            Ok(TableCell {
                d: parts[0]
                    .parse()
                    .map_err(|e| Error::config(format!("bad d in `{cell}`: {e}")))?,
                n_particles: parts[1]
                    .parse()
                    .map_err(|e| Error::config(format!("bad N in `{cell}`: {e}")))?,
                n_scale: parts[2]
                    .parse()
                    .map_err(|e| Error::config(format!("bad n in `{cell}`: {e}")))?,
            })
        })
        .collect()
}

fn dispatch(command: &Command) -> Result<(), Error> {
    match command {
        Command::Run(args) => {
            let cfg = load_config(args)?;
            let mse = run_experiment(&cfg, &args.out)?;
            println!("run complete: grid MSE = {mse:.6e}; artifacts in {}", args.out.display());
        }
        Command::Simulate(args) => {
            let cfg = load_config(args)?;
            let dir = ArtifactDir::create(&args.out)?;
            let obs = stage_simulate(&cfg, &dir)?;
            println!(
                "simulated {} observations (dim {}) into {}",
                obs.len(),
                obs.dim(),
                dir.observations().display()
            );
        }
        Command::TrainMle(args) => {
            let cfg = load_config(args)?;
            require_mode(&cfg, TrainMode::Mle, "train-mle")?;
            let dir = ArtifactDir::open(&args.out)?;
            stage_train(&cfg, &dir)?;
            println!("MLE training complete; checkpoint in {}", dir.checkpoint("flow.ckpt").display());
        }
        Command::TrainVi(args) => {
            let cfg = load_config(args)?;
            require_mode(&cfg, TrainMode::Vi, "train-vi")?;
            let dir = ArtifactDir::open(&args.out)?;
            stage_train(&cfg, &dir)?;
            println!(
                "VI training complete; checkpoint in {}",
                dir.checkpoint("posterior.ckpt").display()
            );
        }
        Command::Baseline(args) => {
            let cfg = load_config(args)?;
            require_mode(&cfg, TrainMode::Baseline, "baseline")?;
            let dir = ArtifactDir::open(&args.out)?;
            stage_train(&cfg, &dir)?;
            println!(
                "baseline training complete; checkpoint in {}",
                dir.checkpoint("baseline.ckpt").display()
            );
        }
        Command::Evaluate(args) => {
            let cfg = load_config(args)?;
            let dir = ArtifactDir::open(&args.out)?;
            let mse = stage_evaluate(&cfg, &dir)?;
            println!("grid MSE = {mse:.6e}; report in {}", dir.report("mse_summary.csv").display());
        }
        Command::CompareLaws(args) => {
            let cfg = load_config(args)?;
            let dir = ArtifactDir::open(&args.out)?;
            stage_compare_laws(&cfg, &dir)?;
            println!("law comparison written to {}", dir.report("law_comparison.csv").display());
        }
        Command::ReproduceTable1(args) => {
            let cfg = load_config(&args.stage)?;
            let cells = parse_cells(&args.cells)?;
            let rows = reproduce_table1(&cfg, &cells, &args.stage.out)?;
            for (cell, mse) in rows {
                println!(
                    "d={} N={} n={}: MSE = {mse:.6e}",
                    cell.d, cell.n_particles, cell.n_scale
                );
            }
            println!("table written to {}", args.stage.out.join("reports/table1.csv").display());
        }
    }
    Ok(())
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 2,
        Error::Divergence { .. } | Error::NonFinite { .. } | Error::TrainingAborted { .. } => 3,
        Error::MissingArtifact(_) | Error::Checkpoint(_) => 4,
        Error::Io(_) => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = cli.threads.or_else(|| {
        std::env::var("DRIFTFLOW_THREADS").ok().and_then(|v| v.parse().ok())
    });
    if let Some(n) = threads {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    match dispatch(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
