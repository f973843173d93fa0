use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedccea::config::parse_config;
use fedccea::pipeline::{prepare, run_all_stages, run_stage, Stage};
use fedccea::Error;

#[derive(Parser)]
#[command(name = "fedccea", version, about = "Federated client contribution evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Run configuration (JSON).
    #[arg(long, short, global = true, default_value = "fedccea.json")]
    config: PathBuf,

    /// Output directory; overrides `out_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Master seed; overrides `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Run the data-size-sampled FL simulations and write the store.
    Simulate,
    /// Fit the accuracy approximation model to the store.
    TrainAam,
    /// Derive contribution values, CCI and ranks from the trained model.
    Value,
    /// Run the configured baseline valuations.
    Baseline,
    /// Run the configured experiments.
    Experiment,
    /// Every stage in order.
    All,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config { .. } => 2,
        Error::Dependency(_) => 3,
        _ => 4,
    }
}

fn run(cli: &Cli) -> fedccea::Result<()> {
    let mut config = parse_config(&cli.config)?;
    if let Some(out) = &cli.out {
        config.out_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let prep = prepare(config)?;
    log::info!("config hash {}", prep.hash);
    let written = match cli.command {
        Command::Simulate => run_stage(&prep, Stage::Simulate)?,
        Command::TrainAam => run_stage(&prep, Stage::TrainAam)?,
        Command::Value => run_stage(&prep, Stage::Value)?,
        Command::Baseline => run_stage(&prep, Stage::Baseline)?,
        Command::Experiment => run_stage(&prep, Stage::Experiment)?,
        Command::All => run_all_stages(&prep)?,
    };
    for path in written {
        println!("{}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
