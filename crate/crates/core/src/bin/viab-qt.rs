use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use viab_qt::config::{ExperimentConfig, ExperimentKind};
use viab_qt::experiment::{replay, run};
use viab_qt::Error;

/// Quasi-tangency and viability experiments for semilinear stochastic
/// control systems.
#[derive(Parser)]
#[command(name = "viab-qt", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Residual profile over a step ladder with a tangency verdict.
    Tangency(RunArgs),
    /// Boundary certificate for the first/second-order conditions.
    Nagumo(RunArgs),
    /// Build and audit an ε-approximate mild solution.
    Approx(RunArgs),
    /// Closed-loop mean-square distance to K.
    Viability(RunArgs),
    /// Residuals of Galerkin restrictions on the unit ball.
    Galerkin(RunArgs),
    /// Viability ladder for a linear system on a convex set.
    #[command(name = "linear-equiv")]
    LinearEquiv(RunArgs),
    /// Re-run an artifact directory and compare its CSVs byte for byte.
    Replay(ReplayArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides `experiment.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `output.directory`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, env = "VIABQT_THREADS")]
    threads: Option<usize>,
}

#[derive(Args)]
struct ReplayArgs {
    dir: PathBuf,
    #[arg(long, env = "VIABQT_THREADS")]
    threads: Option<usize>,
}

fn init_threads(threads: Option<usize>) -> Result<(), Error> {
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn run_kind(kind: ExperimentKind, args: RunArgs) -> Result<i32, Error> {
    init_threads(args.threads)?;
    let mut config = ExperimentConfig::from_path(&args.config)?;
    if config.experiment.kind != kind {
        return Err(Error::Config(format!(
            "config is for '{}' but the '{}' subcommand was used",
            config.experiment.kind.as_str(),
            kind.as_str()
        )));
    }
    if let Some(seed) = args.seed {
        config.experiment.seed = seed;
    }
    let out = args.out.unwrap_or_else(|| PathBuf::from(&config.output.directory));
    let (execution, written) = run(&config, &out)?;
    println!("{}: {}", kind.as_str(), execution.summary);
    for path in written {
        println!("  wrote {}", path.display());
    }
    Ok(execution.exit_code())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Tangency(a) => run_kind(ExperimentKind::Tangency, a),
        Command::Nagumo(a) => run_kind(ExperimentKind::Nagumo, a),
        Command::Approx(a) => run_kind(ExperimentKind::Approx, a),
        Command::Viability(a) => run_kind(ExperimentKind::Viability, a),
        Command::Galerkin(a) => run_kind(ExperimentKind::Galerkin, a),
        Command::LinearEquiv(a) => run_kind(ExperimentKind::LinearEquiv, a),
        Command::Replay(a) => init_threads(a.threads).and_then(|_| {
            let execution = replay(&a.dir)?;
            println!("replay: identical ({})", execution.summary);
            Ok(0)
        }),
    };
    match result {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
