//! `vd`: configuration-driven front end for vd-core.

mod commands;
mod config;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{Common, SmileRegime};
use config::Loaded;
use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "vd", version, about = "Small-noise stochastic Volterra equations: limits, rates, smiles, Monte Carlo")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "VD_THREADS")]
    threads: Option<usize>,
    /// Omit the timestamp from output headers so reruns are byte-identical.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Output file (stdout when absent; overrides the config's `output`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Kernel values, L² norms and the regularity check.
    Kernels {
        #[arg(long)]
        config: PathBuf,
    },
    /// Deterministic limit equations.
    Limit {
        #[command(subcommand)]
        action: LimitAction,
    },
    /// Monte Carlo paths of the rescaled model.
    Simulate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Rate functions.
    Rate {
        #[command(subcommand)]
        action: RateAction,
    },
    /// Implied volatility smiles.
    Smile {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        regime: SmileRegime,
    },
    /// Large or moderate deviations slope experiment.
    Verify {
        #[arg(long, alias = "config")]
        experiment: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
enum LimitAction {
    /// Solve the regime's limit equation under a constant control.
    Solve {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
enum RateAction {
    /// Closed-form rate of the path in `rate.path`.
    Eval {
        #[arg(long)]
        config: PathBuf,
    },
    /// Variational rate of a terminal value: x=<v>, y=<v> or y<j>=<v>.
    Minimize {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, allow_hyphen_values = true)]
        terminal: String,
    },
    /// Closed-form moderate deviations rate of a terminal value.
    Mdp {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, allow_hyphen_values = true)]
        terminal: String,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }
    let common = Common { out: cli.out, deterministic: cli.deterministic };
    match cli.command {
        Command::Kernels { config } => commands::kernels(&Loaded::read(&config)?, &common),
        Command::Limit { action: LimitAction::Solve { config } } => commands::limit_solve(&Loaded::read(&config)?, &common),
        Command::Simulate { config } => commands::simulate_cmd(&Loaded::read(&config)?, &common),
        Command::Rate { action } => match action {
            RateAction::Eval { config } => commands::rate_eval(&Loaded::read(&config)?, &common),
            RateAction::Minimize { config, terminal } => {
                commands::rate_minimize(&Loaded::read(&config)?, &common, &terminal)
            }
            RateAction::Mdp { config, terminal } => commands::rate_mdp(&Loaded::read(&config)?, &common, &terminal),
        },
        Command::Smile { config, regime } => commands::smile(&Loaded::read(&config)?, &common, regime),
        Command::Verify { experiment } => commands::verify(&Loaded::read(&experiment)?, &common),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("vd: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
