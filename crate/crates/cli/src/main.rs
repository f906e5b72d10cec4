mod commands;
mod config;
mod failure;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{
    EvaluateArgs, FederateArgs, Objective, Policy, PropensityChoice, RankArgs, SimulateArgs,
    TrainArgs, UnlearnArgs,
};
use config::RunConfig;
use failure::Failure;

#[derive(Parser)]
#[command(
    name = "prefcore",
    version,
    about = "Preference learning and action ranking"
)]
struct Cli {
    /// Seed for every random choice; overrides `engine.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// key = value config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run simulated episodes and write their logs and a report.
    Simulate {
        #[arg(long)]
        preset: Option<String>,
        #[arg(long, default_value_t = 1)]
        episodes: usize,
        #[arg(long, value_enum, default_value_t = Policy::Engine)]
        policy: Policy,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train preference models on a log and write a snapshot.
    Train {
        #[arg(long)]
        log: PathBuf,
        #[arg(long, value_enum, default_value_t = Objective::Pointwise)]
        objective: Objective,
        #[arg(long, value_enum)]
        propensity: Option<PropensityChoice>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Offline metrics for a snapshot, or policy metrics for a preset.
    Evaluate {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, default_value_t = prefcore::evaluation::DEFAULT_RELEVANCE_THRESHOLD)]
        threshold: f64,
        #[arg(long)]
        preset: Option<String>,
        #[arg(long, default_value_t = 1)]
        episodes: usize,
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long, value_enum, default_value_t = Policy::Engine)]
        policy: Policy,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the ranked candidates for one user.
    Rank {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        user: u32,
        /// History replayed into the user's short-term state.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Comma-separated context tags.
        #[arg(long)]
        context: Option<String>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Remove a user's records from a trained snapshot.
    Unlearn {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        user: u32,
        #[arg(long, value_delimiter = ',')]
        actions: Vec<u32>,
        #[arg(long)]
        from: Option<u64>,
        #[arg(long)]
        to: Option<u64>,
        #[arg(long, default_value_t = 3.0)]
        beta: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Federated averaging with one client per shard log.
    Federate {
        #[arg(long = "shard", required = true)]
        shards: Vec<PathBuf>,
        #[arg(long, default_value_t = 1)]
        rounds: usize,
        #[arg(long, default_value_t = 1)]
        local_steps: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn init_logging() -> Result<(), Failure> {
    let level = match std::env::var("PREFCORE_LOG_LEVEL").as_deref() {
        Err(_) | Ok("info") => log::LevelFilter::Info,
        Ok("quiet") => log::LevelFilter::Error,
        Ok("debug") => log::LevelFilter::Debug,
        Ok(other) => {
            return Err(Failure::Usage(format!(
                "PREFCORE_LOG_LEVEL must be quiet, info or debug, found `{other}`"
            )))
        }
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format(|buf, record| {
            writeln!(
                buf,
                "{}: {}",
                record.level().as_str().to_lowercase(),
                record.args()
            )
        })
        .target(env_logger::Target::Stderr)
        .init();
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    let rc = RunConfig::load(cli.config.as_deref(), cli.seed)?;
    match cli.command {
        Command::Simulate {
            preset,
            episodes,
            policy,
            out,
        } => commands::simulate(
            &rc,
            &SimulateArgs {
                preset,
                episodes,
                policy,
                out,
            },
        ),
        Command::Train {
            log,
            objective,
            propensity,
            out,
        } => commands::train(
            &rc,
            &TrainArgs {
                log,
                objective,
                propensity,
                out,
            },
        )
        .map(|_| ()),
        Command::Evaluate {
            model,
            test,
            k,
            threshold,
            preset,
            episodes,
            seeds,
            policy,
            out,
        } => commands::evaluate(
            &rc,
            &EvaluateArgs {
                model,
                test,
                k,
                threshold,
                preset,
                episodes,
                seeds,
                policy,
                out,
            },
        ),
        Command::Rank {
            model,
            user,
            log,
            context,
            k,
            out,
        } => commands::rank(
            &rc,
            &RankArgs {
                model,
                user,
                log,
                context,
                k,
                out,
            },
        ),
        Command::Unlearn {
            model,
            log,
            user,
            actions,
            from,
            to,
            beta,
            out,
        } => commands::unlearn_cmd(
            &rc,
            &UnlearnArgs {
                model,
                log,
                user,
                actions,
                from,
                to,
                beta,
                out,
            },
        ),
        Command::Federate {
            shards,
            rounds,
            local_steps,
            out,
        } => commands::federate(
            &rc,
            &FederateArgs {
                shards,
                rounds,
                local_steps,
                out,
            },
        ),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = init_logging().and_then(|_| run(cli));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.exit_code())
        }
    }
}
