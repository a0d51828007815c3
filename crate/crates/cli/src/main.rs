use std::path::PathBuf;
use std::process::ExitCode;

use adosim_cli::{configure_threads, CliError, RunConfig, TrainOptions};
use clap::{Parser, Subcommand};

/// Multi-agent data-driven driving simulator: trace generation, PPO training,
/// offline evaluation and replay.
#[derive(Parser)]
#[command(name = "adosim", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic road into a trace directory.
    GenTrace {
        /// Road config (JSON).
        #[arg(long)]
        road: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a policy with PPO.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many updates (the run can be resumed later).
        #[arg(long)]
        max_updates: Option<u64>,
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate a checkpoint in closed loop.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Roll one episode and dump the synthesized camera view of every step.
    Replay {
        #[arg(long)]
        config: PathBuf,
        /// Without a checkpoint the ego follows the lane center by pure pursuit.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Render the views without the ado vehicle.
        #[arg(long)]
        no_ado: bool,
    },
    /// Print a summary of a trace directory.
    InspectTrace { dir: PathBuf },
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    match cli.command {
        Command::GenTrace { road, out, seed } => {
            let r = adosim_cli::gen_trace(&road, &out, seed)?;
            println!("wrote {} frames, arclength {:.3} m, to {}", r.frames, r.length, out.display());
        }
        Command::Train {
            config,
            resume,
            max_updates,
            quiet,
        } => {
            let cfg = RunConfig::load(&config)?;
            let ckpt = adosim_cli::train(&cfg, resume.as_deref(), TrainOptions { max_updates, quiet })?;
            if ckpt.exists() {
                println!("checkpoint: {}", ckpt.display());
            } else {
                println!("no updates run, nothing checkpointed");
            }
        }
        Command::Eval {
            config,
            ckpt,
            episodes,
            seed,
        } => {
            let cfg = RunConfig::load(&config)?;
            let n = episodes.unwrap_or(cfg.eval.episodes);
            let r = adosim_cli::eval(&cfg, &ckpt, n, seed.unwrap_or(cfg.eval.seed))?;
            match r.summary {
                Some(s) => println!("{} episodes: {}\n{}", r.episodes, adosim::eval::SUMMARY_HEADER, s.csv_row()),
                None => println!("0 episodes"),
            }
            println!("results in {}", r.out_dir.display());
        }
        Command::Replay {
            config,
            ckpt,
            seed,
            out,
            no_ado,
        } => {
            let cfg = RunConfig::load(&config)?;
            let r = adosim_cli::replay(&cfg, ckpt.as_deref(), seed, &out, no_ado)?;
            println!("{} steps, terminal {}, frames in {}", r.steps, r.terminal, out.display());
        }
        Command::InspectTrace { dir } => println!("{}", adosim_cli::inspect_trace(&dir)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
