use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use decop::config::RunConfig;
use decop::{run, Error};

#[derive(Parser)]
#[command(name = "decop", version, about = "Dependency-controlled time-series pretraining")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain an encoder and write checkpoints and per-epoch metrics.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
    },
    /// Fine-tune a checkpoint on the configured task and report test metrics.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Evaluate a fine-tuned checkpoint on the test split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Print parameter and FLOPs counts per stage.
    Flops {
        #[arg(long)]
        config: PathBuf,
    },
    /// Write anchor, denoised view and removed noise of one channel as CSV.
    FilterViz {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        channel: usize,
    },
}

fn execute(command: Command) -> Result<(), Error> {
    match command {
        Command::Pretrain { config } => {
            let cfg = RunConfig::from_file(&config)?;
            let outcome = run::pretrain(&cfg)?;
            if let Some(last) = outcome.epochs.last() {
                println!("final epoch {}: recon {:.6} cl {:.6} total {:.6}", last.epoch, last.recon, last.cl, last.total);
            }
            println!("best epoch {}", outcome.best_epoch);
            println!("wrote {}", cfg.output_dir.display());
        }
        Command::Finetune { config, checkpoint } => {
            let cfg = RunConfig::from_file(&config)?;
            let outcome = run::finetune(&cfg, Some(&checkpoint))?;
            println!("best epoch {}", outcome.report.best_epoch);
            println!("test {}", outcome.test);
            if let Some(b) = outcome.baseline {
                println!("naive last-value test mse={:.6} mae={:.6}", b.mse, b.mae);
            }
            println!("wrote {}", cfg.output_dir.display());
        }
        Command::Eval { config, checkpoint } => {
            let cfg = RunConfig::from_file(&config)?;
            println!("test {}", run::eval(&cfg, &checkpoint)?);
        }
        Command::Flops { config } => {
            let cfg = RunConfig::from_file(&config)?;
            print!("{}", run::flops_report(&cfg)?);
        }
        Command::FilterViz { config, channel } => {
            let cfg = RunConfig::from_file(&config)?;
            let (path, _) = run::filter_viz(&cfg, channel)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {message}", e.category());
            ExitCode::FAILURE
        }
    }
}
