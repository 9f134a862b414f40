//! `geocaps` command-line tool.
//!
//! Exit codes: 0 success, 2 configuration, 3 data or checkpoint, 4
//! numerical failure. On failure one line `error[<kind>]: <reason>` is
//! written to stderr.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use geocaps::app::{run_embed, run_eval, run_train, EmbedInput};
use geocaps::config::RunConfig;
use geocaps::{Branch, Error};

#[derive(Parser)]
#[command(name = "geocaps", version, about = "Cross-view geo-localization with Siamese capsule networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint for the configured number of epochs.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the held-out split and write a recall report.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Write one descriptor per image as CSV.
    Embed {
        #[arg(long)]
        ckpt: PathBuf,
        /// A directory of PNG files, or `synthetic` for the checkpoint's own
        /// synthetic source.
        #[arg(long)]
        input: String,
        /// `ground` or `satellite`.
        #[arg(long)]
        branch: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        batch: usize,
    },
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Train { config, out, resume } => {
            let cfg = RunConfig::from_file(&config)?;
            let outcome = run_train(&cfg, Some(&config), &out, resume.as_deref())?;
            if let Some(last) = outcome.epochs.last() {
                eprintln!("trained {} epochs, final loss {:.6}", last.epoch, last.mean_loss);
            }
        }
        Command::Eval { config, ckpt, report } => {
            let cfg = RunConfig::from_file(&config)?;
            let r = run_eval(&cfg, Some(&config), &ckpt, &report)?;
            eprintln!(
                "{} queries, recall@top1% {:.4}, recall@top10% {:.4}",
                r.n_queries,
                r.recall_top_percent(1.0),
                r.recall_top_percent(10.0)
            );
        }
        Command::Embed {
            ckpt,
            input,
            branch,
            out,
            batch,
        } => {
            let branch: Branch = branch.parse()?;
            if batch == 0 {
                return Err(Error::Config("--batch must be >= 1".into()));
            }
            run_embed(&ckpt, &EmbedInput::parse(&input), branch, &out, batch)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let reason = e.to_string().replace(['\n', '\r'], " ");
            eprintln!("error[{}]: {reason}", e.kind());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
