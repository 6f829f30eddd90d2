use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "qavit", about = "Question-aware ViT: train, evaluate and probe the synthetic benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a JSON run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Resume from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint; metrics JSON on stdout.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run an ablation grid from a JSON grid config.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Worker threads (QAVIT_DETERMINISTIC=1 forces 1).
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Emit a saliency PGM for a regenerated image and a question.
    Saliency {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        image_seed: u64,
        #[arg(long)]
        question: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        upscale: usize,
    },
    /// Verify analytic gradients against finite differences (float64).
    Gradcheck {
        #[arg(long, default_value_t = 5000)]
        samples: usize,
        /// Test fixture: corrupt the probe to prove the check can fail.
        #[arg(long, hide = true, default_value_t = false)]
        inject_fault: bool,
    },
    /// Dump the synthetic datasets as record-framed binary files.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10000)]
        train_count: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train { config, seed, out, resume } => {
            qavit_cli::cmd_train(config, *seed, out.as_deref(), resume.as_deref())
        }
        Command::Eval { checkpoint, config, seed } => qavit_cli::cmd_eval(checkpoint, config, *seed),
        Command::Ablate { config, jobs, out } => qavit_cli::cmd_ablate(config, *jobs, out.as_deref()),
        Command::Saliency { checkpoint, config, image_seed, question, out, upscale } => {
            qavit_cli::cmd_saliency(checkpoint, config, *image_seed, question, out, *upscale)
        }
        Command::Gradcheck { samples, inject_fault } => qavit_cli::cmd_gradcheck(*samples, *inject_fault),
        Command::GenData { config, out, train_count } => qavit_cli::cmd_gen_data(config, out, *train_count),
    };
    match result {
        Ok(code) => ExitCode::from(code as u8),
        Err(err) => {
            eprintln!("error: {}", err);
            ExitCode::from(qavit_cli::exit_code_for(&err) as u8)
        }
    }
}
