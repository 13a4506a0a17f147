use std::path::PathBuf;
use std::process::ExitCode;

use abft_lab::commands::{self, Common};
use abft_lab::config::{Analysis, Method};
use abft_lab::LabError;
use clap::{Args, Parser, Subcommand};

#[derive(Args, Clone)]
struct CommonArgs {
    /// Experiment config (TOML); defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, overriding the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain a model on the synthetic corpus.
    Pretrain,
    /// Fine-tune a pretrained checkpoint.
    Finetune {
        #[arg(long, value_enum)]
        method: Option<Method>,
        /// Pretrained checkpoint to start from.
        #[arg(long)]
        base: PathBuf,
    },
    /// Run analyses over one or more checkpoints.
    Eval {
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long = "analysis", value_enum)]
        analyses: Vec<Analysis>,
    },
    /// Print a checkpoint's header and tensor summary.
    InspectCheckpoint { path: PathBuf },
    /// Export generated prompts as JSON lines.
    Dataset {
        /// Labeled text (`text<TAB>label` per line) to build the task from.
        #[arg(long)]
        input: Option<PathBuf>,
    },
}

#[derive(Parser)]
#[command(name = "abft", version, about = "Attention behavior fine-tuning experiments on toy transformers")]
struct Top {
    #[command(flatten)]
    common: CommonArgs,
    #[command(subcommand)]
    command: Command,
}

fn run(top: Top) -> Result<(), LabError> {
    let common = Common {
        config: top.common.config,
        seed: top.common.seed,
        out: top.common.out,
    };
    match top.command {
        Command::Pretrain => {
            let cfg = common.resolve()?;
            let o = commands::cmd_pretrain(&cfg)?;
            println!(
                "pretrained {} steps, held-out loss {:.4} (uniform {:.4}), {}",
                o.report.steps,
                o.report.heldout_loss,
                o.report.uniform_bound,
                o.gate.diagnostic()
            );
        }
        Command::Finetune { method, base } => {
            let cfg = common.resolve()?;
            let method = method.unwrap_or(cfg.method);
            let (_, log) = commands::cmd_finetune(&cfg, method, &base)?;
            if let Some(last) = log.records.last() {
                println!(
                    "{} finished {} steps, final loss {:.4}, mean induction heads {:.2}",
                    method.name(),
                    log.len(),
                    last.mean_loss,
                    last.mean_induction_count
                );
            }
        }
        Command::Eval { checkpoints, analyses } => {
            let cfg = common.resolve()?;
            let analyses = if analyses.is_empty() { cfg.eval.analyses.clone() } else { analyses };
            for f in commands::cmd_eval(&cfg, &checkpoints, &analyses)? {
                println!("{}", f.display());
            }
        }
        Command::InspectCheckpoint { path } => print!("{}", commands::cmd_inspect(&path)?),
        Command::Dataset { input } => {
            let cfg = common.resolve()?;
            for f in commands::cmd_dataset(&cfg, input.as_deref())? {
                println!("{}", f.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let top = Top::parse();
    match run(top) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
