use std::path::PathBuf;
use std::process::ExitCode;

use bcat_core::commands::{self, EvalMode, HeadSelect, ShiftSource};
use bcat_core::config::CliConfig;
use bcat_core::dataio::ReadAudit;
use clap::{Parser, Subcommand, ValueEnum};

/// Bidirectional cross-attention transformer for unsupervised domain
/// adaptation on the ShiftedShapes toy task.
#[derive(Parser)]
#[command(name = "bcat", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Full,
    Dtf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a ShiftedShapes dataset.
    GenData {
        /// `source` or `target`.
        #[arg(long, conflicts_with = "shift", required_unless_present = "shift")]
        preset: Option<String>,
        /// Shift parameters as JSON: {"fg":..,"bg":..,"noise_sigma":..,"max_translation":..}.
        #[arg(long)]
        shift: Option<String>,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        n: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the full model; writes model.bckp, metrics.jsonl and config.json.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// `key=value`, e.g. `beta=0`, `model.d_model=16`, `out_dir=runs/a`.
        #[arg(long = "override", num_args = 1..)]
        overrides: Vec<String>,
    },
    /// Report accuracy of a checkpoint on a labelled dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "full")]
        mode: Mode,
        /// Defaults to config.json beside the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "override", num_args = 1..)]
        overrides: Vec<String>,
    },
    /// Distil a self-attention-only student from a trained checkpoint.
    Distill {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Defaults to config.json beside the teacher.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "override", num_args = 1..)]
        overrides: Vec<String>,
        /// Defaults to the configured `out_dir`.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Export one block's attention over patches as a PGM image.
    AttnMap {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        index: usize,
        #[arg(long, default_value_t = 0)]
        block: usize,
        /// A head index or `mean`.
        #[arg(long, default_value = "mean")]
        head: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> bcat_core::Result<serde_json::Value> {
    match cli.command {
        Command::GenData {
            preset,
            shift,
            n,
            seed,
            out,
        } => {
            let source = match (preset, shift) {
                (Some(p), _) => ShiftSource::Preset(p),
                (None, Some(j)) => ShiftSource::Json(j),
                (None, None) => unreachable!("clap requires one of --preset/--shift"),
            };
            commands::gen_data(&source, n as usize, seed, &out)
        }
        Command::Train { config, overrides } => {
            let cfg = CliConfig::resolve(config.as_deref(), &overrides)?;
            eprintln!("training for {} epochs into {}", cfg.train.epochs, cfg.out_dir.display());
            commands::train(&cfg)
        }
        Command::Eval {
            checkpoint,
            data,
            mode,
            config,
            overrides,
        } => {
            let cfg = commands::config_for_checkpoint(&checkpoint, config.as_deref(), &overrides)?;
            let mode = match mode {
                Mode::Full => EvalMode::Full,
                Mode::Dtf => EvalMode::Dtf,
            };
            commands::eval(&checkpoint, &data, mode, &cfg.train.model, &mut ReadAudit::default())
        }
        Command::Distill {
            teacher,
            data,
            config,
            overrides,
            out_dir,
        } => {
            let cfg = commands::config_for_checkpoint(&teacher, config.as_deref(), &overrides)?;
            let out_dir = out_dir.unwrap_or(cfg.out_dir.clone());
            commands::distill(&teacher, &data, &cfg.train, &out_dir, &mut ReadAudit::default())
        }
        Command::AttnMap {
            checkpoint,
            data,
            index,
            block,
            head,
            config,
            out,
        } => {
            let cfg = commands::config_for_checkpoint(&checkpoint, config.as_deref(), &[])?;
            let head = match head.as_str() {
                "mean" => HeadSelect::Mean,
                h => HeadSelect::Head(h.parse().map_err(|_| {
                    bcat_core::Error::Config(format!("--head must be a head index or `mean`, got `{h}`"))
                })?),
            };
            commands::attn_map(&checkpoint, &data, index, block, head, &cfg.train.model, &out, &mut ReadAudit::default())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
