//! `homad`: batch driver for dataset synthesis, alignment, fine-tuning and
//! evaluation. Exit codes: 0 ok, 1 invalid input or config, 2 failure
//! while running (including any failed study cell).

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use homad::config::{DatasetVariant, RunConfig, SelectionProtocol};
use homad::eval::Study;
use homad::{ExecProfile, ScorerKind};

#[derive(Parser)]
#[command(name = "homad", version, about = "Homography-aligned anomaly detection toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (TOML). Flags override its values.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Output directory; a config snapshot is written here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Source dataset directory (holding manifest.json).
    #[arg(long)]
    source: Option<PathBuf>,
    /// Restrict to these classes (repeatable).
    #[arg(long = "class")]
    classes: Vec<String>,
    /// Seeds to run (repeatable).
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    #[arg(long, value_enum)]
    profile: Option<Profile>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Profile {
    Serial,
    Parallel,
}

#[derive(Clone, Copy, ValueEnum)]
enum Variant {
    Original,
    Misaligned,
    Aligned,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the toy dataset or build an aligned/misaligned variant.
    Synthesize {
        #[command(flatten)]
        common: Common,
        /// Generate the procedural toy dataset (ignores any source).
        #[arg(long, conflicts_with = "variant")]
        toy: bool,
        /// Variant to build from the source dataset.
        #[arg(long, value_enum)]
        variant: Option<Variant>,
    },
    /// Train per-class aligners and align the source dataset.
    Align {
        #[command(flatten)]
        common: Common,
        /// Apply the aligners saved in this directory instead of training.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Template (or pairwise reference) index among the train normals.
        #[arg(long)]
        template_index: Option<usize>,
    },
    /// Fine-tune the backbone with self-homography regression and select a
    /// checkpoint.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Rank checkpoints on the test split instead of the validation split.
        #[arg(long, alias = "paper-protocol")]
        test_set_selection: bool,
        /// Continue from the last checkpoint found in the output directory.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Score datasets and run studies.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// One of: evaluate, alignment, hl, augmentation, backbone.
        /// Defaults to the config's study (`evaluate` unless set).
        #[arg(long)]
        study: Option<String>,
        /// Scorers to run (repeatable): padim, patchcore, spade, mahad.
        #[arg(long = "scorer")]
        scorers: Vec<String>,
        #[arg(long, value_enum)]
        variant: Option<Variant>,
    },
}

fn variant(v: Variant) -> DatasetVariant {
    match v {
        Variant::Original => DatasetVariant::Original,
        Variant::Misaligned => DatasetVariant::Misaligned,
        Variant::Aligned => DatasetVariant::Aligned,
    }
}

fn base_config(c: &Common) -> homad::Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) if !p.is_file() => {
            return Err(homad::Error::Validation(format!("config file {} not found", p.display())))
        }
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(o) = &c.out {
        cfg.output_dir = o.clone();
    }
    if c.source.is_some() {
        cfg.dataset.root = c.source.clone();
    }
    if !c.classes.is_empty() {
        cfg.classes = c.classes.clone();
    }
    if !c.seeds.is_empty() {
        cfg.seeds = c.seeds.clone();
    }
    if let Some(p) = c.profile {
        cfg.profile = match p {
            Profile::Serial => ExecProfile::Serial,
            Profile::Parallel => ExecProfile::Parallel,
        };
    }
    Ok(cfg)
}

/// Returns whether every unit of work succeeded.
fn run(cli: Cli) -> homad::Result<bool> {
    match cli.command {
        Command::Synthesize { common, toy, variant: v } => {
            let mut cfg = base_config(&common)?;
            if toy {
                cfg.dataset.root = None;
                cfg.dataset.variant = DatasetVariant::Original;
            }
            if let Some(v) = v {
                cfg.dataset.variant = variant(v);
            }
            commands::synthesize(&cfg)
        }
        Command::Align {
            common,
            checkpoint,
            template_index,
        } => {
            let mut cfg = base_config(&common)?;
            if checkpoint.is_some() {
                cfg.aligner_checkpoint = checkpoint;
            }
            if template_index.is_some() {
                cfg.aligner.template_index = template_index;
            }
            commands::align(&cfg)
        }
        Command::Finetune {
            common,
            test_set_selection,
            resume,
            iterations,
        } => {
            let mut cfg = base_config(&common)?;
            if test_set_selection {
                cfg.selection.protocol = SelectionProtocol::TestSet;
            }
            if let Some(n) = iterations {
                cfg.shl.iterations = n;
            }
            commands::finetune(&cfg, resume)
        }
        Command::Evaluate {
            common,
            study,
            scorers,
            variant: v,
        } => {
            let mut cfg = base_config(&common)?;
            if let Some(st) = study {
                cfg.study = st.parse::<Study>()?;
            }
            if !scorers.is_empty() {
                cfg.scorers = scorers
                    .iter()
                    .map(|s| s.parse::<ScorerKind>())
                    .collect::<homad::Result<_>>()?;
            }
            if let Some(v) = v {
                cfg.dataset.variant = variant(v);
            }
            commands::evaluate(&cfg)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: some cells failed; see the results in the output directory");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
