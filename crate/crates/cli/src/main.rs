//! Command-line driver for the report generation pipeline.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use radreport::config::RunConfig;
use radreport::data::Split;
use radreport::pipeline::{self, Error, Result};

#[derive(Parser)]
#[command(name = "radreport", version, about = "Knowledge-grounded radiology report generation")]
struct Cli {
    /// Run configuration file (TOML).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides both the run seed and the synthetic corpus seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus, its image features and the split manifest.
    Synth,
    /// Build the retrieval index over the training split.
    Index,
    /// Pretrain the topic head (if configured), then train on reports.
    Train {
        /// Continue from the last checkpoint when one exists.
        #[arg(long)]
        resume: bool,
    },
    /// Generate reports for one split.
    Generate {
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// Checkpoint to load; defaults to the best checkpoint.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Score generations against references matched by id.
    Evaluate {
        #[arg(long, value_name = "PATH")]
        generations: PathBuf,
        /// JSON lines with `id` and `report` (or `text`), e.g. the corpus.
        #[arg(long, value_name = "PATH")]
        references: PathBuf,
    },
    /// Mean distilling gate values by sentence class.
    Gates {
        #[arg(long, value_name = "PATH")]
        generations: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let path = path.ok_or_else(|| Error::Config("this command needs --config".into()))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
        cfg.synth.seed = s;
    }
    Ok(cfg)
}

fn json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable")
}

fn run(cli: Cli) -> Result<()> {
    let config = || load_config(cli.config.as_deref(), cli.seed);
    match cli.command {
        Command::Synth => {
            let cfg = config()?;
            let s = pipeline::run_synth(&cfg)?;
            println!(
                "wrote {} records (train {}, val {}, test {}) to {}",
                s.records,
                s.train,
                s.val,
                s.test,
                cfg.data.corpus.display()
            );
        }
        Command::Index => {
            let cfg = config()?;
            let n = pipeline::run_index(&cfg)?;
            println!("indexed {n} training records in {}", cfg.data.index.display());
        }
        Command::Train { resume } => {
            let cfg = config()?;
            let summary = pipeline::run_train(&cfg, resume, |e| eprintln!("{}", serde_json::to_string(e).expect("serializable")))?;
            println!("{}", json(&summary));
        }
        Command::Generate { split, checkpoint } => {
            let cfg = config()?;
            let out = pipeline::run_generate(&cfg, split.into(), checkpoint.as_deref())?;
            println!("{}", out.display());
        }
        Command::Evaluate { generations, references } => {
            let report = pipeline::run_evaluate(&generations, &references)?;
            println!("{}", json(&report));
            eprint!("{}", report.table());
        }
        Command::Gates { generations } => {
            print!("{}", pipeline::gates_table(&pipeline::run_gates(&generations)?));
        }
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
