//! Command-line driver for the skillslice pipeline.
//!
//! Exit codes: 0 on success, 1 on a usage error, 2 when a stage fails.

pub mod backend;
pub mod fixture;
pub mod simulated;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Parser, Subcommand};
use skillslice::config::{ChatMode, PipelineConfig};
use skillslice::pipeline::Stage;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_FAILURE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "skillslice", version, about = "Discover skill-slices in evaluation corpora and analyse models by them")]
pub struct Cli {
    /// Pipeline configuration file.
    #[arg(long, global = true, default_value = "skillslice.json")]
    pub config: PathBuf,
    /// Chat backend: replay, record, remote or simulated.
    #[arg(long, global = true)]
    pub backend: Option<ChatMode>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub cache_dir: Option<PathBuf>,
    /// Parent directory of run directories.
    #[arg(long, global = true, default_value = "runs")]
    pub out_dir: PathBuf,
    #[arg(long, global = true, default_value = "default")]
    pub run_id: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate an instances file and copy it into the run.
    Ingest {
        #[arg(long)]
        instances: PathBuf,
        /// Pre-computed model answers to import (regraded on the way in).
        #[arg(long)]
        answers: Option<PathBuf>,
    },
    /// Ask every answerer model every question.
    Answer,
    /// Write step-by-step rationales and extract skills.
    Annotate,
    /// Embed and de-duplicate skills into a skill index.
    Cluster,
    /// Turn index clusters into slices.
    Slice {
        #[arg(long)]
        min_size: Option<usize>,
    },
    /// Per-slice accuracy for every answerer.
    Evaluate,
    /// Check skill relevance against sampled negatives.
    Verify,
    /// Route each instance to the model with the best skill record.
    Route,
    /// Probe self-consistency on low, median and high accuracy skills.
    Probe,
    /// Retrieve instances by skill and score precision@k.
    Retrieve,
    /// Summary and checksum manifest for the run.
    Report,
    /// Every stage in order.
    All {
        #[arg(long)]
        instances: PathBuf,
    },
}

fn load_config(cli: &Cli) -> anyhow::Result<PipelineConfig> {
    let mut config = PipelineConfig::load(&cli.config).with_context(|| format!("loading {}", cli.config.display()))?;
    if let Some(mode) = cli.backend {
        config.backend.mode = mode;
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(dir) = &cli.cache_dir {
        config.cache_dir = dir.clone();
    }
    config.validate()?;
    Ok(config)
}

fn report(written: &[PathBuf], root: &Path) {
    for p in written {
        println!("wrote {}", p.strip_prefix(root).unwrap_or(p).display());
    }
}

/// Runs the parsed command.
pub fn execute(cli: &Cli) -> anyhow::Result<()> {
    let config = load_config(cli)?;
    let assembled = backend::assemble(config, &cli.out_dir, &cli.run_id)?;
    let p = &assembled.pipeline;
    let result = match &cli.command {
        Command::Ingest { instances, answers } => p.ingest(instances, answers.as_deref()),
        Command::Answer => p.run_stage(Stage::Answer, None),
        Command::Annotate => p.run_stage(Stage::Annotate, None),
        Command::Cluster => p.run_stage(Stage::Cluster, None),
        Command::Slice { min_size } => p.slice(*min_size),
        Command::Evaluate => p.run_stage(Stage::Evaluate, None),
        Command::Verify => p.run_stage(Stage::Verify, None),
        Command::Route => p.run_stage(Stage::Route, None),
        Command::Probe => p.run_stage(Stage::Probe, None),
        Command::Retrieve => p.run_stage(Stage::Retrieve, None),
        Command::Report => p.run_stage(Stage::Report, None),
        Command::All { instances } => p.run_all(instances),
    };
    // Keep whatever was recorded, even when the stage failed.
    assembled.finish()?;
    report(&result?, p.layout.root());
    Ok(())
}

/// Parses `argv` (program name first), runs it and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_FAILURE
        }
    }
}
