//! `composer-forge` command-line driver.
//!
//! Exit codes: 0 on success, 1 when a computation fails, 2 for usage and
//! configuration errors (including missing inputs).

pub mod commands;
pub mod config;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use composer_forge_core::parallel::Parallelism;
use composer_forge_core::pianoroll::Variant;
use thiserror::Error;

pub use commands::{cmd_ablate, cmd_encode, cmd_eval, cmd_ingest, cmd_notes, cmd_train};
pub use config::{ExperimentConfig, CACHE_ENV};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] composer_forge_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 2,
            Self::Core(_) | Self::Io { .. } => 1,
        }
    }
}

macro_rules! core_from {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                Self::Core(e.into())
            }
        }
    )*};
}

core_from!(
    composer_forge_core::smf::SmfError,
    composer_forge_core::pianoroll::RollError,
    composer_forge_core::dataset::DatasetError,
    composer_forge_core::nn::NnError,
    composer_forge_core::train::TrainError,
    composer_forge_core::eval::EvalError
);

#[derive(Debug, Parser)]
#[command(name = "composer-forge", version, about = "Composer classification from MIDI piano rolls")]
pub struct Cli {
    /// Experiment config (JSON); every field has a default.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Training seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; 1 gives bitwise-reproducible runs.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Recompute outputs even when stamped outputs are intact.
    #[arg(long, global = true)]
    pub force: bool,
    /// Input variant: full, onset-omitted or frame-binarized.
    #[arg(long, global = true)]
    pub variant: Option<Variant>,
    /// Segments voted per piece at evaluation.
    #[arg(long, global = true)]
    pub segments: Option<usize>,
    /// Reserved: extend notes through the sustain pedal. Not implemented.
    #[arg(long, global = true)]
    pub pedal_extend: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Filter the metadata CSV and write the stratified split manifest.
    Ingest {
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parse and cache piano rolls for every manifest piece.
    Encode,
    /// Train a model into the run directory.
    Train,
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Segment-count and variant ablations without retraining.
    Ablate {
        /// Comma-separated segment counts.
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<usize>>,
    },
    /// Print the effective config.
    Config,
    /// Print the notes of one MIDI file as JSON.
    Notes { midi: PathBuf },
}

impl Cli {
    /// Config file (or defaults relative to the working directory) with flag overrides.
    pub fn effective_config(&self) -> Result<ExperimentConfig, CliError> {
        if self.pedal_extend {
            return Err(CliError::Usage(
                "--pedal-extend is reserved; sustain pedal events are currently ignored".into(),
            ));
        }
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default().resolved(Path::new(".")),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(n) = self.segments {
            cfg.n_eval_segments = n;
        }
        if let Some(v) = self.variant {
            cfg.variant = v;
            cfg.model.in_channels = v.channels();
        }
        let abs = |p: &Path| std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf());
        match &self.command {
            Command::Ingest { csv, out } => {
                if let Some(p) = csv {
                    cfg.data.metadata_csv = abs(p);
                }
                if let Some(p) = out {
                    cfg.data.manifest = abs(p);
                }
            }
            Command::Eval { checkpoint: Some(p) } => cfg.data.checkpoint = Some(abs(p)),
            Command::Ablate { grid: Some(g) } => cfg.ablation.segment_grid = g.clone(),
            _ => {}
        }
        Ok(cfg)
    }

    fn parallelism(&self) -> Result<Parallelism, CliError> {
        match self.workers {
            Some(0) => Err(CliError::Usage("--workers must be at least 1".into())),
            Some(n) => Ok(Parallelism::with_workers(n)),
            None => Ok(Parallelism::available()),
        }
    }
}

/// Runs one invocation, writing human-readable output to `out`.
pub fn run(cli: &Cli, out: &mut dyn std::io::Write) -> Result<(), CliError> {
    let cfg = cli.effective_config()?;
    let par = cli.parallelism()?;
    let force = cli.force;
    let text = par.install(|| -> Result<String, CliError> {
        Ok(match &cli.command {
            Command::Ingest { .. } => {
                let r = cmd_ingest(&cfg, force)?;
                let note = if r.skipped { " (up to date)" } else { "" };
                format!("{}manifest: {}{note}\n", r.table, cfg.data.manifest.display())
            }
            Command::Encode => {
                let s = cmd_encode(&cfg, force)?;
                let mut text = format!("encoded {}, cached {}, failed {}\n", s.encoded, s.skipped, s.failures.len());
                for (id, reason) in &s.failures {
                    text.push_str(&format!("  {id}: {reason}\n"));
                }
                text
            }
            Command::Train => {
                let s = cmd_train(&cfg, force)?;
                let note = if s.skipped { " (up to date)" } else { "" };
                format!("run: {}{note}\nconfig hash: {}\n", s.run_dir.display(), s.config_hash)
            }
            Command::Eval { .. } => {
                let r = cmd_eval(&cfg, force)?;
                format!(
                    "pieces {} accuracy {:.4} weighted F1 {:.4}\nreport: {}\n",
                    r.n_pieces,
                    r.accuracy,
                    r.weighted_f1,
                    commands::eval_dir(&cfg).join("report.json").display()
                )
            }
            Command::Ablate { .. } => {
                let rows = cmd_ablate(&cfg, force)?;
                composer_forge_core::eval::ablation_csv(&rows)
            }
            Command::Config => {
                cfg.validate()?;
                cfg.to_json() + "\n"
            }
            Command::Notes { midi } => cmd_notes(midi)? + "\n",
        })
    })?;
    out.write_all(text.as_bytes()).map_err(|e| CliError::io(Path::new("<stdout>"), e))
}
