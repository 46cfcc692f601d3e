//! `spmm` command-line front end.
//!
//! Primary outputs go to `--out` (written atomically) or to stdout. When
//! `--out` is given, a one-line JSON summary is printed to stdout instead.
//! Failures print `{"error": {"category", "message", "input"}}` on stderr
//! and exit with 2 (config), 3 (data) or 4 (runtime).

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use spmm_core::{ErrorCategory, RunConfig, SpmmError};

mod commands;
pub mod plotdata;

#[derive(Debug, thiserror::Error)]
#[error("{message}")]
pub struct CliError {
    pub category: ErrorCategory,
    pub message: String,
    pub input: Option<String>,
}

impl CliError {
    pub fn config(message: impl Into<String>, input: Option<&str>) -> CliError {
        CliError {
            category: ErrorCategory::Config,
            message: message.into(),
            input: input.map(str::to_string),
        }
    }

    pub fn data(message: impl Into<String>, input: Option<&str>) -> CliError {
        CliError {
            category: ErrorCategory::Data,
            message: message.into(),
            input: input.map(str::to_string),
        }
    }

    pub fn runtime(message: impl Into<String>) -> CliError {
        CliError {
            category: ErrorCategory::Runtime,
            message: message.into(),
            input: None,
        }
    }

    /// Names the offending input unless one is already recorded.
    pub fn at(mut self, input: impl AsRef<str>) -> CliError {
        if self.input.is_none() {
            self.input = Some(input.as_ref().to_string());
        }
        self
    }

    pub fn exit_code(&self) -> i32 {
        match self.category {
            ErrorCategory::Config => 2,
            ErrorCategory::Data => 3,
            ErrorCategory::Runtime => 4,
        }
    }

    pub fn to_json(&self) -> String {
        json!({"error": {"category": self.category.name(), "message": self.message, "input": self.input}}).to_string()
    }
}

impl From<SpmmError> for CliError {
    fn from(e: SpmmError) -> CliError {
        let input = match &e {
            SpmmError::InvalidSmiles { smiles, .. } => Some(smiles.clone()),
            SpmmError::Io { path, .. } => Some(path.clone()),
            _ => None,
        };
        CliError {
            category: e.category(),
            message: e.to_string(),
            input,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "spmm", version, about = "Structure-property multimodal molecular models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Options shared by every command.
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Run configuration (`[section]` / `key = value`).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for every random choice.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Single configuration override, `section.key=value`; repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Learn a BPE vocabulary from a SMILES corpus.
    TrainTokenizer(commands::TrainTokenizer),
    /// Multimodal pre-training on a SMILES corpus.
    Pretrain(commands::Pretrain),
    /// Property-conditioned SMILES generation.
    Generate(commands::Generate),
    /// SMILES-to-property prediction.
    PredictPv(commands::PredictPv),
    /// Fine-tune a regression or classification head.
    Finetune(commands::Finetune),
    /// Train a forward or retro reaction model.
    ReactTrain(commands::ReactTrain),
    /// Beam-search reaction prediction.
    ReactPredict(commands::ReactPredict),
    /// Validity, uniqueness, novelty and property error of generated SMILES.
    Score(commands::Score),
    /// Property-to-token cross-attention map.
    Attention(commands::Attention),
    /// Tidy CSV for property scatter plots and histograms.
    ExportPlotdata(commands::ExportPlotdata),
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.to_json());
            e.exit_code()
        }
    }
}

fn dispatch(command: Command) -> CliResult<()> {
    match command {
        Command::TrainTokenizer(c) => c.run(),
        Command::Pretrain(c) => c.run(),
        Command::Generate(c) => c.run(),
        Command::PredictPv(c) => c.run(),
        Command::Finetune(c) => c.run(),
        Command::ReactTrain(c) => c.run(),
        Command::ReactPredict(c) => c.run(),
        Command::Score(c) => c.run(),
        Command::Attention(c) => c.run(),
        Command::ExportPlotdata(c) => c.run(),
    }
}

impl Common {
    /// `base`, then the config file, then `--set` overrides, then `--seed`.
    pub fn resolve(&self, mut base: RunConfig) -> CliResult<RunConfig> {
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::config(format!("cannot read config: {e}"), Some(&path.display().to_string())))?;
            base.apply(&text)
                .map_err(|e| CliError::config(e.to_string(), Some(&path.display().to_string())))?;
        }
        for item in &self.set {
            let (key, value) = item
                .split_once('=')
                .ok_or_else(|| CliError::config("expected section.key=value", Some(item)))?;
            base.set(key.trim(), value.trim())
                .map_err(|e| CliError::config(e.to_string(), Some(item)))?;
        }
        if let Some(seed) = self.seed {
            base.run.seed = seed;
        }
        base.validate().map_err(|e| CliError::config(e.to_string(), None))?;
        Ok(base)
    }
}

pub(crate) fn read_text(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| SpmmError::io(path, e).into())
}

pub(crate) fn write_out(path: &Path, contents: &str) -> CliResult<()> {
    spmm_nn::checkpoint::write_atomic(path, contents.as_bytes()).map_err(|e| SpmmError::io(path, e).into())
}

/// Writes the primary output to `out` or stdout; prints `summary` to
/// stdout only when the primary output went to a file.
pub(crate) fn emit(out: Option<&Path>, primary: &str, summary: Option<serde_json::Value>) -> CliResult<()> {
    match out {
        Some(path) => {
            write_out(path, primary)?;
            if let Some(s) = summary {
                println!("{s}");
            }
        }
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(primary.as_bytes())
                .and_then(|_| stdout.flush())
                .map_err(|e| CliError::runtime(format!("cannot write to stdout: {e}")))?;
        }
    }
    Ok(())
}
