//! Command-line front end, run configuration and file formats.

pub mod commands;
pub mod config;
pub mod formats;
pub mod model;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use commands::ScoreInput;
pub use config::RunConfig;
pub use model::SavedModel;

use crate::error::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "enkt", version, about = "Multi-enrollment speaker verification toolkit")]
pub struct Cli {
    /// Flat `key = value` config file; unset keys keep their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; also the default location of every input.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    /// Extra `key=value` override, applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate train/eval feature corpora and a trial list.
    GenData,
    /// Pretrain the speaker encoder on the training corpus.
    Pretrain {
        #[arg(long)]
        train: Option<PathBuf>,
    },
    /// Train the configured back-end on top of the pretrained encoder.
    Finetune {
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        encoder: Option<PathBuf>,
    },
    /// Score a trial list.
    Score(ScoreArgs),
    /// EER, minDCF and the per-enrollment-count breakdown of a score file.
    Eval {
        #[arg(long)]
        scores: Option<PathBuf>,
        #[arg(long)]
        trials: Option<PathBuf>,
    },
    /// DET operating points of a score file as CSV.
    Det {
        #[arg(long)]
        scores: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub trials: Option<PathBuf>,
    /// Precomputed embeddings (EMB1) instead of features.
    #[arg(long, conflicts_with = "features")]
    pub embeddings: Option<PathBuf>,
    /// Feature corpus (FEA1); defaults to the eval corpus in the output directory.
    #[arg(long)]
    pub features: Option<PathBuf>,
}

/// Config file, then `--set` overrides, then `--seed`.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = cli.seed {
        cfg.set("seed", &s.to_string())?;
    }
    Ok(cfg)
}

pub fn execute(cli: &Cli, cfg: &RunConfig) -> Result<()> {
    let out = &cli.out;
    let or = |p: &Option<PathBuf>, name: &str| p.clone().unwrap_or_else(|| out.join(name));
    use commands as c;
    match &cli.command {
        Command::GenData => c::gen_data(cfg, out),
        Command::Pretrain { train } => c::pretrain(cfg, &or(train, c::TRAIN_FEATURES), out),
        Command::Finetune { train, encoder } => {
            c::finetune(cfg, &or(train, c::TRAIN_FEATURES), &or(encoder, c::ENCODER), out)
        }
        Command::Score(a) => {
            let input = match &a.embeddings {
                Some(p) => ScoreInput::Embeddings(p.clone()),
                None => ScoreInput::Features(or(&a.features, c::EVAL_FEATURES)),
            };
            c::score(cfg, &or(&a.model, c::MODEL), &or(&a.trials, c::TRIALS), &input, out)
        }
        Command::Eval { scores, trials } => c::eval(cfg, &or(scores, c::SCORES), &or(trials, c::TRIALS), out),
        Command::Det { scores } => c::det(&or(scores, c::SCORES), out),
    }
}

/// Parses `args`, runs the command and returns the process exit status:
/// 0 success, 1 usage or configuration, 2 data, 3 numeric failure.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let cfg = match resolve_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("enkt: {e}");
            return 1;
        }
    };
    match execute(&cli, &cfg) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("enkt: {e}");
            e.exit_code()
        }
    }
}
