//! The `softmix` command line: world generation, LM pretraining, prompt
//! training, evaluation, significance comparison and visualization.
//!
//! Every subcommand is deterministic given its config and seed, and every file
//! it writes carries a `seed=... config_sha256=...` header line.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::RunConfig;

/// Errors surfaced to the process exit status.
#[derive(Debug)]
pub enum CliError {
    /// Bad arguments, bad config values, missing inputs. Exit 2.
    Usage(String),
    /// A file did not parse. Exit 3.
    Format(String),
    /// Training or evaluation produced non-finite numbers. Exit 4.
    Numerical(String),
    /// Anything else. Exit 1.
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Format(_) => 3,
            CliError::Numerical(_) => 4,
            CliError::Other(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Format(m) => write!(f, "format error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical error: {m}"),
            CliError::Other(m) => write!(f, "error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<softmix::Error> for CliError {
    fn from(e: softmix::Error) -> Self {
        use softmix::Error as E;
        let msg = e.to_string();
        match e {
            E::Input(_) => CliError::Usage(msg),
            E::Format { .. } => CliError::Format(msg),
            E::Numerical(_) => CliError::Numerical(msg),
            E::Io { ref source, .. } if source.kind() == std::io::ErrorKind::NotFound => CliError::Usage(msg),
            E::Io { .. } | E::Internal(_) => CliError::Other(msg),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "softmix", version, about = "Mixtures of soft cloze prompts over a toy masked LM")]
pub struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output root directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic world, its corpus and prompt files.
    World,
    /// Pretrain the masked LM on the world corpus.
    Pretrain,
    /// Build splits and train one mixture per relation for each tune mode.
    Train {
        /// single, mined, paraphrase, per-example or random.
        #[arg(long)]
        init: Option<String>,
        /// Comma-separated list; each entry produces its own run.
        #[arg(long, value_delimiter = ',')]
        tune_mode: Vec<String>,
        /// static or data_dependent.
        #[arg(long)]
        weighting: Option<String>,
        /// adam or em.
        #[arg(long)]
        optimizer: Option<String>,
        /// random or distinct_y.
        #[arg(long)]
        regime: Option<String>,
        #[arg(long)]
        max_epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Rank the gold answers of a split part under a trained run.
    Eval {
        /// Run directory, or a run name under the runs directory.
        run: PathBuf,
        /// train, dev or test.
        #[arg(long)]
        part: Option<String>,
    },
    /// Sign test and paired permutation test between two evaluated runs.
    Compare {
        run_a: PathBuf,
        run_b: PathBuf,
        #[arg(long)]
        part: Option<String>,
    },
    /// Nearest-word readout of every prompt in a run.
    Viz { run: PathBuf },
}

/// Resolves the effective config: file (if any), then flags.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    match &cli.command {
        Command::Train {
            init,
            tune_mode,
            weighting,
            optimizer,
            regime,
            max_epochs,
            lr,
        } => {
            if let Some(v) = init {
                cfg.train.init = v.clone();
            }
            if !tune_mode.is_empty() {
                cfg.train.tune_mode = config::OneOrMany::Many(tune_mode.clone());
            }
            if let Some(v) = weighting {
                cfg.train.weighting = v.clone();
            }
            if let Some(v) = optimizer {
                cfg.train.optimizer = v.clone();
            }
            if let Some(v) = regime {
                cfg.data.regime = v.clone();
            }
            if let Some(v) = max_epochs {
                cfg.train.max_epochs = *v;
            }
            if let Some(v) = lr {
                cfg.train.lr = *v;
            }
        }
        Command::Eval { part: Some(p), .. } | Command::Compare { part: Some(p), .. } => cfg.eval.part = p.clone(),
        _ => {}
    }
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = resolve_config(cli)?;
    match &cli.command {
        Command::World => commands::cmd_world(&cfg),
        Command::Pretrain => commands::cmd_pretrain(&cfg).map(|_| ()),
        Command::Train { .. } => commands::cmd_train(&cfg).map(|_| ()),
        Command::Eval { run, .. } => commands::cmd_eval(&cfg, run).map(|_| ()),
        Command::Compare { run_a, run_b, .. } => commands::cmd_compare(&cfg, run_a, run_b).map(|_| ()),
        Command::Viz { run } => commands::cmd_viz(&cfg, run),
    }
}

/// Parses `args` (including the program name) and runs; returns the exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("softmix: {e}");
            e.exit_code()
        }
    }
}
