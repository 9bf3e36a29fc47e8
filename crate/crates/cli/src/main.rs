//! `selftrain` command-line runner.
//!
//! Exit codes: 0 success, 1 internal error, 2 user or configuration error.
//! Errors are printed to stderr as a single JSON line.

mod commands;
mod settings;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use selftrain::eval::Pooling;

use settings::FlagOverrides;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Internal(String),
    #[error(transparent)]
    Core(#[from] selftrain::Error),
}

impl CliError {
    pub fn io(path: impl AsRef<Path>, e: std::io::Error) -> Self {
        CliError::Internal(format!("i/o error on {}: {e}", path.as_ref().display()))
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Internal(_) => "internal",
            CliError::Core(e) => core_kind(e),
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Internal(_) => 1,
            CliError::Core(e) => {
                if is_user_error(e) {
                    2
                } else {
                    1
                }
            }
        }
    }
}

fn core_kind(e: &selftrain::Error) -> &'static str {
    use selftrain::Error::*;
    match e {
        Config(_) => "config",
        Validation(_) => "validation",
        Ingest { .. } => "ingest",
        UnknownDataset { .. } => "unknown_dataset",
        Parse { .. } => "parse",
        UnmaskableClass(_) => "unmaskable_class",
        Transport(_) => "transport",
        Storage(_) => "storage",
        Consistency(_) => "consistency",
        Degenerate(_) => "degenerate",
        Locked { .. } => "locked",
        ResumeMismatch(_) => "resume_mismatch",
        Scoring { source, .. } => core_kind(source),
        Io { .. } => "io",
        Json(_) => "json",
    }
}

fn is_user_error(e: &selftrain::Error) -> bool {
    use selftrain::Error::*;
    match e {
        Config(_) | Validation(_) | Ingest { .. } | UnknownDataset { .. } | Parse { .. } | UnmaskableClass(_)
        | Locked { .. } | ResumeMismatch(_) => true,
        Io { source, .. } => matches!(
            source.kind(),
            std::io::ErrorKind::NotFound | std::io::ErrorKind::PermissionDenied
        ),
        Scoring { source, .. } => is_user_error(source),
        _ => false,
    }
}

#[derive(Debug, Parser)]
#[command(name = "selftrain", version, about = "Self-training for entailment-based zero-shot classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// JSON config file; flags below override its keys.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Dataset id (`dataset`).
    #[arg(long)]
    dataset: Option<String>,
    /// Hypothesis template with a `[]` slot (`template`).
    #[arg(long)]
    template: Option<String>,
    /// Contrast strategy: random, closest, furthest or all (`self_train.contrast_strategy`).
    #[arg(long)]
    strategy: Option<String>,
    /// Run seed (`self_train.seed`).
    #[arg(long)]
    seed: Option<u64>,
    /// Number of self-training iterations (`self_train.iterations`).
    #[arg(long)]
    iterations: Option<u32>,
    /// Fraction of the unlabeled pool taken per class (`self_train.per_class_fraction`).
    #[arg(long)]
    fraction: Option<f64>,
    /// Token masking on or off (`self_train.masking_enabled`).
    #[arg(long)]
    masking: Option<bool>,
    /// Override any config key: `--set self_train.fine_tune.learning_rate=1e-5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<settings::Settings, CliError> {
        let flags = FlagOverrides {
            dataset: self.dataset.clone(),
            template: self.template.clone(),
            strategy: self.strategy.clone(),
            seed: self.seed,
            iterations: self.iterations,
            fraction: self.fraction,
            masking: self.masking,
            set: self.set.clone(),
        };
        settings::resolve(self.config.as_deref(), &flags)
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PoolingArg {
    Pooled,
    PerDataset,
}

impl From<PoolingArg> for Pooling {
    fn from(p: PoolingArg) -> Self {
        match p {
            PoolingArg::Pooled => Pooling::Pooled,
            PoolingArg::PerDataset => Pooling::PerDataset,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Accuracy of the off-the-shelf model on the test set.
    EvalZeroShot {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory for manifest.json and report.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Iterative self-training into a run directory.
    SelfTrain {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        run_dir: PathBuf,
        /// Continue an interrupted run in `run_dir`.
        #[arg(long)]
        resume: bool,
    },
    /// Masked vs unmasked self-training over paired seeds.
    AblateMasking {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated seeds; defaults to the config seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long, value_enum, default_value = "pooled")]
        pooling: PoolingArg,
    },
    /// One round of fine-tuning on embedding-similarity pseudo-labels.
    HeuristicBaseline {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        run_dir: PathBuf,
    },
    /// Accuracy change of self-trained models on other tasks' test sets.
    CrossEval {
        #[command(flatten)]
        config: ConfigArgs,
        /// Completed self-training run directories.
        #[arg(long = "run", required = true)]
        runs: Vec<PathBuf>,
        /// Evaluation sets as `dataset_id=path`.
        #[arg(long = "evalset", required = true)]
        evalsets: Vec<String>,
        /// CSV output path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate results across seeds and compare two model tags.
    Report {
        /// report.json files (or JSON arrays of results).
        #[arg(long = "input", required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, requires = "control")]
        treatment: Option<String>,
        #[arg(long, requires = "treatment")]
        control: Option<String>,
        #[arg(long, value_enum, default_value = "pooled")]
        pooling: PoolingArg,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::EvalZeroShot { config, out } => {
            let settings = config.resolve()?;
            for r in commands::eval_zero_shot(&settings, &out)? {
                println!("{}\t{}\t{:.4}", r.dataset_id, r.model_tag, r.accuracy);
            }
        }
        Command::SelfTrain {
            config,
            run_dir,
            resume,
        } => {
            let settings = config.resolve()?;
            for r in commands::self_train(&settings, &run_dir, resume)? {
                println!("{}\t{}\t{:.4}", r.dataset_id, r.model_tag, r.accuracy);
            }
        }
        Command::AblateMasking {
            config,
            out,
            seeds,
            pooling,
        } => {
            let settings = config.resolve()?;
            let seeds = if seeds.is_empty() {
                vec![settings.self_train.seed]
            } else {
                seeds
            };
            let report = commands::ablate_masking(&settings, &out, &seeds, pooling.into())?;
            print!("{}", report.to_markdown());
        }
        Command::HeuristicBaseline { config, run_dir } => {
            let settings = config.resolve()?;
            for r in commands::heuristic_baseline(&settings, &run_dir)? {
                println!("{}\t{}\t{:.4}", r.dataset_id, r.model_tag, r.accuracy);
            }
        }
        Command::CrossEval {
            config,
            runs,
            evalsets,
            out,
        } => {
            let settings = config.resolve()?;
            let evalsets = evalsets
                .iter()
                .map(|a| commands::parse_evalset(a))
                .collect::<Result<Vec<_>, _>>()?;
            let matrix = commands::cross_eval(&settings, &runs, &evalsets, &out)?;
            print!("{}", matrix.to_csv());
        }
        Command::Report {
            inputs,
            treatment,
            control,
            pooling,
            out,
        } => {
            let comparison = treatment.as_deref().zip(control.as_deref());
            let report = commands::report(&inputs, comparison, pooling.into(), &out)?;
            print!("{}", report.to_markdown());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({
                "error": e.kind(),
                "message": e.to_string(),
                "exit_code": e.exit_code(),
            });
            eprintln!("{line}");
            ExitCode::from(e.exit_code())
        }
    }
}
