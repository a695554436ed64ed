mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use fatigue_core::ictransformer::TransformerConfig;

use crate::config::Config;
use crate::error::CliError;

#[derive(Parser, Debug)]
#[command(name = "fatigue", version, about = "Few-shot fatigue prediction from speech embeddings")]
struct Cli {
    /// Seed for the cohort generator and the evaluation plans.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 1 runs everything sequentially.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output file or directory (default: under FATIGUE_OUT_DIR).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Transformer size preset: `desk` or `large`.
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Print the effective configuration as TOML and exit.
    #[arg(long, global = true)]
    print_config: bool,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic cohort as JSONL.
    Gen {
        /// `default` or a TOML/JSON cohort spec file.
        #[arg(long, default_value = "default")]
        spec: String,
    },
    /// Train one model family on one fold and save the artifact.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: String,
        #[arg(long)]
        task: Option<String>,
        #[arg(long, default_value_t = 0)]
        fold: usize,
    },
    /// Run the full protocol and write metric tables.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        task: Option<String>,
        /// Comma-separated model list, e.g. `cs,dist,tr`.
        #[arg(long)]
        models: Option<String>,
        #[arg(long, value_enum)]
        summary: Option<SummaryKind>,
    },
    /// Metric-by-support-size curves with confidence intervals.
    Curve {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        models: Option<String>,
    },
    /// Sequence-regime control for the in-context transformer.
    Nullcheck {
        /// Cohort file; a fresh cohort is generated when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Speakers in the generated cohort.
        #[arg(long, default_value_t = 500)]
        speakers: usize,
    },
    /// Per-group AUC and confound audit.
    Fairness {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        task: Option<String>,
    },
    /// Generate, train, evaluate and audit end to end, with a digest manifest.
    Reproduce,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SummaryKind {
    /// Pool support sizes 6 and 7.
    T67,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fatigue: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let base = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    let mut config = base.with_seed(cli.seed);
    if let Some(name) = &cli.preset {
        let p = TransformerConfig::preset(name)
            .ok_or_else(|| CliError::Usage(format!("unknown preset '{name}' (expected desk or large)")))?;
        config.run.transformer = p.clone();
        config.null.transformer = TransformerConfig {
            steps: config.null.transformer.steps,
            eval_every: config.null.transformer.eval_every,
            ..p
        };
    }
    if cli.print_config {
        print!("{}", config.to_toml());
        return Ok(());
    }
    let exec = commands::exec_for(cli.jobs)?;
    let ctx = commands::Context { config, exec, seed: cli.seed, out: cli.out };
    match cli.command {
        None => Err(CliError::Usage("no command given (try --help)".into())),
        Some(Command::Gen { spec }) => commands::gen(&ctx, &spec),
        Some(Command::Train { data, model, task, fold }) => commands::train(&ctx, &data, &model, task.as_deref(), fold),
        Some(Command::Eval { data, task, models, summary }) => {
            commands::eval(&ctx, &data, task.as_deref(), models.as_deref(), summary.is_some())
        }
        Some(Command::Curve { data, task, models }) => commands::curve(&ctx, &data, task.as_deref(), models.as_deref()),
        Some(Command::Nullcheck { data, speakers }) => commands::nullcheck(&ctx, data.as_deref(), speakers),
        Some(Command::Fairness { data, model, task }) => {
            commands::fairness(&ctx, &data, model.as_deref(), task.as_deref())
        }
        Some(Command::Reproduce) => commands::reproduce(&ctx),
    }
}
