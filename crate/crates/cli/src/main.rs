use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use seqmatch_cli::commands::{self, EvalTarget};
use seqmatch_cli::config::{self, ConfigError, Method};
use serde_json::json;

#[derive(Parser)]
#[command(name = "seqmatch", version, about = "Dataset distillation by sequential subset matching")]
struct Cli {
    /// JSON run config; missing keys take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; relative paths are rooted at $SEQMATCH_OUT when set.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override one config key, e.g. `--set seqmatch.k=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate or import the dataset and write the dataset store.
    GenData,
    /// Train the teacher trajectory pool.
    TrainTeacher,
    /// Distill a synthetic set.
    Distill {
        /// Overrides the config's `method`.
        #[arg(long, value_enum)]
        method: Option<MethodArg>,
    },
    /// Evaluate a synthetic set by staged training.
    Eval {
        #[arg(long, value_enum)]
        method: Option<MethodArg>,
        /// Train on the full real training set instead.
        #[arg(long, conflicts_with = "method")]
        real: bool,
    },
    /// Coupling and easy/hard diagnostics for every distilled set present.
    Diagnose,
    /// gen-data, train-teacher, distill (both methods), eval, diagnose.
    RunAll,
    /// Print the resolved config.
    ShowConfig,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum MethodArg {
    Seqmatch,
    Backbone,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Seqmatch => Method::Seqmatch,
            MethodArg::Backbone => Method::Backbone,
        }
    }
}

fn resolve(cli: &Cli) -> Result<config::RunConfig, ConfigError> {
    let mut sets = Vec::new();
    if let Some(seed) = cli.seed {
        sets.push(("seed".to_string(), json!(seed)));
    }
    if let Some(out) = &cli.out {
        sets.push(("out".to_string(), json!(out)));
    }
    for s in &cli.sets {
        sets.push(config::parse_set(s)?);
    }
    config::load_config(cli.config.as_deref(), &sets)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve(&cli)?;
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(ConfigError {
                path: "--jobs".into(),
                message: "must be positive".into(),
            }
            .into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global()?;
    }
    match cli.command {
        Command::GenData => commands::gen_data(cfg),
        Command::TrainTeacher => commands::train_teacher(cfg),
        Command::Distill { method } => {
            let m = method.map_or(cfg.method, Method::from);
            commands::distill(cfg, m)
        }
        Command::Eval { method, real } => {
            let target = if real {
                EvalTarget::Real
            } else {
                EvalTarget::Synthetic(method.map_or(cfg.method, Method::from))
            };
            commands::eval(cfg, target).map(|_| ())
        }
        Command::Diagnose => commands::diagnose(cfg).map(|_| ()),
        Command::RunAll => commands::run_all(cfg),
        Command::ShowConfig => {
            println!("{}", serde_json::to_string_pretty(&cfg)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let (code, kind) = seqmatch_cli::classify(&err);
            eprintln!("error: {err:#}");
            commands::emit(&json!({"event": "error", "code": code, "kind": kind, "message": format!("{err:#}")}));
            ExitCode::from(code as u8)
        }
    }
}
