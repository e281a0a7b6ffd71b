use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use btlab_cli::{
    default_out, eval_cmd, gen_data, print_json, replay_cmd, search_cmd, self_improve_cmd, sweep_cmd, train_cmd,
    CliError, CliResult, ExperimentConfig, Split,
};
use btlab_core::countdown::Problem;
use btlab_core::eval::{Method, SweepAxis};

#[derive(Parser)]
#[command(name = "btlab", version, about = "Self-backtracking experiments on the Countdown task")]
struct Cli {
    /// Seed applied to every stage (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON config with optional sections data, model, train, search, eval, improve.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (defaults to runs/<command>).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the training corpus and both test splits.
    GenData,
    /// Train a model on <data>/train.jsonl.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Continue from this checkpoint instead of a fresh model.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Evaluate a method on one or both test splits.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
        /// greedy, beam, dfs or self_backtrack (or a full descriptor such as "beam(4)").
        #[arg(long, default_value = "greedy")]
        method: String,
        #[arg(long, default_value = "both")]
        split: String,
        /// Backtracking rounds for self_backtrack.
        #[arg(long)]
        b: Option<usize>,
        /// Samples per expansion for self_backtrack.
        #[arg(long = "N", alias = "n")]
        n: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
        /// DFS budget; omitted means unlimited.
        #[arg(long)]
        budget: Option<u64>,
        /// Evaluate at most this many problems per split.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Run one self-backtracking search and write its audit trace.
    Search {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        target: u64,
        #[arg(long, num_args = 2..=5, required = true)]
        numbers: Vec<u64>,
        #[arg(long)]
        b: Option<usize>,
        #[arg(long = "N", alias = "n")]
        n: Option<usize>,
    },
    /// Expert iteration: search, keep verified paths, fine-tune, repeat.
    SelfImprove {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        rounds: Option<usize>,
    },
    /// Evaluate self_backtrack while varying one parameter.
    Sweep {
        /// n, b, temperature or ratio_back
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value = "seen")]
        split: String,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Re-verify audit traces; exits 0 only if every recomputation matches.
    ReplayTrace {
        /// A single audit.json or a traces-*.jsonl file.
        trace: PathBuf,
        /// Also re-run each search with this checkpoint and compare.
        #[arg(long)]
        model: Option<PathBuf>,
    },
}

fn config_err(msg: String) -> CliError {
    CliError::Config(anyhow::anyhow!(msg))
}

fn resolve_method(name: &str, b: Option<usize>, n: Option<usize>, width: Option<usize>, budget: Option<u64>, cfg: &ExperimentConfig) -> CliResult<Method> {
    Ok(match name {
        "greedy" => Method::Greedy,
        "beam" => Method::Beam { width: width.unwrap_or(cfg.eval.beam_width).max(1) },
        "dfs" => Method::Dfs { budget },
        "self_backtrack" => Method::SelfBacktrack { b: b.unwrap_or(cfg.search.b), n: n.unwrap_or(cfg.search.n) },
        other => other.parse().map_err(|e| config_err(format!("{e}")))?,
    })
}

fn run(cli: Cli) -> CliResult<()> {
    let mut cfg = ExperimentConfig::load(cli.config.as_deref())?.with_seed(cli.seed);
    cfg.validate()?;
    match cli.command {
        Command::GenData => gen_data(&cfg, &default_out(cli.out, "data")),
        Command::Train { data, init } => train_cmd(&cfg, &data, init.as_deref(), &default_out(cli.out, "train")),
        Command::Eval { data, model, method, split, b, n, width, budget, limit } => {
            if limit.is_some() {
                cfg.eval.limit = limit;
            }
            let method = resolve_method(&method, b, n, width, budget, &cfg)?;
            if let Method::SelfBacktrack { b, n } = method {
                cfg.search.b = b;
                cfg.search.n = n;
                cfg.search.validate().map_err(|e| CliError::Config(e.into()))?;
            }
            let splits = Split::parse_list(&split)?;
            let reports = eval_cmd(&cfg, model.as_deref(), &data, &splits, method, &default_out(cli.out, "eval"))?;
            for r in &reports {
                print_json(r)?;
            }
            Ok(())
        }
        Command::Search { model, target, numbers, b, n } => {
            cfg.search.b = b.unwrap_or(cfg.search.b);
            cfg.search.n = n.unwrap_or(cfg.search.n);
            let problem = Problem::new("cli", numbers, target);
            let trace = search_cmd(&cfg, &model, &problem, &default_out(cli.out, "search"))?;
            print_json(&serde_json::json!({
                "selection": trace.selection,
                "accounting": trace.accounting,
                "verdict": btlab_core::countdown::verify_path(&problem, &trace.selection.text).kind,
            }))
        }
        Command::SelfImprove { model, data, rounds } => {
            if let Some(r) = rounds {
                cfg.improve.rounds = r;
            }
            self_improve_cmd(&cfg, &model, &data, &default_out(cli.out, "self-improve"))
        }
        Command::Sweep { axis, values, data, model, split, limit } => {
            if limit.is_some() {
                cfg.eval.limit = limit;
            }
            let axis: SweepAxis = axis.parse().map_err(config_err)?;
            let split = match Split::parse_list(&split)?.as_slice() {
                [s] => *s,
                _ => return Err(config_err("sweep takes a single split".into())),
            };
            let rows = sweep_cmd(&cfg, axis, &values, model.as_deref(), &data, split, &default_out(cli.out, "sweep"))?;
            print_json(&rows)
        }
        Command::ReplayTrace { trace, model } => {
            let summary = replay_cmd(&trace, model.as_deref())?;
            print_json(&summary)?;
            if summary.issues.is_empty() {
                Ok(())
            } else {
                Err(CliError::Runtime(anyhow::anyhow!("{} replay mismatches", summary.issues.len())))
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
