//! Commands behind the `btlab` binary: data generation, training,
//! evaluation, search, expert iteration, sweeps and trace replay.
//!
//! Every command writes its artifacts under an output directory. Artifacts
//! are byte-identical across runs with the same seed and config; wall-clock
//! timings go to separate `timing.json` files.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use serde::{Deserialize, Serialize};

use btlab_core::countdown::Problem;
use btlab_core::dataset::{
    build_corpus, read_jsonl, read_test_set, read_train_set, training_problems, write_corpus,
    write_jsonl, CorpusConfig, TestItem, TEST_NEW_FILE, TEST_SEEN_FILE, TRAIN_FILE,
};
use btlab_core::eval::{evaluate, sweep_search, write_sweep_csv, EvalConfig, EvalReport, Method, SweepAxis, SweepRow};
use btlab_core::improve::{expert_iteration, ImproveConfig};
use btlab_core::lm::{load_checkpoint, save_checkpoint, Checkpoint, Model, ModelConfig, Vocab};
use btlab_core::search::{replay_trace, self_backtrack_search, AuditTrace, SearchConfig};
use btlab_core::train::{train, write_metrics_csv, TrainConfig};

pub const CHECKPOINT_FILE: &str = "model.ckpt";

/// Failure classes that map to distinct exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, unreadable or invalid configuration (exit code 2).
    Config(anyhow::Error),
    /// Anything that fails while running (exit code 3).
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }

    /// One-line JSON diagnostic for stderr.
    pub fn to_json(&self) -> String {
        let (kind, err) = match self {
            CliError::Config(e) => ("config", e),
            CliError::Runtime(e) => ("runtime", e),
        };
        serde_json::json!({ "error": { "kind": kind, "message": format!("{err:#}") } }).to_string()
    }
}

pub type CliResult<T> = Result<T, CliError>;

trait Classify<T> {
    fn config(self) -> CliResult<T>;
    fn runtime(self) -> CliResult<T>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn config(self) -> CliResult<T> {
        self.map_err(|e| CliError::Config(e.into()))
    }
    fn runtime(self) -> CliResult<T> {
        self.map_err(|e| CliError::Runtime(e.into()))
    }
}

/// The JSON config file: one section per stage.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: CorpusConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub search: SearchConfig,
    pub eval: EvalConfig,
    pub improve: ImproveConfig,
}

impl ExperimentConfig {
    pub fn load(path: Option<&Path>) -> CliResult<ExperimentConfig> {
        let cfg = match path {
            None => ExperimentConfig::default(),
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display())).config()?;
                serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display())).config()?
            }
        };
        Ok(cfg)
    }

    /// Applies a global seed to every stage.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.data.seed = s;
            self.model.seed = s;
            self.train.seed = s;
            self.search.seed = s;
            self.eval.seed = s;
            self.improve.seed = s;
        }
        self
    }

    pub fn validate(&self) -> CliResult<()> {
        self.data.validate().config()?;
        self.model.validate().config()?;
        self.train.validate().config()?;
        self.search.validate().config()?;
        Ok(())
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).runtime()?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display())).runtime()
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display())).runtime()
}

fn write_timing(dir: &Path, what: &str, start: Instant) -> CliResult<()> {
    write_json(&dir.join("timing.json"), &serde_json::json!({ what: start.elapsed().as_secs_f64() }))
}

pub fn load_model(path: &Path) -> CliResult<Checkpoint> {
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display())).config()
}

/// `gen-data`: writes the training set, both test splits and a manifest.
pub fn gen_data(cfg: &ExperimentConfig, out: &Path) -> CliResult<()> {
    cfg.data.validate().config()?;
    ensure_dir(out)?;
    let corpus = build_corpus(&cfg.data).runtime()?;
    write_corpus(&corpus, out).runtime()?;
    eprintln!(
        "wrote {} training samples, {} seen-target and {} new-target test problems to {}",
        corpus.train.len(),
        corpus.test_seen.len(),
        corpus.test_new.len(),
        out.display()
    );
    Ok(())
}

/// `train`: fits a model on `data/train.jsonl`, optionally warm-starting.
pub fn train_cmd(cfg: &ExperimentConfig, data: &Path, init: Option<&Path>, out: &Path) -> CliResult<()> {
    cfg.train.validate().config()?;
    let samples = read_train_set(&data.join(TRAIN_FILE)).context("reading training set").config()?;
    let (mut model, vocab) = match init {
        Some(p) => {
            let ck = load_model(p)?;
            (ck.model, ck.vocab)
        }
        None => {
            let vocab = Vocab::default();
            let mc = ModelConfig { vocab_size: vocab.len(), ..cfg.model.clone() };
            (Model::<f32>::new(mc).config()?, vocab)
        }
    };
    ensure_dir(out)?;
    let start = Instant::now();
    let every = 100;
    let report = train(&mut model, &vocab, &samples, &cfg.train, |m| {
        if m.step % every == 0 {
            eprintln!("step {} epoch {} loss {:.4} lr {:.2e}", m.step, m.epoch, m.loss, m.lr);
        }
    })
    .runtime()?;
    let meta = serde_json::json!({ "train": cfg.train, "n_samples": samples.len(), "epochs": report.epochs });
    save_checkpoint(&out.join(CHECKPOINT_FILE), &Checkpoint { model, vocab, meta }).runtime()?;
    write_metrics_csv(&out.join("metrics.csv"), &report).runtime()?;
    let summary = serde_json::json!({
        "averaging": report.averaging,
        "n_train": report.n_train,
        "n_holdout": report.n_holdout,
        "total_steps": report.total_steps,
        "epochs": report.epochs,
    });
    write_json(&out.join("train_report.json"), &summary)?;
    write_timing(out, "train_secs", start)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Seen,
    New,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Seen => "seen",
            Split::New => "new",
        }
    }

    pub fn file(self) -> &'static str {
        match self {
            Split::Seen => TEST_SEEN_FILE,
            Split::New => TEST_NEW_FILE,
        }
    }

    pub fn parse_list(s: &str) -> CliResult<Vec<Split>> {
        match s {
            "seen" => Ok(vec![Split::Seen]),
            "new" => Ok(vec![Split::New]),
            "both" => Ok(vec![Split::Seen, Split::New]),
            _ => Err(CliError::Config(anyhow::anyhow!("unknown split {s:?} (expected seen, new or both)"))),
        }
    }
}

pub fn read_split(data: &Path, split: Split) -> CliResult<Vec<TestItem>> {
    let path = data.join(split.file());
    read_test_set(&path).with_context(|| format!("reading {}", path.display())).config()
}

/// File-name friendly method descriptor.
pub fn method_slug(m: Method) -> String {
    m.to_string().replace(['(', ')'], "").replace(',', "_")
}

/// `eval`: one report per split, plus audit traces for search methods.
pub fn eval_cmd(
    cfg: &ExperimentConfig,
    model: Option<&Path>,
    data: &Path,
    splits: &[Split],
    method: Method,
    out: &Path,
) -> CliResult<Vec<EvalReport>> {
    cfg.search.validate().config()?;
    let ck = model.map(load_model).transpose()?;
    if method.needs_model() && ck.is_none() {
        return Err(CliError::Config(anyhow::anyhow!("method {method} needs --model")));
    }
    let vocab = ck.as_ref().map(|c| c.vocab.clone()).unwrap_or_default();
    ensure_dir(out)?;
    let mut reports = Vec::new();
    for &split in splits {
        let items = read_split(data, split)?;
        let mut traces: Vec<AuditTrace> = Vec::new();
        let report = evaluate(ck.as_ref().map(|c| &c.model), &vocab, split.name(), &items, method, &cfg.eval, &cfg.search, |_, _, t| {
            if let Some(t) = t {
                traces.push(t.clone());
            }
        })
        .runtime()?;
        let stem = format!("{}-{}", split.name(), method_slug(method));
        let mut artifact = report.clone();
        artifact.wall_time_secs = None;
        write_json(&out.join(format!("report-{stem}.json")), &artifact)?;
        if !traces.is_empty() {
            write_jsonl(&out.join(format!("traces-{stem}.jsonl")), &traces).runtime()?;
        }
        write_json(&out.join(format!("timing-{stem}.json")), &serde_json::json!({ "wall_time_secs": report.wall_time_secs }))?;
        reports.push(report);
    }
    Ok(reports)
}

/// `search`: runs one search and writes `audit.json`.
pub fn search_cmd(cfg: &ExperimentConfig, model: &Path, problem: &Problem, out: &Path) -> CliResult<AuditTrace> {
    cfg.search.validate().config()?;
    if !problem.is_well_formed() {
        return Err(CliError::Config(anyhow::anyhow!("problem needs 2 to 5 positive numbers and a positive target")));
    }
    let ck = load_model(model)?;
    ensure_dir(out)?;
    let trace = self_backtrack_search(&ck.model, &ck.vocab, problem, &cfg.search).runtime()?;
    write_json(&out.join("audit.json"), &trace)?;
    Ok(trace)
}

/// Reads either a single trace (`.json`) or one trace per line (`.jsonl`).
pub fn read_traces(path: &Path) -> CliResult<Vec<AuditTrace>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display())).config()?;
    if let Ok(one) = serde_json::from_str::<AuditTrace>(&text) {
        return Ok(vec![one]);
    }
    read_jsonl(path).with_context(|| format!("parsing traces in {}", path.display())).config()
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ReplaySummary {
    pub traces: usize,
    pub candidates: usize,
    pub issues: Vec<String>,
    /// Traces that were re-run with the model and matched exactly.
    pub rerun_matches: Option<usize>,
}

/// `replay-trace`: recomputes partitions, rollbacks, verdicts, budget and
/// selection from each trace; with a model, also re-runs the search and
/// requires an identical trace.
pub fn replay_cmd(path: &Path, model: Option<&Path>) -> CliResult<ReplaySummary> {
    let traces = read_traces(path)?;
    let ck = model.map(load_model).transpose()?;
    let vocab = ck.as_ref().map(|c| c.vocab.clone()).unwrap_or_default();
    let mut s = ReplaySummary { traces: traces.len(), ..ReplaySummary::default() };
    let mut matches = 0;
    for (i, t) in traces.iter().enumerate() {
        s.candidates += t.candidates.len();
        s.issues.extend(replay_trace(t, &vocab).into_iter().map(|x| format!("trace {i}: {}", x.what)));
        if let Some(ck) = &ck {
            let again = self_backtrack_search(&ck.model, &ck.vocab, &t.problem, &t.config).runtime()?;
            if &again == t {
                matches += 1;
            } else {
                s.issues.push(format!("trace {i}: re-running the search gives a different trace"));
            }
        }
    }
    if ck.is_some() {
        s.rerun_matches = Some(matches);
    }
    Ok(s)
}

/// `self-improve`: expert iteration from a checkpoint.
pub fn self_improve_cmd(cfg: &ExperimentConfig, model: &Path, data: &Path, out: &Path) -> CliResult<()> {
    cfg.search.validate().config()?;
    let ck = load_model(model)?;
    let eval_items = read_split(data, Split::Seen)?;
    let train_set = read_train_set(&data.join(TRAIN_FILE)).context("reading training set").config()?;
    let pool = training_problems(&train_set, cfg.improve.n_problems);
    ensure_dir(out)?;
    let start = Instant::now();
    let (_, reports) = expert_iteration(ck.model, &ck.vocab, &pool, &eval_items, &cfg.improve, &cfg.search, &cfg.eval, Some(out), |r| {
        eprintln!(
            "round {}: kept {}/{}  slow {:.3}  fast {:.3}",
            r.round, r.n_correct_kept, r.n_generated, r.slow_accuracy, r.fast_accuracy
        );
    })
    .runtime()?;
    write_json(&out.join("reports.json"), &reports)?;
    write_timing(out, "self_improve_secs", start)?;
    Ok(())
}

/// `sweep`: one evaluation per value, written as `sweep.csv` plus reports.
///
/// `n`, `b` and `temperature` reuse one checkpoint; `ratio_back` rebuilds the
/// corpus and retrains a model per value.
pub fn sweep_cmd(
    cfg: &ExperimentConfig,
    axis: SweepAxis,
    values: &[f64],
    model: Option<&Path>,
    data: &Path,
    split: Split,
    out: &Path,
) -> CliResult<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(CliError::Config(anyhow::anyhow!("sweep needs at least one value")));
    }
    ensure_dir(out)?;
    let mut rows = Vec::new();
    if axis == SweepAxis::RatioBack {
        for &v in values {
            let mut c = cfg.clone();
            c.data.ratio_back = v;
            let dir = out.join(format!("ratio-{v}"));
            gen_data(&c, &dir.join("data"))?;
            train_cmd(&c, &dir.join("data"), None, &dir.join("model"))?;
            let method = Method::SelfBacktrack { b: c.search.b, n: c.search.n };
            let reports = eval_cmd(&c, Some(&dir.join("model").join(CHECKPOINT_FILE)), &dir.join("data"), &[split], method, &dir)?;
            rows.push(SweepRow::new(axis, v, &reports[0]));
        }
    } else {
        let ck = load_model(model.ok_or_else(|| CliError::Config(anyhow::anyhow!("sweep over {axis:?} needs --model")))?)?;
        let items = read_split(data, split)?;
        for (row, mut report) in
            sweep_search(&ck.model, &ck.vocab, split.name(), &items, axis, values, &cfg.eval, &cfg.search).runtime()?
        {
            report.wall_time_secs = None;
            write_json(&out.join(format!("report-{}-{}.json", split.name(), row.value)), &report)?;
            rows.push(row);
        }
    }
    write_sweep_csv(&out.join("sweep.csv"), &rows).runtime()?;
    Ok(rows)
}

/// Prints a value as one JSON document on stdout.
pub fn print_json<T: Serialize>(value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).runtime()?;
    let mut out = std::io::stdout().lock();
    writeln!(out, "{text}").runtime()
}

pub fn default_out(out: Option<PathBuf>, name: &str) -> PathBuf {
    out.unwrap_or_else(|| PathBuf::from("runs").join(name))
}
