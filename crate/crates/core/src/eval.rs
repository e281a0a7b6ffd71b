//! Evaluation with the four-way error taxonomy, plus parameter sweeps.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::countdown::{dfs_with_budget, render_completion, verify_path, VerdictKind, UNLIMITED_BUDGET};
use crate::dataset::{RenderedSample, SampleKind, TestItem, BACKTRACK_TEXT};
use crate::lm::{beam_search, encode_prompt, greedy, LmError, Model, TokenId, Vocab, BACKTRACK, BOS, EOS};
use crate::rng::{domain, mix};
use crate::search::{self_backtrack_search, AuditTrace, SearchConfig, SearchError};

pub const REPORT_SCHEMA: &str = "btlab-eval-v1";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("test set is empty")]
    EmptyTestSet,
    #[error("method {0} needs a model")]
    ModelRequired(String),
    #[error("cannot parse method {0:?}")]
    BadMethod(String),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Search(#[from] SearchError),
}

/// How an answer is produced for each problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Greedy,
    Beam { width: usize },
    /// Symbolic depth-first search; `None` means unlimited budget.
    Dfs { budget: Option<u64> },
    SelfBacktrack { b: usize, n: usize },
}

impl Method {
    pub fn needs_model(&self) -> bool {
        !matches!(self, Method::Dfs { .. })
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Greedy => write!(f, "greedy"),
            Method::Beam { width } => write!(f, "beam({width})"),
            Method::Dfs { budget: None } => write!(f, "dfs(inf)"),
            Method::Dfs { budget: Some(b) } => write!(f, "dfs({b})"),
            Method::SelfBacktrack { b, n } => write!(f, "self_backtrack({b},{n})"),
        }
    }
}

impl FromStr for Method {
    type Err = EvalError;

    /// Parses the descriptors produced by `Display`.
    fn from_str(s: &str) -> Result<Method, EvalError> {
        let bad = || EvalError::BadMethod(s.to_string());
        let s = s.trim();
        if s == "greedy" {
            return Ok(Method::Greedy);
        }
        let (name, args) = s.strip_suffix(')').and_then(|x| x.split_once('(')).ok_or_else(bad)?;
        let args: Vec<&str> = args.split(',').map(str::trim).collect();
        let num = |a: &str| a.parse::<usize>().map_err(|_| bad());
        match (name, args.as_slice()) {
            ("beam", [w]) => Ok(Method::Beam { width: num(w)?.max(1) }),
            ("dfs", ["inf"]) => Ok(Method::Dfs { budget: None }),
            ("dfs", [b]) => Ok(Method::Dfs { budget: Some(num(b)? as u64) }),
            ("self_backtrack", [b, n]) => Ok(Method::SelfBacktrack { b: num(b)?, n: num(n)? }),
            _ => Err(bad()),
        }
    }
}

impl Serialize for Method {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Method, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Token cap for greedy and beam answers.
    pub max_new: usize,
    pub beam_width: usize,
    /// Evaluate only the first `limit` problems of each split.
    pub limit: Option<usize>,
    /// Base seed; each problem's search gets its own derived seed.
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { max_new: 96, beam_width: 16, limit: Some(1000), seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Answer {
    pub id: String,
    pub text: String,
    pub verdict: VerdictKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema: String,
    pub split: String,
    pub method: Method,
    pub accuracy: f64,
    pub n_problems: usize,
    pub n_correct: usize,
    /// Fraction of problems per error kind; always all four keys.
    pub error_histogram: BTreeMap<String, f64>,
    pub error_counts: BTreeMap<String, usize>,
    /// Wall-clock seconds; kept out of persisted artifacts so they stay
    /// byte-identical across runs.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wall_time_secs: Option<f64>,
    pub config: serde_json::Value,
    pub answers: Vec<Answer>,
}

impl EvalReport {
    /// Rebuilds the aggregate numbers from `answers`.
    pub fn from_answers(split: &str, method: Method, config: serde_json::Value, answers: Vec<Answer>) -> EvalReport {
        let n = answers.len();
        let n_correct = answers.iter().filter(|a| a.verdict == VerdictKind::Correct).count();
        let mut error_counts = BTreeMap::new();
        let mut error_histogram = BTreeMap::new();
        for kind in VerdictKind::ERRORS {
            let c = answers.iter().filter(|a| a.verdict == kind).count();
            error_counts.insert(kind.as_str().to_string(), c);
            error_histogram.insert(kind.as_str().to_string(), c as f64 / n.max(1) as f64);
        }
        EvalReport {
            schema: REPORT_SCHEMA.into(),
            split: split.into(),
            method,
            accuracy: n_correct as f64 / n.max(1) as f64,
            n_problems: n,
            n_correct,
            error_histogram,
            error_counts,
            wall_time_secs: None,
            config,
            answers,
        }
    }

    /// Re-verifies every persisted answer and checks the aggregates.
    pub fn audit(&self, items: &[TestItem]) -> Result<(), String> {
        if items.len() != self.answers.len() {
            return Err(format!("{} answers for {} problems", self.answers.len(), items.len()));
        }
        for (a, item) in self.answers.iter().zip(items) {
            if a.id != item.id {
                return Err(format!("answer {} does not belong to problem {}", a.id, item.id));
            }
            let v = verify_path(&item.problem(), &a.text).kind;
            if v != a.verdict {
                return Err(format!("answer {} re-verifies as {:?}, recorded {:?}", a.id, v, a.verdict));
            }
        }
        let rebuilt = EvalReport::from_answers(&self.split, self.method, self.config.clone(), self.answers.clone());
        if rebuilt.n_correct != self.n_correct || rebuilt.error_counts != self.error_counts {
            return Err("aggregates do not match the answers".into());
        }
        let total = self.accuracy + self.error_histogram.values().sum::<f64>();
        if (total - 1.0).abs() > 1e-9 {
            return Err(format!("accuracy and error fractions sum to {total}"));
        }
        Ok(())
    }
}

fn problem_seed(base: u64, index: usize) -> u64 {
    mix(base, &[domain::EVAL, index as u64])
}

/// Produces one answer text for `item` with `method`; search methods also
/// return their audit trace.
pub fn answer(
    model: Option<&Model<f32>>,
    vocab: &Vocab,
    item: &TestItem,
    index: usize,
    method: Method,
    cfg: &EvalConfig,
    search: &SearchConfig,
) -> Result<(String, Option<AuditTrace>), EvalError> {
    let problem = item.problem();
    let need = || model.ok_or_else(|| EvalError::ModelRequired(method.to_string()));
    let stop = [EOS, BACKTRACK];
    match method {
        Method::Dfs { budget } => {
            let text = dfs_with_budget(&problem, budget.unwrap_or(UNLIMITED_BUDGET))
                .map(|p| render_completion(&problem, &p))
                .unwrap_or_default();
            Ok((text, None))
        }
        Method::Greedy => {
            let ids = encode_prompt(vocab, &item.prompt)?;
            let g = greedy(need()?, &ids, cfg.max_new, &stop)?;
            Ok((vocab.decode(&g.ids), None))
        }
        Method::Beam { width } => {
            let ids = encode_prompt(vocab, &item.prompt)?;
            let g = beam_search(need()?, &ids, width, cfg.max_new, &stop)?;
            Ok((vocab.decode(&g.ids), None))
        }
        Method::SelfBacktrack { b, n } => {
            let sc = SearchConfig { n, b, seed: problem_seed(cfg.seed, index), ..search.clone() };
            let trace = self_backtrack_search(need()?, vocab, &problem, &sc)?;
            Ok((trace.selection.text.clone(), Some(trace)))
        }
    }
}

/// Evaluates `method` on `items` (truncated to `cfg.limit`).
///
/// `on_item` sees every answer and, for search methods, the audit trace.
pub fn evaluate(
    model: Option<&Model<f32>>,
    vocab: &Vocab,
    split: &str,
    items: &[TestItem],
    method: Method,
    cfg: &EvalConfig,
    search: &SearchConfig,
    mut on_item: impl FnMut(usize, &Answer, Option<&AuditTrace>),
) -> Result<EvalReport, EvalError> {
    let items = &items[..cfg.limit.unwrap_or(items.len()).min(items.len())];
    if items.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    if method.needs_model() && model.is_none() {
        return Err(EvalError::ModelRequired(method.to_string()));
    }
    let start = Instant::now();
    let mut answers = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        let (text, trace) = answer(model, vocab, item, i, method, cfg, search)?;
        let verdict = verify_path(&item.problem(), &text).kind;
        let a = Answer { id: item.id.clone(), text, verdict };
        on_item(i, &a, trace.as_ref());
        answers.push(a);
    }
    let snapshot = match method {
        Method::SelfBacktrack { .. } => serde_json::json!({ "eval": cfg, "search": search }),
        _ => serde_json::json!({ "eval": cfg }),
    };
    let mut report = EvalReport::from_answers(split, method, snapshot, answers);
    report.wall_time_secs = Some(start.elapsed().as_secs_f64());
    Ok(report)
}

/// Fraction of backtrack samples whose top-1 next token after the erroneous
/// step is `<backtrack>`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TriggerRate {
    pub n: usize,
    pub hits: usize,
    pub rate: f64,
}

pub fn backtrack_trigger_rate(model: &Model<f32>, vocab: &Vocab, samples: &[RenderedSample]) -> Result<TriggerRate, LmError> {
    let mut contexts = Vec::new();
    for s in samples.iter().filter(|s| s.kind == SampleKind::Backtrack) {
        let pre = s.completion.strip_suffix(BACKTRACK_TEXT).unwrap_or(&s.completion);
        let mut ids = vec![BOS];
        ids.extend(vocab.encode(&s.prompt)?);
        ids.extend(vocab.encode(pre)?);
        contexts.push(ids);
    }
    let v = model.config.vocab_size;
    let mut hits = 0;
    for chunk in contexts.chunks(32) {
        let refs: Vec<&[TokenId]> = chunk.iter().map(Vec::as_slice).collect();
        let (logits, tape) = model.forward::<crate::rng::Rng>(&refs, None)?;
        for &(start, len) in tape.seqs() {
            let row = &logits[(start + len - 1) * v..(start + len) * v];
            let top = (0..v).fold(0, |best, i| if row[i] > row[best] { i } else { best });
            if top == BACKTRACK as usize {
                hits += 1;
            }
        }
    }
    let n = contexts.len();
    Ok(TriggerRate { n, hits, rate: hits as f64 / n.max(1) as f64 })
}

/// Search parameter that a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    N,
    B,
    Temperature,
    RatioBack,
}

impl FromStr for SweepAxis {
    type Err = String;
    fn from_str(s: &str) -> Result<SweepAxis, String> {
        match s.to_ascii_lowercase().as_str() {
            "n" => Ok(SweepAxis::N),
            "b" => Ok(SweepAxis::B),
            "temperature" => Ok(SweepAxis::Temperature),
            "ratio_back" => Ok(SweepAxis::RatioBack),
            _ => Err(format!("unknown sweep axis {s:?} (expected n, b, temperature or ratio_back)")),
        }
    }
}

/// One row of a sweep CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub value: f64,
    pub split: String,
    pub method: String,
    pub n_problems: usize,
    pub accuracy: f64,
    pub not_reached_target: f64,
    pub invalid_step_format: f64,
    pub incorrect_result_in_step: f64,
    pub unknown_numbers_in_step: f64,
}

impl SweepRow {
    pub fn new(axis: SweepAxis, value: f64, r: &EvalReport) -> SweepRow {
        let h = |k: VerdictKind| r.error_histogram[k.as_str()];
        SweepRow {
            axis,
            value,
            split: r.split.clone(),
            method: r.method.to_string(),
            n_problems: r.n_problems,
            accuracy: r.accuracy,
            not_reached_target: h(VerdictKind::NotReachedTarget),
            invalid_step_format: h(VerdictKind::InvalidStepFormat),
            incorrect_result_in_step: h(VerdictKind::IncorrectResultInStep),
            unknown_numbers_in_step: h(VerdictKind::UnknownNumbersInStep),
        }
    }
}

/// Sweeps a search parameter (`n`, `b` or `temperature`) over one split.
/// `ratio_back` needs retraining and is driven by the pipeline instead.
#[allow(clippy::too_many_arguments)]
pub fn sweep_search(
    model: &Model<f32>,
    vocab: &Vocab,
    split: &str,
    items: &[TestItem],
    axis: SweepAxis,
    values: &[f64],
    cfg: &EvalConfig,
    base: &SearchConfig,
) -> Result<Vec<(SweepRow, EvalReport)>, EvalError> {
    let mut rows = Vec::with_capacity(values.len());
    for &value in values {
        let mut sc = base.clone();
        match axis {
            SweepAxis::N => sc.n = value as usize,
            SweepAxis::B => sc.b = value as usize,
            SweepAxis::Temperature => sc.temperature = value,
            SweepAxis::RatioBack => return Err(EvalError::BadMethod("ratio_back sweeps need retraining".into())),
        }
        let method = Method::SelfBacktrack { b: sc.b, n: sc.n };
        let report = evaluate(Some(model), vocab, split, items, method, cfg, &sc, |_, _, _| {})?;
        rows.push((SweepRow::new(axis, value, &report), report));
    }
    Ok(rows)
}

pub fn write_sweep_csv(path: &std::path::Path, rows: &[SweepRow]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
