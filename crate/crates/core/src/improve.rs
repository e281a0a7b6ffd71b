//! Expert iteration: slow search produces verified solutions that the fast
//! (greedy) policy is fine-tuned on.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::countdown::{render_prompt, verify_path, Problem};
use crate::dataset::{problem_key, write_jsonl, DataError, RenderedSample, SampleKind, TestItem};
use crate::eval::{evaluate, EvalConfig, EvalError, Method};
use crate::lm::{save_checkpoint, Checkpoint, LmError, Model, Vocab};
use crate::rng::{domain, mix};
use crate::search::{self_backtrack_search, AuditTrace, SearchConfig, SearchError};
use crate::train::{train, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum ImproveError {
    #[error("round {round} produced no verified paths; stopping before training on nothing")]
    EmptyExpertSet { round: usize, reports: Vec<IterationReport> },
    #[error("invalid expert-iteration config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImproveConfig {
    pub rounds: usize,
    /// Number of distinct training problems searched every round.
    pub n_problems: usize,
    pub epochs_per_round: usize,
    /// Optimizer settings for the per-round fine-tune (`epochs` is ignored).
    pub train: TrainConfig,
    pub seed: u64,
}

impl Default for ImproveConfig {
    fn default() -> Self {
        ImproveConfig {
            rounds: 1,
            n_problems: 1000,
            epochs_per_round: 1,
            train: TrainConfig { lr: 1e-4, holdout_fraction: 0.0, ..TrainConfig::default() },
            seed: 0,
        }
    }
}

/// Slow (search) and fast (greedy) accuracy after a round; round 0 describes
/// the starting model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub round: usize,
    pub n_generated: usize,
    pub n_correct_kept: usize,
    pub slow_accuracy: f64,
    pub fast_accuracy: f64,
    pub checkpoint: Option<PathBuf>,
}

/// A verified (problem, path) pair used for fine-tuning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeptPair {
    pub problem_id: String,
    pub prompt: String,
    pub completion: String,
    pub score: f64,
}

impl KeptPair {
    pub fn to_sample(&self) -> RenderedSample {
        RenderedSample {
            id: format!("expert-{}", self.problem_id),
            prompt: self.prompt.clone(),
            completion: self.completion.clone(),
            kind: SampleKind::Optimal,
            error_mode: None,
            mask_spans: Vec::new(),
        }
    }
}

/// Searches every problem once and keeps verifier-correct answers, one per
/// distinct problem (the best-scoring one).
pub fn collect_expert_set(
    model: &Model<f32>,
    vocab: &Vocab,
    problems: &[Problem],
    search: &SearchConfig,
    seed: u64,
    round: usize,
    mut on_trace: impl FnMut(&AuditTrace),
) -> Result<Vec<KeptPair>, ImproveError> {
    let mut best: HashMap<(Vec<u64>, u64), usize> = HashMap::new();
    let mut kept: Vec<KeptPair> = Vec::new();
    for (i, p) in problems.iter().enumerate() {
        let sc = SearchConfig { seed: mix(seed, &[domain::EXPERT, round as u64, i as u64]), ..search.clone() };
        let trace = self_backtrack_search(model, vocab, p, &sc)?;
        on_trace(&trace);
        let sel = &trace.selection;
        if !verify_path(p, &sel.text).is_correct() {
            continue;
        }
        let pair = KeptPair {
            problem_id: p.id.clone(),
            prompt: render_prompt(p),
            completion: sel.text.clone(),
            score: sel.score.score,
        };
        match best.get(&problem_key(p)) {
            Some(&j) if kept[j].score >= pair.score => {}
            Some(&j) => kept[j] = pair,
            None => {
                best.insert(problem_key(p), kept.len());
                kept.push(pair);
            }
        }
    }
    Ok(kept)
}

fn measure(
    model: &Model<f32>,
    vocab: &Vocab,
    eval_items: &[TestItem],
    search: &SearchConfig,
    eval: &EvalConfig,
) -> Result<(f64, f64), ImproveError> {
    let slow = evaluate(
        Some(model),
        vocab,
        "expert_eval",
        eval_items,
        Method::SelfBacktrack { b: search.b, n: search.n },
        eval,
        search,
        |_, _, _| {},
    )?;
    let fast = evaluate(Some(model), vocab, "expert_eval", eval_items, Method::Greedy, eval, search, |_, _, _| {})?;
    Ok((slow.accuracy, fast.accuracy))
}

/// Runs `cfg.rounds` rounds starting from `model`.
///
/// Every round searches the same `problems` with the current model, keeps
/// the verified answers, fine-tunes the current model on them (warm start)
/// and measures slow and fast accuracy on `eval_items`. With `out_dir`, each
/// round writes `round-<t>/{kept.jsonl,traces.jsonl,model.ckpt,report.json}`.
#[allow(clippy::too_many_arguments)]
pub fn expert_iteration(
    mut model: Model<f32>,
    vocab: &Vocab,
    problems: &[Problem],
    eval_items: &[TestItem],
    cfg: &ImproveConfig,
    search: &SearchConfig,
    eval: &EvalConfig,
    out_dir: Option<&Path>,
    mut on_report: impl FnMut(&IterationReport),
) -> Result<(Model<f32>, Vec<IterationReport>), ImproveError> {
    if cfg.rounds == 0 || cfg.epochs_per_round == 0 {
        return Err(ImproveError::InvalidConfig("rounds and epochs_per_round must be >= 1".into()));
    }
    if problems.is_empty() {
        return Err(ImproveError::InvalidConfig("problem pool is empty".into()));
    }
    let (slow, fast) = measure(&model, vocab, eval_items, search, eval)?;
    let mut reports =
        vec![IterationReport { round: 0, n_generated: 0, n_correct_kept: 0, slow_accuracy: slow, fast_accuracy: fast, checkpoint: None }];
    on_report(&reports[0]);

    for round in 1..=cfg.rounds {
        let dir = out_dir.map(|d| d.join(format!("round-{round}")));
        if let Some(d) = &dir {
            std::fs::create_dir_all(d)?;
        }
        let mut traces = Vec::new();
        let kept = collect_expert_set(&model, vocab, problems, search, cfg.seed, round, |t| {
            if dir.is_some() {
                traces.push(t.clone());
            }
        })?;
        if let Some(d) = &dir {
            write_jsonl(&d.join("traces.jsonl"), &traces)?;
            write_jsonl(&d.join("kept.jsonl"), &kept)?;
        }
        if kept.is_empty() {
            return Err(ImproveError::EmptyExpertSet { round, reports });
        }
        let samples: Vec<RenderedSample> = kept.iter().map(KeptPair::to_sample).collect();
        let tc = TrainConfig {
            epochs: cfg.epochs_per_round,
            seed: mix(cfg.seed, &[domain::EXPERT, round as u64, u64::MAX]),
            ..cfg.train.clone()
        };
        train(&mut model, vocab, &samples, &tc, |_| {})?;

        let (slow, fast) = measure(&model, vocab, eval_items, search, eval)?;
        let mut report = IterationReport {
            round,
            n_generated: problems.len(),
            n_correct_kept: kept.len(),
            slow_accuracy: slow,
            fast_accuracy: fast,
            checkpoint: None,
        };
        if let Some(d) = &dir {
            let path = d.join("model.ckpt");
            let meta = serde_json::json!({ "expert_round": round, "kept": kept.len() });
            save_checkpoint(&path, &Checkpoint { model: model.clone(), vocab: vocab.clone(), meta })?;
            report.checkpoint = Some(path);
            std::fs::write(d.join("report.json"), serde_json::to_string_pretty(&report)?)?;
        }
        on_report(&report);
        reports.push(report);
    }
    Ok((model, reports))
}
