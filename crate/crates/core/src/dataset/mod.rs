//! Training and test data for the Countdown task.
//!
//! Optimal samples are rendered solution paths. Backtrack samples take a
//! prefix of an optimal path, append one erroneous step and the literal
//! `<backtrack>` token; the erroneous line is listed in `mask_spans` so the
//! trainer can exclude it from the loss.

mod corpus;
mod synth;

pub use corpus::{
    build_corpus, problem_key, read_jsonl, read_test_set, read_train_set, training_problems, write_corpus, write_jsonl, Corpus, CorpusManifest,
    TestItem, TEST_NEW_FILE, TEST_SEEN_FILE, TRAIN_FILE,
};
pub use synth::{gen_problem, make_backtrack_sample, render, resolve_split, TargetSplit};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Text of the backtrack token as it appears in rendered completions.
pub const BACKTRACK_TEXT: &str = "<backtrack>";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("no solvable problem after {0} consecutive rejections")]
    ExhaustedRetries(usize),
    #[error("no dead-end step can be injected into problem {0}")]
    NoErrorInjectable(String),
    #[error("invalid corpus config: {0}")]
    InvalidConfig(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleKind {
    Optimal,
    Backtrack,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorMode {
    /// A legal step after which the goal is unreachable.
    Exploration,
    /// A step whose stated result is false.
    Computational,
    /// A step that uses an operand that is not available.
    RuleViolation,
}

impl ErrorMode {
    pub const ALL: [ErrorMode; 3] = [ErrorMode::Exploration, ErrorMode::Computational, ErrorMode::RuleViolation];
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedSample {
    pub id: String,
    pub prompt: String,
    pub completion: String,
    pub kind: SampleKind,
    pub error_mode: Option<ErrorMode>,
    /// Half-open character ranges of `completion` excluded from the loss.
    pub mask_spans: Vec<(usize, usize)>,
}

impl RenderedSample {
    /// The completion with masked spans removed.
    pub fn unmasked_completion(&self) -> String {
        let mut out = String::new();
        let mut pos = 0;
        for &(start, end) in &self.mask_spans {
            out.push_str(&self.completion[pos..start]);
            pos = end;
        }
        out.push_str(&self.completion[pos..]);
        out
    }
}

/// Proportions over the three error modes; normalised on use.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorMix {
    pub exploration: f64,
    pub computational: f64,
    pub rule_violation: f64,
}

impl Default for ErrorMix {
    fn default() -> Self {
        ErrorMix { exploration: 1.0, computational: 2.0, rule_violation: 2.0 }
    }
}

impl ErrorMix {
    pub fn weights(&self) -> [(ErrorMode, f64); 3] {
        [
            (ErrorMode::Exploration, self.exploration),
            (ErrorMode::Computational, self.computational),
            (ErrorMode::RuleViolation, self.rule_violation),
        ]
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let w = self.weights();
        if w.iter().any(|(_, x)| !x.is_finite() || *x < 0.0) || w.iter().map(|(_, x)| x).sum::<f64>() <= 0.0 {
            return Err(DataError::InvalidConfig(format!("bad error mix {self:?}")));
        }
        Ok(())
    }

    /// Splits `total` into per-mode counts by largest remainder.
    pub fn apportion(&self, total: usize) -> [(ErrorMode, usize); 3] {
        let w = self.weights();
        let sum: f64 = w.iter().map(|(_, x)| x).sum();
        let quotas: Vec<f64> = w.iter().map(|(_, x)| x / sum * total as f64).collect();
        let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
        let mut left = total - counts.iter().sum::<usize>();
        let mut order: Vec<usize> = (0..3).collect();
        // stable: ties go to the earlier mode
        order.sort_by(|&a, &b| {
            let ra = quotas[a] - quotas[a].floor();
            let rb = quotas[b] - quotas[b].floor();
            rb.partial_cmp(&ra).unwrap()
        });
        for i in order {
            if left == 0 {
                break;
            }
            counts[i] += 1;
            left -= 1;
        }
        [(w[0].0, counts[0]), (w[1].0, counts[1]), (w[2].0, counts[2])]
    }
}

/// How target values are partitioned into seen and held-out sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    /// Explicit held-out targets. When absent, `new_fraction` of the target
    /// range is held out by a seeded shuffle.
    pub new_targets: Option<Vec<u64>>,
    pub new_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { new_targets: None, new_fraction: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub n_optimal: usize,
    /// Backtrack samples per optimal sample.
    pub ratio_back: f64,
    pub error_mix: ErrorMix,
    pub k: usize,
    pub number_min: u64,
    pub number_max: u64,
    pub target_max: u64,
    pub seed: u64,
    pub split: SplitConfig,
    /// Problems per test split.
    pub n_test: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n_optimal: 20_000,
            ratio_back: 1.0,
            error_mix: ErrorMix::default(),
            k: 3,
            number_min: 1,
            number_max: 20,
            target_max: 30,
            seed: 0,
            split: SplitConfig::default(),
            n_test: 1_000,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |msg: &str| Err(DataError::InvalidConfig(msg.to_string()));
        if self.k < 2 || self.k > 5 {
            return bad("k must be in 2..=5");
        }
        if self.number_min < 1 || self.number_min > self.number_max {
            return bad("number range must be non-empty and start at >= 1");
        }
        if self.target_max < 1 {
            return bad("target_max must be >= 1");
        }
        if !self.ratio_back.is_finite() || self.ratio_back < 0.0 {
            return bad("ratio_back must be >= 0");
        }
        if !(0.0..1.0).contains(&self.split.new_fraction) {
            return bad("split.new_fraction must be in [0, 1)");
        }
        self.error_mix.validate()
    }

    pub fn n_backtrack(&self) -> usize {
        (self.n_optimal as f64 * self.ratio_back).round() as usize
    }
}
