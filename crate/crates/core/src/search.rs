//! Self-backtracking search: expansion, backtracking and selection.
//!
//! Round 0 samples `n` continuations of the prompt. Samples that end in
//! `<backtrack>` are set aside; in each of the next `b` rounds up to
//! `⌊√n⌋` of them are rolled back by one step and re-expanded with `⌊√n⌋`
//! fresh samples each. Finally the clean candidate with the highest mean
//! token log-probability is returned. Nothing outside the model is consulted
//! to make these choices; verifier verdicts in the audit trace are
//! annotations only.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::countdown::{render_prompt, verify_path, Problem, VerdictKind};
use crate::dataset::BACKTRACK_TEXT;
use crate::lm::{encode_prompt, sample_many, score_batch, LmError, Model, SequenceScore, TokenId, Vocab, BACKTRACK, EOS};
use crate::rng::{domain, stream};

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("invalid search config: {0}")]
    InvalidConfig(String),
    #[error("search produced no candidates")]
    NoCandidates,
    #[error(transparent)]
    Lm(#[from] LmError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    /// Samples per expansion of the prompt.
    pub n: usize,
    /// Number of backtracking rounds.
    pub b: usize,
    pub temperature: f64,
    /// Cap on newly generated tokens per sample.
    pub max_new: usize,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig { n: 32, b: 1, temperature: 0.7, max_new: 96, seed: 0 }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<(), SearchError> {
        if self.n == 0 {
            return Err(SearchError::InvalidConfig("n must be >= 1".into()));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(SearchError::InvalidConfig("temperature must be positive".into()));
        }
        if self.max_new == 0 {
            return Err(SearchError::InvalidConfig("max_new must be >= 1".into()));
        }
        Ok(())
    }

    /// `⌊√n⌋`, at least 1: backtrackers per round and samples per re-expansion.
    pub fn width(&self) -> usize {
        sqrt_floor(self.n)
    }

    pub fn max_samples(&self) -> usize {
        self.n + self.b * self.width() * self.width()
    }

    pub fn max_rollbacks(&self) -> usize {
        self.b * self.width()
    }
}

pub fn sqrt_floor(n: usize) -> usize {
    let mut r = (n as f64).sqrt() as usize;
    while r * r > n {
        r -= 1;
    }
    while (r + 1) * (r + 1) <= n {
        r += 1;
    }
    r.max(1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Clean,
    Backtrack,
}

/// One sampled continuation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub round: usize,
    pub slot: usize,
    /// The continuation this sample was drawn from (empty for the prompt).
    pub parent: String,
    /// Token ids generated in this sample, stop token included.
    pub generated: Vec<TokenId>,
    /// `parent` followed by the decoded sample.
    pub full_text: String,
    pub contains_backtrack: bool,
    /// Whether the sample ended with EOS.
    pub finished: bool,
    /// Mean log-probability; for clean candidates of the whole continuation
    /// (plus EOS when finished), for backtrackers of the text before the
    /// token. Filled in when the candidate is ranked.
    pub score: Option<SequenceScore>,
    /// Verifier verdict of `full_text`; an annotation, never used to choose.
    pub verdict: Option<VerdictKind>,
}

impl Candidate {
    pub fn partition(&self) -> Partition {
        if self.contains_backtrack {
            Partition::Backtrack
        } else {
            Partition::Clean
        }
    }

    /// Text before the `<backtrack>` token.
    pub fn pre_backtrack(&self) -> &str {
        self.full_text.strip_suffix(BACKTRACK_TEXT).unwrap_or(&self.full_text)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollback {
    /// Round in which the rolled-back state is re-expanded.
    pub round: usize,
    pub from_round: usize,
    pub from_slot: usize,
    pub rolled_back_to: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub text: String,
    pub round: usize,
    pub slot: usize,
    pub score: SequenceScore,
    /// True when no clean candidate existed and a backtracker was truncated.
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Accounting {
    pub samples: usize,
    pub rollbacks: usize,
    pub max_samples: usize,
    pub max_rollbacks: usize,
}

/// Everything needed to audit or replay one search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditTrace {
    pub problem: Problem,
    pub prompt: String,
    pub config: SearchConfig,
    pub candidates: Vec<Candidate>,
    pub rollbacks: Vec<Rollback>,
    pub selection: Selection,
    pub accounting: Accounting,
}

/// Rolls a backtracking continuation back by one reasoning step.
///
/// The `<backtrack>` token is removed together with the step line right
/// before it. A partial line (the token emitted mid-line) counts as that
/// step. Without a preceding line the result is the empty continuation.
pub fn rollback(text: &str) -> String {
    let pre = text.strip_suffix(BACKTRACK_TEXT).unwrap_or(text);
    let body = pre.strip_suffix('\n').unwrap_or(pre);
    match body.rfind('\n') {
        Some(i) => pre[..=i].to_string(),
        None => String::new(),
    }
}

/// Splits a candidate list into (clean, backtrackers).
pub fn partition(candidates: Vec<Candidate>) -> (Vec<Candidate>, Vec<Candidate>) {
    candidates.into_iter().partition(|c| !c.contains_backtrack)
}

/// Draws `count` continuations of `prompt ∘ parent`, with one RNG stream per
/// `(seed, round, slot)`.
#[allow(clippy::too_many_arguments)]
pub fn expand(
    model: &Model<f32>,
    vocab: &Vocab,
    prompt_ids: &[TokenId],
    parent: &str,
    count: usize,
    round: usize,
    first_slot: usize,
    config: &SearchConfig,
) -> Result<Vec<Candidate>, SearchError> {
    let mut ids = prompt_ids.to_vec();
    ids.extend(vocab.encode(parent)?);
    let mut rngs: Vec<_> =
        (0..count).map(|i| stream(config.seed, &[domain::SEARCH, round as u64, (first_slot + i) as u64])).collect();
    let gens = sample_many(model, &ids, config.temperature, config.max_new, &[EOS, BACKTRACK], &mut rngs)?;
    Ok(gens
        .into_iter()
        .enumerate()
        .map(|(i, g)| {
            let contains_backtrack = g.ids.contains(&BACKTRACK);
            Candidate {
                round,
                slot: first_slot + i,
                parent: parent.to_string(),
                full_text: format!("{parent}{}", vocab.decode(&g.ids)),
                contains_backtrack,
                finished: g.stopped_by == Some(EOS),
                generated: g.ids,
                score: None,
                verdict: None,
            }
        })
        .collect())
}

/// Caches sequence scores by (text, finished).
struct Scorer<'a> {
    model: &'a Model<f32>,
    vocab: &'a Vocab,
    prompt_ids: &'a [TokenId],
    cache: HashMap<(String, bool), SequenceScore>,
}

impl<'a> Scorer<'a> {
    fn ids(&self, text: &str, finished: bool) -> Result<Vec<TokenId>, SearchError> {
        let mut ids = self.vocab.encode(text)?;
        if finished || ids.is_empty() {
            // an empty unfinished text is scored by its terminating token
            ids.push(if finished { EOS } else { BACKTRACK });
        }
        Ok(ids)
    }

    /// Scores many texts with one packed forward pass over the misses.
    fn score_all(&mut self, keys: &[(String, bool)]) -> Result<Vec<SequenceScore>, SearchError> {
        let missing: BTreeSet<&(String, bool)> = keys.iter().filter(|k| !self.cache.contains_key(*k)).collect();
        let missing: Vec<(String, bool)> = missing.into_iter().cloned().collect();
        for chunk in missing.chunks(16) {
            let ids: Vec<Vec<TokenId>> = chunk.iter().map(|(t, f)| self.ids(t, *f)).collect::<Result<_, _>>()?;
            let refs: Vec<&[TokenId]> = ids.iter().map(Vec::as_slice).collect();
            let scores = score_batch(self.model, self.prompt_ids, &refs)?;
            for (k, s) in chunk.iter().zip(scores) {
                self.cache.insert(k.clone(), s);
            }
        }
        Ok(keys.iter().map(|k| self.cache[k]).collect())
    }
}

fn better(a: &Candidate, b: &Candidate) -> bool {
    let (sa, sb) = (a.score.unwrap().score, b.score.unwrap().score);
    sa > sb || (sa == sb && (a.round, a.slot) < (b.round, b.slot))
}

/// Runs the full search for one problem.
pub fn self_backtrack_search(
    model: &Model<f32>,
    vocab: &Vocab,
    problem: &Problem,
    config: &SearchConfig,
) -> Result<AuditTrace, SearchError> {
    config.validate()?;
    let prompt = render_prompt(problem);
    let prompt_ids = encode_prompt(vocab, &prompt)?;
    let width = config.width();
    let mut scorer = Scorer { model, vocab, prompt_ids: &prompt_ids, cache: HashMap::new() };

    let mut all: Vec<Candidate> = expand(model, vocab, &prompt_ids, "", config.n, 0, 0, config)?;
    let mut rollbacks = Vec::new();
    let mut frontier: Vec<usize> = (0..all.len()).filter(|&i| all[i].contains_backtrack).collect();

    for round in 1..=config.b {
        if frontier.is_empty() {
            break;
        }
        rank_backtrackers(&mut scorer, &mut all, &frontier)?;
        // best pre-token score first, ties by text; identical texts once
        let mut order = frontier.clone();
        order.sort_by(|&x, &y| {
            let (a, b) = (&all[x], &all[y]);
            b.score.unwrap().score.total_cmp(&a.score.unwrap().score).then_with(|| a.full_text.cmp(&b.full_text))
        });
        order.dedup_by(|x, y| all[*x].full_text == all[*y].full_text);
        order.truncate(width);

        let mut next = Vec::new();
        for (j, &i) in order.iter().enumerate() {
            let state = rollback(&all[i].full_text);
            rollbacks.push(Rollback {
                round,
                from_round: all[i].round,
                from_slot: all[i].slot,
                rolled_back_to: state.clone(),
            });
            let fresh = expand(model, vocab, &prompt_ids, &state, width, round, j * width, config)?;
            for c in fresh {
                if c.contains_backtrack {
                    next.push(all.len());
                }
                all.push(c);
            }
        }
        frontier = next;
    }

    let clean: Vec<usize> = (0..all.len()).filter(|&i| !all[i].contains_backtrack).collect();
    let selection = if clean.is_empty() {
        let backs: Vec<usize> = (0..all.len()).collect();
        rank_backtrackers(&mut scorer, &mut all, &backs)?;
        let best = backs.into_iter().reduce(|x, y| if better(&all[y], &all[x]) { y } else { x }).ok_or(SearchError::NoCandidates)?;
        let c = &all[best];
        Selection {
            text: c.pre_backtrack().to_string(),
            round: c.round,
            slot: c.slot,
            score: c.score.unwrap(),
            fallback: true,
        }
    } else {
        let keys: Vec<(String, bool)> = clean.iter().map(|&i| (all[i].full_text.clone(), all[i].finished)).collect();
        let scores = scorer.score_all(&keys)?;
        for (&i, s) in clean.iter().zip(scores) {
            all[i].score = Some(s);
        }
        let best = clean.into_iter().reduce(|x, y| if better(&all[y], &all[x]) { y } else { x }).unwrap();
        let c = &all[best];
        Selection { text: c.full_text.clone(), round: c.round, slot: c.slot, score: c.score.unwrap(), fallback: false }
    };

    for c in &mut all {
        if !c.contains_backtrack {
            c.verdict = Some(verify_path(problem, &c.full_text).kind);
        }
    }
    let accounting = Accounting {
        samples: all.len(),
        rollbacks: rollbacks.len(),
        max_samples: config.max_samples(),
        max_rollbacks: config.max_rollbacks(),
    };
    Ok(AuditTrace { problem: problem.clone(), prompt, config: config.clone(), candidates: all, rollbacks, selection, accounting })
}

fn rank_backtrackers(scorer: &mut Scorer<'_>, all: &mut [Candidate], idx: &[usize]) -> Result<(), SearchError> {
    let todo: Vec<usize> = idx.iter().copied().filter(|&i| all[i].score.is_none()).collect();
    let keys: Vec<(String, bool)> = todo.iter().map(|&i| (all[i].pre_backtrack().to_string(), false)).collect();
    let scores = scorer.score_all(&keys)?;
    for (&i, s) in todo.iter().zip(scores) {
        all[i].score = Some(s);
    }
    Ok(())
}

/// A single disagreement found while replaying a trace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayIssue {
    pub what: String,
}

/// Checks a trace for internal consistency without the model: partitions,
/// texts, rollbacks, verdicts, selection and the sample/rollback budget.
pub fn replay_trace(trace: &AuditTrace, vocab: &Vocab) -> Vec<ReplayIssue> {
    let mut issues = Vec::new();
    let mut flag = |what: String| issues.push(ReplayIssue { what });
    let cfg = &trace.config;
    if trace.prompt != render_prompt(&trace.problem) {
        flag("prompt does not match the problem".into());
    }
    for c in &trace.candidates {
        let tag = format!("candidate r{} s{}", c.round, c.slot);
        if c.contains_backtrack != c.generated.contains(&BACKTRACK) {
            flag(format!("{tag}: partition disagrees with generated ids"));
        }
        if c.full_text != format!("{}{}", c.parent, vocab.decode(&c.generated)) {
            flag(format!("{tag}: text disagrees with generated ids"));
        }
        if c.finished != (c.generated.last() == Some(&EOS)) {
            flag(format!("{tag}: finished flag disagrees with generated ids"));
        }
        let want = (!c.contains_backtrack).then(|| verify_path(&trace.problem, &c.full_text).kind);
        if c.verdict != want {
            flag(format!("{tag}: verdict {:?} recomputes as {:?}", c.verdict, want));
        }
    }
    for r in &trace.rollbacks {
        match trace.candidates.iter().find(|c| c.round == r.from_round && c.slot == r.from_slot) {
            Some(src) if src.contains_backtrack => {
                if rollback(&src.full_text) != r.rolled_back_to {
                    flag(format!("rollback of r{} s{} recomputes differently", r.from_round, r.from_slot));
                }
                if r.round != src.round + 1 {
                    flag(format!("rollback of r{} s{} happened in round {}", r.from_round, r.from_slot, r.round));
                }
            }
            _ => flag(format!("rollback source r{} s{} is not a backtracker", r.from_round, r.from_slot)),
        }
    }
    for c in trace.candidates.iter().filter(|c| c.round > 0) {
        let parent_ok = trace.rollbacks.iter().any(|r| r.round == c.round && r.rolled_back_to == c.parent);
        if !parent_ok {
            flag(format!("candidate r{} s{} has no matching rollback parent", c.round, c.slot));
        }
    }
    let round0 = trace.candidates.iter().filter(|c| c.round == 0).count();
    if round0 != cfg.n {
        flag(format!("round 0 has {round0} samples, expected {}", cfg.n));
    }
    let acc = &trace.accounting;
    if acc.samples != trace.candidates.len() || acc.rollbacks != trace.rollbacks.len() {
        flag("accounting totals disagree with recorded events".into());
    }
    if acc.samples > cfg.max_samples() || acc.rollbacks > cfg.max_rollbacks() {
        flag(format!("budget exceeded: {} samples, {} rollbacks", acc.samples, acc.rollbacks));
    }
    // selection is the argmax of the recorded scores
    let clean: Vec<&Candidate> = trace.candidates.iter().filter(|c| !c.contains_backtrack).collect();
    if trace.selection.fallback != clean.is_empty() {
        flag("fallback flag disagrees with the clean set".into());
    }
    let pool: Vec<&Candidate> = if clean.is_empty() { trace.candidates.iter().collect() } else { clean };
    if pool.iter().any(|c| c.score.is_none()) {
        flag("a selection-pool candidate has no score".into());
    } else if let Some(best) = pool.into_iter().reduce(|x, y| if better(y, x) { y } else { x }) {
        let text = if trace.selection.fallback { best.pre_backtrack() } else { &best.full_text };
        if (best.round, best.slot) != (trace.selection.round, trace.selection.slot) || text != trace.selection.text {
            flag("selection is not the argmax of recorded scores".into());
        }
    }
    issues
}
