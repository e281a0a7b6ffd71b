//! Sampling, greedy and beam decoding, and sequence scoring.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::model::{log_softmax_rows, KvCache, Model};
use super::scalar::Scalar;
use super::vocab::TokenId;
use super::LmError;

/// Mean completion-token log-probability; higher is better, always `<= 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SequenceScore {
    pub total_logprob: f64,
    pub n_scored_tokens: usize,
    pub score: f64,
}

impl SequenceScore {
    pub fn from_total(total_logprob: f64, n_scored_tokens: usize) -> SequenceScore {
        SequenceScore { total_logprob, n_scored_tokens, score: total_logprob / n_scored_tokens as f64 }
    }
}

/// Generated continuation; `ids` includes the stop token when one fired.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Generation {
    pub ids: Vec<TokenId>,
    pub stopped_by: Option<TokenId>,
}

fn argmax<T: Scalar>(row: &[T]) -> TokenId {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as TokenId
}

fn sample_row<T: Scalar, R: Rng>(row: &[T], temperature: f64, rng: &mut R) -> TokenId {
    let inv = 1.0 / temperature;
    let mx = row.iter().map(|v| v.to_f64().unwrap()).fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = row.iter().map(|v| ((v.to_f64().unwrap() - mx) * inv).exp()).collect();
    let total: f64 = weights.iter().sum();
    let u = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if acc > u {
            return i as TokenId;
        }
    }
    argmax(row)
}

fn check_prompt<T: Scalar>(model: &Model<T>, prompt_ids: &[TokenId]) -> Result<(), LmError> {
    if prompt_ids.len() > model.config.context_len {
        return Err(LmError::ContextOverflow { len: prompt_ids.len(), max: model.config.context_len });
    }
    assert!(!prompt_ids.is_empty(), "prompt must contain at least BOS");
    Ok(())
}

/// Samples `rngs.len()` continuations of one prompt, one RNG stream each.
///
/// Each row halts after emitting a token in `stop`, after `max_new` tokens,
/// or when the context window is full. Rows are decoded in one batch but
/// each row's output depends only on its own stream.
pub fn sample_many<T: Scalar, R: Rng>(
    model: &Model<T>,
    prompt_ids: &[TokenId],
    temperature: f64,
    max_new: usize,
    stop: &[TokenId],
    rngs: &mut [R],
) -> Result<Vec<Generation>, LmError> {
    assert!(temperature > 0.0, "temperature must be positive");
    check_prompt(model, prompt_ids)?;
    let n = rngs.len();
    let mut out: Vec<Generation> = vec![Generation { ids: Vec::new(), stopped_by: None }; n];
    if n == 0 || max_new == 0 {
        return Ok(out);
    }
    let v = model.config.vocab_size;
    let (cache, first_logits) = model.prefill(prompt_ids)?;
    let mut caches: Vec<KvCache<T>> = vec![cache; n];
    let mut active: Vec<usize> = (0..n).collect();
    let mut last: Vec<TokenId> = Vec::with_capacity(n);
    for (i, rng) in rngs.iter_mut().enumerate() {
        let t = sample_row(&first_logits, temperature, rng);
        out[i].ids.push(t);
        last.push(t);
    }
    loop {
        // retire finished rows
        let mut next_active = Vec::with_capacity(active.len());
        let mut next_last = Vec::with_capacity(active.len());
        let mut next_caches = Vec::with_capacity(active.len());
        for (slot, &i) in active.iter().enumerate() {
            let t = last[slot];
            let cache = std::mem::replace(&mut caches[slot], model.new_cache());
            if stop.contains(&t) {
                out[i].stopped_by = Some(t);
            } else if out[i].ids.len() < max_new && cache.len() < model.config.context_len {
                next_active.push(i);
                next_last.push(t);
                next_caches.push(cache);
            }
        }
        if next_active.is_empty() {
            break;
        }
        active = next_active;
        last = next_last;
        caches = next_caches;
        let logits = model.step(&mut caches, &last)?;
        for (slot, &i) in active.iter().enumerate() {
            let t = sample_row(&logits[slot * v..(slot + 1) * v], temperature, &mut rngs[i]);
            out[i].ids.push(t);
            last[slot] = t;
        }
    }
    Ok(out)
}

/// Single-stream sampling; see [`sample_many`].
pub fn sample<T: Scalar, R: Rng>(
    model: &Model<T>,
    prompt_ids: &[TokenId],
    temperature: f64,
    max_new: usize,
    stop: &[TokenId],
    rng: &mut R,
) -> Result<Generation, LmError> {
    Ok(sample_many(model, prompt_ids, temperature, max_new, stop, std::slice::from_mut(rng))?.remove(0))
}

/// Argmax decoding (ties go to the lowest token id).
pub fn greedy<T: Scalar>(
    model: &Model<T>,
    prompt_ids: &[TokenId],
    max_new: usize,
    stop: &[TokenId],
) -> Result<Generation, LmError> {
    check_prompt(model, prompt_ids)?;
    let mut out = Generation { ids: Vec::new(), stopped_by: None };
    if max_new == 0 {
        return Ok(out);
    }
    let (mut cache, mut logits) = model.prefill(prompt_ids)?;
    loop {
        let t = argmax(&logits);
        out.ids.push(t);
        if stop.contains(&t) {
            out.stopped_by = Some(t);
            break;
        }
        if out.ids.len() >= max_new || cache.len() >= model.config.context_len {
            break;
        }
        logits = model.step(std::slice::from_mut(&mut cache), &[t])?;
    }
    Ok(out)
}

#[derive(Clone)]
struct Beam<T> {
    ids: Vec<TokenId>,
    logprob: f64,
    cache: KvCache<T>,
    logits: Vec<T>,
}

fn mean_logprob(total: f64, n: usize) -> f64 {
    if n == 0 {
        f64::NEG_INFINITY
    } else {
        total / n as f64
    }
}

/// Beam search ranked by mean token log-probability.
///
/// Live beams are pruned by cumulative log-probability; the final answer is
/// the best finished or live hypothesis by mean log-probability. The greedy
/// hypothesis is always part of the final pool, so the result never scores
/// below greedy decoding, and `width == 1` reproduces greedy exactly.
pub fn beam_search<T: Scalar>(
    model: &Model<T>,
    prompt_ids: &[TokenId],
    width: usize,
    max_new: usize,
    stop: &[TokenId],
) -> Result<Generation, LmError> {
    assert!(width >= 1, "beam width must be >= 1");
    let greedy_out = greedy(model, prompt_ids, max_new, stop)?;
    if width == 1 || max_new == 0 {
        return Ok(greedy_out);
    }
    let (cache, logits) = model.prefill(prompt_ids)?;
    let mut live = vec![Beam { ids: Vec::new(), logprob: 0.0, cache, logits }];
    let mut finished: Vec<(Vec<TokenId>, f64, Option<TokenId>)> = Vec::new();
    let v = model.config.vocab_size;
    while !live.is_empty() {
        let mut expansions: Vec<(usize, TokenId, f64)> = Vec::new();
        for (bi, beam) in live.iter().enumerate() {
            let lp = log_softmax_rows(&beam.logits, v);
            let mut order: Vec<usize> = (0..v).collect();
            order.sort_by(|&a, &b| lp[b].partial_cmp(&lp[a]).unwrap().then(a.cmp(&b)));
            for &tok in order.iter().take(width) {
                expansions.push((bi, tok as TokenId, beam.logprob + lp[tok].to_f64().unwrap()));
            }
        }
        expansions.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then((a.0, a.1).cmp(&(b.0, b.1))));
        expansions.truncate(width);

        let mut next = Vec::new();
        for (bi, tok, lp) in expansions {
            let parent = &live[bi];
            let mut ids = parent.ids.clone();
            ids.push(tok);
            if stop.contains(&tok) {
                finished.push((ids, lp, Some(tok)));
            } else if ids.len() >= max_new || parent.cache.len() >= model.config.context_len {
                finished.push((ids, lp, None));
            } else {
                next.push(Beam { ids, logprob: lp, cache: parent.cache.clone(), logits: Vec::new() });
            }
        }
        if !next.is_empty() {
            let mut caches: Vec<KvCache<T>> = next.iter_mut().map(|b| std::mem::replace(&mut b.cache, model.new_cache())).collect();
            let toks: Vec<TokenId> = next.iter().map(|b| *b.ids.last().unwrap()).collect();
            let logits = model.step(&mut caches, &toks)?;
            for (i, (beam, cache)) in next.iter_mut().zip(caches).enumerate() {
                beam.cache = cache;
                beam.logits = logits[i * v..(i + 1) * v].to_vec();
            }
        }
        live = next;
    }

    let greedy_score = score_completion(model, prompt_ids, &greedy_out.ids)?.score;
    let mut best = (greedy_out.ids.clone(), greedy_score, greedy_out.stopped_by);
    for (ids, lp, stopped) in finished {
        let s = mean_logprob(lp, ids.len());
        if s > best.1 {
            best = (ids, s, stopped);
        }
    }
    Ok(Generation { ids: best.0, stopped_by: best.2 })
}

/// Scores one completion given the prompt; prompt tokens are not scored.
pub fn score_completion<T: Scalar>(
    model: &Model<T>,
    prompt_ids: &[TokenId],
    completion_ids: &[TokenId],
) -> Result<SequenceScore, LmError> {
    Ok(score_batch(model, prompt_ids, &[completion_ids])?.remove(0))
}

/// Scores several completions of the same prompt in one packed forward pass.
pub fn score_batch<T: Scalar>(
    model: &Model<T>,
    prompt_ids: &[TokenId],
    completions: &[&[TokenId]],
) -> Result<Vec<SequenceScore>, LmError> {
    check_prompt(model, prompt_ids)?;
    if completions.iter().any(|c| c.is_empty()) {
        return Err(LmError::EmptyCompletion);
    }
    // the last completion token is predicted, never fed
    let seqs: Vec<Vec<TokenId>> = completions
        .iter()
        .map(|c| prompt_ids.iter().chain(&c[..c.len() - 1]).copied().collect())
        .collect();
    let refs: Vec<&[TokenId]> = seqs.iter().map(Vec::as_slice).collect();
    let (logits, tape) = model.forward::<crate::rng::Rng>(&refs, None)?;
    let v = model.config.vocab_size;
    let mut out = Vec::with_capacity(completions.len());
    for (ci, &(start, _)) in tape.seqs().iter().enumerate() {
        let comp = completions[ci];
        let mut total = 0.0;
        for (j, &tok) in comp.iter().enumerate() {
            let row = start + prompt_ids.len() - 1 + j;
            let lp = log_softmax_rows(&logits[row * v..(row + 1) * v], v);
            total += lp[tok as usize].to_f64().unwrap();
        }
        out.push(SequenceScore::from_total(total, comp.len()));
    }
    Ok(out)
}
