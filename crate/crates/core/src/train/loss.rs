//! Masked next-token negative log-likelihood.

use serde::{Deserialize, Serialize};

use crate::dataset::SampleKind;
use crate::lm::{Model, Scalar, TokenId};

use super::batch::MaskedBatch;
use super::TrainError;

/// Summed NLL split by sample kind, so the composite loss can be decomposed
/// into its optimal-path term and its backtrack term.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub optimal_nll: f64,
    pub optimal_tokens: usize,
    pub backtrack_nll: f64,
    pub backtrack_tokens: usize,
}

impl LossParts {
    pub fn tokens(&self) -> usize {
        self.optimal_tokens + self.backtrack_tokens
    }

    /// Per-token mean over all scored positions.
    pub fn mean(&self) -> f64 {
        (self.optimal_nll + self.backtrack_nll) / self.tokens() as f64
    }

    pub fn optimal_mean(&self) -> Option<f64> {
        (self.optimal_tokens > 0).then(|| self.optimal_nll / self.optimal_tokens as f64)
    }

    pub fn backtrack_mean(&self) -> Option<f64> {
        (self.backtrack_tokens > 0).then(|| self.backtrack_nll / self.backtrack_tokens as f64)
    }

    pub fn add(&mut self, other: &LossParts) {
        self.optimal_nll += other.optimal_nll;
        self.optimal_tokens += other.optimal_tokens;
        self.backtrack_nll += other.backtrack_nll;
        self.backtrack_tokens += other.backtrack_tokens;
    }
}

/// Mean NLL over rows with `mask == 1` and its gradient w.r.t. `logits`.
///
/// `logits` is `targets.len() × width`. Masked rows contribute nothing to the
/// loss and receive an exact zero gradient; their logits are never read.
/// Returns `(loss, dlogits, per_row_nll)` where `per_row_nll` is zero on
/// masked rows.
pub fn masked_nll<T: Scalar>(
    logits: &[T],
    width: usize,
    targets: &[TokenId],
    mask: &[u8],
) -> Result<(f64, Vec<T>, Vec<f64>), TrainError> {
    assert_eq!(logits.len(), targets.len() * width);
    assert_eq!(mask.len(), targets.len());
    let count = mask.iter().filter(|&&m| m == 1).count();
    if count == 0 {
        return Err(TrainError::EmptyMask);
    }
    let inv = T::one() / T::from_usize(count).unwrap();
    let mut dlogits = vec![T::zero(); logits.len()];
    let mut row_nll = vec![0.0; targets.len()];
    let mut total = 0.0;
    for (r, (&tgt, &m)) in targets.iter().zip(mask).enumerate() {
        if m != 1 {
            continue;
        }
        let row = &logits[r * width..(r + 1) * width];
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = row.iter().map(|&v| (v - mx).exp()).sum();
        let lse = mx + sum.ln();
        let nll = (lse - row[tgt as usize]).to_f64().unwrap();
        row_nll[r] = nll;
        total += nll;
        let drow = &mut dlogits[r * width..(r + 1) * width];
        for (g, &v) in drow.iter_mut().zip(row) {
            *g = (v - lse).exp() * inv;
        }
        drow[tgt as usize] -= inv;
    }
    Ok((total / count as f64, dlogits, row_nll))
}

/// Result of [`composite_loss`].
pub struct LossOutput<T> {
    /// Per-token mean NLL over unmasked positions.
    pub loss: f64,
    /// Gradient of `loss` w.r.t. the flat parameter buffer.
    pub grads: Vec<T>,
    pub parts: LossParts,
}

/// Forward pass, masked loss and backward pass for one batch.
pub fn composite_loss<T: Scalar, R: rand::Rng>(
    model: &Model<T>,
    batch: &MaskedBatch,
    dropout_rng: Option<&mut R>,
) -> Result<LossOutput<T>, TrainError> {
    let (logits, targets, mask, tape) = batch_logits(model, batch, dropout_rng)?;
    let v = model.config.vocab_size;
    let (loss, dlogits, row_nll) = masked_nll(&logits, v, &targets, &mask)?;
    let grads = model.backward(&tape, &dlogits);
    let parts = split_parts(batch, &row_nll, &mask);
    Ok(LossOutput { loss, grads, parts })
}

/// Loss without gradients (evaluation).
pub fn batch_loss<T: Scalar>(model: &Model<T>, batch: &MaskedBatch) -> Result<(f64, LossParts), TrainError> {
    let (logits, targets, mask, _) = batch_logits::<T, crate::rng::Rng>(model, batch, None)?;
    let (loss, _, row_nll) = masked_nll(&logits, model.config.vocab_size, &targets, &mask)?;
    Ok((loss, split_parts(batch, &row_nll, &mask)))
}

type Packed<T> = (Vec<T>, Vec<TokenId>, Vec<u8>, crate::lm::Tape<T>);

fn batch_logits<T: Scalar, R: rand::Rng>(
    model: &Model<T>,
    batch: &MaskedBatch,
    dropout_rng: Option<&mut R>,
) -> Result<Packed<T>, TrainError> {
    let inputs: Vec<&[TokenId]> = batch.tokens.iter().map(|t| &t[..t.len() - 1]).collect();
    let mut targets = Vec::new();
    let mut mask = Vec::new();
    for (t, m) in batch.tokens.iter().zip(&batch.mask) {
        assert_eq!(t.len(), m.len(), "token and mask rows differ in length");
        targets.extend_from_slice(&t[1..]);
        mask.extend_from_slice(&m[1..]);
    }
    let (logits, tape) = model.forward(&inputs, dropout_rng)?;
    Ok((logits, targets, mask, tape))
}

fn split_parts(batch: &MaskedBatch, row_nll: &[f64], mask: &[u8]) -> LossParts {
    let mut parts = LossParts::default();
    let mut row = 0;
    for (t, &kind) in batch.tokens.iter().zip(&batch.kinds) {
        let n = t.len() - 1;
        let nll: f64 = row_nll[row..row + n].iter().sum();
        let count = mask[row..row + n].iter().filter(|&&m| m == 1).count();
        match kind {
            SampleKind::Optimal => {
                parts.optimal_nll += nll;
                parts.optimal_tokens += count;
            }
            SampleKind::Backtrack => {
                parts.backtrack_nll += nll;
                parts.backtrack_tokens += count;
            }
        }
        row += n;
    }
    parts
}
