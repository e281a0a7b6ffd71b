//! Token-level encoding of rendered samples with a per-position loss mask.

use crate::dataset::{RenderedSample, SampleKind, BACKTRACK_TEXT};
use crate::lm::{TokenId, Vocab, BOS, EOS};

use super::TrainError;

/// One training sequence: `[BOS] prompt completion [EOS]`.
///
/// `mask[i]` says whether predicting `tokens[i]` from `tokens[..i]`
/// contributes to the loss; `mask[0]` (the BOS slot) is always 0. Optimal
/// samples end with EOS; backtrack samples end at the `<backtrack>` token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedSample {
    pub tokens: Vec<TokenId>,
    pub mask: Vec<u8>,
    pub kind: SampleKind,
    /// Number of leading tokens (BOS + prompt) that are conditioning only.
    pub prompt_len: usize,
}

impl EncodedSample {
    pub fn n_scored(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 1).count()
    }

    /// Model inputs (all but the last token).
    pub fn inputs(&self) -> &[TokenId] {
        &self.tokens[..self.tokens.len() - 1]
    }

    /// Next-token targets aligned with [`inputs`](Self::inputs).
    pub fn targets(&self) -> &[TokenId] {
        &self.tokens[1..]
    }

    /// Loss mask aligned with [`targets`](Self::targets).
    pub fn target_mask(&self) -> &[u8] {
        &self.mask[1..]
    }
}

fn push(vocab: &Vocab, text: &str, weight: u8, tokens: &mut Vec<TokenId>, mask: &mut Vec<u8>) -> Result<(), TrainError> {
    let ids = vocab.encode(text)?;
    mask.extend(std::iter::repeat(weight).take(ids.len()));
    tokens.extend(ids);
    Ok(())
}

/// Encodes a sample, zeroing the mask over prompt tokens and over every
/// character range listed in `mask_spans`.
pub fn encode_sample(vocab: &Vocab, sample: &RenderedSample) -> Result<EncodedSample, TrainError> {
    let mut tokens = vec![BOS];
    let mut mask = vec![0u8];
    push(vocab, &sample.prompt, 0, &mut tokens, &mut mask)?;
    let prompt_len = tokens.len();

    let c = &sample.completion;
    let mut spans = sample.mask_spans.clone();
    spans.sort_unstable();
    let mut pos = 0;
    for (start, end) in spans {
        if start < pos || end > c.len() || start > end {
            return Err(TrainError::MalformedSample(sample.id.clone(), "overlapping or out-of-range mask span".into()));
        }
        push(vocab, &c[pos..start], 1, &mut tokens, &mut mask)?;
        push(vocab, &c[start..end], 0, &mut tokens, &mut mask)?;
        pos = end;
    }
    push(vocab, &c[pos..], 1, &mut tokens, &mut mask)?;

    match sample.kind {
        SampleKind::Optimal => {
            tokens.push(EOS);
            mask.push(1);
        }
        SampleKind::Backtrack => {
            if !c.ends_with(BACKTRACK_TEXT) {
                return Err(TrainError::MalformedSample(sample.id.clone(), "backtrack sample must end with <backtrack>".into()));
            }
        }
    }
    Ok(EncodedSample { tokens, mask, kind: sample.kind, prompt_len })
}

pub fn encode_all(vocab: &Vocab, samples: &[RenderedSample]) -> Result<Vec<EncodedSample>, TrainError> {
    samples.iter().map(|s| encode_sample(vocab, s)).collect()
}

/// A batch of ragged sequences with aligned loss masks.
///
/// Row `i` of `tokens` is fed to the model without its last token; row `i`
/// of `mask` weights the next-token targets `tokens[i][1..]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedBatch {
    pub tokens: Vec<Vec<TokenId>>,
    pub mask: Vec<Vec<u8>>,
    pub kinds: Vec<SampleKind>,
}

impl MaskedBatch {
    pub fn from_samples<'a>(samples: impl IntoIterator<Item = &'a EncodedSample>) -> MaskedBatch {
        let mut b = MaskedBatch { tokens: Vec::new(), mask: Vec::new(), kinds: Vec::new() };
        for s in samples {
            b.tokens.push(s.tokens.clone());
            b.mask.push(s.mask.clone());
            b.kinds.push(s.kind);
        }
        b
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn n_scored(&self) -> usize {
        self.mask.iter().map(|m| m[1..].iter().filter(|&&v| v == 1).count()).sum()
    }

    /// Concatenation of two batches.
    pub fn union(&self, other: &MaskedBatch) -> MaskedBatch {
        let mut b = self.clone();
        b.tokens.extend(other.tokens.iter().cloned());
        b.mask.extend(other.mask.iter().cloned());
        b.kinds.extend(other.kinds.iter().copied());
        b
    }
}
