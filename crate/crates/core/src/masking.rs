//! Mask sampling and assembly of encoder/decoder inputs.
//!
//! In [`MaskMode::Mae`] the masked tokens are removed from the encoder input
//! entirely and the survivors keep their original position indices. The
//! decoder receives every position: encoder outputs at kept positions and a
//! `[MASK]` slot at masked ones. The other modes feed the full-length
//! corrupted sequence to the encoder.

use rand::seq::{index, SliceRandom};
use rand::Rng;

use crate::tokenizer::{PaddedSequence, TokenId, TokenSequence, Vocab};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MaskError {
    #[error("cannot mask an empty sequence")]
    EmptySequence,
    #[error("mask ratio {0} outside [0,1]")]
    BadRatio(f64),
    #[error("masked position {position} out of range for {n} tokens")]
    PositionOutOfRange { position: usize, n: usize },
    #[error("plan covers {plan_n} tokens but sequence has {n}")]
    LengthMismatch { plan_n: usize, n: usize },
    #[error("expected mask mode {expected:?}, got {got:?}")]
    ModeMismatch { expected: MaskMode, got: MaskMode },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MaskMode {
    /// Masked tokens are withheld from the encoder.
    Mae,
    /// Every selected token is replaced by `[MASK]` and shown to the encoder.
    WithMask,
    /// 80% `[MASK]`, 10% unchanged, 10% random k-mer.
    Bert801010,
}

impl MaskMode {
    pub fn as_str(self) -> &'static str {
        match self {
            MaskMode::Mae => "mae",
            MaskMode::WithMask => "with_mask",
            MaskMode::Bert801010 => "bert_80_10_10",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [MaskMode::Mae, MaskMode::WithMask, MaskMode::Bert801010]
            .into_iter()
            .find(|m| m.as_str() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    /// Sorted, distinct masked positions.
    pub positions: Vec<usize>,
    pub mode: MaskMode,
    /// Number of real (non-PAD) tokens the plan was drawn over.
    pub n: usize,
}

impl MaskPlan {
    pub fn new(mut positions: Vec<usize>, n: usize, mode: MaskMode) -> Result<Self, MaskError> {
        positions.sort_unstable();
        positions.dedup();
        if let Some(&p) = positions.iter().find(|&&p| p >= n) {
            return Err(MaskError::PositionOutOfRange { position: p, n });
        }
        Ok(Self { positions, mode, n })
    }

    pub fn empty(n: usize, mode: MaskMode) -> Self {
        Self {
            positions: Vec::new(),
            mode,
            n,
        }
    }

    pub fn is_masked(&self, position: usize) -> bool {
        self.positions.binary_search(&position).is_ok()
    }

    /// Sorted complement of the masked set within `0..n`.
    pub fn kept(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.n - self.positions.len());
        let mut masked = self.positions.iter().peekable();
        for i in 0..self.n {
            if masked.peek() == Some(&&i) {
                masked.next();
            } else {
                out.push(i);
            }
        }
        out
    }
}

/// Number of positions masked at `ratio`, rounding half to even.
pub fn mask_count(n: usize, ratio: f64) -> usize {
    ((ratio * n as f64).round_ties_even() as usize).min(n)
}

/// Draws exactly `mask_count(n, ratio)` positions uniformly without replacement.
pub fn sample_mask<R: Rng + ?Sized>(
    n: usize,
    ratio: f64,
    mode: MaskMode,
    rng: &mut R,
) -> Result<MaskPlan, MaskError> {
    if n == 0 {
        return Err(MaskError::EmptySequence);
    }
    if !(0.0..=1.0).contains(&ratio) {
        return Err(MaskError::BadRatio(ratio));
    }
    let count = mask_count(n, ratio);
    let mut positions = index::sample(rng, n, count).into_vec();
    positions.sort_unstable();
    Ok(MaskPlan { positions, mode, n })
}

/// What the encoder sees.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderInput {
    pub ids: Vec<TokenId>,
    /// Original token index of each row; PAD rows carry the sentinel `max_tokens`.
    pub positions: Vec<usize>,
    pub valid: Vec<bool>,
}

impl EncoderInput {
    /// Full-length input with positions `0..n`.
    pub fn full(ids: Vec<TokenId>) -> Self {
        let n = ids.len();
        Self {
            ids,
            positions: (0..n).collect(),
            valid: vec![true; n],
        }
    }

    pub fn from_sequence(ts: &TokenSequence) -> Self {
        Self {
            ids: ts.ids.clone(),
            positions: ts.positions.clone(),
            valid: vec![true; ts.ids.len()],
        }
    }

    pub fn from_padded(p: &PaddedSequence) -> Self {
        Self {
            ids: p.tokens.ids.clone(),
            positions: p.tokens.positions.clone(),
            valid: p.valid.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Builds the encoder input for a plan.
///
/// `Mae` drops masked rows. `WithMask` substitutes `[MASK]`. `Bert801010`
/// expects `ts` to be the output of [`bert_corrupt`] and passes it through.
pub fn build_encoder_input(
    ts: &TokenSequence,
    plan: &MaskPlan,
    vocab: &Vocab,
) -> Result<EncoderInput, MaskError> {
    if plan.n != ts.ids.len() {
        return Err(MaskError::LengthMismatch {
            plan_n: plan.n,
            n: ts.ids.len(),
        });
    }
    if let Some(&p) = plan.positions.iter().find(|&&p| p >= ts.ids.len()) {
        return Err(MaskError::PositionOutOfRange {
            position: p,
            n: ts.ids.len(),
        });
    }
    Ok(match plan.mode {
        MaskMode::Mae => {
            let kept = plan.kept();
            EncoderInput {
                ids: kept.iter().map(|&i| ts.ids[i]).collect(),
                positions: kept.iter().map(|&i| ts.positions[i]).collect(),
                valid: vec![true; kept.len()],
            }
        }
        MaskMode::WithMask => {
            let mut ids = ts.ids.clone();
            for &p in &plan.positions {
                ids[p] = vocab.mask();
            }
            EncoderInput {
                ids,
                positions: ts.positions.clone(),
                valid: vec![true; ts.ids.len()],
            }
        }
        MaskMode::Bert801010 => EncoderInput::from_sequence(ts),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoderSource {
    /// Row index into the encoder output.
    FromEncoder(usize),
    MaskSlot,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecoderInput {
    /// One entry per position `0..n`.
    pub sources: Vec<DecoderSource>,
}

impl DecoderInput {
    pub fn identity(n: usize) -> Self {
        Self {
            sources: (0..n).map(DecoderSource::FromEncoder).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    pub fn n_encoder_slots(&self) -> usize {
        self.sources
            .iter()
            .filter(|s| matches!(s, DecoderSource::FromEncoder(_)))
            .count()
    }
}

/// Interleaves encoder slots and mask slots in original order.
///
/// For modes other than `Mae` the encoder already produced every position,
/// so the mapping is the identity.
pub fn build_decoder_input(plan: &MaskPlan, n: usize) -> Result<DecoderInput, MaskError> {
    if plan.n != n {
        return Err(MaskError::LengthMismatch { plan_n: plan.n, n });
    }
    if let Some(&p) = plan.positions.iter().find(|&&p| p >= n) {
        return Err(MaskError::PositionOutOfRange { position: p, n });
    }
    if plan.mode != MaskMode::Mae {
        return Ok(DecoderInput::identity(n));
    }
    let mut next = 0;
    let sources = (0..n)
        .map(|i| {
            if plan.is_masked(i) {
                DecoderSource::MaskSlot
            } else {
                next += 1;
                DecoderSource::FromEncoder(next - 1)
            }
        })
        .collect();
    Ok(DecoderInput { sources })
}

/// `(position, original id)` for every masked position.
pub fn mask_targets(ts: &TokenSequence, plan: &MaskPlan) -> Vec<(usize, TokenId)> {
    plan.positions.iter().map(|&p| (p, ts.ids[p])).collect()
}

/// 80/10/10 split of `m` selected tokens by largest remainder.
pub fn bert_split(m: usize) -> (usize, usize, usize) {
    let quotas = [0.8 * m as f64, 0.1 * m as f64, 0.1 * m as f64];
    let mut counts = quotas.map(|q| q.floor() as usize);
    let mut rest = m - counts.iter().sum::<usize>();
    let mut order = [0usize, 1, 2];
    // stable: ties resolve toward MASK, then unchanged
    order.sort_by(|&a, &b| {
        (quotas[b] - quotas[b].floor()).total_cmp(&(quotas[a] - quotas[a].floor()))
    });
    for &i in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        counts[i] += 1;
        rest -= 1;
    }
    (counts[0], counts[1], counts[2])
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BertCorruption {
    pub sequence: TokenSequence,
    pub targets: Vec<(usize, TokenId)>,
}

/// Applies 80/10/10 corruption to the selected positions.
pub fn bert_corrupt<R: Rng + ?Sized>(
    ts: &TokenSequence,
    plan: &MaskPlan,
    vocab: &Vocab,
    rng: &mut R,
) -> Result<BertCorruption, MaskError> {
    if plan.mode != MaskMode::Bert801010 {
        return Err(MaskError::ModeMismatch {
            expected: MaskMode::Bert801010,
            got: plan.mode,
        });
    }
    if plan.n != ts.ids.len() {
        return Err(MaskError::LengthMismatch {
            plan_n: plan.n,
            n: ts.ids.len(),
        });
    }
    let targets = mask_targets(ts, plan);
    let (n_mask, n_keep, _) = bert_split(plan.positions.len());
    let mut order = plan.positions.clone();
    order.shuffle(rng);
    let mut sequence = ts.clone();
    for (rank, &p) in order.iter().enumerate() {
        if rank < n_mask {
            sequence.ids[p] = vocab.mask();
        } else if rank >= n_mask + n_keep {
            sequence.ids[p] = rng.random_range(0..vocab.n_kmers()) as TokenId;
        }
    }
    Ok(BertCorruption { sequence, targets })
}
