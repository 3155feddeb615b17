//! Non-overlapping k-mer tokenization.
//!
//! K-mers over `ACGT` map to ids `0..4^k` in lexicographic order (base-4 with
//! A=0, C=1, G=2, T=3). Three special ids follow: `[UNK]` = 4^k,
//! `[MASK]` = 4^k + 1 and `[PAD]` = 4^k + 2.

use rand::Rng;

pub type TokenId = u32;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum TokenizerError {
    #[error("invalid tokenizer config: {0}")]
    InvalidConfig(String),
    #[error("k-mer `{kmer}` has length {len}, expected {k}")]
    WrongLength { kmer: String, len: usize, k: usize },
    #[error("offset {offset} out of range for k={k}")]
    BadOffset { offset: usize, k: usize },
    #[error("sequence of {len} nt leaves fewer than k={k} nucleotides after offset {offset}")]
    TooShort { len: usize, k: usize, offset: usize },
    #[error("token id {0} is not a k-mer")]
    SpecialToken(TokenId),
    #[error("token id {id} outside vocabulary of size {size}")]
    OutOfVocab { id: TokenId, size: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenizerConfig {
    pub k: usize,
    pub max_tokens: usize,
}

impl TokenizerConfig {
    pub fn new(k: usize, max_tokens: usize) -> Result<Self, TokenizerError> {
        let cfg = Self { k, max_tokens };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), TokenizerError> {
        if !(1..=8).contains(&self.k) {
            return Err(TokenizerError::InvalidConfig(format!(
                "k must lie in [1,8], got {}",
                self.k
            )));
        }
        if self.max_tokens == 0 {
            return Err(TokenizerError::InvalidConfig(
                "max_tokens must be >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.k)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocab {
    k: usize,
}

impl Vocab {
    pub fn new(k: usize) -> Self {
        assert!((1..=8).contains(&k), "k must lie in [1,8]");
        Self { k }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Number of k-mer ids, 4^k.
    pub fn n_kmers(&self) -> usize {
        1 << (2 * self.k)
    }

    /// 4^k + 3: k-mers, UNK, MASK, PAD.
    pub fn size(&self) -> usize {
        self.n_kmers() + 3
    }

    pub fn unk(&self) -> TokenId {
        self.n_kmers() as TokenId
    }

    pub fn mask(&self) -> TokenId {
        self.n_kmers() as TokenId + 1
    }

    pub fn pad(&self) -> TokenId {
        self.n_kmers() as TokenId + 2
    }

    pub fn is_kmer(&self, id: TokenId) -> bool {
        (id as usize) < self.n_kmers()
    }

    /// True for ids that carry sequence content: k-mers and UNK.
    pub fn is_poolable(&self, id: TokenId) -> bool {
        id <= self.unk()
    }

    pub fn kmer_to_id(&self, kmer: &str) -> Result<TokenId, TokenizerError> {
        if kmer.len() != self.k {
            return Err(TokenizerError::WrongLength {
                kmer: kmer.to_string(),
                len: kmer.len(),
                k: self.k,
            });
        }
        Ok(self.encode_bytes(kmer.as_bytes()))
    }

    fn encode_bytes(&self, kmer: &[u8]) -> TokenId {
        let mut id: TokenId = 0;
        for &b in kmer {
            let digit = match b.to_ascii_uppercase() {
                b'A' => 0,
                b'C' => 1,
                b'G' => 2,
                b'T' => 3,
                _ => return self.unk(),
            };
            id = id * 4 + digit;
        }
        id
    }

    pub fn id_to_kmer(&self, id: TokenId) -> Result<String, TokenizerError> {
        if !self.is_kmer(id) {
            return Err(if (id as usize) < self.size() {
                TokenizerError::SpecialToken(id)
            } else {
                TokenizerError::OutOfVocab {
                    id,
                    size: self.size(),
                }
            });
        }
        let mut out = vec![b'A'; self.k];
        let mut rest = id;
        for slot in out.iter_mut().rev() {
            *slot = b"ACGT"[(rest % 4) as usize];
            rest /= 4;
        }
        Ok(String::from_utf8(out).expect("ASCII"))
    }

    pub fn token_name(&self, id: TokenId) -> String {
        match id {
            _ if self.is_kmer(id) => self.id_to_kmer(id).expect("k-mer id"),
            _ if id == self.unk() => "[UNK]".into(),
            _ if id == self.mask() => "[MASK]".into(),
            _ if id == self.pad() => "[PAD]".into(),
            _ => format!("<{id}>"),
        }
    }
}

/// Token ids with the original token index of each entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<TokenId>,
    pub positions: Vec<usize>,
    /// Nucleotides dropped from the front before splitting into k-mers.
    pub offset: usize,
    /// Token count before any padding.
    pub len: usize,
}

impl TokenSequence {
    /// Builds an unpadded sequence with positions `0..ids.len()`.
    pub fn from_ids(ids: Vec<TokenId>) -> Self {
        let len = ids.len();
        Self {
            positions: (0..len).collect(),
            ids,
            offset: 0,
            len,
        }
    }
}

pub fn kmer_to_id(kmer: &str, k: usize) -> Result<TokenId, TokenizerError> {
    Vocab::new(k).kmer_to_id(kmer)
}

pub fn tokenize(
    sequence: &str,
    cfg: &TokenizerConfig,
    offset: usize,
) -> Result<TokenSequence, TokenizerError> {
    cfg.validate()?;
    let k = cfg.k;
    if offset >= k {
        return Err(TokenizerError::BadOffset { offset, k });
    }
    let bytes = sequence.as_bytes();
    if bytes.len() < offset + k {
        return Err(TokenizerError::TooShort {
            len: bytes.len(),
            k,
            offset,
        });
    }
    let vocab = cfg.vocab();
    let ids: Vec<TokenId> = bytes[offset..]
        .chunks_exact(k)
        .take(cfg.max_tokens)
        .map(|c| vocab.encode_bytes(c))
        .collect();
    let len = ids.len();
    Ok(TokenSequence {
        ids,
        positions: (0..len).collect(),
        offset,
        len,
    })
}

/// Uniform frame-shift offset in `[0, k)`.
pub fn sample_offset<R: Rng + ?Sized>(cfg: &TokenizerConfig, rng: &mut R) -> usize {
    rng.random_range(0..cfg.k)
}

pub fn detokenize(ts: &TokenSequence, vocab: &Vocab) -> Result<String, TokenizerError> {
    ts.ids.iter().map(|&id| vocab.id_to_kmer(id)).collect()
}

/// Fixed-length form of a token sequence plus its validity mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PaddedSequence {
    pub tokens: TokenSequence,
    pub valid: Vec<bool>,
}

/// Pads with `[PAD]` (position sentinel `max_tokens`) or keeps the prefix.
pub fn pad_or_truncate(ts: &TokenSequence, max_tokens: usize, vocab: &Vocab) -> PaddedSequence {
    let keep = ts.ids.len().min(max_tokens);
    let mut ids = ts.ids[..keep].to_vec();
    let mut positions = ts.positions[..keep].to_vec();
    let mut valid = vec![true; keep];
    ids.resize(max_tokens, vocab.pad());
    positions.resize(max_tokens, max_tokens);
    valid.resize(max_tokens, false);
    PaddedSequence {
        tokens: TokenSequence {
            ids,
            positions,
            offset: ts.offset,
            len: keep.min(ts.len),
        },
        valid,
    }
}
