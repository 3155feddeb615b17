//! Binary checkpoint format.
//!
//! ```text
//! magic "BMAECKPT" | version u32 LE | metadata length u64 LE | metadata (UTF-8 key=value lines)
//! | tensors: params, then Adam m, then Adam v, each as raw f32 LE in declaration order
//! | FNV-1a 64 checksum of everything before it, u64 LE
//! ```
//!
//! Metadata records both configs, the counters, the vocabulary and the RNG
//! position, so a resumed run continues the same random stream.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{AdamState, Corruption, TrainConfig};
use crate::model::{ModelConfig, ModelParams};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"BMAECKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checksum mismatch: stored {stored:016x}, computed {computed:016x}")]
    Checksum { stored: u64, computed: u64 },
    #[error("truncated checkpoint")]
    Truncated,
    #[error("corrupt metadata: {0}")]
    Metadata(String),
}

/// Complete training state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub params: ModelParams<f32>,
    pub opt: AdamState<f32>,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: u64,
    pub total_steps: u64,
    pub rng: ChaCha8Rng,
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Option<[u8; 32]> {
    if s.len() != 64 {
        return None;
    }
    let mut out = [0u8; 32];
    for (i, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(s.get(2 * i..2 * i + 2)?, 16).ok()?;
    }
    Some(out)
}

impl Checkpoint {
    fn metadata(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let vocab = m.vocab();
        let mut kv: Vec<(String, String)> = vec![
            ("model.variant".into(), m.variant.to_string()),
            ("model.enc_layers".into(), m.enc_layers.to_string()),
            ("model.enc_heads".into(), m.enc_heads.to_string()),
            ("model.dec_layers".into(), m.dec_layers.to_string()),
            ("model.dec_heads".into(), m.dec_heads.to_string()),
            ("model.d_model".into(), m.d_model.to_string()),
            ("model.d_ff".into(), m.d_ff.to_string()),
            ("model.k".into(), m.k.to_string()),
            ("model.max_tokens".into(), m.max_tokens.to_string()),
            ("model.dropout".into(), format!("{:?}", m.dropout)),
            ("model.positional".into(), m.positional.as_str().into()),
            (
                "model.tie_output_embeddings".into(),
                m.tie_output_embeddings.to_string(),
            ),
            ("vocab.size".into(), vocab.size().to_string()),
            ("train.epochs".into(), t.epochs.to_string()),
            ("train.batch_size".into(), t.batch_size.to_string()),
            ("train.max_lr".into(), format!("{:?}", t.max_lr)),
            ("train.weight_decay".into(), format!("{:?}", t.weight_decay)),
            ("train.mask_ratio".into(), format!("{:?}", t.mask_ratio)),
            (
                "train.warmup_fraction".into(),
                format!("{:?}", t.warmup_fraction),
            ),
            ("train.grad_clip".into(), format!("{:?}", t.grad_clip)),
            ("train.seed".into(), t.seed.to_string()),
            (
                "train.with_mask_corruption".into(),
                t.with_mask_corruption.to_string(),
            ),
            (
                "train.encoder_only_corruption".into(),
                t.encoder_only_corruption.to_string(),
            ),
            ("state.epoch".into(), self.epoch.to_string()),
            ("state.step".into(), self.step.to_string()),
            ("state.total_steps".into(), self.total_steps.to_string()),
            ("state.adam_t".into(), self.opt.t.to_string()),
            ("rng.seed".into(), hex(&self.rng.get_seed())),
            ("rng.stream".into(), self.rng.get_stream().to_string()),
            ("rng.word_pos".into(), self.rng.get_word_pos().to_string()),
        ];
        let tensors = self.params.tensors();
        kv.push(("tensors.count".into(), tensors.len().to_string()));
        for (i, (name, _, t)) in tensors.iter().enumerate() {
            kv.push((
                format!("tensor.{i}"),
                format!("{name} {} {}", t.rows, t.cols),
            ));
        }
        kv.into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = self.metadata();
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        for set in [&self.params, &self.opt.m, &self.opt.v] {
            for (_, _, t) in set.tensors() {
                for x in &t.data {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        let sum = fnv1a64(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 8 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        if bytes.len() < 28 {
            return Err(CheckpointError::Truncated);
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
        let computed = fnv1a64(body);
        if stored != computed {
            return Err(CheckpointError::Checksum { stored, computed });
        }
        let meta_len = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
        let meta_end = 20usize
            .checked_add(meta_len)
            .filter(|&e| e <= body.len())
            .ok_or(CheckpointError::Truncated)?;
        let meta = std::str::from_utf8(&body[20..meta_end])
            .map_err(|e| CheckpointError::Metadata(e.to_string()))?;
        let kv: BTreeMap<&str, &str> = meta
            .lines()
            .map(|l| {
                l.split_once('=')
                    .ok_or_else(|| CheckpointError::Metadata(format!("bad line `{l}`")))
            })
            .collect::<Result<_, _>>()?;
        let get = |k: &str| {
            kv.get(k)
                .copied()
                .ok_or_else(|| CheckpointError::Metadata(format!("missing key {k}")))
        };
        fn parse<T: std::str::FromStr>(k: &str, v: &str) -> Result<T, CheckpointError> {
            v.parse()
                .map_err(|_| CheckpointError::Metadata(format!("bad value for {k}: `{v}`")))
        }
        macro_rules! field {
            ($k:literal) => {
                parse($k, get($k)?)?
            };
        }
        let model = ModelConfig {
            variant: field!("model.variant"),
            enc_layers: field!("model.enc_layers"),
            enc_heads: field!("model.enc_heads"),
            dec_layers: field!("model.dec_layers"),
            dec_heads: field!("model.dec_heads"),
            d_model: field!("model.d_model"),
            d_ff: field!("model.d_ff"),
            k: field!("model.k"),
            max_tokens: field!("model.max_tokens"),
            dropout: field!("model.dropout"),
            positional: field!("model.positional"),
            tie_output_embeddings: field!("model.tie_output_embeddings"),
        };
        model
            .validate()
            .map_err(|e| CheckpointError::Metadata(e.to_string()))?;
        let vocab_size: usize = field!("vocab.size");
        if vocab_size != model.vocab().size() {
            return Err(CheckpointError::Metadata(format!(
                "vocab size {vocab_size} does not match k={}",
                model.k
            )));
        }
        let train = TrainConfig {
            epochs: field!("train.epochs"),
            batch_size: field!("train.batch_size"),
            max_lr: field!("train.max_lr"),
            weight_decay: field!("train.weight_decay"),
            mask_ratio: field!("train.mask_ratio"),
            warmup_fraction: field!("train.warmup_fraction"),
            grad_clip: field!("train.grad_clip"),
            seed: field!("train.seed"),
            with_mask_corruption: parse::<Corruption>(
                "train.with_mask_corruption",
                get("train.with_mask_corruption")?,
            )?,
            encoder_only_corruption: field!("train.encoder_only_corruption"),
        };
        let seed = unhex(get("rng.seed")?)
            .ok_or_else(|| CheckpointError::Metadata("bad rng.seed".into()))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(field!("rng.stream"));
        rng.set_word_pos(field!("rng.word_pos"));

        // shapes come from the config; the metadata listing must agree
        let mut params = ModelParams::<f32>::init(&model, 0)
            .map_err(|e| CheckpointError::Metadata(e.to_string()))?;
        let count: usize = field!("tensors.count");
        let expected = params.tensors();
        if count != expected.len() {
            return Err(CheckpointError::Metadata(format!(
                "expected {} tensors, found {count}",
                expected.len()
            )));
        }
        for (i, (name, _, t)) in expected.iter().enumerate() {
            let want = format!("{name} {} {}", t.rows, t.cols);
            let key = format!("tensor.{i}");
            if get(&key)? != want {
                return Err(CheckpointError::Metadata(format!(
                    "{key}: expected `{want}`"
                )));
            }
        }
        drop(expected);
        let mut m = params.zeros_like();
        let mut v = params.zeros_like();
        let mut cursor = &body[meta_end..];
        for set in [&mut params, &mut m, &mut v] {
            for t in set.tensors_mut() {
                let n = t.data.len() * 4;
                if cursor.len() < n {
                    return Err(CheckpointError::Truncated);
                }
                for (x, chunk) in t.data.iter_mut().zip(cursor[..n].chunks_exact(4)) {
                    *x = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
                }
                cursor = &cursor[n..];
            }
        }
        if !cursor.is_empty() {
            return Err(CheckpointError::Metadata(format!(
                "{} trailing bytes",
                cursor.len()
            )));
        }
        Ok(Checkpoint {
            model,
            train,
            params,
            opt: AdamState {
                m,
                v,
                t: field!("state.adam_t"),
            },
            epoch: field!("state.epoch"),
            step: field!("state.step"),
            total_steps: field!("state.total_steps"),
            rng,
        })
    }
}

/// Writes to a sibling temporary file and renames it into place.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, ckpt.to_bytes())?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    Checkpoint::from_bytes(&fs::read(path)?)
}
