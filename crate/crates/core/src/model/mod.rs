//! Transformer encoder-decoder for masked-token pretraining.
//!
//! Three variants share the same building blocks:
//!
//! * `BarcodeMae`: the encoder sees only unmasked tokens, each embedded with
//!   its original position; the decoder sees every position, with `[MASK]`
//!   embeddings in the withheld slots, and predicts the withheld tokens.
//! * `MaeWithMask`: the same encoder-decoder, but `[MASK]` tokens are shown to
//!   the encoder.
//! * `EncoderOnly`: a BERT-style encoder whose outputs feed the prediction
//!   head directly.
//!
//! Blocks are pre-norm (LayerNorm → attention → residual, LayerNorm → GELU
//! MLP → residual) and all gradients are computed by hand-written reverse
//! passes in [`layers`].

mod layers;
mod network;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::masking::MaskError;
use crate::tensor::{Scalar, Tensor};
use crate::tokenizer::{TokenizerConfig, TokenizerError, Vocab};

pub use network::{
    decoder_forward, embed_corpus, embed_input, embed_sequence, encoder_attention, encoder_forward,
    forward_pretrain, loss_and_grads, mlm_loss, pretrain_example, EncoderOutput, LossStats,
    PretrainExample,
};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("position {position} exceeds max_tokens {max_tokens}")]
    PositionOverflow { position: usize, max_tokens: usize },
    #[error("non-finite activations in {0}")]
    NonFinite(&'static str),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("variant {variant} cannot train on {mode} batches")]
    VariantModeMismatch {
        variant: Variant,
        mode: &'static str,
    },
    #[error("no masked positions to score")]
    EmptyMask,
    #[error("sequence has no poolable tokens")]
    NothingToPool,
    #[error("record `{record_id}`: {source}")]
    Record {
        record_id: String,
        #[source]
        source: Box<ModelError>,
    },
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Mask(#[from] MaskError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    BarcodeMae,
    MaeWithMask,
    EncoderOnly,
}

impl Variant {
    pub const ALL: [Variant; 3] = [
        Variant::BarcodeMae,
        Variant::MaeWithMask,
        Variant::EncoderOnly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::BarcodeMae => "barcode-mae",
            Variant::MaeWithMask => "mae-with-mask",
            Variant::EncoderOnly => "encoder-only",
        }
    }

    pub fn has_decoder(self) -> bool {
        self != Variant::EncoderOnly
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.replace('_', "-");
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == norm)
            .ok_or_else(|| {
                format!(
                    "unknown variant `{s}` (expected barcode-mae, mae-with-mask or encoder-only)"
                )
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Positional {
    Learned,
    Sinusoidal,
}

impl Positional {
    pub fn as_str(self) -> &'static str {
        match self {
            Positional::Learned => "learned",
            Positional::Sinusoidal => "sinusoidal",
        }
    }
}

impl FromStr for Positional {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "learned" => Ok(Positional::Learned),
            "sinusoidal" => Ok(Positional::Sinusoidal),
            _ => Err(format!("unknown positional scheme `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub enc_layers: usize,
    pub enc_heads: usize,
    pub dec_layers: usize,
    pub dec_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub k: usize,
    pub max_tokens: usize,
    pub dropout: f64,
    pub positional: Positional,
    pub tie_output_embeddings: bool,
}

impl ModelConfig {
    /// Small configuration for CPU experiments: `enc:2-2 dec:2-2`, width 64.
    pub fn desk(variant: Variant) -> Self {
        Self {
            variant,
            enc_layers: 2,
            enc_heads: 2,
            dec_layers: if variant.has_decoder() { 2 } else { 0 },
            dec_heads: 2,
            d_model: 64,
            d_ff: 256,
            k: 4,
            max_tokens: 128,
            dropout: 0.1,
            positional: Positional::Learned,
            tie_output_embeddings: false,
        }
    }

    /// Full-size configuration: six layers and six heads on each side, width 768.
    pub fn full_scale(variant: Variant, k: usize) -> Self {
        Self {
            enc_layers: 6,
            enc_heads: 6,
            dec_layers: if variant.has_decoder() { 6 } else { 0 },
            dec_heads: 6,
            d_model: 768,
            d_ff: 3072,
            k,
            max_tokens: 660 / k,
            ..Self::desk(variant)
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        self.tokenizer()
            .map_err(|e| ModelError::InvalidConfig(e.to_string()))?;
        if self.d_model == 0 || self.d_ff == 0 {
            return bad("d_model and d_ff must be positive".into());
        }
        if self.enc_heads == 0 || !self.d_model.is_multiple_of(self.enc_heads) {
            return bad(format!(
                "d_model {} not divisible by enc_heads {}",
                self.d_model, self.enc_heads
            ));
        }
        match self.variant {
            Variant::EncoderOnly if self.dec_layers != 0 => {
                return bad(format!(
                    "encoder-only requires dec_layers == 0, got {}",
                    self.dec_layers
                ));
            }
            Variant::BarcodeMae | Variant::MaeWithMask => {
                if self.dec_layers == 0 {
                    return bad(format!(
                        "{} requires at least one decoder layer",
                        self.variant
                    ));
                }
                if self.dec_heads == 0 || !self.d_model.is_multiple_of(self.dec_heads) {
                    return bad(format!(
                        "d_model {} not divisible by dec_heads {}",
                        self.d_model, self.dec_heads
                    ));
                }
            }
            _ => {}
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0,1), got {}", self.dropout));
        }
        Ok(())
    }

    pub fn tokenizer(&self) -> Result<TokenizerConfig, TokenizerError> {
        TokenizerConfig::new(self.k, self.max_tokens)
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.k)
    }

    /// `enc:L-H dec:M-J`
    pub fn arch_string(&self) -> String {
        format!(
            "enc:{}-{} dec:{}-{}",
            self.enc_layers, self.enc_heads, self.dec_layers, self.dec_heads
        )
    }
}

/// How a parameter tensor is treated by the optimizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    /// LayerNorm gain or bias: never decayed.
    Norm,
    /// Token embedding table; the PAD row is pinned to zero.
    TokenEmbedding,
    /// Positional table, trainable.
    Position,
    /// Positional table, fixed (sinusoidal).
    Frozen,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams<T> {
    pub gain: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> LayerNormParams<T> {
    fn new(d: usize) -> Self {
        Self {
            gain: Tensor::filled(1, d, T::one()),
            bias: Tensor::zeros(1, d),
        }
    }
}

/// One pre-norm transformer block. Weight matrices are stored `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<T> {
    pub ln1: LayerNormParams<T>,
    pub wq: Tensor<T>,
    pub bq: Tensor<T>,
    pub wk: Tensor<T>,
    pub bk: Tensor<T>,
    pub wv: Tensor<T>,
    pub bv: Tensor<T>,
    pub wo: Tensor<T>,
    pub bo: Tensor<T>,
    pub ln2: LayerNormParams<T>,
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

impl<T: Scalar> BlockParams<T> {
    fn new(d: usize, f: usize, init: &mut impl FnMut(usize, usize) -> Tensor<T>) -> Self {
        Self {
            ln1: LayerNormParams::new(d),
            wq: init(d, d),
            bq: Tensor::zeros(1, d),
            wk: init(d, d),
            bk: Tensor::zeros(1, d),
            wv: init(d, d),
            bv: Tensor::zeros(1, d),
            wo: init(d, d),
            bo: Tensor::zeros(1, d),
            ln2: LayerNormParams::new(d),
            w1: init(d, f),
            b1: Tensor::zeros(1, f),
            w2: init(f, d),
            b2: Tensor::zeros(1, d),
        }
    }

    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ParamKind, &'a Tensor<T>)>) {
        use ParamKind::*;
        let items: [(&str, ParamKind, &'a Tensor<T>); 16] = [
            ("ln1.gain", Norm, &self.ln1.gain),
            ("ln1.bias", Norm, &self.ln1.bias),
            ("attn.wq", Weight, &self.wq),
            ("attn.bq", Bias, &self.bq),
            ("attn.wk", Weight, &self.wk),
            ("attn.bk", Bias, &self.bk),
            ("attn.wv", Weight, &self.wv),
            ("attn.bv", Bias, &self.bv),
            ("attn.wo", Weight, &self.wo),
            ("attn.bo", Bias, &self.bo),
            ("ln2.gain", Norm, &self.ln2.gain),
            ("ln2.bias", Norm, &self.ln2.bias),
            ("mlp.w1", Weight, &self.w1),
            ("mlp.b1", Bias, &self.b1),
            ("mlp.w2", Weight, &self.w2),
            ("mlp.b2", Bias, &self.b2),
        ];
        out.extend(
            items
                .into_iter()
                .map(|(n, k, t)| (format!("{prefix}.{n}"), k, t)),
        );
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor<T>>) {
        out.extend([
            &mut self.ln1.gain,
            &mut self.ln1.bias,
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln2.gain,
            &mut self.ln2.bias,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]);
    }
}

/// Every learnable tensor of the model. The same type holds gradients and
/// optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    /// `vocab × d_model`; row `[MASK]` is the decoder's mask-slot embedding.
    pub tok_emb: Tensor<T>,
    /// `max_tokens × d_model`.
    pub pos_emb: Tensor<T>,
    pub encoder: Vec<BlockParams<T>>,
    pub enc_norm: LayerNormParams<T>,
    pub decoder: Vec<BlockParams<T>>,
    pub dec_norm: Option<LayerNormParams<T>>,
    /// `d_model × vocab`; `None` when tied to `tok_emb`.
    pub head_w: Option<Tensor<T>>,
    pub head_b: Tensor<T>,
    pub positional: Positional,
}

pub const INIT_STD: f64 = 0.02;

pub fn sinusoidal_table<T: Scalar>(rows: usize, d: usize) -> Tensor<T> {
    let mut t = Tensor::zeros(rows, d);
    for pos in 0..rows {
        for i in 0..d {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 * freq;
            t.data[pos * d + i] = T::from_f64(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    t
}

impl<T: Scalar> ModelParams<T> {
    /// Normal(0, 0.02) weights, zero biases, unit LayerNorm gains; the PAD
    /// embedding row is zero. Deterministic for a given seed.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut init = |r: usize, c: usize| {
            Tensor::from_vec(
                r,
                c,
                (0..r * c)
                    .map(|_| T::from_f64(normal.sample(&mut rng)))
                    .collect(),
            )
        };
        let vocab = cfg.vocab();
        let (d, f) = (cfg.d_model, cfg.d_ff);

        let mut tok_emb = init(vocab.size(), d);
        tok_emb
            .row_mut(vocab.pad() as usize)
            .iter_mut()
            .for_each(|x| *x = T::zero());
        let pos_emb = match cfg.positional {
            Positional::Learned => init(cfg.max_tokens, d),
            Positional::Sinusoidal => sinusoidal_table(cfg.max_tokens, d),
        };
        let encoder = (0..cfg.enc_layers)
            .map(|_| BlockParams::new(d, f, &mut init))
            .collect();
        let decoder = (0..cfg.dec_layers)
            .map(|_| BlockParams::new(d, f, &mut init))
            .collect();
        let head_w = (!cfg.tie_output_embeddings).then(|| init(d, vocab.size()));
        Ok(Self {
            tok_emb,
            pos_emb,
            encoder,
            enc_norm: LayerNormParams::new(d),
            decoder,
            dec_norm: (cfg.dec_layers > 0).then(|| LayerNormParams::new(d)),
            head_w,
            head_b: Tensor::zeros(1, vocab.size()),
            positional: cfg.positional,
        })
    }

    /// Same structure, all zeros.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        out.tensors_mut().into_iter().for_each(Tensor::fill_zero);
        out
    }

    /// `(name, kind, tensor)` in a fixed declaration order.
    pub fn tensors(&self) -> Vec<(String, ParamKind, &Tensor<T>)> {
        let mut out = vec![(
            "tok_emb".to_string(),
            ParamKind::TokenEmbedding,
            &self.tok_emb,
        )];
        let pos_kind = match self.positional {
            Positional::Learned => ParamKind::Position,
            Positional::Sinusoidal => ParamKind::Frozen,
        };
        out.push(("pos_emb".to_string(), pos_kind, &self.pos_emb));
        for (i, b) in self.encoder.iter().enumerate() {
            b.collect(&format!("encoder.{i}"), &mut out);
        }
        out.push(("enc_norm.gain".into(), ParamKind::Norm, &self.enc_norm.gain));
        out.push(("enc_norm.bias".into(), ParamKind::Norm, &self.enc_norm.bias));
        for (i, b) in self.decoder.iter().enumerate() {
            b.collect(&format!("decoder.{i}"), &mut out);
        }
        if let Some(n) = &self.dec_norm {
            out.push(("dec_norm.gain".into(), ParamKind::Norm, &n.gain));
            out.push(("dec_norm.bias".into(), ParamKind::Norm, &n.bias));
        }
        if let Some(w) = &self.head_w {
            out.push(("head.w".into(), ParamKind::Weight, w));
        }
        out.push(("head.b".into(), ParamKind::Bias, &self.head_b));
        out
    }

    /// Mutable tensors in the same order as [`tensors`](Self::tensors).
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for b in &mut self.encoder {
            b.collect_mut(&mut out);
        }
        out.push(&mut self.enc_norm.gain);
        out.push(&mut self.enc_norm.bias);
        for b in &mut self.decoder {
            b.collect_mut(&mut out);
        }
        if let Some(n) = &mut self.dec_norm {
            out.push(&mut n.gain);
            out.push(&mut n.bias);
        }
        if let Some(w) = &mut self.head_w {
            out.push(w);
        }
        out.push(&mut self.head_b);
        out
    }

    /// Number of trainable scalars (excludes a frozen sinusoidal table).
    pub fn n_trainable(&self) -> usize {
        self.tensors()
            .iter()
            .filter(|(_, k, _)| *k != ParamKind::Frozen)
            .map(|(_, _, t)| t.len())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, _, t)| t.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let mut out = ModelParams::<U> {
            tok_emb: self.tok_emb.cast(),
            pos_emb: self.pos_emb.cast(),
            encoder: Vec::new(),
            enc_norm: LayerNormParams {
                gain: self.enc_norm.gain.cast(),
                bias: self.enc_norm.bias.cast(),
            },
            decoder: Vec::new(),
            dec_norm: self.dec_norm.as_ref().map(|n| LayerNormParams {
                gain: n.gain.cast(),
                bias: n.bias.cast(),
            }),
            head_w: self.head_w.as_ref().map(Tensor::cast),
            head_b: self.head_b.cast(),
            positional: self.positional,
        };
        let cast_block = |b: &BlockParams<T>| BlockParams {
            ln1: LayerNormParams {
                gain: b.ln1.gain.cast(),
                bias: b.ln1.bias.cast(),
            },
            wq: b.wq.cast(),
            bq: b.bq.cast(),
            wk: b.wk.cast(),
            bk: b.bk.cast(),
            wv: b.wv.cast(),
            bv: b.bv.cast(),
            wo: b.wo.cast(),
            bo: b.bo.cast(),
            ln2: LayerNormParams {
                gain: b.ln2.gain.cast(),
                bias: b.ln2.bias.cast(),
            },
            w1: b.w1.cast(),
            b1: b.b1.cast(),
            w2: b.w2.cast(),
            b2: b.b2.cast(),
        };
        out.encoder = self.encoder.iter().map(cast_block).collect();
        out.decoder = self.decoder.iter().map(cast_block).collect();
        out
    }
}
