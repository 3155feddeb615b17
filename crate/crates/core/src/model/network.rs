use rand::{Rng, RngCore};

use super::layers::{dropout_bwd, stack_bwd, stack_fwd, Dropout, StackCache};
use super::{ModelConfig, ModelError, ModelParams, Positional, Variant};
use crate::embedding::EmbeddingMatrix;
use crate::masking::{
    bert_corrupt, build_decoder_input, build_encoder_input, mask_targets, DecoderInput,
    DecoderSource, EncoderInput, MaskMode, MaskPlan,
};
use crate::seqdata::BarcodeRecord;
use crate::tensor::{gemm, Scalar, Tensor};
use crate::tokenizer::{tokenize, TokenId, TokenSequence, Vocab};

/// Final-layer encoder states, one row per encoder input row.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput<T> {
    pub hidden: Tensor<T>,
}

/// One training sequence after masking.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainExample {
    pub enc: EncoderInput,
    pub dec: DecoderInput,
    /// `(position, original id)` pairs scored by the loss.
    pub targets: Vec<(usize, TokenId)>,
    pub mode: MaskMode,
}

/// Builds encoder/decoder inputs and targets for `plan.mode`.
pub fn pretrain_example<R: Rng + ?Sized>(
    ts: &TokenSequence,
    plan: &MaskPlan,
    vocab: &Vocab,
    rng: &mut R,
) -> Result<PretrainExample, ModelError> {
    let n = ts.ids.len();
    let (enc, targets) = match plan.mode {
        MaskMode::Mae | MaskMode::WithMask => (
            build_encoder_input(ts, plan, vocab)?,
            mask_targets(ts, plan),
        ),
        MaskMode::Bert801010 => {
            let c = bert_corrupt(ts, plan, vocab, rng)?;
            (EncoderInput::from_sequence(&c.sequence), c.targets)
        }
    };
    Ok(PretrainExample {
        enc,
        dec: build_decoder_input(plan, n)?,
        targets,
        mode: plan.mode,
    })
}

/// Summed loss statistics over a batch.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossStats {
    pub loss_sum: f64,
    pub n_targets: usize,
    pub n_correct: usize,
}

impl LossStats {
    pub fn mean_loss(&self) -> f64 {
        self.loss_sum / self.n_targets as f64
    }

    pub fn accuracy(&self) -> f64 {
        self.n_correct as f64 / self.n_targets as f64
    }

    pub fn merge(&mut self, other: &LossStats) {
        self.loss_sum += other.loss_sum;
        self.n_targets += other.n_targets;
        self.n_correct += other.n_correct;
    }
}

fn check_mode(variant: Variant, mode: MaskMode) -> Result<(), ModelError> {
    let ok = match variant {
        Variant::BarcodeMae => mode == MaskMode::Mae,
        Variant::MaeWithMask | Variant::EncoderOnly => mode != MaskMode::Mae,
    };
    if ok {
        Ok(())
    } else {
        Err(ModelError::VariantModeMismatch {
            variant,
            mode: mode.as_str(),
        })
    }
}

/// Token plus position embedding for each input row. PAD rows (invalid)
/// get no positional term.
fn embed_rows<T: Scalar>(
    params: &ModelParams<T>,
    input: &EncoderInput,
) -> Result<Tensor<T>, ModelError> {
    let d = params.tok_emb.cols;
    let max_tokens = params.pos_emb.rows;
    let mut x = Tensor::zeros(input.len(), d);
    for (i, (&id, &pos)) in input.ids.iter().zip(&input.positions).enumerate() {
        if id as usize >= params.tok_emb.rows {
            return Err(ModelError::Shape(format!(
                "token id {id} outside vocabulary"
            )));
        }
        let row = x.row_mut(i);
        row.copy_from_slice(params.tok_emb.row(id as usize));
        if input.valid[i] {
            if pos >= max_tokens {
                return Err(ModelError::PositionOverflow {
                    position: pos,
                    max_tokens,
                });
            }
            row.iter_mut()
                .zip(params.pos_emb.row(pos))
                .for_each(|(a, &p)| *a += p);
        }
    }
    Ok(x)
}

struct EncodeCache<T> {
    stack: StackCache<T>,
    drop0: Option<Vec<T>>,
}

fn encode<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    input: &EncoderInput,
    drop: &mut Dropout<'_>,
) -> Result<(Tensor<T>, EncodeCache<T>), ModelError> {
    if input.ids.len() != input.positions.len() || input.ids.len() != input.valid.len() {
        return Err(ModelError::Shape(
            "encoder input fields differ in length".into(),
        ));
    }
    let mut x = embed_rows(params, input)?;
    let drop0 = drop.apply(&mut x);
    let (h, stack) = stack_fwd(
        &params.encoder,
        &params.enc_norm,
        x,
        &input.valid,
        cfg.enc_heads,
        drop,
    );
    if !h.is_finite() {
        return Err(ModelError::NonFinite("encoder"));
    }
    Ok((h, EncodeCache { stack, drop0 }))
}

pub fn encoder_forward<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    input: &EncoderInput,
) -> Result<EncoderOutput<T>, ModelError> {
    let (hidden, _) = encode(params, cfg, input, &mut Dropout::off())?;
    Ok(EncoderOutput { hidden })
}

/// Attention weights of every encoder layer and head, for inspection.
pub fn encoder_attention<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    input: &EncoderInput,
) -> Result<Vec<Vec<Tensor<T>>>, ModelError> {
    let (_, cache) = encode(params, cfg, input, &mut Dropout::off())?;
    Ok(cache
        .stack
        .blocks
        .into_iter()
        .map(|b| b.attn.probs)
        .collect())
}

struct DecodeCache<T> {
    stack: StackCache<T>,
    drop0: Option<Vec<T>>,
}

fn decode<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    enc: &Tensor<T>,
    dec: &DecoderInput,
    vocab: &Vocab,
    drop: &mut Dropout<'_>,
) -> Result<(Tensor<T>, DecodeCache<T>), ModelError> {
    let norm = params
        .dec_norm
        .as_ref()
        .ok_or_else(|| ModelError::Shape("model has no decoder".into()))?;
    let n = dec.len();
    let d = params.tok_emb.cols;
    if n > params.pos_emb.rows {
        return Err(ModelError::PositionOverflow {
            position: n - 1,
            max_tokens: params.pos_emb.rows,
        });
    }
    let mut x = Tensor::zeros(n, d);
    let mask_row = params.tok_emb.row(vocab.mask() as usize);
    for (i, src) in dec.sources.iter().enumerate() {
        let base = match *src {
            DecoderSource::MaskSlot => mask_row,
            DecoderSource::FromEncoder(slot) if slot < enc.rows => enc.row(slot),
            DecoderSource::FromEncoder(slot) => {
                return Err(ModelError::Shape(format!(
                    "decoder references encoder row {slot} of {}",
                    enc.rows
                )))
            }
        };
        let row = x.row_mut(i);
        for ((a, &b), &p) in row.iter_mut().zip(base).zip(params.pos_emb.row(i)) {
            *a = b + p;
        }
    }
    let drop0 = drop.apply(&mut x);
    let valid = vec![true; n];
    let (h, stack) = stack_fwd(&params.decoder, norm, x, &valid, cfg.dec_heads, drop);
    if !h.is_finite() {
        return Err(ModelError::NonFinite("decoder"));
    }
    Ok((h, DecodeCache { stack, drop0 }))
}

/// Vocabulary logits for the selected rows of `h`.
fn head_fwd<T: Scalar>(params: &ModelParams<T>, h: &Tensor<T>, rows: &[usize]) -> Tensor<T> {
    let d = h.cols;
    let v = params.head_b.cols;
    let mut sel = Tensor::zeros(rows.len(), d);
    for (i, &r) in rows.iter().enumerate() {
        sel.row_mut(i).copy_from_slice(h.row(r));
    }
    let mut logits = Tensor::zeros(rows.len(), v);
    for i in 0..rows.len() {
        logits.row_mut(i).copy_from_slice(&params.head_b.data);
    }
    let w = match &params.head_w {
        Some(w) => w.view(),
        None => params.tok_emb.view().t(),
    };
    gemm(T::one(), sel.view(), w, T::one(), logits.view_mut());
    logits
}

fn head_bwd<T: Scalar>(
    params: &ModelParams<T>,
    grads: &mut ModelParams<T>,
    h: &Tensor<T>,
    rows: &[usize],
    dlogits: &Tensor<T>,
) -> Tensor<T> {
    let d = h.cols;
    let mut sel = Tensor::zeros(rows.len(), d);
    for (i, &r) in rows.iter().enumerate() {
        sel.row_mut(i).copy_from_slice(h.row(r));
    }
    for i in 0..dlogits.rows {
        grads
            .head_b
            .data
            .iter_mut()
            .zip(dlogits.row(i))
            .for_each(|(a, &g)| *a += g);
    }
    let mut dsel = Tensor::zeros(rows.len(), d);
    match (&params.head_w, &mut grads.head_w) {
        (Some(w), Some(gw)) => {
            gemm(
                T::one(),
                sel.view().t(),
                dlogits.view(),
                T::one(),
                gw.view_mut(),
            );
            gemm(
                T::one(),
                dlogits.view(),
                w.view().t(),
                T::zero(),
                dsel.view_mut(),
            );
        }
        _ => {
            // logits = sel E^T: dE += dlogits^T sel
            gemm(
                T::one(),
                dlogits.view().t(),
                sel.view(),
                T::one(),
                grads.tok_emb.view_mut(),
            );
            gemm(
                T::one(),
                dlogits.view(),
                params.tok_emb.view(),
                T::zero(),
                dsel.view_mut(),
            );
        }
    }
    let mut dh = Tensor::zeros(h.rows, d);
    for (i, &r) in rows.iter().enumerate() {
        dh.row_mut(r)
            .iter_mut()
            .zip(dsel.row(i))
            .for_each(|(a, &g)| *a += g);
    }
    dh
}

/// Softmax cross-entropy of one logits row against `target`: `(loss, argmax)`.
fn cross_entropy_row<T: Scalar>(
    row: &[T],
    target: usize,
    dlogits: Option<(&mut [T], T)>,
) -> (f64, usize) {
    let mut argmax = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[argmax] {
            argmax = j;
        }
    }
    let max = row[argmax];
    let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
    let lse = max + sum.ln();
    if let Some((out, scale)) = dlogits {
        for (o, &v) in out.iter_mut().zip(row) {
            *o = (v - lse).exp() * scale;
        }
        out[target] -= scale;
    }
    ((lse - row[target]).as_f64(), argmax)
}

/// Mean cross-entropy over the masked positions of `plan`.
///
/// `logits` has one row per sequence position; only rows named by `targets`
/// contribute.
pub fn mlm_loss<T: Scalar>(
    logits: &Tensor<T>,
    plan: &MaskPlan,
    targets: &[(usize, TokenId)],
) -> Result<f64, ModelError> {
    if plan.positions.is_empty() || targets.is_empty() {
        return Err(ModelError::EmptyMask);
    }
    let mut total = 0.0;
    for &(pos, id) in targets {
        if !plan.is_masked(pos) {
            return Err(ModelError::Shape(format!(
                "target position {pos} is not masked"
            )));
        }
        if pos >= logits.rows || id as usize >= logits.cols {
            return Err(ModelError::Shape(format!(
                "target ({pos}, {id}) outside logits {}x{}",
                logits.rows, logits.cols
            )));
        }
        total += cross_entropy_row(logits.row(pos), id as usize, None).0;
    }
    Ok(total / targets.len() as f64)
}

/// Logits over the vocabulary at every decoder position.
pub fn decoder_forward<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    enc_out: &EncoderOutput<T>,
    dec_in: &DecoderInput,
) -> Result<Tensor<T>, ModelError> {
    let (h, _) = decode(
        params,
        cfg,
        &enc_out.hidden,
        dec_in,
        &cfg.vocab(),
        &mut Dropout::off(),
    )?;
    let rows: Vec<usize> = (0..h.rows).collect();
    Ok(head_fwd(params, &h, &rows))
}

/// Runs one example; accumulates scaled gradients when `grads` is given.
fn example_pass<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    ex: &PretrainExample,
    drop: &mut Dropout<'_>,
    grads: Option<&mut ModelParams<T>>,
    scale: T,
) -> Result<LossStats, ModelError> {
    check_mode(cfg.variant, ex.mode)?;
    let vocab = cfg.vocab();
    let (h_enc, enc_cache) = encode(params, cfg, &ex.enc, drop)?;

    let (top, dec_cache, rows) = if cfg.variant.has_decoder() {
        let (h, c) = decode(params, cfg, &h_enc, &ex.dec, &vocab, drop)?;
        let rows: Vec<usize> = ex.targets.iter().map(|&(p, _)| p).collect();
        if let Some(&bad) = rows.iter().find(|&&r| r >= h.rows) {
            return Err(ModelError::Shape(format!(
                "target position {bad} beyond decoder length {}",
                h.rows
            )));
        }
        (Some(h), Some(c), rows)
    } else {
        let rows = ex
            .targets
            .iter()
            .map(|&(p, _)| {
                ex.enc
                    .positions
                    .iter()
                    .zip(&ex.enc.valid)
                    .position(|(&q, &ok)| ok && q == p)
                    .ok_or_else(|| {
                        ModelError::Shape(format!("target position {p} absent from encoder input"))
                    })
            })
            .collect::<Result<Vec<_>, _>>()?;
        (None, None, rows)
    };
    let top_ref = top.as_ref().unwrap_or(&h_enc);

    let logits = head_fwd(params, top_ref, &rows);
    let mut stats = LossStats::default();
    let mut dlogits = Tensor::zeros(logits.rows, logits.cols);
    for (i, &(_, target)) in ex.targets.iter().enumerate() {
        let (loss, argmax) = cross_entropy_row(
            logits.row(i),
            target as usize,
            Some((dlogits.row_mut(i), scale)),
        );
        stats.loss_sum += loss;
        stats.n_targets += 1;
        stats.n_correct += usize::from(argmax == target as usize);
    }
    if !stats.loss_sum.is_finite() {
        return Err(ModelError::NonFinite("loss"));
    }
    let Some(grads) = grads else { return Ok(stats) };

    let dtop = head_bwd(params, grads, top_ref, &rows, &dlogits);
    let learned_pos = params.positional == Positional::Learned;
    let dh_enc = match (&dec_cache, &params.dec_norm, &mut grads.dec_norm) {
        (Some(c), Some(norm), Some(gnorm)) => {
            let mut dx = stack_bwd(
                &params.decoder,
                norm,
                &mut grads.decoder,
                gnorm,
                &dtop,
                &c.stack,
                cfg.dec_heads,
            );
            dropout_bwd(&mut dx, &c.drop0);
            let mut dh = Tensor::zeros(h_enc.rows, h_enc.cols);
            let mask_row = vocab.mask() as usize;
            for (i, src) in ex.dec.sources.iter().enumerate() {
                let g = dx.row(i);
                if learned_pos {
                    grads
                        .pos_emb
                        .row_mut(i)
                        .iter_mut()
                        .zip(g)
                        .for_each(|(a, &b)| *a += b);
                }
                let dst = match *src {
                    DecoderSource::MaskSlot => grads.tok_emb.row_mut(mask_row),
                    DecoderSource::FromEncoder(slot) => dh.row_mut(slot),
                };
                dst.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
            }
            dh
        }
        _ => dtop,
    };

    let mut dx0 = stack_bwd(
        &params.encoder,
        &params.enc_norm,
        &mut grads.encoder,
        &mut grads.enc_norm,
        &dh_enc,
        &enc_cache.stack,
        cfg.enc_heads,
    );
    dropout_bwd(&mut dx0, &enc_cache.drop0);
    let pad = vocab.pad();
    for (i, (&id, &pos)) in ex.enc.ids.iter().zip(&ex.enc.positions).enumerate() {
        if !ex.enc.valid[i] || id == pad {
            continue;
        }
        let g = dx0.row(i);
        grads
            .tok_emb
            .row_mut(id as usize)
            .iter_mut()
            .zip(g)
            .for_each(|(a, &b)| *a += b);
        if learned_pos {
            grads
                .pos_emb
                .row_mut(pos)
                .iter_mut()
                .zip(g)
                .for_each(|(a, &b)| *a += b);
        }
    }
    // the PAD row stays pinned at zero, including through a tied head
    grads
        .tok_emb
        .row_mut(pad as usize)
        .iter_mut()
        .for_each(|x| *x = T::zero());
    Ok(stats)
}

fn batch_targets(batch: &[PretrainExample]) -> Result<usize, ModelError> {
    let total: usize = batch.iter().map(|e| e.targets.len()).sum();
    if total == 0 {
        Err(ModelError::EmptyMask)
    } else {
        Ok(total)
    }
}

/// Mean masked-token cross-entropy of a batch, without dropout.
pub fn forward_pretrain<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    batch: &[PretrainExample],
) -> Result<LossStats, ModelError> {
    let total = batch_targets(batch)?;
    let scale = T::one() / T::from_f64(total as f64);
    let mut stats = LossStats::default();
    for ex in batch {
        stats.merge(&example_pass(
            params,
            cfg,
            ex,
            &mut Dropout::off(),
            None,
            scale,
        )?);
    }
    Ok(stats)
}

/// Loss statistics and gradients of the mean masked-token loss.
///
/// Dropout at `cfg.dropout` is applied when `rng` is provided.
pub fn loss_and_grads<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    batch: &[PretrainExample],
    rng: Option<&mut dyn RngCore>,
) -> Result<(LossStats, ModelParams<T>), ModelError> {
    let total = batch_targets(batch)?;
    let scale = T::one() / T::from_f64(total as f64);
    let mut grads = params.zeros_like();
    let mut drop = Dropout {
        rate: cfg.dropout,
        rng,
    };
    let mut stats = LossStats::default();
    for ex in batch {
        stats.merge(&example_pass(
            params,
            cfg,
            ex,
            &mut drop,
            Some(&mut grads),
            scale,
        )?);
    }
    Ok((stats, grads))
}

/// Mean of final encoder states over valid rows holding k-mer or `[UNK]` ids.
pub fn embed_input<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    input: &EncoderInput,
) -> Result<Vec<T>, ModelError> {
    let vocab = cfg.vocab();
    let out = encoder_forward(params, cfg, input)?;
    let d = out.hidden.cols;
    let mut acc = vec![T::zero(); d];
    let mut count = 0usize;
    for (i, &id) in input.ids.iter().enumerate() {
        if input.valid[i] && vocab.is_poolable(id) {
            acc.iter_mut()
                .zip(out.hidden.row(i))
                .for_each(|(a, &h)| *a += h);
            count += 1;
        }
    }
    if count == 0 {
        return Err(ModelError::NothingToPool);
    }
    let inv = T::from_f64(count as f64);
    acc.iter_mut().for_each(|a| *a /= inv);
    Ok(acc)
}

/// Pooled embedding of an unmasked token sequence. Only the encoder runs.
pub fn embed_sequence<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    ts: &TokenSequence,
) -> Result<Vec<T>, ModelError> {
    embed_input(params, cfg, &EncoderInput::from_sequence(ts))
}

/// Embeds records at offset 0, rows aligned with input order.
pub fn embed_corpus<'a, T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    records: impl IntoIterator<Item = &'a BarcodeRecord>,
) -> Result<EmbeddingMatrix, ModelError> {
    let tok = cfg.tokenizer()?;
    let mut out = EmbeddingMatrix::new(cfg.d_model);
    for r in records {
        let wrap = |e: ModelError| ModelError::Record {
            record_id: r.record_id.clone(),
            source: Box::new(e),
        };
        let ts = tokenize(&r.sequence, &tok, 0).map_err(|e| wrap(e.into()))?;
        let v = embed_sequence(params, cfg, &ts).map_err(wrap)?;
        out.push(r, v.iter().map(|x| x.as_f64() as f32).collect());
    }
    Ok(out)
}
