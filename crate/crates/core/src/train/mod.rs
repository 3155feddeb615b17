//! Masked-token pretraining: AdamW, a one-cycle learning-rate schedule,
//! per-epoch augmentation and masking, and resumable checkpoints.

mod checkpoint;

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::masking::{sample_mask, MaskError, MaskMode};
use crate::model::{
    loss_and_grads, pretrain_example, ModelConfig, ModelError, ModelParams, ParamKind,
    PretrainExample, Variant,
};
use crate::tensor::Scalar;
use crate::tokenizer::{sample_offset, tokenize, TokenizerError};

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
/// Initial learning rate is `max_lr / ONECYCLE_DIV`.
pub const ONECYCLE_DIV: f64 = 25.0;
/// Final learning rate is `max_lr / ONECYCLE_FINAL_DIV`.
pub const ONECYCLE_FINAL_DIV: f64 = 1e4;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("no training records")]
    EmptyData,
    #[error("record {index}: {source}")]
    Record {
        index: usize,
        #[source]
        source: TokenizerError,
    },
    #[error("non-finite gradient at step {step}")]
    NonFiniteGradient { step: u64 },
    #[error("training diverged (non-finite loss) in epoch {epoch} at step {step}")]
    Diverged { epoch: usize, step: u64 },
    #[error("total_steps must be positive")]
    NoSteps,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Corruption applied to selected tokens for the baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Corruption {
    /// Every selected token becomes `[MASK]`.
    FullMask,
    /// 80% `[MASK]`, 10% unchanged, 10% random.
    Bert,
}

impl Corruption {
    pub fn mask_mode(self) -> MaskMode {
        match self {
            Corruption::FullMask => MaskMode::WithMask,
            Corruption::Bert => MaskMode::Bert801010,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Corruption::FullMask => "full-mask",
            Corruption::Bert => "bert",
        }
    }
}

impl fmt::Display for Corruption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Corruption {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full-mask" | "full_mask" | "mask" => Ok(Corruption::FullMask),
            "bert" | "bert_80_10_10" => Ok(Corruption::Bert),
            _ => Err(format!(
                "unknown corruption `{s}` (expected full-mask or bert)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub max_lr: f64,
    pub weight_decay: f64,
    pub mask_ratio: f64,
    pub warmup_fraction: f64,
    pub grad_clip: f64,
    pub seed: u64,
    /// Corruption used by `MaeWithMask`.
    pub with_mask_corruption: Corruption,
    /// Corruption used by `EncoderOnly`.
    pub encoder_only_corruption: Corruption,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 35,
            batch_size: 32,
            max_lr: 1e-4,
            weight_decay: 1e-5,
            mask_ratio: 0.5,
            warmup_fraction: 0.3,
            grad_clip: 1.0,
            seed: 0,
            with_mask_corruption: Corruption::FullMask,
            encoder_only_corruption: Corruption::Bert,
        }
    }
}

impl TrainConfig {
    /// Full-scale settings used for the long BIOSCAN-style runs:
    /// 35 epochs, batch 128, peak learning rate 2e-4.
    pub fn appendix() -> Self {
        Self {
            epochs: 35,
            batch_size: 128,
            max_lr: 2e-4,
            ..Self::default()
        }
    }

    /// Peak learning rate 1e-4 with the desk batch size.
    pub fn method() -> Self {
        Self::default()
    }

    /// Short CPU runs on small synthetic corpora: a few hundred updates
    /// need a larger step size and smaller batches.
    pub fn desk() -> Self {
        Self {
            epochs: 15,
            batch_size: 8,
            max_lr: 3e-3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive");
        }
        if !(self.max_lr > 0.0 && self.max_lr.is_finite()) {
            return bad("max_lr must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be non-negative");
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return bad("mask_ratio must lie in (0,1)");
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction <= 1.0) {
            return bad("warmup_fraction must lie in (0,1]");
        }
        if self.grad_clip.is_nan() || self.grad_clip <= 0.0 {
            return bad("grad_clip must be positive");
        }
        Ok(())
    }

    pub fn mask_mode(&self, variant: Variant) -> MaskMode {
        match variant {
            Variant::BarcodeMae => MaskMode::Mae,
            Variant::MaeWithMask => self.with_mask_corruption.mask_mode(),
            Variant::EncoderOnly => self.encoder_only_corruption.mask_mode(),
        }
    }
}

/// One-cycle schedule with cosine annealing on both sides of the peak.
///
/// Rises from `max_lr / 25` at step 0 to exactly `max_lr` at
/// `round(warmup_fraction * total_steps)`, then falls to `max_lr / 1e4` at
/// `total_steps`.
pub fn onecycle_lr(
    step: u64,
    total_steps: u64,
    max_lr: f64,
    warmup_fraction: f64,
) -> Result<f64, TrainError> {
    if total_steps == 0 {
        return Err(TrainError::NoSteps);
    }
    let step = step.min(total_steps);
    let peak = ((warmup_fraction * total_steps as f64).round() as u64).clamp(1, total_steps);
    let start = max_lr / ONECYCLE_DIV;
    let end = max_lr / ONECYCLE_FINAL_DIV;
    let anneal = |from: f64, to: f64, pct: f64| {
        // weights are exactly 1 and 0 at both ends
        let c = (std::f64::consts::PI * pct).cos();
        from * (1.0 + c) / 2.0 + to * (1.0 - c) / 2.0
    };
    if step <= peak {
        Ok(anneal(start, max_lr, step as f64 / peak as f64))
    } else {
        Ok(anneal(
            max_lr,
            end,
            (step - peak) as f64 / (total_steps - peak) as f64,
        ))
    }
}

/// First and second moment estimates plus the update counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: ModelParams<T>,
    pub v: ModelParams<T>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

/// One AdamW update of a flat slice (`t` is the 1-based step count).
///
/// Weight decay is decoupled: `p <- p (1 - lr wd)` before the Adam step.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update<T: Scalar>(
    p: &mut [T],
    g: &[T],
    m: &mut [T],
    v: &mut [T],
    t: u64,
    lr: f64,
    wd: f64,
    decay: bool,
) {
    let b1 = T::from_f64(ADAM_BETA1);
    let b2 = T::from_f64(ADAM_BETA2);
    let one = T::one();
    let bc1 = T::from_f64(1.0 - ADAM_BETA1.powi(t as i32));
    let bc2 = T::from_f64(1.0 - ADAM_BETA2.powi(t as i32));
    let eps = T::from_f64(ADAM_EPS);
    let lr_t = T::from_f64(lr);
    let shrink = T::from_f64(1.0 - lr * wd);
    for i in 0..p.len() {
        m[i] = b1 * m[i] + (one - b1) * g[i];
        v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
        if decay {
            p[i] *= shrink;
        }
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        p[i] -= lr_t * mhat / (vhat.sqrt() + eps);
    }
}

/// AdamW over every trainable tensor. LayerNorm parameters and the PAD
/// embedding row are exempt from weight decay; frozen tables are skipped.
pub fn adamw_step<T: Scalar>(
    params: &mut ModelParams<T>,
    grads: &ModelParams<T>,
    state: &mut AdamState<T>,
    lr: f64,
    weight_decay: f64,
    pad_row: usize,
) -> Result<(), TrainError> {
    let next = state.t + 1;
    if !grads.is_finite() {
        return Err(TrainError::NonFiniteGradient { step: next });
    }
    state.t = next;
    let kinds: Vec<ParamKind> = params.tensors().into_iter().map(|(_, k, _)| k).collect();
    let gs = grads.tensors();
    let ps = params.tensors_mut();
    let ms = state.m.tensors_mut();
    let vs = state.v.tensors_mut();
    for ((((p, (_, _, g)), m), v), kind) in ps.into_iter().zip(gs).zip(ms).zip(vs).zip(kinds) {
        match kind {
            ParamKind::Frozen => {}
            ParamKind::Norm => adamw_update(
                &mut p.data,
                &g.data,
                &mut m.data,
                &mut v.data,
                next,
                lr,
                weight_decay,
                false,
            ),
            ParamKind::TokenEmbedding => {
                let d = p.cols;
                let (lo, hi) = (pad_row * d, (pad_row + 1) * d);
                adamw_update(
                    &mut p.data[..lo],
                    &g.data[..lo],
                    &mut m.data[..lo],
                    &mut v.data[..lo],
                    next,
                    lr,
                    weight_decay,
                    true,
                );
                adamw_update(
                    &mut p.data[lo..hi],
                    &g.data[lo..hi],
                    &mut m.data[lo..hi],
                    &mut v.data[lo..hi],
                    next,
                    lr,
                    weight_decay,
                    false,
                );
                adamw_update(
                    &mut p.data[hi..],
                    &g.data[hi..],
                    &mut m.data[hi..],
                    &mut v.data[hi..],
                    next,
                    lr,
                    weight_decay,
                    true,
                );
            }
            ParamKind::Weight | ParamKind::Bias | ParamKind::Position => adamw_update(
                &mut p.data,
                &g.data,
                &mut m.data,
                &mut v.data,
                next,
                lr,
                weight_decay,
                true,
            ),
        }
    }
    Ok(())
}

/// Global L2 norm of all gradients.
pub fn grad_norm<T: Scalar>(grads: &ModelParams<T>) -> f64 {
    grads
        .tensors()
        .iter()
        .flat_map(|(_, _, t)| t.data.iter())
        .map(|x| x.as_f64() * x.as_f64())
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut ModelParams<T>, max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if norm > max_norm {
        let s = T::from_f64(max_norm / norm);
        grads
            .tensors_mut()
            .into_iter()
            .for_each(|t| t.data.iter_mut().for_each(|x| *x *= s));
    }
    norm
}

/// Per-epoch training telemetry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub step: u64,
    pub loss: f64,
    pub masked_acc: f64,
    pub lr: f64,
}

pub const METRICS_HEADER: &str = "epoch\tstep\tloss\tmasked_acc\tlr";

impl EpochMetrics {
    pub fn tsv_row(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}",
            self.epoch, self.step, self.loss, self.masked_acc, self.lr
        )
    }
}

pub fn metrics_tsv(metrics: &[EpochMetrics]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for m in metrics {
        out.push_str(&m.tsv_row());
        out.push('\n');
    }
    out
}

fn seed_rng(seed: u64) -> ChaCha8Rng {
    // distinct stream from parameter initialisation, which uses `seed` directly
    ChaCha8Rng::seed_from_u64(seed ^ 0x9E37_79B9_7F4A_7C15)
}

pub fn steps_per_epoch(n_records: usize, batch_size: usize) -> u64 {
    n_records.div_ceil(batch_size) as u64
}

type Observer<'a> = Box<dyn FnMut(&PretrainExample) + 'a>;

/// Owns the training state for one run.
pub struct Trainer<'a> {
    sequences: Vec<String>,
    state: Checkpoint,
    observer: Option<Observer<'a>>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        sequences: Vec<String>,
        model: ModelConfig,
        train: TrainConfig,
    ) -> Result<Self, TrainError> {
        model.validate()?;
        train.validate()?;
        let params = ModelParams::init(&model, train.seed)?;
        let total_steps = train.epochs as u64 * steps_per_epoch(sequences.len(), train.batch_size);
        let state = Checkpoint {
            opt: AdamState::new(&params),
            params,
            epoch: 0,
            step: 0,
            total_steps,
            rng: seed_rng(train.seed),
            model,
            train,
        };
        Self::resume(sequences, state)
    }

    /// Continues from a checkpoint on the same sequences.
    pub fn resume(sequences: Vec<String>, state: Checkpoint) -> Result<Self, TrainError> {
        if sequences.is_empty() {
            return Err(TrainError::EmptyData);
        }
        let tok = state.model.tokenizer()?;
        // every sequence must survive the largest frame shift
        for (index, s) in sequences.iter().enumerate() {
            tokenize(s, &tok, tok.k - 1).map_err(|source| TrainError::Record { index, source })?;
        }
        Ok(Self {
            sequences,
            state,
            observer: None,
        })
    }

    /// Called with every example before it enters a forward pass.
    pub fn with_observer(mut self, f: impl FnMut(&PretrainExample) + 'a) -> Self {
        self.observer = Some(Box::new(f));
        self
    }

    pub fn checkpoint(&self) -> &Checkpoint {
        &self.state
    }

    pub fn into_checkpoint(self) -> Checkpoint {
        self.state
    }

    pub fn is_done(&self) -> bool {
        self.state.epoch >= self.state.train.epochs
    }

    /// Trains one epoch. On failure the state rolls back to the start of the
    /// epoch, so [`checkpoint`](Self::checkpoint) still returns the last good
    /// state.
    pub fn run_epoch(&mut self) -> Result<EpochMetrics, TrainError> {
        let snapshot = self.state.clone();
        let result = self.epoch_inner();
        if result.is_err() {
            self.state = snapshot;
        }
        result
    }

    fn epoch_inner(&mut self) -> Result<EpochMetrics, TrainError> {
        let st = &mut self.state;
        let tok = st.model.tokenizer()?;
        let vocab = st.model.vocab();
        let mode = st.train.mask_mode(st.model.variant);
        let mut order: Vec<usize> = (0..self.sequences.len()).collect();
        order.shuffle(&mut st.rng);

        let mut loss_sum = 0.0;
        let mut n_targets = 0usize;
        let mut n_correct = 0usize;
        let mut lr = 0.0;
        for chunk in order.chunks(st.train.batch_size) {
            let mut batch = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let offset = sample_offset(&tok, &mut st.rng);
                let ts = tokenize(&self.sequences[i], &tok, offset)
                    .map_err(|source| TrainError::Record { index: i, source })?;
                let plan = sample_mask(ts.len, st.train.mask_ratio, mode, &mut st.rng)?;
                let ex = pretrain_example(&ts, &plan, &vocab, &mut st.rng)?;
                if let Some(obs) = self.observer.as_mut() {
                    obs(&ex);
                }
                batch.push(ex);
            }
            if batch.iter().all(|e| e.targets.is_empty()) {
                continue;
            }
            lr = onecycle_lr(
                st.step,
                st.total_steps,
                st.train.max_lr,
                st.train.warmup_fraction,
            )?;
            let (stats, mut grads) =
                match loss_and_grads(&st.params, &st.model, &batch, Some(&mut st.rng)) {
                    Ok(x) => x,
                    Err(ModelError::NonFinite(_)) => {
                        return Err(TrainError::Diverged {
                            epoch: st.epoch,
                            step: st.step,
                        })
                    }
                    Err(e) => return Err(e.into()),
                };
            if !stats.loss_sum.is_finite() {
                return Err(TrainError::Diverged {
                    epoch: st.epoch,
                    step: st.step,
                });
            }
            clip_grad_norm(&mut grads, st.train.grad_clip);
            adamw_step(
                &mut st.params,
                &grads,
                &mut st.opt,
                lr,
                st.train.weight_decay,
                vocab.pad() as usize,
            )?;
            st.step += 1;
            loss_sum += stats.loss_sum;
            n_targets += stats.n_targets;
            n_correct += stats.n_correct;
        }
        st.epoch += 1;
        Ok(EpochMetrics {
            epoch: st.epoch,
            step: st.step,
            loss: loss_sum / n_targets.max(1) as f64,
            masked_acc: n_correct as f64 / n_targets.max(1) as f64,
            lr,
        })
    }
}

/// Runs every remaining epoch, calling `on_epoch` after each one.
pub fn train_with<F>(
    sequences: Vec<String>,
    model: ModelConfig,
    train: TrainConfig,
    mut on_epoch: F,
) -> Result<(Checkpoint, Vec<EpochMetrics>), TrainError>
where
    F: FnMut(&Checkpoint, &EpochMetrics) -> Result<(), TrainError>,
{
    let mut trainer = Trainer::new(sequences, model, train)?;
    let mut metrics = Vec::new();
    while !trainer.is_done() {
        let m = trainer.run_epoch()?;
        on_epoch(trainer.checkpoint(), &m)?;
        metrics.push(m);
    }
    Ok((trainer.into_checkpoint(), metrics))
}

/// Trains on the sequences of `records` for `train.epochs` epochs.
pub fn train<'r>(
    records: impl IntoIterator<Item = &'r crate::seqdata::BarcodeRecord>,
    model: ModelConfig,
    train: TrainConfig,
) -> Result<(Checkpoint, Vec<EpochMetrics>), TrainError> {
    let seqs = records.into_iter().map(|r| r.sequence.clone()).collect();
    train_with(seqs, model, train, |_, _| Ok(()))
}
