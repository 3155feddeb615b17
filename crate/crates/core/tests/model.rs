mod common;

use barcodemae::masking::{
    build_decoder_input, build_encoder_input, mask_targets, EncoderInput, MaskMode, MaskPlan,
};
use barcodemae::model::{
    decoder_forward, embed_input, embed_sequence, encoder_attention, encoder_forward,
    forward_pretrain, loss_and_grads, mlm_loss, pretrain_example, ModelConfig, ModelError,
    ModelParams, Positional, Variant,
};
use barcodemae::tensor::Tensor;
use barcodemae::tokenizer::{pad_or_truncate, tokenize, TokenSequence, TokenizerConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny(variant: Variant) -> ModelConfig {
    ModelConfig {
        enc_layers: 1,
        enc_heads: 1,
        dec_layers: if variant.has_decoder() { 1 } else { 0 },
        dec_heads: 1,
        d_model: 8,
        d_ff: 16,
        k: 2,
        max_tokens: 16,
        dropout: 0.0,
        ..ModelConfig::desk(variant)
    }
}

fn gradient_check(cfg: &ModelConfig) {
    for (name, rel) in common::gradient_errors(cfg) {
        assert!(rel < 1e-4, "{} {name}: relative error {rel:e}", cfg.variant);
    }
}

#[test]
fn gradients_match_finite_differences_for_every_variant() {
    for v in Variant::ALL {
        gradient_check(&tiny(v));
    }
}

#[test]
fn gradients_match_with_tied_head_and_sinusoidal_positions() {
    let cfg = ModelConfig {
        tie_output_embeddings: true,
        positional: Positional::Sinusoidal,
        ..tiny(Variant::BarcodeMae)
    };
    gradient_check(&cfg);
    let cfg = ModelConfig {
        tie_output_embeddings: true,
        ..tiny(Variant::EncoderOnly)
    };
    gradient_check(&cfg);
}

#[test]
fn two_layer_stacks_pass_gradient_check() {
    let cfg = ModelConfig {
        enc_layers: 2,
        enc_heads: 2,
        dec_layers: 2,
        dec_heads: 2,
        ..tiny(Variant::MaeWithMask)
    };
    gradient_check(&cfg);
}

#[test]
fn zero_layer_encoder_is_normalised_embedding() {
    let cfg = ModelConfig {
        enc_layers: 0,
        ..tiny(Variant::EncoderOnly)
    };
    let params = ModelParams::<f64>::init(&cfg, 1).unwrap();
    let input = EncoderInput::full(vec![6]);
    let h = encoder_forward(&params, &cfg, &input).unwrap().hidden;
    let x: Vec<f64> = params
        .tok_emb
        .row(6)
        .iter()
        .zip(params.pos_emb.row(0))
        .map(|(a, b)| a + b)
        .collect();
    let mean = x.iter().sum::<f64>() / 8.0;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
    for (i, &v) in x.iter().enumerate() {
        let expected = (v - mean) / (var + 1e-5).sqrt();
        assert!((h.get(0, i) - expected).abs() < 1e-12);
    }
}

#[test]
fn barcode_mae_output_ignores_masked_token_identity() {
    let cfg = tiny(Variant::BarcodeMae);
    let params = ModelParams::<f64>::init(&cfg, 2).unwrap();
    let vocab = cfg.vocab();
    let a = TokenSequence::from_ids(vec![0, 1, 2, 3, 4, 5, 6, 7]);
    let mut b = a.clone();
    let plan = MaskPlan::new(vec![1, 4, 6], 8, MaskMode::Mae).unwrap();
    for &p in &plan.positions {
        b.ids[p] = 15 - b.ids[p];
    }
    let run = |ts: &TokenSequence| {
        let enc = encoder_forward(
            &params,
            &cfg,
            &build_encoder_input(ts, &plan, &vocab).unwrap(),
        )
        .unwrap();
        decoder_forward(&params, &cfg, &enc, &build_decoder_input(&plan, 8).unwrap()).unwrap()
    };
    assert_eq!(run(&a), run(&b));
}

#[test]
fn logits_cover_every_position_and_token() {
    for v in [Variant::BarcodeMae, Variant::MaeWithMask] {
        let cfg = tiny(v);
        let params = ModelParams::<f64>::init(&cfg, 2).unwrap();
        let ts = TokenSequence::from_ids(vec![3, 1, 4, 1, 5, 9, 2, 6, 5]);
        let plan = MaskPlan::new(vec![0, 2, 8], 9, common::mode_for(v)).unwrap();
        let enc = encoder_forward(
            &params,
            &cfg,
            &build_encoder_input(&ts, &plan, &cfg.vocab()).unwrap(),
        )
        .unwrap();
        let logits =
            decoder_forward(&params, &cfg, &enc, &build_decoder_input(&plan, 9).unwrap()).unwrap();
        assert_eq!((logits.rows, logits.cols), (9, 19));
    }
}

#[test]
fn all_masked_sequence_still_decodes() {
    let cfg = tiny(Variant::BarcodeMae);
    let params = ModelParams::<f64>::init(&cfg, 2).unwrap();
    let ts = TokenSequence::from_ids(vec![1, 2, 3]);
    let plan = MaskPlan::new(vec![0, 1, 2], 3, MaskMode::Mae).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let ex = pretrain_example(&ts, &plan, &cfg.vocab(), &mut rng).unwrap();
    assert!(ex.enc.is_empty());
    let stats = forward_pretrain(&params, &cfg, &[ex]).unwrap();
    assert!(stats.loss_sum.is_finite());
    assert_eq!(stats.n_targets, 3);
}

#[test]
fn uniform_logits_give_log_vocab_loss() {
    let cfg = ModelConfig::desk(Variant::BarcodeMae);
    let mut params = ModelParams::<f64>::init(&cfg, 0).unwrap();
    params.head_w.as_mut().unwrap().fill_zero();
    let ts = TokenSequence::from_ids((0..20).collect());
    let plan = MaskPlan::new(vec![2, 3, 5, 7, 11, 13], 20, MaskMode::Mae).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let ex = pretrain_example(&ts, &plan, &cfg.vocab(), &mut rng).unwrap();
    let loss = forward_pretrain(&params, &cfg, &[ex]).unwrap().mean_loss();
    assert!((loss - 259f64.ln()).abs() < 1e-12, "{loss}");
}

#[test]
fn mlm_loss_matches_direct_log_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let logits = Tensor::from_vec(
        5,
        7,
        (0..35)
            .map(|_| rng.random_range(-3.0..3.0))
            .collect::<Vec<f64>>(),
    );
    let ts = TokenSequence::from_ids(vec![0, 6, 2, 5, 1]);
    let plan = MaskPlan::new(vec![1, 3, 4], 5, MaskMode::WithMask).unwrap();
    let targets = mask_targets(&ts, &plan);
    let mut expected = 0.0;
    for &(p, t) in &targets {
        let row = logits.row(p);
        let z: f64 = row.iter().map(|x| x.exp()).sum();
        expected += -(row[t as usize].exp() / z).ln();
    }
    expected /= 3.0;
    assert!((mlm_loss(&logits, &plan, &targets).unwrap() - expected).abs() < 1e-12);
    let empty = MaskPlan::empty(5, MaskMode::WithMask);
    assert!(matches!(
        mlm_loss(&logits, &empty, &[]),
        Err(ModelError::EmptyMask)
    ));
}

#[test]
fn attention_ignores_padding() {
    let cfg = ModelConfig {
        enc_heads: 2,
        ..tiny(Variant::EncoderOnly)
    };
    let params = ModelParams::<f64>::init(&cfg, 4).unwrap();
    let tok = TokenizerConfig::new(2, 16).unwrap();
    let ts = tokenize("ACGTTGCAAC", &tok, 0).unwrap();
    let padded = pad_or_truncate(&ts, 16, &cfg.vocab());
    let input = EncoderInput::from_padded(&padded);
    for layer in encoder_attention(&params, &cfg, &input).unwrap() {
        for probs in layer {
            for r in 0..probs.rows {
                let row = probs.row(r);
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(row[ts.len..].iter().all(|&w| w == 0.0));
            }
        }
    }
}

#[test]
fn padding_does_not_change_embeddings() {
    let cfg = tiny(Variant::EncoderOnly);
    let params = ModelParams::<f64>::init(&cfg, 4).unwrap();
    let tok = cfg.tokenizer().unwrap();
    let ts = tokenize("ACGTTGCAACGG", &tok, 0).unwrap();
    let plain = embed_sequence(&params, &cfg, &ts).unwrap();
    let padded = embed_input(
        &params,
        &cfg,
        &EncoderInput::from_padded(&pad_or_truncate(&ts, 16, &cfg.vocab())),
    )
    .unwrap();
    for (a, b) in plain.iter().zip(&padded) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn pooling_skips_mask_and_pad_rows() {
    let cfg = tiny(Variant::MaeWithMask);
    let params = ModelParams::<f64>::init(&cfg, 9).unwrap();
    let v = cfg.vocab();
    let input = EncoderInput::full(vec![1, v.mask(), 7, v.unk(), v.mask()]);
    let h = encoder_forward(&params, &cfg, &input).unwrap().hidden;
    let pooled = embed_input(&params, &cfg, &input).unwrap();
    for j in 0..cfg.d_model {
        let expected = (h.get(0, j) + h.get(2, j) + h.get(3, j)) / 3.0;
        assert!((pooled[j] - expected).abs() < 1e-12);
    }
    let only_mask = EncoderInput::full(vec![v.mask(), v.mask()]);
    assert!(matches!(
        embed_input(&params, &cfg, &only_mask),
        Err(ModelError::NothingToPool)
    ));
}

#[test]
fn variant_rejects_incompatible_mask_mode() {
    let cfg = tiny(Variant::BarcodeMae);
    let params = ModelParams::<f64>::init(&cfg, 0).unwrap();
    let ts = TokenSequence::from_ids(vec![1, 2, 3, 4]);
    let plan = MaskPlan::new(vec![1], 4, MaskMode::WithMask).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let ex = pretrain_example(&ts, &plan, &cfg.vocab(), &mut rng).unwrap();
    assert!(matches!(
        forward_pretrain(&params, &cfg, &[ex]),
        Err(ModelError::VariantModeMismatch { .. })
    ));
    let cfg = tiny(Variant::EncoderOnly);
    let params = ModelParams::<f64>::init(&cfg, 0).unwrap();
    let plan = MaskPlan::new(vec![1], 4, MaskMode::Mae).unwrap();
    let ex = pretrain_example(&ts, &plan, &cfg.vocab(), &mut rng).unwrap();
    assert!(forward_pretrain(&params, &cfg, &[ex]).is_err());
}

#[test]
fn position_beyond_table_is_an_error() {
    let cfg = tiny(Variant::EncoderOnly);
    let params = ModelParams::<f64>::init(&cfg, 0).unwrap();
    let input = EncoderInput {
        ids: vec![1],
        positions: vec![16],
        valid: vec![true],
    };
    assert!(matches!(
        encoder_forward(&params, &cfg, &input),
        Err(ModelError::PositionOverflow { .. })
    ));
}

#[test]
fn init_is_seed_deterministic() {
    let cfg = tiny(Variant::BarcodeMae);
    assert_eq!(
        ModelParams::<f32>::init(&cfg, 5).unwrap(),
        ModelParams::<f32>::init(&cfg, 5).unwrap()
    );
    assert_ne!(
        ModelParams::<f32>::init(&cfg, 5).unwrap(),
        ModelParams::<f32>::init(&cfg, 6).unwrap()
    );
}

#[test]
fn dropout_changes_loss_only_when_rng_given() {
    let cfg = ModelConfig {
        dropout: 0.3,
        ..tiny(Variant::BarcodeMae)
    };
    let params = ModelParams::<f64>::init(&cfg, 1).unwrap();
    let b = common::pretrain_batch(&cfg, 1);
    let (s0, _) = loss_and_grads(&params, &cfg, &b, None).unwrap();
    let (s1, _) = loss_and_grads(&params, &cfg, &b, None).unwrap();
    assert_eq!(s0, s1);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (s2, _) = loss_and_grads(&params, &cfg, &b, Some(&mut rng)).unwrap();
    assert_ne!(s0.loss_sum, s2.loss_sum);
}

#[test]
fn unmasked_logits_do_not_affect_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut logits = Tensor::from_vec(
        6,
        19,
        (0..114)
            .map(|_| rng.random_range(-2.0..2.0))
            .collect::<Vec<f64>>(),
    );
    let ts = TokenSequence::from_ids(vec![1, 2, 3, 4, 5, 6]);
    let plan = MaskPlan::new(vec![0, 4], 6, MaskMode::Mae).unwrap();
    let targets = mask_targets(&ts, &plan);
    let before = mlm_loss(&logits, &plan, &targets).unwrap();
    for r in [1, 2, 3, 5] {
        logits.row_mut(r).iter_mut().for_each(|x| *x = 0.0);
    }
    assert_eq!(mlm_loss(&logits, &plan, &targets).unwrap(), before);
}

#[test]
fn batch_order_does_not_change_per_example_results() {
    let cfg = tiny(Variant::MaeWithMask);
    let params = ModelParams::<f64>::init(&cfg, 3).unwrap();
    let b = common::pretrain_batch(&cfg, 8);
    let mut rev = b.clone();
    rev.reverse();
    let fwd = forward_pretrain(&params, &cfg, &b).unwrap();
    let bwd = forward_pretrain(&params, &cfg, &rev).unwrap();
    assert_eq!(
        (fwd.n_targets, fwd.n_correct),
        (bwd.n_targets, bwd.n_correct)
    );
    assert!((fwd.loss_sum - bwd.loss_sum).abs() < 1e-12);
    for ex in &b {
        let alone = encoder_forward(&params, &cfg, &ex.enc).unwrap();
        let again = encoder_forward(&params, &cfg, &ex.enc).unwrap();
        assert_eq!(alone, again);
    }
}
