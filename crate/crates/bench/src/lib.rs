//! Shared fixtures for the benchmarks.

use barcodemae::masking::sample_mask;
use barcodemae::model::{pretrain_example, ModelConfig, PretrainExample};
use barcodemae::seqdata::{generate_synthetic, RecordSet, SyntheticCorpusConfig};
use barcodemae::tokenizer::tokenize;
use barcodemae::Variant;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_sequence(rng: &mut impl Rng, len: usize) -> String {
    (0..len)
        .map(|_| b"ACGT"[rng.random_range(0..4)] as char)
        .collect()
}

pub fn corpus(records_per_species: usize) -> RecordSet {
    generate_synthetic(
        &SyntheticCorpusConfig {
            records_per_species,
            ..SyntheticCorpusConfig::default()
        },
        0,
    )
    .expect("default corpus config is valid")
}

/// One masked batch for `variant` at desk scale.
pub fn pretrain_batch(variant: Variant, size: usize) -> (ModelConfig, Vec<PretrainExample>) {
    let cfg = ModelConfig {
        dropout: 0.0,
        ..ModelConfig::desk(variant)
    };
    let tok = cfg.tokenizer().expect("desk tokenizer is valid");
    let vocab = cfg.vocab();
    let mode = barcodemae::train::TrainConfig::default().mask_mode(variant);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let batch = (0..size)
        .map(|_| {
            let ts = tokenize(&random_sequence(&mut rng, 256), &tok, 0).expect("long enough");
            let plan = sample_mask(ts.len, 0.5, mode, &mut rng).expect("valid ratio");
            pretrain_example(&ts, &plan, &vocab, &mut rng).expect("consistent plan")
        })
        .collect();
    (cfg, batch)
}

/// Gaussian blobs with labels, `n` rows of width `d`.
pub fn blobs(n: usize, d: usize, k: usize) -> (Vec<f64>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let centers: Vec<Vec<f64>> = (0..k)
        .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let mut rows = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % k;
        labels.push(c);
        rows.extend(centers[c].iter().map(|x| x + rng.random_range(-0.2..0.2)));
    }
    (rows, labels)
}
