mod common;

use barcodemae::eval::{
    ami, bin_reconstruction_eval, knn_probe, ratio_grid, robustness_sweep, ward_linkage, Pca,
    Reducer, RobustnessMode,
};
use barcodemae::model::{ModelConfig, ModelParams, Variant};
use barcodemae::seqdata::{generate_synthetic, BarcodeRecord, Partition, SyntheticCorpusConfig};
use barcodemae::{EmbeddingMatrix, LabelLevel};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use common::{ami_by_permutation, permutations, set_partitions, ward_bruteforce};

#[test]
fn ami_matches_permutation_average_for_small_partitions() {
    for n in 2..=5 {
        let parts = set_partitions(n);
        let perms = permutations(n);
        for a in &parts {
            for b in &parts {
                let want = ami_by_permutation(a, b, &perms);
                let got = ami(a, b).unwrap();
                assert!((got - want).abs() < 1e-10, "{a:?} {b:?}: {got} vs {want}");
            }
        }
    }
}

proptest! {
    #[test]
    fn ami_is_symmetric(a in prop::collection::vec(0u8..4, 2..30), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b: Vec<u8> = a.iter().map(|_| rng.random_range(0..3)).collect();
        let (x, y) = (ami(&a, &b).unwrap(), ami(&b, &a).unwrap());
        prop_assert!((x - y).abs() < 1e-10);
    }

    #[test]
    fn ami_ignores_label_names(a in prop::collection::vec(0usize..5, 2..30), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b: Vec<usize> = a.iter().map(|_| rng.random_range(0..4)).collect();
        let renamed: Vec<String> = b.iter().map(|v| format!("L{}", 7 - v)).collect();
        let (x, y) = (ami(&a, &b).unwrap(), ami(&a, &renamed).unwrap());
        prop_assert!((x - y).abs() < 1e-12);
    }

    #[test]
    fn knn_is_scale_invariant(seed in any::<u64>(), exp in -8i32..8) {
        let (r, q) = random_sets(seed, 20, 10, 6);
        let factor = 2f32.powi(exp);
        let base = knn_probe(&r, &q, LabelLevel::Genus).unwrap();
        let scaled = knn_probe(&r.scaled(factor), &q, LabelLevel::Genus).unwrap();
        prop_assert_eq!(base.predictions, scaled.predictions);
    }
}

fn random_points(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            (0..d)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect()
}

#[test]
fn ward_matches_exhaustive_merge_search() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = random_points(&mut rng, 8, 3);
        let x = DMatrix::from_fn(8, 3, |i, j| pts[i][j]);
        let fast = ward_linkage(&x);
        let slow = ward_bruteforce(&pts);
        assert_eq!(fast.len(), 7);
        for (m, (a, b, sse)) in fast.iter().zip(&slow) {
            assert_eq!((m.a, m.b), (*a, *b), "seed {seed}");
            assert!(
                (m.cost - 2.0 * sse).abs() < 1e-9 * (1.0 + sse),
                "{} vs {}",
                m.cost,
                2.0 * sse
            );
        }
    }
}

#[test]
fn ward_separates_two_blobs() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut rows = Vec::new();
    for i in 0..20 {
        let center = if i % 2 == 0 {
            [1.0, 0.0, 0.0]
        } else {
            [0.0, 1.0, 0.0]
        };
        rows.extend(
            center
                .iter()
                .map(|c| c + 0.05 * rng.sample::<f64, _>(StandardNormal)),
        );
    }
    let x = DMatrix::from_row_slice(20, 3, &rows);
    let labels = barcodemae::eval::agglomerative_cluster(&x, 2).unwrap();
    let truth: Vec<usize> = (0..20).map(|i| i % 2).collect();
    assert_eq!(ami(&truth, &labels).unwrap(), 1.0);
}

fn random_sets(
    seed: u64,
    n_ref: usize,
    n_query: usize,
    d: usize,
) -> (EmbeddingMatrix, EmbeddingMatrix) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut make = |n: usize, prefix: &str| {
        let mut m = EmbeddingMatrix::new(d);
        for i in 0..n {
            let v: Vec<f32> = (0..d)
                .map(|_| rng.sample::<f32, _>(StandardNormal))
                .collect();
            let g = format!("g{}", rng.random_range(0..4));
            m.push_raw(format!("{prefix}{i}"), Some(g), None, None, v);
        }
        m
    };
    let r = make(n_ref, "r");
    let q = make(n_query, "q");
    (r, q)
}

#[test]
fn knn_matches_brute_force() {
    let (r, q) = random_sets(11, 50, 50, 8);
    let res = knn_probe(&r, &q, LabelLevel::Genus).unwrap();
    let cos = |a: &[f32], b: &[f32]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
        let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        dot / (na * nb)
    };
    let mut correct = 0;
    for i in 0..q.len() {
        let best = (0..r.len())
            .max_by(|&a, &b| {
                cos(q.row(i), r.row(a))
                    .total_cmp(&cos(q.row(i), r.row(b)))
                    .then(b.cmp(&a))
            })
            .unwrap();
        let pred = r.genus[best].clone().unwrap();
        assert_eq!(res.predictions[i], pred);
        correct += usize::from(Some(&pred) == q.genus[i].as_ref());
    }
    assert_eq!(res.n_correct, correct);
    assert!((res.accuracy - correct as f64 / 50.0).abs() < 1e-15);
}

#[test]
fn pca_recovers_a_planted_subspace() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    // points on a 2-d plane spanned by e0 and (e1 + e2)/sqrt2 inside 5-d
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let rows: Vec<f64> = (0..40)
        .flat_map(|_| {
            let (u, v) = (
                3.0 * rng.sample::<f64, _>(StandardNormal),
                rng.sample::<f64, _>(StandardNormal),
            );
            [u + 1.0, v * s, v * s - 2.0, 4.0, 0.0]
        })
        .collect();
    let x = DMatrix::from_row_slice(40, 5, &rows);
    let (comps, _) = Pca::fit(&x, 2).unwrap();
    // projector onto the recovered span must equal the planted one
    let p = &comps * comps.transpose();
    let mut want = DMatrix::<f64>::zeros(5, 5);
    want[(0, 0)] = 1.0;
    for (i, j) in [(1, 1), (1, 2), (2, 1), (2, 2)] {
        want[(i, j)] = 0.5;
    }
    assert!((p - want).abs().max() < 1e-6);

    // full-rank projection preserves pairwise distances
    let y = Pca.reduce(&x, 5).unwrap();
    for i in 0..40 {
        for j in 0..40 {
            let dx = (x.row(i) - x.row(j)).norm();
            let dy = (y.row(i) - y.row(j)).norm();
            assert!((dx - dy).abs() < 1e-9);
        }
    }
    let var: Vec<f64> = (0..5)
        .map(|c| y.column(c).iter().map(|v| v * v).sum::<f64>())
        .collect();
    assert!(var.windows(2).all(|w| w[0] >= w[1] - 1e-9), "{var:?}");
}

fn small_model(variant: Variant) -> (ModelConfig, ModelParams<f32>) {
    let cfg = ModelConfig {
        d_model: 16,
        d_ff: 32,
        k: 3,
        max_tokens: 100,
        ..ModelConfig::desk(variant)
    };
    let params = ModelParams::init(&cfg, 7).unwrap();
    (cfg, params)
}

#[test]
fn zero_noise_corpus_clusters_perfectly() {
    let cfg = SyntheticCorpusConfig {
        noise_rate: 0.0,
        records_per_species: 5,
        seq_len: 96,
        ..Default::default()
    };
    let set = generate_synthetic(&cfg, 2).unwrap();
    let (mc, p) = small_model(Variant::BarcodeMae);
    let res = bin_reconstruction_eval(&p, &mc, set.iter()).unwrap();
    assert!((res.ami - 1.0).abs() < 1e-9, "{}", res.ami);
    assert_eq!(res.n_clusters, 12);
}

fn random_corpus(seed: u64) -> Vec<BarcodeRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..60)
        .map(|i| {
            let seq: String = (0..96)
                .map(|_| b"ACGT"[rng.random_range(0..4)] as char)
                .collect();
            let bin = format!("B{}", rng.random_range(0..6));
            BarcodeRecord::new(
                format!("x{i}"),
                &seq,
                None,
                None,
                Some(bin),
                Partition::Pretrain,
            )
            .unwrap()
        })
        .collect()
}

#[test]
fn unrelated_labels_score_near_zero() {
    let (mc, p) = small_model(Variant::EncoderOnly);
    for seed in 0..3 {
        let res = bin_reconstruction_eval(&p, &mc, random_corpus(seed).iter()).unwrap();
        assert!(res.ami.abs() < 0.1, "seed {seed}: {}", res.ami);
    }
}

#[test]
fn clustering_does_not_depend_on_record_order() {
    let set = generate_synthetic(
        &SyntheticCorpusConfig {
            seq_len: 96,
            records_per_species: 6,
            ..Default::default()
        },
        4,
    )
    .unwrap();
    let (mc, p) = small_model(Variant::MaeWithMask);
    let mut recs = set.records().to_vec();
    let a = bin_reconstruction_eval(&p, &mc, recs.iter()).unwrap();
    recs.reverse();
    let b = bin_reconstruction_eval(&p, &mc, recs.iter()).unwrap();
    assert!((a.ami - b.ami).abs() < 1e-9, "{} vs {}", a.ami, b.ami);
}

#[test]
fn robustness_modes_agree_without_corruption_and_repeat_exactly() {
    let set = generate_synthetic(
        &SyntheticCorpusConfig {
            seq_len: 96,
            records_per_species: 6,
            ..Default::default()
        },
        6,
    )
    .unwrap();
    let reference: Vec<_> = set
        .iter()
        .filter(|r| r.partition == Partition::SeenTrain)
        .cloned()
        .collect();
    let query: Vec<_> = set
        .iter()
        .filter(|r| r.partition == Partition::SeenTest)
        .cloned()
        .collect();
    let (mc, p) = small_model(Variant::EncoderOnly);
    let ratios = ratio_grid(0.0, 0.9, 0.3);
    let run = |mode| {
        robustness_sweep(
            &p,
            &mc,
            &reference,
            &query,
            &ratios,
            mode,
            LabelLevel::Genus,
            3,
        )
        .unwrap()
    };
    let mask = run(RobustnessMode::MaskSubstitute);
    let del = run(RobustnessMode::Delete);
    assert_eq!(mask.points[0], del.points[0]);
    assert_eq!(mask, run(RobustnessMode::MaskSubstitute));
    assert_eq!(del, run(RobustnessMode::Delete));
    assert_eq!(
        mask.points.iter().map(|p| p.0).collect::<Vec<_>>(),
        vec![0.0, 0.3, 0.6, 0.9]
    );
}

#[test]
fn robustness_rejects_bad_ratio_lists() {
    let set = generate_synthetic(
        &SyntheticCorpusConfig {
            seq_len: 96,
            records_per_species: 3,
            ..Default::default()
        },
        1,
    )
    .unwrap();
    let recs = set.records();
    let (mc, p) = small_model(Variant::EncoderOnly);
    for bad in [vec![], vec![0.5, 0.2], vec![0.1, 1.0], vec![-0.1]] {
        assert!(robustness_sweep(
            &p,
            &mc,
            recs,
            recs,
            &bad,
            RobustnessMode::Delete,
            LabelLevel::Genus,
            0
        )
        .is_err());
    }
}
