//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use barcodemae::masking::{sample_mask, MaskMode};
use barcodemae::model::{
    forward_pretrain, loss_and_grads, pretrain_example, ModelConfig, ModelParams, ParamKind,
    Positional, PretrainExample, Variant,
};
use barcodemae::tokenizer::tokenize;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Every set partition of `0..n` as a restricted-growth label string.
pub fn set_partitions(n: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, n: usize, out: &mut Vec<Vec<usize>>) {
        if prefix.len() == n {
            out.push(prefix.clone());
            return;
        }
        let next = prefix.iter().max().map_or(0, |m| m + 1);
        for l in 0..=next {
            prefix.push(l);
            rec(prefix, n, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), n, &mut out);
    out
}

/// Every permutation of `0..n` (Heap's algorithm).
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    let mut p: Vec<usize> = (0..n).collect();
    let mut c = vec![0; n];
    let mut out = vec![p.clone()];
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                p.swap(0, i);
            } else {
                p.swap(c[i], i);
            }
            out.push(p.clone());
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    out
}

// Oracle inputs are tiny restricted-growth strings, so fixed arrays avoid
// allocating inside the permutation loop.
const MAX_LABELS: usize = 8;

fn counts(x: &[usize]) -> [f64; MAX_LABELS] {
    let mut m = [0.0; MAX_LABELS];
    for &v in x {
        m[v] += 1.0;
    }
    m
}

fn n_labels(x: &[usize]) -> usize {
    counts(x).iter().filter(|&&c| c > 0.0).count()
}

pub fn mutual_info(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len() as f64;
    let (ca, cb) = (counts(a), counts(b));
    let mut joint = [[0.0; MAX_LABELS]; MAX_LABELS];
    for (&x, &y) in a.iter().zip(b) {
        joint[x][y] += 1.0;
    }
    let mut mi = 0.0;
    for (x, row) in joint.iter().enumerate() {
        for (y, &c) in row.iter().enumerate() {
            if c > 0.0 {
                mi += c / n * (n * c / (ca[x] * cb[y])).ln();
            }
        }
    }
    mi
}

pub fn entropy(a: &[usize]) -> f64 {
    let n = a.len() as f64;
    counts(a)
        .iter()
        .filter(|&&c| c > 0.0)
        .map(|&c| -(c / n) * (c / n).ln())
        .sum()
}

/// AMI with the expectation taken literally: the average MI over every
/// permutation of the second labeling.
pub fn ami_by_permutation(a: &[usize], b: &[usize], perms: &[Vec<usize>]) -> f64 {
    let n = a.len();
    let ka = n_labels(a);
    let kb = n_labels(b);
    if ka == 1 || kb == 1 {
        return 0.0;
    }
    if ka == n && kb == n {
        return 1.0;
    }
    let mut shuffled = vec![0; n];
    let mut emi = 0.0;
    for p in perms {
        for (i, &j) in p.iter().enumerate() {
            shuffled[i] = b[j];
        }
        emi += mutual_info(a, &shuffled);
    }
    emi /= perms.len() as f64;
    let mi = mutual_info(a, b);
    (mi - emi) / ((entropy(a) + entropy(b)) / 2.0 - emi)
}

/// Ward merges by exhaustive evaluation of the SSE increase
/// `|A||B|/(|A|+|B|) * |mean(A) - mean(B)|^2` over all cluster pairs.
/// Clusters are keyed by their smallest member. Returns `(a, b, increase)`.
pub fn ward_bruteforce(points: &[Vec<f64>]) -> Vec<(usize, usize, f64)> {
    let d = points[0].len();
    let centroid = |c: &[usize]| {
        let mut m = vec![0.0; d];
        for &i in c {
            for j in 0..d {
                m[j] += points[i][j] / c.len() as f64;
            }
        }
        m
    };
    // kept sorted by smallest member, so list order is key order
    let mut clusters: Vec<Vec<usize>> = (0..points.len()).map(|i| vec![i]).collect();
    let mut out = Vec::new();
    while clusters.len() > 1 {
        let mut best: Option<(f64, usize, usize)> = None;
        for x in 0..clusters.len() {
            for y in x + 1..clusters.len() {
                let (ca, cb) = (centroid(&clusters[x]), centroid(&clusters[y]));
                let (na, nb) = (clusters[x].len() as f64, clusters[y].len() as f64);
                let d2: f64 = ca.iter().zip(&cb).map(|(p, q)| (p - q) * (p - q)).sum();
                let cost = na * nb / (na + nb) * d2;
                if best.is_none_or(|(bc, _, _)| cost < bc) {
                    best = Some((cost, x, y));
                }
            }
        }
        let (cost, x, y) = best.unwrap();
        out.push((clusters[x][0], clusters[y][0], cost));
        let absorbed = clusters.remove(y);
        clusters[x].extend(absorbed);
    }
    out
}

pub fn mode_for(v: Variant) -> MaskMode {
    match v {
        Variant::BarcodeMae => MaskMode::Mae,
        Variant::MaeWithMask => MaskMode::WithMask,
        Variant::EncoderOnly => MaskMode::Bert801010,
    }
}

pub fn random_seq(rng: &mut ChaCha8Rng, n: usize) -> String {
    (0..n)
        .map(|_| b"ACGT"[rng.random_range(0..4)] as char)
        .collect()
}

pub fn pretrain_batch(cfg: &ModelConfig, seed: u64) -> Vec<PretrainExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tok = cfg.tokenizer().unwrap();
    let vocab = cfg.vocab();
    (0..2)
        .map(|_| {
            let s = random_seq(&mut rng, 20);
            let ts = tokenize(&s, &tok, 0).unwrap();
            let plan = sample_mask(ts.len, 0.5, mode_for(cfg.variant), &mut rng).unwrap();
            pretrain_example(&ts, &plan, &vocab, &mut rng).unwrap()
        })
        .collect()
}

fn mean_loss(p: &ModelParams<f64>, cfg: &ModelConfig, b: &[PretrainExample]) -> f64 {
    forward_pretrain(p, cfg, b).unwrap().mean_loss()
}

/// Central finite differences (step 1e-3, f64) over every trainable entry.
/// Returns `‖analytic − numeric‖ / (‖analytic‖ + ‖numeric‖)` per tensor.
pub fn gradient_errors(cfg: &ModelConfig) -> Vec<(String, f64)> {
    let mut params = ModelParams::<f64>::init(cfg, 11).unwrap();
    // non-trivial norms and biases so their gradients are exercised
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for t in params.tensors_mut() {
        for x in t.data.iter_mut() {
            *x += rng.random_range(-0.05..0.05);
        }
    }
    let pad = cfg.vocab().pad() as usize;
    let d = cfg.d_model;
    params
        .tok_emb
        .row_mut(pad)
        .iter_mut()
        .for_each(|x| *x = 0.0);
    if cfg.positional == Positional::Sinusoidal {
        params.pos_emb = barcodemae::model::sinusoidal_table(cfg.max_tokens, d);
    }

    let b = pretrain_batch(cfg, 3);
    let (_, grads) = loss_and_grads(&params, cfg, &b, None).unwrap();
    let h = 1e-3;
    let meta: Vec<(String, ParamKind)> = params
        .tensors()
        .into_iter()
        .map(|(n, k, _)| (n, k))
        .collect();
    let analytic: Vec<Vec<f64>> = grads
        .tensors()
        .into_iter()
        .map(|(_, _, t)| t.data.clone())
        .collect();
    let mut out = Vec::new();
    for (ti, (name, kind)) in meta.iter().enumerate() {
        if *kind == ParamKind::Frozen {
            assert!(
                analytic[ti].iter().all(|&g| g == 0.0),
                "{name}: frozen table received gradient"
            );
            continue;
        }
        let len = analytic[ti].len();
        let mut numeric = vec![0.0; len];
        for j in 0..len {
            if *kind == ParamKind::TokenEmbedding && j / d == pad {
                continue;
            }
            let orig = params.tensors_mut()[ti].data[j];
            params.tensors_mut()[ti].data[j] = orig + h;
            let up = mean_loss(&params, cfg, &b);
            params.tensors_mut()[ti].data[j] = orig - h;
            let down = mean_loss(&params, cfg, &b);
            params.tensors_mut()[ti].data[j] = orig;
            numeric[j] = (up - down) / (2.0 * h);
        }
        let a = &analytic[ti];
        let diff: f64 = a
            .iter()
            .zip(&numeric)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nn: f64 = numeric.iter().map(|x| x * x).sum::<f64>().sqrt();
        let rel = if na + nn < 1e-10 {
            0.0
        } else {
            diff / (na + nn)
        };
        out.push((name.clone(), rel));
    }
    out
}
