//! Adjusted mutual information under the permutation model.

use std::collections::HashMap;
use std::hash::Hash;

use super::EvalError;

/// Relabels to dense ids `0..k` in order of first appearance.
pub fn dense_labels<L: Eq + Hash + Clone>(labels: &[L]) -> (Vec<usize>, usize) {
    let mut map = HashMap::new();
    let ids = labels
        .iter()
        .map(|l| {
            let next = map.len();
            *map.entry(l.clone()).or_insert(next)
        })
        .collect();
    (ids, map.len())
}

fn entropy(counts: &[usize], n: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// `ln(i!)` for `i` in `0..=n`.
fn log_factorials(n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n + 1];
    for i in 1..=n {
        out[i] = out[i - 1] + (i as f64).ln();
    }
    out
}

/// Mutual information (nats) of a contingency table with the given marginals.
fn mutual_info(table: &[Vec<usize>], a: &[usize], b: &[usize], n: f64) -> f64 {
    let mut mi = 0.0;
    for (i, row) in table.iter().enumerate() {
        for (j, &nij) in row.iter().enumerate() {
            if nij > 0 {
                let nij = nij as f64;
                mi += nij / n * (n * nij / (a[i] as f64 * b[j] as f64)).ln();
            }
        }
    }
    mi
}

/// Expected mutual information of two labelings with marginals `a`, `b`
/// when one is randomly permuted (hypergeometric model).
pub fn expected_mutual_info(a: &[usize], b: &[usize], n: usize) -> f64 {
    let lf = log_factorials(n);
    let nf = n as f64;
    let mut emi = 0.0;
    for &ai in a {
        for &bj in b {
            let lo = (ai + bj).saturating_sub(n).max(1);
            let hi = ai.min(bj);
            for nij in lo..=hi {
                let x = nij as f64;
                let term = x / nf * (nf * x / (ai as f64 * bj as f64)).ln();
                let log_p = lf[ai] + lf[bj] + lf[n - ai] + lf[n - bj]
                    - lf[n]
                    - lf[nij]
                    - lf[ai - nij]
                    - lf[bj - nij]
                    - lf[n + nij - ai - bj];
                emi += term * log_p.exp();
            }
        }
    }
    emi
}

/// AMI with the arithmetic-mean normalizer and natural logarithms.
///
/// A constant labeling on either side scores 0. Two all-singleton labelings
/// (which are the same partition) score 1.
pub fn ami<A: Eq + Hash + Clone, B: Eq + Hash + Clone>(
    labels_a: &[A],
    labels_b: &[B],
) -> Result<f64, EvalError> {
    if labels_a.len() != labels_b.len() {
        return Err(EvalError::LengthMismatch {
            a: labels_a.len(),
            b: labels_b.len(),
        });
    }
    let n = labels_a.len();
    if n == 0 {
        return Err(EvalError::Empty("labels"));
    }
    let (ia, ka) = dense_labels(labels_a);
    let (ib, kb) = dense_labels(labels_b);
    if ka == 1 || kb == 1 {
        return Ok(0.0);
    }
    if ka == n && kb == n {
        return Ok(1.0);
    }
    let mut table = vec![vec![0usize; kb]; ka];
    let mut ca = vec![0usize; ka];
    let mut cb = vec![0usize; kb];
    for (&x, &y) in ia.iter().zip(&ib) {
        table[x][y] += 1;
        ca[x] += 1;
        cb[y] += 1;
    }
    let nf = n as f64;
    let mi = mutual_info(&table, &ca, &cb, nf);
    let emi = expected_mutual_info(&ca, &cb, n);
    let mean_h = (entropy(&ca, nf) + entropy(&cb, nf)) / 2.0;
    Ok((mi - emi) / (mean_h - emi))
}
