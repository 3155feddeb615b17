//! Ward-linkage agglomerative clustering.
//!
//! Rows are L2-normalized first, so squared Euclidean distance between rows
//! is `2 - 2 cos`. Merge costs follow the Lance-Williams recurrence on
//! squared distances; for two clusters the cost equals twice the increase in
//! within-cluster sum of squares.

use nalgebra::DMatrix;

use super::EvalError;

/// One agglomeration step. Cluster slots are named by their smallest member
/// index; merging `a < b` keeps slot `a`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Merge {
    pub a: usize,
    pub b: usize,
    pub cost: f64,
}

/// Scales every row to unit length. Zero rows are left as they are.
pub fn l2_normalize_rows(x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = x.clone();
    for mut row in out.row_iter_mut() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
    out
}

/// Full Ward merge sequence (`n - 1` merges) over the rows of `x`, taken
/// as given (no normalization).
///
/// Among equal costs the lexicographically smallest `(a, b)` pair merges
/// first.
pub fn ward_linkage(x: &DMatrix<f64>) -> Vec<Merge> {
    let n = x.nrows();
    if n < 2 {
        return Vec::new();
    }
    // upper-triangular squared distances, indexed [i][j] for i < j
    let mut dist = vec![vec![0.0f64; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let d: f64 = x
                .row(i)
                .iter()
                .zip(x.row(j).iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            dist[i][j] = d;
            dist[j][i] = d;
        }
    }
    let mut size = vec![1usize; n];
    let mut active = vec![true; n];
    // nearest active neighbour with larger index
    let mut nn = vec![usize::MAX; n];
    let mut nn_d = vec![f64::INFINITY; n];
    let rescan =
        |i: usize, dist: &[Vec<f64>], active: &[bool], nn: &mut [usize], nn_d: &mut [f64]| {
            nn[i] = usize::MAX;
            nn_d[i] = f64::INFINITY;
            for j in i + 1..n {
                if active[j] && dist[i][j] < nn_d[i] {
                    nn[i] = j;
                    nn_d[i] = dist[i][j];
                }
            }
        };
    for i in 0..n {
        rescan(i, &dist, &active, &mut nn, &mut nn_d);
    }

    let mut merges = Vec::with_capacity(n - 1);
    for _ in 0..n - 1 {
        let mut best = (f64::INFINITY, usize::MAX);
        for i in 0..n {
            if active[i] && nn[i] != usize::MAX && nn_d[i] < best.0 {
                best = (nn_d[i], i);
            }
        }
        let (cost, a) = best;
        let b = nn[a];
        merges.push(Merge { a, b, cost });

        let (na, nb) = (size[a] as f64, size[b] as f64);
        let dab = dist[a][b];
        active[b] = false;
        for k in 0..n {
            if !active[k] || k == a {
                continue;
            }
            let nk = size[k] as f64;
            let d = ((na + nk) * dist[a][k] + (nb + nk) * dist[b][k] - nk * dab) / (na + nb + nk);
            dist[a][k] = d;
            dist[k][a] = d;
        }
        size[a] += size[b];

        for i in 0..n {
            if !active[i] {
                continue;
            }
            if i == a || nn[i] == a || nn[i] == b {
                rescan(i, &dist, &active, &mut nn, &mut nn_d);
            } else if i < a && (dist[i][a] < nn_d[i] || (dist[i][a] == nn_d[i] && a < nn[i])) {
                nn[i] = a;
                nn_d[i] = dist[i][a];
            }
        }
    }
    merges
}

/// Applies the first `n - n_clusters` merges and labels clusters `0..` in
/// order of first appearance.
pub fn cut_tree(merges: &[Merge], n: usize, n_clusters: usize) -> Vec<usize> {
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    for m in merges.iter().take(n.saturating_sub(n_clusters)) {
        let (ra, rb) = (find(&mut parent, m.a), find(&mut parent, m.b));
        parent[rb] = ra;
    }
    let mut label_of_root = vec![usize::MAX; n];
    let mut next = 0;
    (0..n)
        .map(|i| {
            let r = find(&mut parent, i);
            if label_of_root[r] == usize::MAX {
                label_of_root[r] = next;
                next += 1;
            }
            label_of_root[r]
        })
        .collect()
}

/// Ward clustering of L2-normalized rows into `n_clusters` groups.
pub fn agglomerative_cluster(x: &DMatrix<f64>, n_clusters: usize) -> Result<Vec<usize>, EvalError> {
    let n = x.nrows();
    if n_clusters < 1 || n_clusters > n {
        return Err(EvalError::InvalidClusterCount { n_clusters, n });
    }
    let merges = ward_linkage(&l2_normalize_rows(x));
    Ok(cut_tree(&merges, n, n_clusters))
}
