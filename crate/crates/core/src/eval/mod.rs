//! Downstream evaluation of frozen embeddings: cosine 1-NN probing,
//! zero-shot clustering scored by AMI, and the corruption robustness sweep.

mod ami;
mod cluster;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::embedding::{EmbeddingMatrix, LabelLevel};
use crate::masking::{mask_count, EncoderInput};
use crate::model::{embed_corpus, embed_input, ModelConfig, ModelError, ModelParams, Variant};
use crate::seqdata::BarcodeRecord;
use crate::tokenizer::{tokenize, TokenizerError};

pub use ami::{ami, dense_labels, expected_mutual_info};
pub use cluster::{agglomerative_cluster, cut_tree, l2_normalize_rows, ward_linkage, Merge};

/// Dimensionality used before zero-shot clustering.
pub const ZSC_DIMS: usize = 50;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("{0} is empty")]
    Empty(&'static str),
    #[error("record `{record_id}` has no {level:?} label")]
    MissingLabel {
        record_id: String,
        level: LabelLevel,
    },
    #[error("record `{record_id}` has a zero-norm embedding")]
    ZeroNorm { record_id: String },
    #[error("embedding widths differ: {reference} vs {query}")]
    DimMismatch { reference: usize, query: usize },
    #[error("need at least 2 rows to reduce, got {0}")]
    TooFewRows(usize),
    #[error("target dimension {target} exceeds min(rows {n}, width {d})")]
    TargetDim { target: usize, n: usize, d: usize },
    #[error("cannot form {n_clusters} clusters from {n} points")]
    InvalidClusterCount { n_clusters: usize, n: usize },
    #[error("label lists differ in length: {a} vs {b}")]
    LengthMismatch { a: usize, b: usize },
    #[error("ratios must be strictly increasing within [0,1), got {0:?}")]
    BadRatios(Vec<f64>),
    #[error("percentages must be non-negative, got {0} and {1}")]
    NegativeScore(f64, f64),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("record `{record_id}`: {source}")]
    Tokenizer {
        record_id: String,
        #[source]
        source: TokenizerError,
    },
}

/// Outcome of a 1-NN probe.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub accuracy: f64,
    pub n_queries: usize,
    pub n_correct: usize,
    /// label → (correct, total), over the true labels of the queries.
    pub per_label: BTreeMap<String, (usize, usize)>,
    /// Predicted label per query row.
    pub predictions: Vec<String>,
}

impl ProbeResult {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("label\tcorrect\ttotal\taccuracy\n");
        for (label, &(c, t)) in &self.per_label {
            out.push_str(&format!("{label}\t{c}\t{t}\t{}\n", c as f64 / t as f64));
        }
        out.push_str(&format!(
            "ALL\t{}\t{}\t{}\n",
            self.n_correct, self.n_queries, self.accuracy
        ));
        out
    }
}

fn labels_of(m: &EmbeddingMatrix, level: LabelLevel) -> Result<Vec<&str>, EvalError> {
    m.labels(level)
        .iter()
        .enumerate()
        .map(|(i, l)| {
            l.as_deref().ok_or_else(|| EvalError::MissingLabel {
                record_id: m.record_ids[i].clone(),
                level,
            })
        })
        .collect()
}

fn unit_rows(m: &EmbeddingMatrix) -> Result<Vec<Vec<f64>>, EvalError> {
    (0..m.len())
        .map(|i| {
            let row = m.row(i);
            let norm = row
                .iter()
                .map(|&x| (x as f64) * (x as f64))
                .sum::<f64>()
                .sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(EvalError::ZeroNorm {
                    record_id: m.record_ids[i].clone(),
                });
            }
            Ok(row.iter().map(|&x| x as f64 / norm).collect())
        })
        .collect()
}

/// Labels each query with the label of its most cosine-similar reference
/// row. Ties go to the lowest reference index.
pub fn knn_probe(
    reference: &EmbeddingMatrix,
    query: &EmbeddingMatrix,
    level: LabelLevel,
) -> Result<ProbeResult, EvalError> {
    if reference.is_empty() {
        return Err(EvalError::Empty("reference set"));
    }
    if query.is_empty() {
        return Err(EvalError::Empty("query set"));
    }
    if reference.dim != query.dim {
        return Err(EvalError::DimMismatch {
            reference: reference.dim,
            query: query.dim,
        });
    }
    let ref_labels = labels_of(reference, level)?;
    let query_labels = labels_of(query, level)?;
    let refs = unit_rows(reference)?;
    let queries = unit_rows(query)?;

    let mut per_label: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let mut predictions = Vec::with_capacity(queries.len());
    let mut n_correct = 0;
    for (q, truth) in queries.iter().zip(&query_labels) {
        let mut best = (f64::NEG_INFINITY, 0usize);
        for (j, r) in refs.iter().enumerate() {
            let sim: f64 = q.iter().zip(r).map(|(a, b)| a * b).sum();
            if sim > best.0 {
                best = (sim, j);
            }
        }
        let pred = ref_labels[best.1];
        let hit = pred == *truth;
        n_correct += usize::from(hit);
        let e = per_label.entry(truth.to_string()).or_default();
        e.0 += usize::from(hit);
        e.1 += 1;
        predictions.push(pred.to_string());
    }
    let n_queries = queries.len();
    Ok(ProbeResult {
        accuracy: n_correct as f64 / n_queries as f64,
        n_queries,
        n_correct,
        per_label,
        predictions,
    })
}

/// Harmonic mean of two percentages; 0 when either is 0.
pub fn harmonic_mean(a: f64, b: f64) -> Result<f64, EvalError> {
    if a < 0.0 || b < 0.0 || a.is_nan() || b.is_nan() {
        return Err(EvalError::NegativeScore(a, b));
    }
    if a == 0.0 || b == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * a * b / (a + b))
}

/// Dense `N × d` copy of an embedding matrix.
pub fn to_matrix(m: &EmbeddingMatrix) -> DMatrix<f64> {
    DMatrix::from_fn(m.len(), m.dim, |i, j| m.row(i)[j] as f64)
}

/// Dimensionality reduction applied before clustering.
pub trait Reducer {
    fn reduce(&self, x: &DMatrix<f64>, target_dim: usize) -> Result<DMatrix<f64>, EvalError>;
}

/// Mean-centered principal-component projection.
///
/// Components are ordered by decreasing variance (ties by eigenvector
/// index); each is signed so its largest-magnitude loading is positive.
#[derive(Debug, Clone, Copy, Default)]
pub struct Pca;

impl Pca {
    /// Returns `(components d × target, mean)`.
    pub fn fit(x: &DMatrix<f64>, target_dim: usize) -> Result<(DMatrix<f64>, Vec<f64>), EvalError> {
        let (n, d) = x.shape();
        if n < 2 {
            return Err(EvalError::TooFewRows(n));
        }
        if target_dim == 0 || target_dim > n || target_dim > d {
            return Err(EvalError::TargetDim {
                target: target_dim,
                n,
                d,
            });
        }
        let mean: Vec<f64> = (0..d)
            .map(|j| x.column(j).iter().sum::<f64>() / n as f64)
            .collect();
        let mut c = DMatrix::<f64>::zeros(d, d);
        for row in x.row_iter() {
            for a in 0..d {
                let xa = row[a] - mean[a];
                for b in a..d {
                    c[(a, b)] += xa * (row[b] - mean[b]);
                }
            }
        }
        for a in 0..d {
            for b in 0..a {
                c[(a, b)] = c[(b, a)];
            }
        }
        let eig = SymmetricEigen::new(c);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&i, &j| {
            eig.eigenvalues[j]
                .total_cmp(&eig.eigenvalues[i])
                .then(i.cmp(&j))
        });
        let mut comps = DMatrix::<f64>::zeros(d, target_dim);
        for (out, &src) in order.iter().take(target_dim).enumerate() {
            let v = eig.eigenvectors.column(src);
            let lead = (0..d).fold(
                0,
                |best, i| if v[i].abs() > v[best].abs() { i } else { best },
            );
            let sign = if v[lead] < 0.0 { -1.0 } else { 1.0 };
            for i in 0..d {
                comps[(i, out)] = sign * v[i];
            }
        }
        Ok((comps, mean))
    }

    /// Projects rows with plain loops so identical rows map to identical
    /// outputs bit for bit.
    pub fn project(x: &DMatrix<f64>, comps: &DMatrix<f64>, mean: &[f64]) -> DMatrix<f64> {
        let (n, d) = x.shape();
        let t = comps.ncols();
        DMatrix::from_fn(n, t, |i, c| {
            (0..d).map(|j| (x[(i, j)] - mean[j]) * comps[(j, c)]).sum()
        })
    }
}

impl Reducer for Pca {
    fn reduce(&self, x: &DMatrix<f64>, target_dim: usize) -> Result<DMatrix<f64>, EvalError> {
        let (comps, mean) = Pca::fit(x, target_dim)?;
        Ok(Pca::project(x, &comps, &mean))
    }
}

/// Principal-component projection of an embedding matrix.
pub fn reduce_dims(emb: &EmbeddingMatrix, target_dim: usize) -> Result<DMatrix<f64>, EvalError> {
    Pca.reduce(&to_matrix(emb), target_dim)
}

/// Zero-shot clustering outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterResult {
    pub ami: f64,
    pub n_clusters: usize,
    pub assignment: Vec<usize>,
}

impl ClusterResult {
    pub fn to_tsv(&self, record_ids: &[String]) -> String {
        let mut out = String::from("record_id\tcluster\n");
        for (id, c) in record_ids.iter().zip(&self.assignment) {
            out.push_str(&format!("{id}\t{c}\n"));
        }
        out
    }
}

/// Clusters embeddings into as many groups as there are distinct labels at
/// `level`, then scores the assignment against those labels.
pub fn cluster_embeddings(
    emb: &EmbeddingMatrix,
    level: LabelLevel,
    reducer: &dyn Reducer,
) -> Result<ClusterResult, EvalError> {
    if emb.is_empty() {
        return Err(EvalError::Empty("embedding matrix"));
    }
    let truth = labels_of(emb, level)?;
    let n_clusters = dense_labels(&truth).1;
    let x = to_matrix(emb);
    let reduced = if emb.len() < 2 {
        x
    } else {
        reducer.reduce(&x, ZSC_DIMS.min(emb.len()).min(emb.dim))?
    };
    let assignment = agglomerative_cluster(&reduced, n_clusters)?;
    Ok(ClusterResult {
        ami: ami(&truth, &assignment)?,
        n_clusters,
        assignment,
    })
}

/// Embeds `records`, reduces to at most 50 dimensions, clusters into as
/// many groups as there are BINs, and scores with AMI against the BINs.
pub fn bin_reconstruction_eval<'a>(
    params: &ModelParams<f32>,
    cfg: &ModelConfig,
    records: impl IntoIterator<Item = &'a BarcodeRecord>,
) -> Result<ClusterResult, EvalError> {
    let emb = embed_corpus(params, cfg, records)?;
    cluster_embeddings(&emb, LabelLevel::Bin, &Pca)
}

/// How withheld query tokens are presented to the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RobustnessMode {
    /// Replace with `[MASK]` at the original positions.
    MaskSubstitute,
    /// Drop the tokens; the rest keep their original positions.
    Delete,
}

impl RobustnessMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RobustnessMode::MaskSubstitute => "mask",
            RobustnessMode::Delete => "delete",
        }
    }
}

impl fmt::Display for RobustnessMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RobustnessMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mask" | "mask_substitute" | "mask-substitute" => Ok(RobustnessMode::MaskSubstitute),
            "delete" => Ok(RobustnessMode::Delete),
            _ => Err(format!(
                "unknown robustness mode `{s}` (expected mask or delete)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobustnessCurve {
    pub mode: RobustnessMode,
    /// `(drop_ratio, accuracy)` with strictly increasing ratios.
    pub points: Vec<(f64, f64)>,
}

pub const ROBUSTNESS_HEADER: &str = "mode\tratio\taccuracy";

impl RobustnessCurve {
    pub fn tsv_rows(&self) -> String {
        self.points
            .iter()
            .map(|(r, a)| format!("{}\t{r}\t{a}\n", self.mode))
            .collect()
    }
}

/// `0.1, 0.2, ...` style grids from `start:stop:step`, inclusive of `stop`.
pub fn ratio_grid(start: f64, stop: f64, step: f64) -> Vec<f64> {
    if step <= 0.0 || stop < start {
        return Vec::new();
    }
    let n = ((stop - start) / step + 1e-9).floor() as usize;
    // rounding to 1e-12 keeps 0.30000000000000004 style noise out of files
    (0..=n)
        .map(|i| ((start + i as f64 * step) * 1e12).round() / 1e12)
        .collect()
}

fn check_ratios(ratios: &[f64]) -> Result<(), EvalError> {
    let in_range = ratios.iter().all(|r| (0.0..1.0).contains(r));
    let increasing = ratios.windows(2).all(|w| w[0] < w[1]);
    if ratios.is_empty() || !in_range || !increasing {
        return Err(EvalError::BadRatios(ratios.to_vec()));
    }
    Ok(())
}

/// Corrupts query sequences at each ratio, re-embeds them and probes against
/// clean reference embeddings.
///
/// At each ratio `min(round(ratio·n), n-1)` tokens are withheld per query so
/// at least one survives. Sampling restarts from `seed` at every ratio.
#[allow(clippy::too_many_arguments)]
pub fn robustness_sweep(
    params: &ModelParams<f32>,
    cfg: &ModelConfig,
    reference: &[BarcodeRecord],
    query: &[BarcodeRecord],
    ratios: &[f64],
    mode: RobustnessMode,
    level: LabelLevel,
    seed: u64,
) -> Result<RobustnessCurve, EvalError> {
    check_ratios(ratios)?;
    if mode == RobustnessMode::MaskSubstitute && cfg.variant == Variant::BarcodeMae {
        log::warn!(
            "substituting [MASK] into a {} encoder, which never saw [MASK] during pretraining",
            cfg.variant
        );
    }
    let ref_emb = embed_corpus(params, cfg, reference)?;
    let tok = cfg.tokenizer().map_err(ModelError::from)?;
    let vocab = cfg.vocab();
    let mut points = Vec::with_capacity(ratios.len());
    for &ratio in ratios {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut q_emb = EmbeddingMatrix::new(cfg.d_model);
        for r in query {
            let ts = tokenize(&r.sequence, &tok, 0).map_err(|source| EvalError::Tokenizer {
                record_id: r.record_id.clone(),
                source,
            })?;
            let n = ts.ids.len();
            let m = mask_count(n, ratio).min(n - 1);
            let mut withheld = rand::seq::index::sample(&mut rng, n, m).into_vec();
            withheld.sort_unstable();
            let input = match mode {
                RobustnessMode::MaskSubstitute => {
                    let mut ids = ts.ids.clone();
                    withheld.iter().for_each(|&p| ids[p] = vocab.mask());
                    EncoderInput {
                        ids,
                        positions: ts.positions.clone(),
                        valid: vec![true; n],
                    }
                }
                RobustnessMode::Delete => {
                    let kept: Vec<usize> = (0..n)
                        .filter(|i| withheld.binary_search(i).is_err())
                        .collect();
                    EncoderInput {
                        ids: kept.iter().map(|&i| ts.ids[i]).collect(),
                        positions: kept.iter().map(|&i| ts.positions[i]).collect(),
                        valid: vec![true; kept.len()],
                    }
                }
            };
            let v = embed_input(params, cfg, &input).map_err(|e| ModelError::Record {
                record_id: r.record_id.clone(),
                source: Box::new(e),
            })?;
            q_emb.push(r, v);
        }
        points.push((ratio, knn_probe(&ref_emb, &q_emb, level)?.accuracy));
    }
    Ok(RobustnessCurve { mode, points })
}
