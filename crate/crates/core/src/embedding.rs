//! Pooled sequence embeddings aligned with their labels.
//!
//! TSV layout: `record_id\tgenus\tspecies\tbin_id\tv0 .. v{d-1}`, one row per
//! record. Values are written in shortest round-trip form so a file reloads
//! bit-exactly.

use std::fs;
use std::io;
use std::path::Path;
use std::str::FromStr;

use crate::seqdata::BarcodeRecord;

#[derive(Debug, thiserror::Error)]
pub enum EmbeddingError {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
}

/// Taxonomic level used as the class label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelLevel {
    Genus,
    Species,
    Bin,
}

impl FromStr for LabelLevel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "genus" => Ok(LabelLevel::Genus),
            "species" => Ok(LabelLevel::Species),
            "bin" | "bin_id" => Ok(LabelLevel::Bin),
            _ => Err(format!("unknown label level `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub dim: usize,
    /// Row-major `len × dim`.
    pub vectors: Vec<f32>,
    pub record_ids: Vec<String>,
    pub genus: Vec<Option<String>>,
    pub species: Vec<Option<String>>,
    pub bin_id: Vec<Option<String>>,
}

impl EmbeddingMatrix {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            vectors: Vec::new(),
            record_ids: Vec::new(),
            genus: Vec::new(),
            species: Vec::new(),
            bin_id: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.record_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.record_ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn push(&mut self, record: &BarcodeRecord, vector: Vec<f32>) {
        self.push_raw(
            record.record_id.clone(),
            record.genus.clone(),
            record.species.clone(),
            record.bin_id.clone(),
            vector,
        );
    }

    pub fn push_raw(
        &mut self,
        record_id: String,
        genus: Option<String>,
        species: Option<String>,
        bin_id: Option<String>,
        vector: Vec<f32>,
    ) {
        assert_eq!(vector.len(), self.dim, "embedding width mismatch");
        self.vectors.extend(vector);
        self.record_ids.push(record_id);
        self.genus.push(genus);
        self.species.push(species);
        self.bin_id.push(bin_id);
    }

    pub fn labels(&self, level: LabelLevel) -> &[Option<String>] {
        match level {
            LabelLevel::Genus => &self.genus,
            LabelLevel::Species => &self.species,
            LabelLevel::Bin => &self.bin_id,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.vectors.iter().all(|v| v.is_finite())
    }

    /// Scales every entry; used by invariance tests and tooling.
    pub fn scaled(&self, factor: f32) -> Self {
        let mut out = self.clone();
        out.vectors.iter_mut().for_each(|v| *v *= factor);
        out
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("record_id\tgenus\tspecies\tbin_id");
        for j in 0..self.dim {
            out.push_str(&format!("\tv{j}"));
        }
        out.push('\n');
        for i in 0..self.len() {
            let o = |x: &Option<String>| x.clone().unwrap_or_default();
            out.push_str(&format!(
                "{}\t{}\t{}\t{}",
                self.record_ids[i],
                o(&self.genus[i]),
                o(&self.species[i]),
                o(&self.bin_id[i])
            ));
            for v in self.row(i) {
                out.push_str(&format!("\t{v}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self, EmbeddingError> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or(EmbeddingError::Malformed {
            line: 1,
            message: "empty file".into(),
        })?;
        let cols: Vec<&str> = header.split('\t').collect();
        if cols.len() < 4 || cols[..4] != ["record_id", "genus", "species", "bin_id"] {
            return Err(EmbeddingError::Malformed {
                line: 1,
                message: "unexpected header".into(),
            });
        }
        let dim = cols.len() - 4;
        let mut out = Self::new(dim);
        for (idx, line) in lines {
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != cols.len() {
                return Err(EmbeddingError::Malformed {
                    line: idx + 1,
                    message: format!("expected {} fields, found {}", cols.len(), f.len()),
                });
            }
            let vector = f[4..]
                .iter()
                .map(|s| s.parse::<f32>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| EmbeddingError::Malformed {
                    line: idx + 1,
                    message: e.to_string(),
                })?;
            let o = |s: &str| (!s.is_empty()).then(|| s.to_string());
            out.push_raw(f[0].to_string(), o(f[1]), o(f[2]), o(f[3]), vector);
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Self, EmbeddingError> {
        Self::from_tsv(&fs::read_to_string(path)?)
    }
}
