//! Barcode records, on-disk formats, partitions, and synthetic corpora.
//!
//! The canonical format is a UTF-8 TSV with the header
//! `record_id\tsequence\tgenus\tspecies\tbin_id\tpartition`. Missing optional
//! labels are written as empty strings. FASTA input is accepted with
//! `>id|genus|species` headers.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Column order of the canonical TSV header.
pub const TSV_HEADER: [&str; 6] = [
    "record_id",
    "sequence",
    "genus",
    "species",
    "bin_id",
    "partition",
];

const ALPHABET: &[u8] = b"ACGTN-";
const BASES: [u8; 4] = *b"ACGT";

#[derive(Debug, thiserror::Error)]
pub enum SeqDataError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("duplicate record_id `{0}`")]
    DuplicateId(String),
    #[error("record `{record_id}`: illegal character '{character}' in sequence")]
    IllegalCharacter { record_id: String, character: char },
    #[error("record `{0}`: empty sequence")]
    EmptySequence(String),
    #[error("record `{record_id}` in partition {partition} has no genus label")]
    MissingGenus {
        record_id: String,
        partition: Partition,
    },
    #[error("invalid synthetic corpus config: {0}")]
    InvalidConfig(String),
}

/// Dataset split a record belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Partition {
    Pretrain,
    SeenTrain,
    SeenVal,
    SeenTest,
    UnseenKeys,
    UnseenVal,
    UnseenTest,
}

impl Partition {
    pub const ALL: [Partition; 7] = [
        Partition::Pretrain,
        Partition::SeenTrain,
        Partition::SeenVal,
        Partition::SeenTest,
        Partition::UnseenKeys,
        Partition::UnseenVal,
        Partition::UnseenTest,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Partition::Pretrain => "pretrain",
            Partition::SeenTrain => "seen_train",
            Partition::SeenVal => "seen_val",
            Partition::SeenTest => "seen_test",
            Partition::UnseenKeys => "unseen_keys",
            Partition::UnseenVal => "unseen_val",
            Partition::UnseenTest => "unseen_test",
        }
    }

    /// Labeled partitions must carry at least a genus.
    pub fn is_labeled(self) -> bool {
        self != Partition::Pretrain
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Partition {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Partition::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| format!("unknown partition `{s}`"))
    }
}

/// One specimen.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BarcodeRecord {
    pub record_id: String,
    pub sequence: String,
    pub genus: Option<String>,
    pub species: Option<String>,
    pub bin_id: Option<String>,
    pub partition: Partition,
}

impl BarcodeRecord {
    /// Upper-cases the sequence and checks the alphabet and label invariants.
    pub fn new(
        record_id: impl Into<String>,
        sequence: &str,
        genus: Option<String>,
        species: Option<String>,
        bin_id: Option<String>,
        partition: Partition,
    ) -> Result<Self, SeqDataError> {
        let record_id = record_id.into();
        let sequence = sequence.to_ascii_uppercase();
        if sequence.is_empty() {
            return Err(SeqDataError::EmptySequence(record_id));
        }
        if let Some(c) = sequence
            .chars()
            .find(|c| !c.is_ascii() || !ALPHABET.contains(&(*c as u8)))
        {
            return Err(SeqDataError::IllegalCharacter {
                record_id,
                character: c,
            });
        }
        if partition.is_labeled() && genus.is_none() {
            return Err(SeqDataError::MissingGenus {
                record_id,
                partition,
            });
        }
        Ok(Self {
            record_id,
            sequence,
            genus,
            species,
            bin_id,
            partition,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    File,
    Synthetic,
}

/// Ordered collection of records with unique ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordSet {
    records: Vec<BarcodeRecord>,
    pub provenance: Provenance,
    pub seed: Option<u64>,
}

impl RecordSet {
    pub fn new(
        records: Vec<BarcodeRecord>,
        provenance: Provenance,
        seed: Option<u64>,
    ) -> Result<Self, SeqDataError> {
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            if !seen.insert(r.record_id.as_str()) {
                return Err(SeqDataError::DuplicateId(r.record_id.clone()));
            }
        }
        Ok(Self {
            records,
            provenance,
            seed,
        })
    }

    pub fn records(&self) -> &[BarcodeRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, BarcodeRecord> {
        self.records.iter()
    }

    /// Records whose partition is any of `partitions`, order preserved.
    pub fn select(&self, partitions: &[Partition]) -> RecordSet {
        RecordSet {
            records: self
                .records
                .iter()
                .filter(|r| partitions.contains(&r.partition))
                .cloned()
                .collect(),
            provenance: self.provenance,
            seed: self.seed,
        }
    }
}

impl<'a> IntoIterator for &'a RecordSet {
    type Item = &'a BarcodeRecord;
    type IntoIter = std::slice::Iter<'a, BarcodeRecord>;

    fn into_iter(self) -> Self::IntoIter {
        self.records.iter()
    }
}

/// Filtered view of a single partition, preserving order.
pub fn partition_view(set: &RecordSet, partition: Partition) -> RecordSet {
    set.select(&[partition])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordFormat {
    Tsv,
    Fasta,
}

impl FromStr for RecordFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tsv" => Ok(RecordFormat::Tsv),
            "fasta" | "fa" => Ok(RecordFormat::Fasta),
            other => Err(format!("unknown record format `{other}`")),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> SeqDataError + '_ {
    move |source| SeqDataError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn opt(field: &str) -> Option<String> {
    (!field.is_empty()).then(|| field.to_string())
}

pub fn load_records(path: &Path, format: RecordFormat) -> Result<RecordSet, SeqDataError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    match format {
        RecordFormat::Tsv => parse_tsv(&text),
        RecordFormat::Fasta => parse_fasta(&text),
    }
}

/// Parses TSV text. Columns are located by header name; only `record_id` and
/// `sequence` are required.
pub fn parse_tsv(text: &str) -> Result<RecordSet, SeqDataError> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(SeqDataError::Malformed {
        line: 1,
        message: "missing header row".into(),
    })?;
    let columns: Vec<&str> = header.split('\t').collect();
    let find = |name: &str| columns.iter().position(|c| *c == name);
    let (Some(id_col), Some(seq_col)) = (find("record_id"), find("sequence")) else {
        return Err(SeqDataError::Malformed {
            line: 1,
            message: "header must name at least record_id and sequence".into(),
        });
    };
    let genus_col = find("genus");
    let species_col = find("species");
    let bin_col = find("bin_id");
    let part_col = find("partition");

    let mut records = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != columns.len() {
            return Err(SeqDataError::Malformed {
                line: line_no,
                message: format!("expected {} fields, found {}", columns.len(), fields.len()),
            });
        }
        let get = |col: Option<usize>| col.map(|c| fields[c]).unwrap_or("");
        let partition = match get(part_col) {
            "" => Partition::Pretrain,
            p => p.parse().map_err(|message| SeqDataError::Malformed {
                line: line_no,
                message,
            })?,
        };
        records.push(BarcodeRecord::new(
            fields[id_col],
            fields[seq_col],
            opt(get(genus_col)),
            opt(get(species_col)),
            opt(get(bin_col)),
            partition,
        )?);
    }
    RecordSet::new(records, Provenance::File, None)
}

/// Parses FASTA with `>id|genus|species` headers; sequence lines may wrap.
pub fn parse_fasta(text: &str) -> Result<RecordSet, SeqDataError> {
    let mut records = Vec::new();
    let mut current: Option<(usize, Vec<String>, String)> = None;

    let mut finish = |entry: Option<(usize, Vec<String>, String)>| -> Result<(), SeqDataError> {
        if let Some((line, fields, seq)) = entry {
            if seq.is_empty() {
                return Err(SeqDataError::Malformed {
                    line,
                    message: format!("entry `{}` has no sequence", fields[0]),
                });
            }
            let label = |i: usize| fields.get(i).and_then(|f| opt(f));
            records.push(BarcodeRecord::new(
                fields[0].clone(),
                &seq,
                label(1),
                label(2),
                None,
                Partition::Pretrain,
            )?);
        }
        Ok(())
    };

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim_end();
        if let Some(header) = line.strip_prefix('>') {
            finish(current.take())?;
            let fields: Vec<String> = header.split('|').map(|f| f.trim().to_string()).collect();
            if fields[0].is_empty() {
                return Err(SeqDataError::Malformed {
                    line: line_no,
                    message: "empty record id in header".into(),
                });
            }
            current = Some((line_no, fields, String::new()));
        } else if !line.is_empty() {
            match current.as_mut() {
                Some((_, _, seq)) => seq.push_str(line.trim()),
                None => {
                    return Err(SeqDataError::Malformed {
                        line: line_no,
                        message: "sequence data before first header".into(),
                    })
                }
            }
        }
    }
    finish(current.take())?;
    RecordSet::new(records, Provenance::File, None)
}

/// Renders the canonical TSV form.
pub fn to_tsv(set: &RecordSet) -> String {
    let mut out = TSV_HEADER.join("\t");
    out.push('\n');
    for r in set {
        let fields = [
            r.record_id.as_str(),
            r.sequence.as_str(),
            r.genus.as_deref().unwrap_or(""),
            r.species.as_deref().unwrap_or(""),
            r.bin_id.as_deref().unwrap_or(""),
            r.partition.as_str(),
        ];
        out.push_str(&fields.join("\t"));
        out.push('\n');
    }
    out
}

/// Writes to a sibling temporary file and renames it into place, so a
/// failure never leaves a truncated file behind.
pub fn save_records(set: &RecordSet, path: &Path) -> Result<(), SeqDataError> {
    let tmp = path.with_extension("tmp");
    let file = fs::File::create(&tmp).map_err(io_err(&tmp))?;
    let mut w = BufWriter::new(file);
    w.write_all(to_tsv(set).as_bytes()).map_err(io_err(&tmp))?;
    w.flush().map_err(io_err(&tmp))?;
    drop(w);
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Parameters of the taxonomic simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpusConfig {
    pub n_genera: usize,
    pub species_per_genus: usize,
    pub records_per_species: usize,
    pub seq_len: usize,
    pub genus_divergence: f64,
    pub species_divergence: f64,
    pub noise_rate: f64,
    pub unseen_species_fraction: f64,
}

impl Default for SyntheticCorpusConfig {
    fn default() -> Self {
        Self {
            n_genera: 4,
            species_per_genus: 3,
            records_per_species: 20,
            seq_len: 256,
            genus_divergence: 0.2,
            species_divergence: 0.05,
            noise_rate: 0.01,
            unseen_species_fraction: 0.34,
        }
    }
}

impl SyntheticCorpusConfig {
    pub fn validate(&self) -> Result<(), SeqDataError> {
        let bad = |m: &str| Err(SeqDataError::InvalidConfig(m.to_string()));
        if self.n_genera == 0
            || self.species_per_genus == 0
            || self.records_per_species == 0
            || self.seq_len == 0
        {
            return bad("counts and seq_len must be positive");
        }
        for (name, v) in [
            ("genus_divergence", self.genus_divergence),
            ("species_divergence", self.species_divergence),
            ("noise_rate", self.noise_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(SeqDataError::InvalidConfig(format!(
                    "{name} must lie in [0,1], got {v}"
                )));
            }
        }
        if !(0.0..1.0).contains(&self.unseen_species_fraction) {
            return bad("unseen_species_fraction must lie in [0,1)");
        }
        if self.species_divergence >= self.genus_divergence {
            return bad("species_divergence must be < genus_divergence");
        }
        if self.noise_rate >= self.species_divergence {
            return bad("noise_rate must be < species_divergence");
        }
        Ok(())
    }

    /// Number of species per genus withheld into the unseen partitions.
    pub fn unseen_per_genus(&self) -> usize {
        (self.unseen_species_fraction * self.species_per_genus as f64).floor() as usize
    }
}

/// Substitutes each base with probability `rate`, always to a different base.
fn mutate(seq: &[u8], rate: f64, rng: &mut ChaCha8Rng) -> Vec<u8> {
    seq.iter()
        .map(|&b| {
            if rate > 0.0 && rng.random_bool(rate) {
                let others: Vec<u8> = BASES.iter().copied().filter(|&x| x != b).collect();
                others[rng.random_range(0..others.len())]
            } else {
                b
            }
        })
        .collect()
}

// Partition cycles. The first entries guarantee a seen species contributes to
// seen_train and seen_test even with very few records.
const SEEN_CYCLE: [Partition; 10] = [
    Partition::SeenTrain,
    Partition::SeenTest,
    Partition::Pretrain,
    Partition::SeenTrain,
    Partition::SeenVal,
    Partition::Pretrain,
    Partition::SeenTrain,
    Partition::SeenTest,
    Partition::Pretrain,
    Partition::Pretrain,
];
const UNSEEN_CYCLE: [Partition; 3] = [
    Partition::UnseenTest,
    Partition::UnseenKeys,
    Partition::UnseenVal,
];

pub fn genus_label(g: usize) -> String {
    format!("G{g:03}")
}

pub fn species_label(g: usize, s: usize) -> String {
    format!("G{g:03}_S{s:03}")
}

/// Simulates a root → genus → species → record hierarchy of substitutions.
pub fn generate_synthetic(
    config: &SyntheticCorpusConfig,
    seed: u64,
) -> Result<RecordSet, SeqDataError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let root: Vec<u8> = (0..config.seq_len)
        .map(|_| BASES[rng.random_range(0..4)])
        .collect();
    let n_unseen = config.unseen_per_genus();

    let mut records =
        Vec::with_capacity(config.n_genera * config.species_per_genus * config.records_per_species);
    for g in 0..config.n_genera {
        let genus_seq = mutate(&root, config.genus_divergence, &mut rng);
        let mut species_order: Vec<usize> = (0..config.species_per_genus).collect();
        species_order.shuffle(&mut rng);
        let unseen: HashSet<usize> = species_order[..n_unseen].iter().copied().collect();

        for s in 0..config.species_per_genus {
            let proto = mutate(&genus_seq, config.species_divergence, &mut rng);
            let cycle: &[Partition] = if unseen.contains(&s) {
                &UNSEEN_CYCLE
            } else {
                &SEEN_CYCLE
            };
            let species = species_label(g, s);
            for r in 0..config.records_per_species {
                let seq = mutate(&proto, config.noise_rate, &mut rng);
                let seq = String::from_utf8(seq).expect("bases are ASCII");
                records.push(BarcodeRecord {
                    record_id: format!("syn-g{g:03}-s{s:03}-r{r:04}"),
                    sequence: seq,
                    genus: Some(genus_label(g)),
                    species: Some(species.clone()),
                    bin_id: Some(species.clone()),
                    partition: cycle[r % cycle.len()],
                });
            }
        }
    }
    RecordSet::new(records, Provenance::Synthetic, Some(seed))
}
