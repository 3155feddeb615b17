//! Masked-autoencoder pretraining for DNA barcodes, its baselines, and the
//! downstream evaluation pipeline (1-NN genus probing, zero-shot clustering,
//! masking/deletion robustness).

pub mod embedding;
pub mod eval;
pub mod masking;
pub mod model;
pub mod seqdata;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use embedding::{EmbeddingMatrix, LabelLevel};
pub use eval::{ClusterResult, ProbeResult, RobustnessCurve, RobustnessMode};
pub use masking::{MaskMode, MaskPlan};
pub use model::{ModelConfig, ModelParams, Variant};
pub use seqdata::{BarcodeRecord, Partition, RecordSet, SyntheticCorpusConfig};
pub use tokenizer::{TokenSequence, TokenizerConfig, Vocab};
pub use train::{Checkpoint, EpochMetrics, TrainConfig, Trainer};
