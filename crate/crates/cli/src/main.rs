//! `barcodemae` command-line interface.

mod commands;
mod config;
mod layout;

use std::path::PathBuf;

use anyhow::{Context, Result};
use barcodemae::seqdata::SyntheticCorpusConfig;
use barcodemae::Partition;
use clap::{Args, Parser, Subcommand};

use config::{RunConfig, Settings, SEED_ENV};

#[derive(Parser)]
#[command(
    name = "barcodemae",
    version,
    about = "Masked-autoencoder pretraining and evaluation for DNA barcodes"
)]
struct Cli {
    /// Flat `key = value` config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(flatten)]
    common: CommonOpts,
    #[command(subcommand)]
    command: Command,
}

/// Appends every `Some` field to a settings layer under its own name.
macro_rules! settings_from {
    ($self:ident, $s:ident; $($field:ident),* $(,)?) => {
        $( if let Some(v) = &$self.$field { $s.set(stringify!($field), v.to_string()); } )*
    };
}

#[derive(Args, Default)]
struct CommonOpts {
    /// Run name; outputs go to <out>/<name>/.
    #[arg(long, global = true)]
    name: Option<String>,
    /// Output root directory (default `run`).
    #[arg(long, global = true)]
    out: Option<String>,
    /// Seed for data generation, training and corruption sampling.
    /// Falls back to BARCODEMAE_SEED, then 0.
    #[arg(long, global = true)]
    seed: Option<String>,
    /// Record file (TSV or FASTA).
    #[arg(long, global = true)]
    data: Option<String>,
    /// Record file format: tsv or fasta.
    #[arg(long, global = true)]
    format: Option<String>,
    /// Checkpoint to read (default <out>/<name>/checkpoints/final.ckpt).
    #[arg(long, global = true)]
    checkpoint: Option<String>,
}

#[derive(Args, Default)]
struct ModelOpts {
    /// barcode-mae, mae-with-mask or encoder-only.
    #[arg(long)]
    variant: Option<String>,
    /// k-mer length.
    #[arg(long)]
    k: Option<String>,
    /// Architecture string such as "enc:6-6 dec:2-2" (layers-heads).
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    enc_layers: Option<String>,
    #[arg(long)]
    enc_heads: Option<String>,
    #[arg(long)]
    dec_layers: Option<String>,
    #[arg(long)]
    dec_heads: Option<String>,
    #[arg(long)]
    d_model: Option<String>,
    #[arg(long)]
    d_ff: Option<String>,
    #[arg(long)]
    max_tokens: Option<String>,
    #[arg(long)]
    dropout: Option<String>,
    /// learned or sinusoidal.
    #[arg(long)]
    positional: Option<String>,
    /// Tie the output projection to the token embedding (true/false).
    #[arg(long)]
    tie_embeddings: Option<String>,
}

#[derive(Args, Default)]
struct TrainOpts {
    /// Training preset: desk, method or appendix. Explicit keys override it.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    /// Peak learning rate of the one-cycle schedule.
    #[arg(long, alias = "lr")]
    max_lr: Option<String>,
    #[arg(long)]
    weight_decay: Option<String>,
    #[arg(long)]
    mask_ratio: Option<String>,
    #[arg(long)]
    warmup_fraction: Option<String>,
    #[arg(long)]
    grad_clip: Option<String>,
}

#[derive(Args, Default)]
struct EvalOpts {
    /// Reference partition for 1-NN probing.
    #[arg(long)]
    reference: Option<String>,
    /// Query partition for 1-NN probing and robustness sweeps.
    #[arg(long)]
    query: Option<String>,
    /// Label level: genus, species or bin.
    #[arg(long)]
    level: Option<String>,
    /// Comma-separated partitions pooled for zero-shot clustering.
    #[arg(long)]
    partitions: Option<String>,
    /// Drop ratios as start:stop:step or a comma list.
    #[arg(long)]
    ratios: Option<String>,
    /// Comma-separated robustness modes: mask, delete.
    #[arg(long)]
    modes: Option<String>,
}

impl CommonOpts {
    fn apply(&self, s: &mut Settings) {
        settings_from!(self, s; name, out, seed, data, format, checkpoint);
    }
}

impl ModelOpts {
    fn apply(&self, s: &mut Settings) {
        settings_from!(self, s; variant, k, arch, enc_layers, enc_heads, dec_layers, dec_heads, d_model, d_ff,
            max_tokens, dropout, positional, tie_embeddings);
    }
}

impl TrainOpts {
    fn apply(&self, s: &mut Settings) {
        settings_from!(self, s; preset, epochs, batch_size, max_lr, weight_decay, mask_ratio, warmup_fraction,
            grad_clip);
    }
}

impl EvalOpts {
    fn apply(&self, s: &mut Settings) {
        settings_from!(self, s; reference, query, level, partitions, ratios, modes);
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic taxonomic corpus as TSV.
    Generate(GenerateArgs),
    /// Pretrain a model on every record of --data.
    Pretrain {
        #[command(flatten)]
        model: ModelOpts,
        #[command(flatten)]
        train: TrainOpts,
        /// Continue from an epoch checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Write mean-pooled embeddings as TSV.
    Embed {
        /// Only embed records of this partition.
        #[arg(long)]
        partition: Option<Partition>,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[command(subcommand)]
        task: EvalTask,
    },
    /// Train and evaluate a grid of architectures and k values.
    Ablate {
        /// Semicolon-separated architectures, e.g. "enc:2-2 dec:1-1; enc:2-2 dec:2-2".
        #[arg(long)]
        grid: String,
        /// Comma-separated k values.
        #[arg(long, default_value = "4")]
        ks: String,
        #[command(flatten)]
        model: ModelOpts,
        #[command(flatten)]
        train: TrainOpts,
        #[command(flatten)]
        eval: EvalOpts,
    },
}

#[derive(Subcommand)]
enum EvalTask {
    /// 1-NN probe of --query against --reference.
    Knn(EvalOpts),
    /// Zero-shot clustering scored by AMI against BIN labels.
    Zsc(EvalOpts),
    /// Accuracy under withheld query tokens.
    Robustness(EvalOpts),
    /// Harmonic mean of the stored knn and zsc results.
    Report,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, default_value_t = 4)]
    genera: usize,
    /// Species per genus.
    #[arg(long, default_value_t = 3)]
    species: usize,
    /// Records per species.
    #[arg(long, default_value_t = 20)]
    records: usize,
    #[arg(long, default_value_t = 256)]
    seq_len: usize,
    #[arg(long, default_value_t = 0.2)]
    genus_divergence: f64,
    #[arg(long, default_value_t = 0.05)]
    species_divergence: f64,
    /// Per-record substitution rate.
    #[arg(long, default_value_t = 0.01)]
    noise: f64,
    /// Fraction of species per genus withheld as unseen.
    #[arg(long, default_value_t = 0.34)]
    unseen_fraction: f64,
    #[arg(short, long)]
    output: PathBuf,
}

fn resolve(cli: &Cli, apply: impl FnOnce(&mut Settings)) -> Result<RunConfig> {
    let file = match &cli.config {
        Some(path) => Settings::load(path)?,
        None => Settings::default(),
    };
    let mut flags = Settings::default();
    cli.common.apply(&mut flags);
    apply(&mut flags);
    let env_seed = std::env::var(SEED_ENV).ok();
    RunConfig::resolve(&file.overlay(flags), env_seed.as_deref()).context("resolving configuration")
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Generate(g) => {
            let cfg = resolve(&cli, |_| {})?;
            let corpus = SyntheticCorpusConfig {
                n_genera: g.genera,
                species_per_genus: g.species,
                records_per_species: g.records,
                seq_len: g.seq_len,
                genus_divergence: g.genus_divergence,
                species_divergence: g.species_divergence,
                noise_rate: g.noise,
                unseen_species_fraction: g.unseen_fraction,
            };
            commands::generate(&cfg, &corpus, &g.output)
        }
        Command::Pretrain {
            model,
            train,
            resume,
        } => {
            let cfg = resolve(&cli, |s| {
                model.apply(s);
                train.apply(s);
            })?;
            commands::pretrain(&cfg, resume.as_deref())
        }
        Command::Embed { partition, output } => {
            let cfg = resolve(&cli, |_| {})?;
            commands::embed(&cfg, *partition, output.as_deref())
        }
        Command::Eval { task } => match task {
            EvalTask::Knn(e) => commands::eval_knn(&resolve(&cli, |s| e.apply(s))?),
            EvalTask::Zsc(e) => commands::eval_zsc(&resolve(&cli, |s| e.apply(s))?),
            EvalTask::Robustness(e) => commands::eval_robustness(&resolve(&cli, |s| e.apply(s))?),
            EvalTask::Report => commands::eval_report(&resolve(&cli, |_| {})?),
        },
        Command::Ablate {
            grid,
            ks,
            model,
            train,
            eval,
        } => {
            let cfg = resolve(&cli, |s| {
                model.apply(s);
                train.apply(s);
                eval.apply(s);
            })?;
            let archs = commands::parse_grid(grid)?;
            let ks: Vec<usize> = ks
                .split(',')
                .map(|k| {
                    k.trim()
                        .parse()
                        .with_context(|| format!("bad k value `{k}` in --ks"))
                })
                .collect::<Result<_>>()?;
            commands::ablate(&cfg, &archs, &ks)
        }
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
