//! Command implementations. Each one is a function of the resolved
//! configuration and its input files; outputs go through `write_atomic`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use barcodemae::eval::{
    bin_reconstruction_eval, harmonic_mean, knn_probe, robustness_sweep, ClusterResult,
    ProbeResult, ROBUSTNESS_HEADER,
};
use barcodemae::model::{embed_corpus, ModelConfig};
use barcodemae::seqdata::{
    generate_synthetic, load_records, partition_view, to_tsv, BarcodeRecord, RecordSet,
    SyntheticCorpusConfig,
};
use barcodemae::train::{
    load_checkpoint, save_checkpoint, Checkpoint, EpochMetrics, Trainer, METRICS_HEADER,
};

use crate::config::{parse_arch, RunConfig};
use crate::layout::{ensure_parent, write_atomic, RunLayout};

pub fn generate(cfg: &RunConfig, corpus: &SyntheticCorpusConfig, output: &Path) -> Result<()> {
    let set = generate_synthetic(corpus, cfg.seed).context("invalid corpus configuration")?;
    write_atomic(output, to_tsv(&set).as_bytes())
        .with_context(|| format!("writing {}", output.display()))?;
    println!("wrote {} records to {}", set.len(), output.display());
    Ok(())
}

fn load_data(cfg: &RunConfig) -> Result<RecordSet> {
    let path = cfg.data_path()?;
    load_records(path, cfg.format)
        .with_context(|| format!("loading records from {}", path.display()))
}

fn sequences(set: &RecordSet) -> Vec<String> {
    set.iter().map(|r| r.sequence.clone()).collect()
}

/// Keeps rows of an existing metrics file up to `epoch` so a resumed run
/// ends with one contiguous table.
fn prior_metrics(path: &Path, epoch: usize) -> Vec<String> {
    let Ok(text) = fs::read_to_string(path) else {
        return Vec::new();
    };
    text.lines()
        .skip(1)
        .filter(|l| {
            l.split('\t')
                .next()
                .and_then(|e| e.parse::<usize>().ok())
                .is_some_and(|e| e <= epoch)
        })
        .map(str::to_string)
        .collect()
}

fn train_run(
    seqs: Vec<String>,
    model: &ModelConfig,
    cfg: &RunConfig,
    resume: Option<&Path>,
    ckpt_dir: &Path,
    tag: &str,
    metrics_path: &Path,
) -> Result<Checkpoint> {
    let (mut trainer, mut rows) = match resume {
        Some(path) => {
            let ck = load_checkpoint(path)
                .with_context(|| format!("loading checkpoint {}", path.display()))?;
            let rows = prior_metrics(metrics_path, ck.epoch);
            (Trainer::resume(seqs, ck)?, rows)
        }
        None => (
            Trainer::new(seqs, model.clone(), cfg.train.clone())?,
            Vec::new(),
        ),
    };
    fs::create_dir_all(ckpt_dir)?;
    while !trainer.is_done() {
        let m: EpochMetrics = trainer.run_epoch()?;
        log::info!(
            "{tag} epoch {} step {} loss {:.4} masked_acc {:.4} lr {:.3e}",
            m.epoch,
            m.step,
            m.loss,
            m.masked_acc,
            m.lr
        );
        rows.push(m.tsv_row());
        let table = format!("{METRICS_HEADER}\n{}\n", rows.join("\n"));
        write_atomic(metrics_path, table.as_bytes())?;
        save_checkpoint(
            trainer.checkpoint(),
            &ckpt_dir.join(format!("{tag}epoch-{:03}.ckpt", m.epoch)),
        )?;
    }
    Ok(trainer.into_checkpoint())
}

pub fn pretrain(cfg: &RunConfig, resume: Option<&Path>) -> Result<()> {
    cfg.model.validate()?;
    cfg.train.validate()?;
    let set = load_data(cfg)?;
    let layout = RunLayout::new(&cfg.out, &cfg.name);
    let metrics = layout.metrics().join("pretrain.tsv");
    let ck = train_run(
        sequences(&set),
        &cfg.model,
        cfg,
        resume,
        &layout.checkpoints(),
        "",
        &metrics,
    )?;
    save_checkpoint(&ck, &layout.final_checkpoint())?;
    println!(
        "trained {} for {} epochs ({} steps); checkpoint {}",
        ck.model.variant,
        ck.epoch,
        ck.step,
        layout.final_checkpoint().display()
    );
    Ok(())
}

fn checkpoint_path(cfg: &RunConfig) -> PathBuf {
    cfg.checkpoint
        .clone()
        .unwrap_or_else(|| RunLayout::new(&cfg.out, &cfg.name).final_checkpoint())
}

fn load_model(cfg: &RunConfig) -> Result<Checkpoint> {
    let path = checkpoint_path(cfg);
    if !path.exists() {
        bail!("checkpoint {} does not exist", path.display());
    }
    load_checkpoint(&path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn records_in(set: &RecordSet, partitions: &[barcodemae::Partition]) -> Vec<BarcodeRecord> {
    partitions
        .iter()
        .flat_map(|&p| partition_view(set, p).records().to_vec())
        .collect()
}

pub fn embed(
    cfg: &RunConfig,
    partition: Option<barcodemae::Partition>,
    output: Option<&Path>,
) -> Result<()> {
    let ck = load_model(cfg)?;
    let set = load_data(cfg)?;
    let records = match partition {
        Some(p) => records_in(&set, &[p]),
        None => set.records().to_vec(),
    };
    let emb = embed_corpus(&ck.params, &ck.model, &records)?;
    let default = RunLayout::new(&cfg.out, &cfg.name)
        .embeddings()
        .join(format!("{}.tsv", partition.map_or("all", |p| p.as_str())));
    let path = output.map_or(default, Path::to_path_buf);
    write_atomic(&path, emb.to_tsv().as_bytes())?;
    println!(
        "wrote {} embeddings of width {} to {}",
        emb.len(),
        emb.dim,
        path.display()
    );
    Ok(())
}

fn probe(ck: &Checkpoint, cfg: &RunConfig, set: &RecordSet) -> Result<ProbeResult> {
    let reference = records_in(set, &[cfg.reference]);
    let query = records_in(set, &[cfg.query]);
    let r = embed_corpus(&ck.params, &ck.model, &reference)?;
    let q = embed_corpus(&ck.params, &ck.model, &query)?;
    Ok(knn_probe(&r, &q, cfg.level)?)
}

fn cluster(
    ck: &Checkpoint,
    cfg: &RunConfig,
    set: &RecordSet,
) -> Result<(ClusterResult, Vec<String>)> {
    let records = records_in(set, &cfg.zsc_partitions);
    let ids = records.iter().map(|r| r.record_id.clone()).collect();
    Ok((
        bin_reconstruction_eval(&ck.params, &ck.model, &records)?,
        ids,
    ))
}

fn zsc_summary(res: &ClusterResult) -> String {
    format!(
        "metric\tvalue\nami\t{}\nn_clusters\t{}\nn_records\t{}\n",
        res.ami,
        res.n_clusters,
        res.assignment.len()
    )
}

pub fn eval_knn(cfg: &RunConfig) -> Result<()> {
    let ck = load_model(cfg)?;
    let res = probe(&ck, cfg, &load_data(cfg)?)?;
    let path = RunLayout::new(&cfg.out, &cfg.name)
        .results()
        .join("knn.tsv");
    write_atomic(&path, res.to_tsv().as_bytes())?;
    println!(
        "{} 1-NN accuracy {} ({}/{}) reference {} query {}",
        format!("{:?}", cfg.level).to_lowercase(),
        res.accuracy,
        res.n_correct,
        res.n_queries,
        cfg.reference,
        cfg.query
    );
    Ok(())
}

pub fn eval_zsc(cfg: &RunConfig) -> Result<()> {
    let ck = load_model(cfg)?;
    let (res, ids) = cluster(&ck, cfg, &load_data(cfg)?)?;
    let dir = RunLayout::new(&cfg.out, &cfg.name).results();
    write_atomic(
        &dir.join("zsc_assignments.tsv"),
        res.to_tsv(&ids).as_bytes(),
    )?;
    write_atomic(&dir.join("zsc.tsv"), zsc_summary(&res).as_bytes())?;
    println!(
        "BIN reconstruction AMI {} over {} records in {} clusters",
        res.ami,
        ids.len(),
        res.n_clusters
    );
    Ok(())
}

pub fn eval_robustness(cfg: &RunConfig) -> Result<()> {
    let ck = load_model(cfg)?;
    let set = load_data(cfg)?;
    let reference = records_in(&set, &[cfg.reference]);
    let query = records_in(&set, &[cfg.query]);
    let mut out = format!("{ROBUSTNESS_HEADER}\n");
    for &mode in &cfg.modes {
        let curve = robustness_sweep(
            &ck.params,
            &ck.model,
            &reference,
            &query,
            &cfg.ratios,
            mode,
            cfg.level,
            cfg.seed,
        )?;
        out.push_str(&curve.tsv_rows());
    }
    let path = RunLayout::new(&cfg.out, &cfg.name)
        .results()
        .join("robustness.tsv");
    write_atomic(&path, out.as_bytes())?;
    print!("{out}");
    Ok(())
}

fn read_metric(path: &Path, row: &str, column: usize) -> Result<f64> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading {} (run the matching eval first)", path.display()))?;
    let line = text
        .lines()
        .find(|l| l.split('\t').next() == Some(row))
        .with_context(|| format!("{} has no `{row}` row", path.display()))?;
    let field = line
        .split('\t')
        .nth(column)
        .with_context(|| format!("{}: short `{row}` row", path.display()))?;
    field
        .parse()
        .with_context(|| format!("{}: bad number `{field}`", path.display()))
}

pub fn eval_report(cfg: &RunConfig) -> Result<()> {
    let dir = RunLayout::new(&cfg.out, &cfg.name).results();
    let acc = 100.0 * read_metric(&dir.join("knn.tsv"), "ALL", 3)?;
    let ami = 100.0 * read_metric(&dir.join("zsc.tsv"), "ami", 1)?;
    let hm = harmonic_mean(acc, ami)?;
    let table = format!("metric\tvalue\naccuracy\t{acc}\nami\t{ami}\nharmonic_mean\t{hm}\n");
    write_atomic(&dir.join("report.tsv"), table.as_bytes())?;
    println!("accuracy {acc:.1}  AMI {ami:.1}  harmonic mean {hm:.1}");
    Ok(())
}

/// Splits a `;`-separated list of architecture strings.
pub fn parse_grid(grid: &str) -> Result<Vec<(usize, usize, usize, usize)>> {
    let archs: Vec<_> = grid
        .split(';')
        .map(str::trim)
        .filter(|a| !a.is_empty())
        .map(parse_arch)
        .collect::<Result<_, _>>()?;
    if archs.is_empty() {
        bail!("empty architecture grid");
    }
    Ok(archs)
}

pub fn ablate(cfg: &RunConfig, grid: &[(usize, usize, usize, usize)], ks: &[usize]) -> Result<()> {
    cfg.train.validate()?;
    let set = load_data(cfg)?;
    let layout = RunLayout::new(&cfg.out, &cfg.name);
    let mut models = Vec::new();
    // validate the whole grid before spending time on training
    for &(el, eh, dl, dh) in grid {
        for &k in ks {
            let model = ModelConfig {
                enc_layers: el,
                enc_heads: eh,
                dec_layers: dl,
                dec_heads: dh,
                k,
                ..cfg.model.clone()
            };
            model
                .validate()
                .with_context(|| format!("{} k={k}", model.arch_string()))?;
            models.push(model);
        }
    }
    let mut table = String::from("arch\tk\taccuracy\tami\tharmonic_mean\n");
    for model in models {
        let tag = format!(
            "enc{}-{}_dec{}-{}_k{}",
            model.enc_layers, model.enc_heads, model.dec_layers, model.dec_heads, model.k
        );
        let metrics = layout.metrics().join(format!("ablate-{tag}.tsv"));
        let ck = train_run(
            sequences(&set),
            &model,
            cfg,
            None,
            &layout.checkpoints(),
            &format!("ablate-{tag}-"),
            &metrics,
        )?;
        save_checkpoint(
            &ck,
            &layout.checkpoints().join(format!("ablate-{tag}.ckpt")),
        )?;
        let acc = 100.0 * probe(&ck, cfg, &set)?.accuracy;
        let ami = 100.0 * cluster(&ck, cfg, &set)?.0.ami;
        let hm = harmonic_mean(acc, ami)?;
        writeln!(
            table,
            "{}\t{}\t{acc}\t{ami}\t{hm}",
            model.arch_string(),
            model.k
        )?;
        log::info!("{tag}: accuracy {acc:.1} AMI {ami:.1} harmonic mean {hm:.1}");
    }
    let path = layout.results().join("ablation.tsv");
    ensure_parent(&path)?;
    write_atomic(&path, table.as_bytes())?;
    print!("{table}");
    Ok(())
}
