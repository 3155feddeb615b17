use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_barcodemae"));
    c.env_remove("BARCODEMAE_SEED").env("RUST_LOG", "warn");
    c
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn small_corpus(dir: &Path) {
    ok(
        dir,
        &[
            "generate",
            "--genera",
            "3",
            "--species",
            "3",
            "--records",
            "6",
            "--seq-len",
            "96",
            "--seed",
            "7",
            "-o",
            "corpus.tsv",
        ],
    );
}

const TINY: &[&str] = &[
    "--d-model",
    "16",
    "--d-ff",
    "32",
    "--arch",
    "enc:1-2 dec:1-2",
    "--batch-size",
    "8",
];

fn pretrain(dir: &Path, extra: &[&str]) -> String {
    let mut args = vec!["pretrain", "--data", "corpus.tsv", "--epochs", "2"];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    ok(dir, &args)
}

#[test]
fn generate_counts_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(
        d,
        &[
            "generate",
            "--genera",
            "4",
            "--species",
            "3",
            "--records",
            "10",
            "--seed",
            "7",
            "-o",
            "a.tsv",
        ],
    );
    ok(
        d,
        &[
            "generate",
            "--genera",
            "4",
            "--species",
            "3",
            "--records",
            "10",
            "--seed",
            "7",
            "-o",
            "b.tsv",
        ],
    );
    let a = fs::read_to_string(d.join("a.tsv")).unwrap();
    assert_eq!(a.lines().count(), 121);
    assert_eq!(a, fs::read_to_string(d.join("b.tsv")).unwrap());
}

#[test]
fn seed_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let gen = |seed_env: Option<&str>, flag: Option<&str>, out: &str| {
        let mut c = bin();
        c.current_dir(d)
            .args(["generate", "--records", "2", "-o", out]);
        if let Some(s) = seed_env {
            c.env("BARCODEMAE_SEED", s);
        }
        if let Some(s) = flag {
            c.args(["--seed", s]);
        }
        assert!(c.output().unwrap().status.success());
        fs::read_to_string(d.join(out)).unwrap()
    };
    let env3 = gen(Some("3"), None, "e.tsv");
    assert_eq!(env3, gen(None, Some("3"), "f.tsv"));
    assert_ne!(env3, gen(None, None, "g.tsv"));
    assert_eq!(gen(Some("9"), Some("3"), "h.tsv"), env3);
}

#[test]
fn invalid_corpus_names_the_constraint() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        dir.path(),
        &[
            "generate",
            "--genus-divergence",
            "0.05",
            "--species-divergence",
            "0.1",
            "-o",
            "x.tsv",
        ],
    );
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(
        err.contains("species_divergence must be < genus_divergence"),
        "{err}"
    );
    assert!(!dir.path().join("x.tsv").exists());
}

#[test]
fn incompatible_variant_and_decoder_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    small_corpus(dir.path());
    let out = run(
        dir.path(),
        &[
            "pretrain",
            "--data",
            "corpus.tsv",
            "--variant",
            "encoder-only",
            "--dec-layers",
            "2",
        ],
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("dec_layers"));
    assert!(!dir.path().join("run").exists());
}

#[test]
fn malformed_arch_names_the_token() {
    let dir = tempfile::tempdir().unwrap();
    small_corpus(dir.path());
    let out = run(
        dir.path(),
        &[
            "pretrain",
            "--data",
            "corpus.tsv",
            "--arch",
            "enc:2 dec:2-2",
        ],
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("`enc:2`"));
}

#[test]
fn full_pipeline_through_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_corpus(d);
    pretrain(d, &["--name", "p"]);
    let root = d.join("run/p");
    for sub in [
        "checkpoints/final.ckpt",
        "checkpoints/epoch-001.ckpt",
        "checkpoints/epoch-002.ckpt",
        "metrics/pretrain.tsv",
    ] {
        assert!(root.join(sub).exists(), "{sub}");
    }
    let metrics = fs::read_to_string(root.join("metrics/pretrain.tsv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);

    let knn = ok(
        d,
        &[
            "--name",
            "p",
            "--data",
            "corpus.tsv",
            "eval",
            "knn",
            "--reference",
            "seen_train",
            "--query",
            "unseen_test",
        ],
    );
    assert!(knn.contains("1-NN accuracy"), "{knn}");
    ok(d, &["--name", "p", "--data", "corpus.tsv", "eval", "zsc"]);
    let report = ok(d, &["--name", "p", "eval", "report"]);
    assert!(report.contains("harmonic mean"));

    let value = |file: &str, row: &str, col: usize| -> f64 {
        let text = fs::read_to_string(root.join("results").join(file)).unwrap();
        let line = text
            .lines()
            .find(|l| l.starts_with(&format!("{row}\t")))
            .unwrap()
            .to_string();
        line.split('\t').nth(col).unwrap().parse().unwrap()
    };
    let (acc, ami) = (
        100.0 * value("knn.tsv", "ALL", 3),
        100.0 * value("zsc.tsv", "ami", 1),
    );
    let hm = barcodemae::eval::harmonic_mean(acc, ami).unwrap();
    assert_eq!(value("report.tsv", "harmonic_mean", 1), hm);

    let curve = ok(
        d,
        &[
            "--name",
            "p",
            "--data",
            "corpus.tsv",
            "eval",
            "robustness",
            "--modes",
            "mask,delete",
            "--ratios",
            "0.1:0.9:0.1",
        ],
    );
    let tsv = fs::read_to_string(root.join("results/robustness.tsv")).unwrap();
    assert_eq!(tsv, curve);
    assert_eq!(tsv.lines().count(), 1 + 2 * 9);
}

#[test]
fn embedding_rows_and_duplicates() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_corpus(d);
    pretrain(d, &[]);
    // ten records, the last two duplicating the first sequence
    let corpus = fs::read_to_string(d.join("corpus.tsv")).unwrap();
    let mut lines: Vec<String> = corpus.lines().take(9).map(str::to_string).collect();
    let first = lines[1].clone();
    let rest = first.split_once('\t').unwrap().1;
    for i in 0..2 {
        lines.push(format!("dup{i}\t{rest}"));
    }
    fs::write(d.join("ten.tsv"), lines.join("\n") + "\n").unwrap();
    ok(d, &["--data", "ten.tsv", "embed", "-o", "emb.tsv"]);
    let emb = fs::read_to_string(d.join("emb.tsv")).unwrap();
    let rows: Vec<&str> = emb.lines().skip(1).collect();
    assert_eq!(rows.len(), 10);
    let vector = |row: &str| row.split('\t').skip(4).collect::<Vec<_>>().join("\t");
    assert_eq!(vector(rows[0]), vector(rows[8]));
    assert_eq!(vector(rows[0]), vector(rows[9]));

    ok(
        d,
        &["--data", "ten.tsv", "embed", "--partition", "seen_train"],
    );
    assert!(d.join("run/default/embeddings/seen_train.tsv").exists());

    let out = run(
        d,
        &["--data", "ten.tsv", "--checkpoint", "missing.ckpt", "embed"],
    );
    assert!(!out.status.success());
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_corpus(d);
    fs::write(d.join("run.conf"), "# tiny run\ndata = corpus.tsv\nepochs = 1\nd_model = 16\nd_ff = 32\narch = enc:1-2 dec:1-2\n").unwrap();
    ok(d, &["--config", "run.conf", "pretrain", "--epochs", "2"]);
    let metrics = fs::read_to_string(d.join("run/default/metrics/pretrain.tsv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);

    fs::write(d.join("bad.conf"), "epochs: 3\n").unwrap();
    let out = run(d, &["--config", "bad.conf", "pretrain"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.conf:1"));
}

#[test]
fn resume_matches_uninterrupted_training() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_corpus(d);
    pretrain(d, &["--name", "full", "--seed", "4"]);
    pretrain(d, &["--name", "half", "--seed", "4"]);
    let half = d.join("run/half");
    fs::remove_file(half.join("checkpoints/final.ckpt")).unwrap();
    pretrain(
        d,
        &[
            "--name",
            "half",
            "--seed",
            "4",
            "--resume",
            "run/half/checkpoints/epoch-001.ckpt",
        ],
    );
    let read = |p: &str| fs::read(d.join(p)).unwrap();
    assert_eq!(
        read("run/full/checkpoints/final.ckpt"),
        read("run/half/checkpoints/final.ckpt")
    );
    assert_eq!(
        read("run/full/metrics/pretrain.tsv"),
        read("run/half/metrics/pretrain.tsv")
    );
}

#[test]
fn ablation_grid_is_cartesian_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_corpus(d);
    let args = |name: &'static str| {
        vec![
            "ablate",
            "--name",
            name,
            "--data",
            "corpus.tsv",
            "--grid",
            "enc:1-2 dec:1-1; enc:1-2 dec:1-2",
            "--ks",
            "3,4",
            "--epochs",
            "1",
            "--d-model",
            "16",
            "--d-ff",
            "32",
            "--seed",
            "2",
        ]
    };
    let first = ok(d, &args("a"));
    ok(d, &args("b"));
    let table = fs::read_to_string(d.join("run/a/results/ablation.tsv")).unwrap();
    assert_eq!(table, first);
    assert_eq!(table.lines().count(), 5);
    assert_eq!(
        table.lines().next().unwrap(),
        "arch\tk\taccuracy\tami\tharmonic_mean"
    );
    assert!(table.contains("enc:1-2 dec:1-1\t3\t"));
    assert!(table.contains("enc:1-2 dec:1-2\t4\t"));
    assert_eq!(
        table,
        fs::read_to_string(d.join("run/b/results/ablation.tsv")).unwrap()
    );

    let out = run(
        d,
        &["ablate", "--data", "corpus.tsv", "--grid", "enc:2 dec:2-2"],
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("`enc:2`"));
}
