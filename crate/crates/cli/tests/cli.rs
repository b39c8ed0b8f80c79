//! End-to-end command tests on the bundled toy treebank.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use clap::Parser;
use tdpcfg::checkpoint::Checkpoint;
use tdpcfg::corpus::{gold_spans, preprocess_all, read_treebank, DEFAULT_PUNCT_TAGS};
use tdpcfg::decoder::{ParseRecord, ParseTree, Span};
use tdpcfg::model::NeuralParams;
use tdpcfg_cli::commands::read_records;
use tdpcfg_cli::{run, Cli, RunOutput};

fn data(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join(rel)
}

fn toy_config() -> PathBuf {
    data("data/toy.toml")
}

fn fixture10() -> PathBuf {
    data("../core/tests/data/fixture10.mrg")
}

fn cmd(root: &Path, args: &[&str]) -> RunOutput {
    let mut argv = vec!["tdpcfg", "--threads", "1", "--out-root", root.to_str().unwrap()];
    argv.extend_from_slice(args);
    run(&Cli::try_parse_from(argv).unwrap()).unwrap()
}

fn bin(root: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_tdpcfg"))
        .args(["--threads", "1", "--out-root", root.to_str().unwrap()])
        .args(args)
        .output()
        .unwrap()
}

fn read(out: &RunOutput, name: &str) -> String {
    fs::read_to_string(out.dir.join(name)).unwrap()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn toy_training_produces_a_checkpoint_per_seed() {
    let root = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let out = cmd(root.path(), &["train", "--config", path_str(&toy_config())]);
    assert!(start.elapsed().as_secs() < 300);
    for seed in 0..4 {
        let ck = Checkpoint::load(&out.dir.join(format!("seed-{seed}.ckpt"))).unwrap();
        assert_eq!(ck.meta["seed"], seed.to_string());
        assert_eq!(ck.meta["manifest"], out.manifest.digest());
    }
    let history = read(&out, "history.tsv");
    // header plus epochs 0..=10 for 4 seeds
    assert_eq!(history.lines().count(), 1 + 4 * 11);
    let manifest = read(&out, "manifest.toml");
    for name in ["seed-0.ckpt", "vocab.tsv", "history.tsv"] {
        assert!(manifest.contains(name));
    }
    assert!(out.dir.file_name().unwrap().to_str().unwrap().starts_with("train-"));
}

#[test]
fn zero_epochs_checkpoints_the_initialization() {
    let root = tempfile::tempdir().unwrap();
    let out = cmd(root.path(), &["train", "--config", path_str(&toy_config()), "--epochs", "0", "--seeds", "7"]);
    let ck = Checkpoint::load(&out.dir.join("seed-7.ckpt")).unwrap();
    assert_eq!(ck.params, NeuralParams::init(*ck.config(), 7).unwrap());
    assert_eq!(ck.meta["best_epoch"], "0");
}

#[test]
fn invalid_config_key_is_named() {
    let root = tempfile::tempdir().unwrap();
    let config = root.path().join("bad.toml");
    fs::write(&config, "[train]\nepochs = 1\nlearning_rat = 0.1\n").unwrap();
    let out = bin(root.path(), &["train", "--config", path_str(&config)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rat"));
}

#[test]
fn unsupported_precision_is_rejected() {
    let root = tempfile::tempdir().unwrap();
    let config = root.path().join("f32.toml");
    fs::write(&config, "[model]\np = 4\nprecision = \"f32\"\n").unwrap();
    let out = bin(root.path(), &["train", "--config", path_str(&config)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("f32"));
}

fn trained(root: &Path) -> RunOutput {
    cmd(root, &["train", "--config", path_str(&toy_config()), "--epochs", "2", "--seeds", "0"])
}

#[test]
fn parse_is_deterministic_and_well_formed() {
    let root = tempfile::tempdir().unwrap();
    let model = trained(root.path());
    let (ck, vocab) = (model.dir.join("seed-0.ckpt"), model.dir.join("vocab.tsv"));
    let test = data("data/toy/test.mrg");
    let args = ["parse", "--checkpoint", path_str(&ck), "--vocab", path_str(&vocab), "--treebank", path_str(&test)];
    let a = cmd(root.path(), &args);
    let other = tempfile::tempdir().unwrap();
    let b = cmd(other.path(), &args);
    assert_eq!(read(&a, "predictions.txt"), read(&b, "predictions.txt"));

    let records = read_records(&a.dir.join("predictions.txt")).unwrap();
    assert_eq!(records.len(), 50);
    for r in &records {
        assert!(r.tree.is_valid(), "sentence {}", r.id);
        assert!(r.log_likelihood.is_finite());
        assert!(r.tree.spans.iter().all(|s| s.label.is_some()));
    }

    let empty = root.path().join("empty.txt");
    fs::write(&empty, "").unwrap();
    let out = bin(
        root.path(),
        &["parse", "--checkpoint", path_str(&ck), "--vocab", path_str(&vocab), "--input", path_str(&empty)],
    );
    assert!(out.status.success());
    let dir = String::from_utf8(out.stdout).unwrap();
    let predictions = Path::new(dir.lines().last().unwrap()).join("predictions.txt");
    assert_eq!(fs::read_to_string(predictions).unwrap(), "");
}

#[test]
fn parse_reads_plain_sentences() {
    let root = tempfile::tempdir().unwrap();
    let model = trained(root.path());
    let input = root.path().join("sentences.txt");
    fs::write(&input, "w1 w2 w3\n\nw4 unseen-word\nw5\n").unwrap();
    let out = cmd(
        root.path(),
        &[
            "parse",
            "--checkpoint",
            path_str(&model.dir.join("seed-0.ckpt")),
            "--vocab",
            path_str(&model.dir.join("vocab.tsv")),
            "--input",
            path_str(&input),
        ],
    );
    let records = read_records(&out.dir.join("predictions.txt")).unwrap();
    assert_eq!(records.iter().map(|r| r.tree.len).collect::<Vec<_>>(), [3, 2, 1]);
    assert_eq!(records[2].log_likelihood, f64::NEG_INFINITY);
}

fn gold_records(path: &Path) -> String {
    let trees = preprocess_all(&read_treebank(path).unwrap(), &DEFAULT_PUNCT_TAGS).0;
    trees
        .iter()
        .enumerate()
        .map(|(id, t)| {
            let spans = gold_spans(t).iter().map(|s| Span::new(s.0, s.1)).collect();
            let tree = ParseTree { len: t.leaf_count(), spans, tags: None };
            ParseRecord { id, tree, log_likelihood: 0.0 }.to_line() + "\n"
        })
        .collect()
}

fn metric(report: &str, name: &str) -> String {
    report.lines().find(|l| l.starts_with(&format!("{name}\t"))).unwrap().split('\t').nth(1).unwrap().to_string()
}

#[test]
fn eval_of_gold_against_itself_is_perfect() {
    let root = tempfile::tempdir().unwrap();
    let pred = root.path().join("gold.txt");
    fs::write(&pred, gold_records(&fixture10())).unwrap();
    let out = cmd(root.path(), &["eval", "--gold", path_str(&fixture10()), "--pred", path_str(&pred)]);
    assert_eq!(metric(&read(&out, "report.tsv"), "f1_mean"), "100.0000");
    assert!(read(&out, "report.txt").contains("100.00"));
}

#[test]
fn eval_right_branching_matches_hand_scoring() {
    let root = tempfile::tempdir().unwrap();
    let out = cmd(root.path(), &["eval", "--gold", path_str(&fixture10()), "--baseline", "right"]);
    let report = read(&out, "report.tsv");
    // 1060 / 21
    assert_eq!(metric(&report, "f1_mean"), "50.4762");
    assert_eq!(metric(&report, "recall_NP"), "25.0000");
    assert_eq!(metric(&report, "recall_ADJP"), "undefined");
}

#[test]
fn eval_names_the_first_mismatch() {
    let root = tempfile::tempdir().unwrap();
    let pred = root.path().join("short.txt");
    let lines: Vec<String> = gold_records(&fixture10()).lines().map(str::to_string).collect();
    fs::write(&pred, lines[..5].join("\n")).unwrap();
    let out = bin(root.path(), &["eval", "--gold", path_str(&fixture10()), "--pred", path_str(&pred)]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("first mismatch at sentence 5"), "{err}");
}

#[test]
fn sweep_writes_one_row_per_p() {
    let root = tempfile::tempdir().unwrap();
    let out = cmd(
        root.path(),
        &["sweep", "--config", path_str(&toy_config()), "--p", "4,8", "--epochs", "1", "--seeds", "0,1"],
    );
    let table = read(&out, "sweep.tsv");
    let rows: Vec<Vec<&str>> = table.lines().skip(1).map(|l| l.split('\t').collect()).collect();
    assert_eq!(rows.len(), 2);
    for (row, p) in rows.iter().zip([4, 8]) {
        assert_eq!(row[0], p.to_string());
        assert_eq!(row[1], (p / 2).to_string());
        assert_eq!(row.len(), 7);
        assert!(row[3].parse::<f64>().unwrap() >= 0.0);
    }
    assert_eq!(read(&out, "sweep_seeds.tsv").lines().count(), 1 + 4);
}

#[test]
fn bench_schema_does_not_depend_on_repetitions() {
    let root = tempfile::tempdir().unwrap();
    let args = |reps: &'static str| ["bench", "--dense-m", "6,9", "--factored-m", "8,16", "--len", "6", "--reps", reps];
    let one = read(&cmd(root.path(), &args("1")), "bench.tsv");
    let five = read(&cmd(root.path(), &args("5")), "bench.tsv");
    let schema = |t: &str| t.lines().map(|l| l.split('\t').take(5).collect::<Vec<_>>().join("\t")).collect::<Vec<_>>();
    assert_eq!(schema(&one), schema(&five));
    assert_eq!(one.lines().count(), 5);
}

#[test]
fn inspect_reports_correspondence_and_clusters() {
    let root = tempfile::tempdir().unwrap();
    let model = trained(root.path());
    let top_k = 2;
    let out = cmd(
        root.path(),
        &[
            "inspect",
            "--checkpoint",
            path_str(&model.dir.join("seed-0.ckpt")),
            "--vocab",
            path_str(&model.dir.join("vocab.tsv")),
            "--treebank",
            path_str(&data("data/toy/dev.mrg")),
            "--top-k",
            &top_k.to_string(),
        ],
    );
    let tsv = read(&out, "correspondence.tsv");
    let mut lines = tsv.lines();
    let columns = lines.next().unwrap().split('\t').count() - 1;
    assert!(columns <= top_k + 1);
    let mut defined = 0;
    for line in lines {
        let cells: Vec<&str> = line.split('\t').skip(1).collect();
        if cells[0] != "undefined" {
            let sum: f64 = cells.iter().map(|c| c.parse::<f64>().unwrap()).sum();
            assert!((sum - 1.0).abs() < 1e-5, "{line}");
            defined += 1;
        }
    }
    assert!(defined > 0);
    let clusters = read(&out, "clusters.txt");
    let mut blocks = clusters.lines();
    assert!(blocks.next().unwrap().starts_with("NT-"));
    assert!(blocks.next().unwrap().starts_with("  "));
}

#[test]
fn reruns_reproduce_metric_files() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let config = toy_config();
    let args = ["train", "--config", path_str(&config), "--epochs", "1", "--seeds", "3"];
    let x = cmd(a.path(), &args);
    let y = cmd(b.path(), &args);
    assert_eq!(x.dir.file_name(), y.dir.file_name());
    for name in ["history.tsv", "summary.tsv", "vocab.tsv", "seed-3.ckpt", "manifest.toml"] {
        assert_eq!(fs::read(x.dir.join(name)).unwrap(), fs::read(y.dir.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn thread_count_does_not_change_results() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let config = toy_config();
    let argv = |root: &Path, threads: &'static str| {
        vec![
            "tdpcfg".to_string(),
            "--threads".into(),
            threads.into(),
            "--out-root".into(),
            root.to_str().unwrap().into(),
            "train".into(),
            "--config".into(),
            config.to_str().unwrap().into(),
            "--epochs".into(),
            "1".into(),
            "--seeds".into(),
            "0".into(),
        ]
    };
    let x = run(&Cli::try_parse_from(argv(a.path(), "1")).unwrap()).unwrap();
    let y = run(&Cli::try_parse_from(argv(b.path(), "4")).unwrap()).unwrap();
    // the manifest digest in the metadata records the thread count; the
    // arrays must match bit for bit
    let (cx, cy) =
        (Checkpoint::load(&x.dir.join("seed-0.ckpt")).unwrap(), Checkpoint::load(&y.dir.join("seed-0.ckpt")).unwrap());
    assert_eq!(cx.params, cy.params);
    assert_eq!(cx.grammar, cy.grammar);
    assert_eq!(read(&x, "history.tsv"), read(&y, "history.tsv"));
}

#[test]
fn synth_writes_three_splits() {
    let root = tempfile::tempdir().unwrap();
    let config = root.path().join("synth.toml");
    fs::write(&config, "[synthetic]\nn = 2\np = 3\nq = 6\nd = 4\ntrain = 20\ndev = 5\ntest = 5\nmax_length = 10\n")
        .unwrap();
    let out = cmd(root.path(), &["synth", "--config", path_str(&config)]);
    for (name, count) in [("train.mrg", 20), ("dev.mrg", 5), ("test.mrg", 5)] {
        assert_eq!(read_treebank(&out.dir.join(name)).unwrap().len(), count);
    }
}
