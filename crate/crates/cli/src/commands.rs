//! Command implementations.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use tdpcfg::checkpoint::Checkpoint;
use tdpcfg::corpus::{write_treebank, CorpusVocab, TreeNode, DEFAULT_PUNCT_TAGS};
use tdpcfg::decoder::{parse_sentence, ParseRecord, ParseTree};
use tdpcfg::evaluator::{
    cluster_report, corpus_f1, label_correspondence, left_branching, mean_std, most_predicted, random_tree,
    recall_by_label, right_branching, CorpusF1, EvalReport, DEFAULT_RECALL_LABELS,
};
use tdpcfg::model::default_rank;
use tdpcfg::trainer::{perplexity, train as train_models, TrainOutcome};
use tdpcfg::{Sentence, TdPcfg};

use crate::bench::{run_bench, BenchSpec};
use crate::config::{parse_empty_gold, Config};
use crate::data::{load_dataset, load_trees, synthetic_trees, Dataset};
use crate::error::{CliError, IoContext, Result};
use crate::manifest::{Run, RunManifest, RunOutput};
use crate::{Baseline, BenchArgs, EvalArgs, InspectArgs, ParseArgs, SweepArgs, SynthArgs, TrainArgs};

fn load_config(path: &Path, seeds: &Option<Vec<u64>>, epochs: Option<usize>) -> Result<Config> {
    let mut config = Config::load(path)?;
    if let Some(seeds) = seeds {
        config.train.seeds = seeds.clone();
    }
    if let Some(epochs) = epochs {
        config.train.epochs = epochs;
    }
    config.validate()?;
    Ok(config)
}

fn config_manifest(command: &str, config: &Config) -> Result<RunManifest> {
    let mut manifest = RunManifest::new(command);
    manifest.config = Some(config.to_toml());
    manifest.seeds = config.train.seeds.clone();
    manifest.setting("threads", rayon::current_num_threads());
    for path in [&config.data.train, &config.data.dev, &config.data.test].into_iter().flatten() {
        manifest.input(path)?;
    }
    Ok(manifest)
}

/// MBR parses of `sentences`, ids in input order.
pub fn parse_corpus(g: &TdPcfg, sentences: &[Sentence]) -> Result<Vec<ParseRecord>> {
    let records: tdpcfg::Result<Vec<ParseRecord>> =
        sentences.par_iter().enumerate().map(|(i, s)| parse_sentence(g, i, s)).collect();
    Ok(records?)
}

fn records_text(records: &[ParseRecord]) -> String {
    records.iter().map(|r| r.to_line() + "\n").collect()
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    match v.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => v[n / 2],
        n => (v[n / 2 - 1] + v[n / 2]) / 2.0,
    }
}

fn history_tables(outcome: &TrainOutcome) -> (String, String) {
    let mut history = String::from("seed\tepoch\ttrain_nll\tdev_perplexity\n");
    let mut timing = String::from("seed\tepoch\tseconds\n");
    for r in &outcome.history {
        history.push_str(&format!("{}\t{}\t{}\t{}\n", r.seed, r.epoch, r.train_nll, r.dev_perplexity));
        timing.push_str(&format!("{}\t{}\t{:.3}\n", r.seed, r.epoch, r.seconds));
    }
    (history, timing)
}

fn write_splits(run: &mut Run, ds: &Dataset) -> Result<()> {
    for (name, split) in [("train.mrg", &ds.train), ("dev.mrg", &ds.dev), ("test.mrg", &ds.test)] {
        write_treebank(&run.output(name), &split.trees)?;
    }
    Ok(())
}

pub fn train(args: &TrainArgs, root: &Path) -> Result<RunOutput> {
    let mut config = load_config(&args.config, &args.seeds, args.epochs)?;
    for (slot, value) in
        [(&mut config.data.train, &args.train), (&mut config.data.dev, &args.dev), (&mut config.data.test, &args.test)]
    {
        if value.is_some() {
            slot.clone_from(value);
        }
    }
    let ds = load_dataset(&config)?;
    let model = config.model_config(ds.vocab.len());
    println!("parameters: {}", model.parameter_count());
    log::info!("model {model:?}");

    let mut run = Run::create(root, config_manifest("train", &config)?)?;
    let outcome = train_models(model, &config.train_config(), &ds.train.sentences, &ds.dev.sentences)?;
    let digest = run.digest();
    ds.vocab.save(&run.output("vocab.tsv"))?;
    let mut summary = String::from("seed\tbest_epoch\tdev_perplexity\n");
    for r in &outcome.runs {
        Checkpoint::new(r.params.clone())?
            .with_meta("seed", r.seed)
            .with_meta("best_epoch", r.best_epoch)
            .with_meta("dev_perplexity", r.dev_perplexity)
            .with_meta("manifest", &digest)
            .save(&run.output(&format!("seed-{}.ckpt", r.seed)))?;
        summary.push_str(&format!("{}\t{}\t{}\n", r.seed, r.best_epoch, r.dev_perplexity));
    }
    let (history, timing) = history_tables(&outcome);
    run.write("history.tsv", history)?;
    run.write("timing.tsv", timing)?;
    run.write("summary.tsv", summary)?;
    if ds.truth.is_some() {
        write_splits(&mut run, &ds)?;
    }
    run.finish()
}

fn load_model(checkpoint: &Path, vocab_path: &Path) -> Result<(Checkpoint, CorpusVocab)> {
    let ck = Checkpoint::load(checkpoint)?;
    let vocab = CorpusVocab::load(vocab_path)?;
    if vocab.len() != ck.config().q {
        return Err(CliError::Usage(format!(
            "{} has {} words but {} expects {}",
            vocab_path.display(),
            vocab.len(),
            checkpoint.display(),
            ck.config().q
        )));
    }
    Ok((ck, vocab))
}

/// Whitespace-tokenized sentences, one per non-blank line.
pub fn read_sentences(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).at(path)?;
    Ok(text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split_whitespace().map(str::to_string).collect())
        .collect())
}

pub fn parse(args: &ParseArgs, root: &Path) -> Result<RunOutput> {
    let mut manifest = RunManifest::new("parse");
    manifest.setting("threads", rayon::current_num_threads());
    manifest.input(&args.checkpoint)?.input(&args.vocab)?;
    let words: Vec<Vec<String>> = match (&args.input, &args.treebank) {
        (Some(path), _) => {
            manifest.input(path)?;
            read_sentences(path)?
        }
        (None, Some(path)) => {
            manifest.input(path)?;
            let trees = load_trees(path, &DEFAULT_PUNCT_TAGS)?;
            trees.iter().map(|t| t.words().into_iter().map(str::to_string).collect()).collect()
        }
        (None, None) => return Err(CliError::Usage("parse needs --input or --treebank".into())),
    };
    let (ck, vocab) = load_model(&args.checkpoint, &args.vocab)?;
    let sentences: Vec<Sentence> =
        words.iter().map(|w| vocab.encode(&w.iter().map(String::as_str).collect::<Vec<_>>())).collect();
    let records = parse_corpus(&ck.grammar, &sentences)?;
    let mut run = Run::create(root, manifest)?;
    run.write("predictions.txt", records_text(&records))?;
    run.finish()
}

/// Reads parse records, skipping blank lines.
pub fn read_records(path: &Path) -> Result<Vec<ParseRecord>> {
    let text = fs::read_to_string(path).at(path)?;
    let records: tdpcfg::Result<Vec<ParseRecord>> =
        text.lines().filter(|l| !l.trim().is_empty()).map(ParseRecord::from_line).collect();
    Ok(records?)
}

/// Checks that `records` line up with the gold sentence lengths, naming the
/// first sentence that does not.
fn align(path: &Path, lens: &[usize], records: Vec<ParseRecord>) -> Result<Vec<ParseTree>> {
    for idx in 0..lens.len().max(records.len()) {
        let gold = lens.get(idx);
        let pred = records.get(idx).map(|r| r.tree.len);
        if gold != pred.as_ref() {
            let show = |x: Option<&usize>| x.map_or("no sentence".to_string(), |l| format!("{l} tokens"));
            return Err(CliError::Usage(format!(
                "{}: {} predictions for {} gold trees; first mismatch at sentence {idx} (gold {}, prediction {})",
                path.display(),
                records.len(),
                lens.len(),
                show(gold),
                show(pred.as_ref())
            )));
        }
    }
    Ok(records.into_iter().map(|r| r.tree).collect())
}

pub fn eval(args: &EvalArgs, root: &Path) -> Result<RunOutput> {
    let policy = parse_empty_gold(&args.empty_gold)?;
    let labels: Vec<String> =
        args.labels.clone().unwrap_or_else(|| DEFAULT_RECALL_LABELS.iter().map(|s| s.to_string()).collect());
    let label_refs: Vec<&str> = labels.iter().map(String::as_str).collect();

    let mut manifest = RunManifest::new("eval");
    manifest.setting("empty_gold", &args.empty_gold).setting("labels", labels.join(","));
    manifest.input(&args.gold)?;
    let trees = load_trees(&args.gold, &DEFAULT_PUNCT_TAGS)?;
    let gold: Vec<_> = trees.iter().map(tdpcfg::corpus::gold_spans).collect();
    let lens: Vec<usize> = trees.iter().map(TreeNode::leaf_count).collect();

    let predictions: Vec<(u64, Vec<ParseTree>)> = match args.baseline {
        Some(kind) => {
            manifest.setting("baseline", format!("{kind:?}").to_lowercase());
            let seeds = if kind == Baseline::Random { args.seeds.clone() } else { vec![0] };
            manifest.seeds = seeds.clone();
            seeds.into_iter().map(|seed| (seed, baseline_trees(kind, &lens, seed))).collect()
        }
        None => {
            let mut out = Vec::new();
            for (i, path) in args.pred.iter().enumerate() {
                manifest.input(path)?;
                out.push((i as u64, align(path, &lens, read_records(path)?)?));
            }
            manifest.seeds = (0..out.len() as u64).collect();
            out
        }
    };

    let mut per_seed: Vec<(u64, CorpusF1)> = Vec::new();
    let mut recall = Vec::new();
    for (seed, pred) in &predictions {
        per_seed.push((*seed, corpus_f1(&gold, &lens, pred, policy)?));
        recall.push((*seed, recall_by_label(&gold, &lens, pred, &label_refs)?));
    }
    let report = EvalReport::new(per_seed, recall);
    let mut run = Run::create(root, manifest)?;
    run.write("report.tsv", report.to_delimited())?;
    run.write("report.txt", report.to_string())?;
    run.finish()
}

pub fn baseline_trees(kind: Baseline, lens: &[usize], seed: u64) -> Vec<ParseTree> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    lens.iter()
        .map(|&len| match kind {
            Baseline::Left => left_branching(len),
            Baseline::Right => right_branching(len),
            Baseline::Random => random_tree(len, &mut rng),
        })
        .collect()
}

/// Scores of one seed at one sweep point.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedScore {
    pub seed: u64,
    pub best_epoch: usize,
    pub initial_dev_perplexity: f64,
    pub dev_perplexity: f64,
    pub test_perplexity: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub p: usize,
    pub n: usize,
    pub d: usize,
    pub f1_mean: f64,
    pub f1_std: f64,
    pub dev_perplexity_median: f64,
    pub test_perplexity_median: f64,
    pub seeds: Vec<SeedScore>,
}

pub const SWEEP_HEADER: &str = "p\tn\td\tf1_mean\tf1_std\tdev_ppl_median\ttest_ppl_median\n";

impl SweepRow {
    pub fn line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{:.4}\t{:.4}\t{:.6}\t{:.6}\n",
            self.p, self.n, self.d, self.f1_mean, self.f1_std, self.dev_perplexity_median, self.test_perplexity_median
        )
    }
}

/// Trains with `p` preterminals and `n = p / 2` nonterminals, then scores
/// each seed's best checkpoint on the test split (dev when test is empty).
pub fn sweep_point(config: &Config, ds: &Dataset, p: usize) -> Result<SweepRow> {
    let mut c = config.clone();
    c.model.p = p;
    c.model.n = Some((p / 2).max(1));
    c.model.d = Some(config.model.d.unwrap_or_else(|| default_rank(p)));
    let model = c.model_config(ds.vocab.len());
    println!("p={p}: parameters: {}", model.parameter_count());
    let outcome = train_models(model, &c.train_config(), &ds.train.sentences, &ds.dev.sentences)?;
    let eval_split = if ds.test.is_empty() { &ds.dev } else { &ds.test };
    let eval_split = if eval_split.is_empty() { &ds.train } else { eval_split };
    let (gold, lens) = eval_split.gold();
    let policy = parse_empty_gold(&c.eval.empty_gold)?;

    let mut seeds = Vec::new();
    for r in &outcome.runs {
        let g = r.params.emit_grammar()?;
        let pred: Vec<ParseTree> = parse_corpus(&g, &eval_split.sentences)?.into_iter().map(|rec| rec.tree).collect();
        let initial =
            outcome.history.iter().find(|h| h.seed == r.seed && h.epoch == 0).map_or(f64::NAN, |h| h.dev_perplexity);
        seeds.push(SeedScore {
            seed: r.seed,
            best_epoch: r.best_epoch,
            initial_dev_perplexity: initial,
            dev_perplexity: r.dev_perplexity,
            test_perplexity: perplexity(&g, &eval_split.sentences)?,
            f1: corpus_f1(&gold, &lens, &pred, policy)?.mean,
        });
    }
    let f1s: Vec<f64> = seeds.iter().map(|s| s.f1).collect();
    let (f1_mean, f1_std) = mean_std(&f1s);
    let devs: Vec<f64> = seeds.iter().map(|s| s.dev_perplexity).collect();
    let tests: Vec<f64> = seeds.iter().map(|s| s.test_perplexity).collect();
    Ok(SweepRow {
        p,
        n: model.n,
        d: model.d,
        f1_mean,
        f1_std,
        dev_perplexity_median: median(&devs),
        test_perplexity_median: median(&tests),
        seeds,
    })
}

pub fn sweep(args: &SweepArgs, root: &Path) -> Result<RunOutput> {
    let config = load_config(&args.config, &args.seeds, args.epochs)?;
    let mut manifest = config_manifest("sweep", &config)?;
    manifest.setting("p", args.p.iter().map(|p| p.to_string()).collect::<Vec<_>>().join(","));
    let ds = load_dataset(&config)?;
    let mut run = Run::create(root, manifest)?;
    let mut table = String::from(SWEEP_HEADER);
    let mut detail = String::from("p\tseed\tbest_epoch\tinit_dev_ppl\tdev_ppl\ttest_ppl\tf1\n");
    for &p in &args.p {
        let row = sweep_point(&config, &ds, p)?;
        table.push_str(&row.line());
        for s in &row.seeds {
            detail.push_str(&format!(
                "{p}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.4}\n",
                s.seed, s.best_epoch, s.initial_dev_perplexity, s.dev_perplexity, s.test_perplexity, s.f1
            ));
        }
    }
    run.write("sweep.tsv", table)?;
    run.write("sweep_seeds.tsv", detail)?;
    run.finish()
}

pub fn bench(args: &BenchArgs, root: &Path) -> Result<RunOutput> {
    let spec = BenchSpec {
        dense_m: args.dense_m.clone(),
        factored_m: args.factored_m.clone(),
        len: args.len,
        reps: args.reps,
        seed: args.seed,
        ..BenchSpec::default()
    };
    let mut manifest = RunManifest::new("bench");
    manifest.seeds = vec![spec.seed];
    manifest
        .setting("dense_m", format!("{:?}", spec.dense_m))
        .setting("factored_m", format!("{:?}", spec.factored_m))
        .setting("len", spec.len)
        .setting("reps", spec.reps)
        .setting("q", spec.q)
        .setting("threads", rayon::current_num_threads());
    let result = run_bench(&spec)?;
    let mut run = Run::create(root, manifest)?;
    run.write("bench.tsv", result.table())?;
    run.write("exponents.tsv", result.exponents())?;
    print!("{}", result.exponents());
    run.finish()
}

pub fn inspect(args: &InspectArgs, root: &Path) -> Result<RunOutput> {
    let mut manifest = RunManifest::new("inspect");
    manifest.setting("top_k", args.top_k).setting("cluster_size", args.cluster_size);
    manifest.input(&args.checkpoint)?.input(&args.vocab)?.input(&args.treebank)?;
    let (ck, vocab) = load_model(&args.checkpoint, &args.vocab)?;
    let trees = load_trees(&args.treebank, &DEFAULT_PUNCT_TAGS)?;
    let words: Vec<Vec<String>> = trees.iter().map(|t| t.words().into_iter().map(str::to_string).collect()).collect();
    let sentences: Vec<Sentence> = trees.iter().map(|t| vocab.encode(&t.words())).collect();
    let pred: Vec<ParseTree> = parse_corpus(&ck.grammar, &sentences)?.into_iter().map(|r| r.tree).collect();
    let gold: Vec<_> = trees.iter().map(tdpcfg::corpus::gold_spans).collect();
    let lens: Vec<usize> = trees.iter().map(TreeNode::leaf_count).collect();
    let matrix = label_correspondence(&gold, &lens, &pred, args.top_k)?;

    let mut tsv = format!("gold\t{}\n", matrix.column_names().join("\t"));
    for (label, row) in matrix.gold_labels.iter().zip(&matrix.rows) {
        let cells: Vec<String> = match row {
            Some(row) => row.iter().map(|x| format!("{x:.6}")).collect(),
            None => vec!["undefined".to_string(); matrix.nonterminals.len() + 1],
        };
        tsv.push_str(&format!("{label}\t{}\n", cells.join("\t")));
    }

    let mut order: Vec<usize> = most_predicted(&pred).into_iter().collect();
    for &a in &matrix.nonterminals {
        if !order.contains(&a) {
            order.push(a);
        }
    }
    let mut clusters = String::new();
    for a in order.into_iter().take(args.top_k.max(1)) {
        clusters.push_str(&format!("NT-{a}\n"));
        for (text, count) in cluster_report(&words, &pred, a, args.cluster_size) {
            clusters.push_str(&format!("  {count}\t{text}\n"));
        }
    }

    let mut run = Run::create(root, manifest)?;
    run.write("correspondence.tsv", tsv)?;
    run.write("correspondence.txt", matrix.to_string())?;
    run.write("clusters.txt", clusters)?;
    run.finish()
}

pub fn synth(args: &SynthArgs, root: &Path) -> Result<RunOutput> {
    let config = Config::load(&args.config)?;
    let mut manifest = RunManifest::new("synth");
    manifest.config = Some(toml::to_string(&config.synthetic).expect("section serializes"));
    manifest.seeds = vec![config.synthetic.seed];
    let (_, splits) = synthetic_trees(&config.synthetic)?;
    let mut run = Run::create(root, manifest)?;
    for (name, trees) in ["train.mrg", "dev.mrg", "test.mrg"].into_iter().zip(&splits) {
        write_treebank(&run.output(name), trees)?;
    }
    run.finish()
}

/// Path of a named output inside a finished run.
pub fn output_path(out: &RunOutput, name: &str) -> PathBuf {
    out.dir.join(name)
}
