//! Evaluation metrics: sentence-level unlabeled F1, recall by gold label,
//! nonterminal/gold-label correspondence and per-nonterminal constituent
//! clusters. Trivial spans (single words and the whole sentence) are
//! removed from both sides before any span comparison.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use rand::Rng;

use crate::decoder::{ParseTree, Span};
use crate::{Error, Result};

/// Labels reported by [`recall_by_label`] by default.
pub const DEFAULT_RECALL_LABELS: [&str; 6] = ["NP", "VP", "PP", "SBAR", "ADJP", "ADVP"];
pub const OTHER: &str = "OTHER";
const GOLD_ROWS: usize = 7;

/// A gold constituent `(start, end, label)`, inclusive.
pub type GoldSpan = (usize, usize, String);

/// Span set of one sentence with single-word and whole-sentence spans removed.
pub fn nontrivial(spans: impl IntoIterator<Item = (usize, usize)>, len: usize) -> BTreeSet<(usize, usize)> {
    spans.into_iter().filter(|&(i, j)| j > i && !(i == 0 && j + 1 == len)).collect()
}

/// What to do with sentences whose gold set is empty after trivial-span
/// removal (every sentence of length <= 2).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EmptyGold {
    /// Leave them out of the average and count them as skipped.
    #[default]
    Exclude,
    /// Score 100 when the prediction is empty too, 0 otherwise.
    Score,
}

/// Unlabeled F1 in `[0, 100]`; `None` when the gold set is empty and the
/// policy excludes such sentences.
pub fn sentence_f1(gold: &[(usize, usize)], pred: &[(usize, usize)], len: usize, policy: EmptyGold) -> Option<f64> {
    let gold = nontrivial(gold.iter().copied(), len);
    let pred = nontrivial(pred.iter().copied(), len);
    if gold.is_empty() {
        return match policy {
            EmptyGold::Exclude => None,
            EmptyGold::Score => Some(if pred.is_empty() { 100.0 } else { 0.0 }),
        };
    }
    let hits = gold.intersection(&pred).count() as f64;
    let recall = hits / gold.len() as f64;
    let precision = if pred.is_empty() { 0.0 } else { hits / pred.len() as f64 };
    if precision + recall == 0.0 {
        return Some(0.0);
    }
    Some(100.0 * 2.0 * precision * recall / (precision + recall))
}

/// Mean sentence F1 over a corpus.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorpusF1 {
    pub mean: f64,
    pub scored: usize,
    pub skipped: usize,
}

/// Averages [`sentence_f1`] over aligned gold and predicted trees.
pub fn corpus_f1(gold: &[Vec<GoldSpan>], lens: &[usize], pred: &[ParseTree], policy: EmptyGold) -> Result<CorpusF1> {
    check_aligned(gold.len(), lens, pred)?;
    let mut total = 0.0;
    let mut scored = 0;
    for ((g, &len), p) in gold.iter().zip(lens).zip(pred) {
        let g: Vec<(usize, usize)> = g.iter().map(|s| (s.0, s.1)).collect();
        if let Some(f1) = sentence_f1(&g, &p.unlabeled_spans(), len, policy) {
            total += f1;
            scored += 1;
        }
    }
    let mean = if scored == 0 { f64::NAN } else { total / scored as f64 };
    Ok(CorpusF1 { mean, scored, skipped: gold.len() - scored })
}

fn check_aligned(gold: usize, lens: &[usize], pred: &[ParseTree]) -> Result<()> {
    if gold != pred.len() || gold != lens.len() {
        return Err(Error::InvalidInput(format!("{gold} gold trees but {} predictions", pred.len())));
    }
    if let Some((idx, (len, p))) = lens.iter().zip(pred).enumerate().find(|(_, (l, p))| **l != p.len) {
        return Err(Error::InvalidInput(format!("sentence {idx}: gold has {len} tokens, prediction has {}", p.len)));
    }
    Ok(())
}

/// Per label, the percentage of nontrivial gold constituents whose span is
/// predicted. Labels absent from the gold data map to `None`.
pub fn recall_by_label(
    gold: &[Vec<GoldSpan>],
    lens: &[usize],
    pred: &[ParseTree],
    labels: &[&str],
) -> Result<Vec<(String, Option<f64>)>> {
    check_aligned(gold.len(), lens, pred)?;
    let mut hits = vec![0usize; labels.len()];
    let mut totals = vec![0usize; labels.len()];
    for ((g, &len), p) in gold.iter().zip(lens).zip(pred) {
        let predicted = nontrivial(p.unlabeled_spans(), len);
        for (i, j, label) in g {
            if j <= i || (*i == 0 && j + 1 == len) {
                continue;
            }
            if let Some(slot) = labels.iter().position(|l| l == label) {
                totals[slot] += 1;
                if predicted.contains(&(*i, *j)) {
                    hits[slot] += 1;
                }
            }
        }
    }
    Ok(labels
        .iter()
        .zip(hits.iter().zip(&totals))
        .map(|(l, (&h, &t))| (l.to_string(), (t > 0).then(|| 100.0 * h as f64 / t as f64)))
        .collect())
}

/// Gold label × predicted nonterminal proportions over correctly predicted
/// nontrivial spans.
#[derive(Debug, Clone, PartialEq)]
pub struct Correspondence {
    /// Most frequent gold labels, then `OTHER`.
    pub gold_labels: Vec<String>,
    /// Nonterminal ids by prediction frequency; a final `OTHER` column
    /// collects the rest.
    pub nonterminals: Vec<usize>,
    /// One row per gold label, `nonterminals.len() + 1` entries, or `None`
    /// when no span of that label was predicted correctly.
    pub rows: Vec<Option<Vec<f64>>>,
}

impl Correspondence {
    pub fn column_names(&self) -> Vec<String> {
        self.nonterminals.iter().map(|a| format!("NT-{a}")).chain(std::iter::once(OTHER.to_string())).collect()
    }
}

impl fmt::Display for Correspondence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:<8}", "")?;
        for name in self.column_names() {
            write!(f, " {name:>7}")?;
        }
        writeln!(f)?;
        for (label, row) in self.gold_labels.iter().zip(&self.rows) {
            write!(f, "{label:<8}")?;
            match row {
                Some(row) => row.iter().try_for_each(|x| write!(f, " {x:>7.3}"))?,
                None => write!(f, " (no correct spans)")?,
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Builds the correspondence matrix from span-labeled predictions.
pub fn label_correspondence(
    gold: &[Vec<GoldSpan>],
    lens: &[usize],
    pred: &[ParseTree],
    top_k: usize,
) -> Result<Correspondence> {
    check_aligned(gold.len(), lens, pred)?;
    let mut gold_freq: HashMap<&str, (usize, usize)> = HashMap::new();
    let mut nt_freq: HashMap<usize, (usize, usize)> = HashMap::new();
    let mut matched: Vec<(&str, usize)> = Vec::new();
    for ((g, &len), p) in gold.iter().zip(lens).zip(pred) {
        let labels: HashMap<(usize, usize), usize> =
            p.spans.iter().filter_map(|s| s.label.map(|a| ((s.start, s.end), a))).collect();
        for s in &p.spans {
            if let Some(a) = s.label {
                let next = nt_freq.len();
                nt_freq.entry(a).or_insert((0, next)).0 += 1;
            }
        }
        for (i, j, label) in g {
            if *j <= *i || (*i == 0 && j + 1 == len) {
                continue;
            }
            let next = gold_freq.len();
            gold_freq.entry(label.as_str()).or_insert((0, next)).0 += 1;
            if let Some(&a) = labels.get(&(*i, *j)) {
                matched.push((label.as_str(), a));
            }
        }
    }
    let mut gold_labels: Vec<&str> = ranked(gold_freq);
    gold_labels.truncate(GOLD_ROWS);
    let mut nonterminals: Vec<usize> = ranked(nt_freq);
    nonterminals.truncate(top_k);

    let rows_len = gold_labels.len() + 1;
    let cols = nonterminals.len() + 1;
    let mut counts = vec![vec![0usize; cols]; rows_len];
    for (label, a) in matched {
        let r = gold_labels.iter().position(|l| *l == label).unwrap_or(rows_len - 1);
        let c = nonterminals.iter().position(|&x| x == a).unwrap_or(cols - 1);
        counts[r][c] += 1;
    }
    let rows = counts
        .into_iter()
        .map(|row| {
            let total: usize = row.iter().sum();
            (total > 0).then(|| row.iter().map(|&c| c as f64 / total as f64).collect())
        })
        .collect();
    Ok(Correspondence {
        gold_labels: gold_labels.iter().map(|s| s.to_string()).chain(std::iter::once(OTHER.to_string())).collect(),
        nonterminals,
        rows,
    })
}

/// Keys by descending count, ties by first occurrence.
fn ranked<K>(freq: HashMap<K, (usize, usize)>) -> Vec<K> {
    let mut items: Vec<_> = freq.into_iter().collect();
    items.sort_by_key(|(_, (count, first))| (std::cmp::Reverse(*count), *first));
    items.into_iter().map(|(key, _)| key).collect()
}

/// The `top_n` most frequent word sequences predicted under `nonterminal`
/// with their counts (ties by first occurrence).
pub fn cluster_report(
    words: &[Vec<String>],
    pred: &[ParseTree],
    nonterminal: usize,
    top_n: usize,
) -> Vec<(String, usize)> {
    let mut counts: HashMap<String, (usize, usize)> = HashMap::new();
    for (sentence, tree) in words.iter().zip(pred) {
        for s in tree.spans.iter().filter(|s| s.label == Some(nonterminal)) {
            let text = sentence[s.start..=s.end].join(" ");
            let next = counts.len();
            counts.entry(text).or_insert((0, next)).0 += 1;
        }
    }
    let mut items: Vec<(String, (usize, usize))> = counts.into_iter().collect();
    items.sort_by_key(|(_, (count, first))| (std::cmp::Reverse(*count), *first));
    items.into_iter().take(top_n).map(|(text, (count, _))| (text, count)).collect()
}

/// The nonterminal labeling the most spans (smallest id on ties).
pub fn most_predicted(pred: &[ParseTree]) -> Option<usize> {
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for s in pred.iter().flat_map(|t| &t.spans) {
        if let Some(a) = s.label {
            *counts.entry(a).or_default() += 1;
        }
    }
    counts.into_iter().max_by_key(|&(a, c)| (c, std::cmp::Reverse(a))).map(|(a, _)| a)
}

/// Mean and biased (divisor `N`) standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Binary tree whose split points are drawn uniformly at every node.
pub fn random_tree(len: usize, rng: &mut impl Rng) -> ParseTree {
    let mut spans = Vec::new();
    let mut stack = vec![(0, len.saturating_sub(1))];
    while let Some((i, j)) = stack.pop() {
        if i >= j {
            continue;
        }
        spans.push(Span::new(i, j));
        let k = rng.gen_range(i..j);
        stack.push((k + 1, j));
        stack.push((i, k));
    }
    ParseTree { len, spans, tags: None }
}

pub fn left_branching(len: usize) -> ParseTree {
    ParseTree { len, spans: (1..len).rev().map(|j| Span::new(0, j)).collect(), tags: None }
}

pub fn right_branching(len: usize) -> ParseTree {
    ParseTree { len, spans: (0..len.saturating_sub(1)).map(|i| Span::new(i, len - 1)).collect(), tags: None }
}

/// Evaluation summary across seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub per_seed: Vec<(u64, CorpusF1)>,
    pub mean_f1: f64,
    pub std_f1: f64,
    /// Recall per label for each seed.
    pub recall: Vec<(u64, Vec<(String, Option<f64>)>)>,
}

impl EvalReport {
    pub fn new(per_seed: Vec<(u64, CorpusF1)>, recall: Vec<(u64, Vec<(String, Option<f64>)>)>) -> Self {
        let f1s: Vec<f64> = per_seed.iter().map(|(_, f)| f.mean).collect();
        let (mean_f1, std_f1) = mean_std(&f1s);
        Self { per_seed, mean_f1, std_f1, recall }
    }

    /// One metric per line: `name<TAB>value<TAB>seed` (seed `all` for
    /// aggregates, value `undefined` for absent labels).
    pub fn to_delimited(&self) -> String {
        let mut out = String::from("name\tvalue\tseed\n");
        for (seed, f) in &self.per_seed {
            out.push_str(&format!("f1\t{:.4}\t{seed}\n", f.mean));
            out.push_str(&format!("scored\t{}\t{seed}\n", f.scored));
            out.push_str(&format!("skipped\t{}\t{seed}\n", f.skipped));
        }
        out.push_str(&format!("f1_mean\t{:.4}\tall\n", self.mean_f1));
        out.push_str(&format!("f1_std\t{:.4}\tall\n", self.std_f1));
        for (seed, rows) in &self.recall {
            for (label, value) in rows {
                match value {
                    Some(v) => out.push_str(&format!("recall_{label}\t{v:.4}\t{seed}\n")),
                    None => out.push_str(&format!("recall_{label}\tundefined\t{seed}\n")),
                }
            }
        }
        out
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:>8} {:>8} {:>7} {:>7}", "seed", "F1", "scored", "skipped")?;
        for (seed, c) in &self.per_seed {
            writeln!(f, "{seed:>8} {:>8.2} {:>7} {:>7}", c.mean, c.scored, c.skipped)?;
        }
        writeln!(f, "mean F1 {:.2} (biased std {:.2})", self.mean_f1, self.std_f1)?;
        for (seed, rows) in &self.recall {
            write!(f, "recall seed {seed}:")?;
            for (label, value) in rows {
                match value {
                    Some(v) => write!(f, " {label} {v:.1}")?,
                    None => write!(f, " {label} n/a")?,
                }
            }
            writeln!(f)?;
        }
        Ok(())
    }
}
