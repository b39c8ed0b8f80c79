//! Treebank ingestion, preprocessing and evaluation on small fixtures.

use std::path::{Path, PathBuf};

use tdpcfg::corpus::{
    gold_spans, preprocess, preprocess_all, read_treebank, sample_corpus, write_treebank, CorpusVocab, TreeNode,
    DEFAULT_PUNCT_TAGS,
};
use tdpcfg::evaluator::{
    corpus_f1, left_branching, recall_by_label, right_branching, EmptyGold, DEFAULT_RECALL_LABELS,
};
use tdpcfg::fixtures::{g2, g2_factored};
use tdpcfg::inside::inside_dense;
use tdpcfg::Sentence;

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

fn fixture10() -> Vec<TreeNode> {
    let raw = read_treebank(&data("fixture10.mrg")).unwrap();
    assert_eq!(raw.len(), 10);
    let (clean, dropped) = preprocess_all(&raw, &DEFAULT_PUNCT_TAGS);
    assert_eq!(dropped, 1);
    clean
}

fn gold(trees: &[TreeNode]) -> (Vec<Vec<(usize, usize, String)>>, Vec<usize>) {
    (trees.iter().map(gold_spans).collect(), trees.iter().map(TreeNode::leaf_count).collect())
}

/// Leaves per raw tree by scanning `(TAG word)` pairs in the text, without
/// the tree parser.
fn scripted_token_counts(text: &str) -> Vec<usize> {
    let mut counts = Vec::new();
    let (mut depth, mut current) = (0i32, 0usize);
    let chars: Vec<char> = text.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        match chars[i] {
            '(' => {
                depth += 1;
                let rest: String = chars[i + 1..].iter().collect();
                let inner = rest.split(')').next().unwrap_or("");
                if !inner.contains('(') {
                    let mut parts = inner.split_whitespace();
                    if let (Some(tag), Some(_)) = (parts.next(), parts.next()) {
                        if !DEFAULT_PUNCT_TAGS.contains(&tag) {
                            current += 1;
                        }
                    }
                }
            }
            ')' => {
                depth -= 1;
                if depth == 0 {
                    counts.push(current);
                    current = 0;
                }
            }
            _ => {}
        }
        i += 1;
    }
    counts
}

#[test]
fn token_counts_match_scripted_filter() {
    let text = std::fs::read_to_string(data("fixture10.mrg")).unwrap();
    let expected: Vec<usize> = scripted_token_counts(&text).into_iter().filter(|&c| c >= 2).collect();
    let got: Vec<usize> = fixture10().iter().map(TreeNode::leaf_count).collect();
    assert_eq!(got, expected);
    assert_eq!(got.iter().sum::<usize>(), 38);
}

#[test]
fn preprocessing_is_idempotent() {
    let trees = read_treebank(&data("fixture20.mrg")).unwrap();
    for tree in &trees {
        if let Some(once) = preprocess(tree, &DEFAULT_PUNCT_TAGS) {
            assert_eq!(preprocess(&once, &DEFAULT_PUNCT_TAGS).as_ref(), Some(&once));
            assert_eq!(once.words().len(), once.leaf_count());
        }
    }
}

/// Collapses whitespace, tightens brackets and drops an unlabeled outer
/// wrapper: the canonical one-line form of each tree.
fn normalize(text: &str) -> Vec<String> {
    let flat = text.split_whitespace().collect::<Vec<_>>().join(" ");
    let flat = flat.replace("( ", "(").replace(" )", ")");
    let mut trees = Vec::new();
    let (mut depth, mut start) = (0, 0);
    for (pos, ch) in flat.char_indices() {
        match ch {
            '(' => {
                if depth == 0 {
                    start = pos;
                }
                depth += 1;
            }
            ')' => {
                depth -= 1;
                if depth == 0 {
                    let mut tree = flat[start..=pos].to_string();
                    while tree.starts_with("((") {
                        tree = tree[1..tree.len() - 1].to_string();
                    }
                    trees.push(tree);
                }
            }
            _ => {}
        }
    }
    trees
}

#[test]
fn writer_round_trips_the_reader() {
    let path = data("fixture20.mrg");
    let trees = read_treebank(&path).unwrap();
    assert_eq!(trees.len(), 20);
    let out = std::env::temp_dir().join(format!("tdpcfg-roundtrip-{}.mrg", std::process::id()));
    write_treebank(&out, &trees).unwrap();
    let written = std::fs::read_to_string(&out).unwrap();
    std::fs::remove_file(&out).unwrap();
    let expected = normalize(&std::fs::read_to_string(&path).unwrap());
    assert_eq!(written.lines().collect::<Vec<_>>(), expected);
    assert_eq!(read_treebank_text(&written), trees);
}

fn read_treebank_text(text: &str) -> Vec<TreeNode> {
    tdpcfg::corpus::parse_treebank(text, Path::new("memory")).unwrap()
}

#[test]
fn hand_listed_gold_spans() {
    let trees = fixture10();
    // "a big cat sat on the mat"
    let spans = gold_spans(&trees[2]);
    let expected = [(0, 6, "S"), (0, 2, "NP"), (3, 6, "VP"), (4, 6, "PP"), (5, 6, "NP")];
    assert_eq!(spans.len(), expected.len());
    for ((i, j, l), (ei, ej, el)) in spans.iter().zip(expected) {
        assert_eq!((*i, *j, l.as_str()), (ei, ej, el));
    }
}

#[test]
fn hand_scored_f1() {
    let trees = fixture10();
    let (gold, lens) = gold(&trees);
    // Sentence F1 of right-branching trees on the 7 scored sentences:
    // 0, 100, 200/3, 200/3, 100, 0, 20  -> mean 1060/21.
    let right: Vec<_> = lens.iter().map(|&l| right_branching(l)).collect();
    let f = corpus_f1(&gold, &lens, &right, EmptyGold::Exclude).unwrap();
    assert_eq!((f.scored, f.skipped), (7, 2));
    assert!((f.mean - 1060.0 / 21.0).abs() < 1e-12);
    // Left-branching: 100, 0, 200/9, 100/3, 0, 40, 40 -> mean 2120/63.
    let left: Vec<_> = lens.iter().map(|&l| left_branching(l)).collect();
    let f = corpus_f1(&gold, &lens, &left, EmptyGold::Exclude).unwrap();
    assert!((f.mean - 2120.0 / 63.0).abs() < 1e-12);
}

#[test]
fn hand_scored_recall() {
    let trees = fixture10();
    let (gold, lens) = gold(&trees);
    let right: Vec<_> = lens.iter().map(|&l| right_branching(l)).collect();
    let rec = recall_by_label(&gold, &lens, &right, &DEFAULT_RECALL_LABELS).unwrap();
    // NP: 2 of 8 (she likes [green apples], a big cat sat on the [mat]);
    // ADJP never survives preprocessing, so it is undefined.
    let expect = [Some(25.0), Some(100.0), Some(50.0), Some(0.0), None, Some(100.0)];
    for ((label, got), want) in rec.iter().zip(expect) {
        assert_eq!(*got, want, "right-branching {label}");
    }
    let left: Vec<_> = lens.iter().map(|&l| left_branching(l)).collect();
    let rec = recall_by_label(&gold, &lens, &left, &DEFAULT_RECALL_LABELS).unwrap();
    let expect = [Some(62.5), Some(0.0), Some(0.0), Some(100.0), None, Some(0.0)];
    for ((label, got), want) in rec.iter().zip(expect) {
        assert_eq!(*got, want, "left-branching {label}");
    }
}

#[test]
fn gold_against_itself_is_perfect() {
    let trees = fixture10();
    let (gold, lens) = gold(&trees);
    let pred: Vec<_> = gold
        .iter()
        .zip(&lens)
        .map(|(g, &len)| tdpcfg::decoder::ParseTree {
            len,
            spans: g.iter().map(|s| tdpcfg::decoder::Span::new(s.0, s.1)).collect(),
            tags: None,
        })
        .collect();
    assert_eq!(corpus_f1(&gold, &lens, &pred, EmptyGold::Exclude).unwrap().mean, 100.0);
    for (_, r) in recall_by_label(&gold, &lens, &pred, &DEFAULT_RECALL_LABELS).unwrap() {
        assert!(r.is_none() || r == Some(100.0));
    }
}

#[test]
fn hand_counted_vocabulary() {
    let trees = fixture10();
    let vocab = CorpusVocab::build(trees.iter().map(|t| t.words()), 10).unwrap();
    let expected = ["the", "dog", "barked", "she", "likes", "green", "apples", "a", "big", "cat", "<unk>"];
    assert_eq!(vocab.vocab.words(), expected);
    assert_eq!(vocab.counts[0], 5);
    assert_eq!(vocab.counts[10], 38 - 5 - 9);
}

#[test]
fn sampled_length_two_frequency_matches_the_grammar() {
    let corpus = sample_corpus(&g2_factored(), 10_000, 60, 99).unwrap();
    let dense = g2();
    // p(length 2) by summing the probability of every two-word sentence
    let p_len2: f64 = (0..2)
        .flat_map(|a| (0..2).map(move |b| Sentence::new(vec![a, b])))
        .map(|s| inside_dense(&dense, &s).unwrap().log_likelihood.exp())
        .sum();
    let target = 0.096 / p_len2;
    let short: Vec<&Sentence> = corpus.sentences.iter().filter(|s| s.len() == 2).collect();
    let hits = short.iter().filter(|s| s.ids() == [0, 1]).count() as f64;
    let freq = hits / short.len() as f64;
    let se = (target * (1.0 - target) / short.len() as f64).sqrt();
    assert!((freq - target).abs() < 3.0 * se, "{freq} vs {target} (se {se})");
}
