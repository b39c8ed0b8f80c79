//! Treebank reading and writing, preprocessing, vocabulary construction,
//! gold spans and synthetic corpora sampled from a known grammar.
//!
//! Treebank files hold bracketed trees, either one per line or spread over
//! several lines, e.g. `(S (NP (DT the) (NN cat)) (VP (VBD sat)))`. The
//! unlabeled outer wrapper `( (S ...) )` used by Penn-style files is
//! accepted and removed.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::decoder::{ParseTree, Span};
use crate::grammar::{TdPcfg, Vocabulary};
use crate::inside::Sentence;
use crate::{Error, Result};

/// Preterminal tags removed by default: punctuation and empty elements.
pub const DEFAULT_PUNCT_TAGS: [&str; 8] = ["''", "``", ",", ".", ":", "-LRB-", "-RRB-", "-NONE-"];

pub const UNK: &str = "<unk>";

/// A treebank node. Preterminals carry a word and no children.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TreeNode {
    pub label: String,
    pub children: Vec<TreeNode>,
    pub word: Option<String>,
}

impl TreeNode {
    pub fn preterminal(tag: &str, word: &str) -> Self {
        Self { label: tag.to_string(), children: Vec::new(), word: Some(word.to_string()) }
    }

    pub fn internal(label: &str, children: Vec<TreeNode>) -> Self {
        Self { label: label.to_string(), children, word: None }
    }

    pub fn is_preterminal(&self) -> bool {
        self.word.is_some()
    }

    pub fn words(&self) -> Vec<&str> {
        let mut out = Vec::new();
        self.visit_leaves(&mut |node| out.push(node.word.as_deref().expect("preterminal")));
        out
    }

    pub fn tags(&self) -> Vec<&str> {
        let mut out = Vec::new();
        self.visit_leaves(&mut |node| out.push(node.label.as_str()));
        out
    }

    pub fn leaf_count(&self) -> usize {
        if self.is_preterminal() {
            1
        } else {
            self.children.iter().map(TreeNode::leaf_count).sum()
        }
    }

    fn visit_leaves<'a>(&'a self, f: &mut impl FnMut(&'a TreeNode)) {
        if self.is_preterminal() {
            f(self);
        } else {
            self.children.iter().for_each(|c| c.visit_leaves(f));
        }
    }
}

impl fmt::Display for TreeNode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.word {
            Some(word) => write!(f, "({} {})", self.label, word),
            None => {
                write!(f, "({}", self.label)?;
                for child in &self.children {
                    write!(f, " {child}")?;
                }
                f.write_str(")")
            }
        }
    }
}

#[derive(Debug)]
enum Token<'a> {
    Open(usize),
    Close(usize),
    Atom(&'a str, usize),
}

fn tokenize(text: &str) -> Vec<Token<'_>> {
    let mut out = Vec::new();
    for (line_idx, line) in text.lines().enumerate() {
        let line_no = line_idx + 1;
        let mut start = None;
        for (pos, ch) in line.char_indices() {
            let boundary = ch == '(' || ch == ')' || ch.is_whitespace();
            if boundary {
                if let Some(s) = start.take() {
                    out.push(Token::Atom(&line[s..pos], line_no));
                }
                match ch {
                    '(' => out.push(Token::Open(line_no)),
                    ')' => out.push(Token::Close(line_no)),
                    _ => {}
                }
            } else if start.is_none() {
                start = Some(pos);
            }
        }
        if let Some(s) = start {
            out.push(Token::Atom(&line[s..], line_no));
        }
    }
    out
}

/// Parses bracketed trees from text; `path` is used in error messages.
pub fn parse_treebank(text: &str, path: &Path) -> Result<Vec<TreeNode>> {
    let err = |line: usize, message: String| Error::Parse { path: path.to_path_buf(), line, message };
    struct Open {
        label: Option<String>,
        children: Vec<TreeNode>,
        word: Option<String>,
        line: usize,
    }
    let mut trees = Vec::new();
    let mut stack: Vec<Open> = Vec::new();
    let mut just_opened = false;
    for token in tokenize(text) {
        match token {
            Token::Open(line) => {
                if let Some(top) = stack.last() {
                    if top.word.is_some() {
                        return Err(err(line, "node mixes a word with subtrees".into()));
                    }
                }
                stack.push(Open { label: None, children: Vec::new(), word: None, line });
                just_opened = true;
            }
            Token::Atom(atom, line) => {
                let top = stack.last_mut().ok_or_else(|| err(line, format!("text {atom:?} outside brackets")))?;
                if just_opened {
                    top.label = Some(atom.to_string());
                } else if top.word.is_none() && top.children.is_empty() {
                    top.word = Some(atom.to_string());
                } else {
                    return Err(err(line, format!("unexpected token {atom:?}")));
                }
                just_opened = false;
            }
            Token::Close(line) => {
                just_opened = false;
                let open = stack.pop().ok_or_else(|| err(line, "unbalanced ')'".into()))?;
                let node = match (open.label, open.word) {
                    (Some(label), Some(word)) => TreeNode { label, children: Vec::new(), word: Some(word) },
                    (label, None) if !open.children.is_empty() => {
                        TreeNode { label: label.unwrap_or_default(), children: open.children, word: None }
                    }
                    _ => return Err(err(line, "empty node".into())),
                };
                match stack.last_mut() {
                    Some(parent) => {
                        if parent.word.is_some() {
                            return Err(err(line, "node mixes a word with subtrees".into()));
                        }
                        parent.children.push(node);
                    }
                    None => trees.push(unwrap_root(node)),
                }
            }
        }
    }
    if let Some(open) = stack.first() {
        return Err(err(open.line, "unbalanced '(': tree is never closed".into()));
    }
    Ok(trees)
}

fn unwrap_root(mut node: TreeNode) -> TreeNode {
    while node.label.is_empty() && node.children.len() == 1 {
        node = node.children.pop().expect("one child");
    }
    if node.label.is_empty() {
        node.label = "ROOT".into();
    }
    node
}

pub fn read_treebank(path: &Path) -> Result<Vec<TreeNode>> {
    parse_treebank(&fs::read_to_string(path)?, path)
}

/// One tree per line.
pub fn write_treebank(path: &Path, trees: &[TreeNode]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for tree in trees {
        writeln!(f, "{tree}")?;
    }
    f.flush()?;
    Ok(())
}

/// Drops function tags and indices (`NP-SBJ-1` → `NP`, `NP=2` → `NP`).
/// Labels starting with `-` (such as `-LRB-`) are kept.
pub fn base_label(label: &str) -> &str {
    if label.starts_with('-') {
        return label;
    }
    match label.find(['-', '=']) {
        Some(0) | None => label,
        Some(pos) => &label[..pos],
    }
}

/// Removes preterminals tagged with `punct_tags`, drops nodes left empty,
/// collapses unary chains into their top node and strips function tags.
/// Returns `None` when fewer than two words remain.
pub fn preprocess(tree: &TreeNode, punct_tags: &[&str]) -> Option<TreeNode> {
    fn clean(node: &TreeNode, punct: &[&str]) -> Option<TreeNode> {
        if node.is_preterminal() {
            return (!punct.contains(&node.label.as_str())).then(|| node.clone());
        }
        let children: Vec<TreeNode> = node.children.iter().filter_map(|c| clean(c, punct)).collect();
        match children.len() {
            0 => None,
            1 => {
                let child = children.into_iter().next().expect("one child");
                if child.is_preterminal() {
                    Some(child)
                } else {
                    // upper label survives the collapse
                    Some(TreeNode { label: base_label(&node.label).to_string(), ..child })
                }
            }
            _ => Some(TreeNode::internal(base_label(&node.label), children)),
        }
    }
    clean(tree, punct_tags).filter(|t| t.leaf_count() >= 2)
}

/// Preprocesses a treebank and reports how many trees were dropped.
pub fn preprocess_all(trees: &[TreeNode], punct_tags: &[&str]) -> (Vec<TreeNode>, usize) {
    let kept: Vec<TreeNode> = trees.iter().filter_map(|t| preprocess(t, punct_tags)).collect();
    let dropped = trees.len() - kept.len();
    (kept, dropped)
}

/// Every internal node as `(start, end, label)`, inclusive, in pre-order.
pub fn gold_spans(tree: &TreeNode) -> Vec<(usize, usize, String)> {
    fn walk(node: &TreeNode, start: usize, out: &mut Vec<(usize, usize, String)>) -> usize {
        if node.is_preterminal() {
            return 1;
        }
        let at = out.len();
        out.push((start, start, node.label.clone()));
        let mut width = 0;
        for child in &node.children {
            width += walk(child, start + width, out);
        }
        out[at].1 = start + width - 1;
        width
    }
    let mut out = Vec::new();
    walk(tree, 0, &mut out);
    out
}

/// Training vocabulary: the most frequent words plus a single unknown
/// token, which takes the last id.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusVocab {
    pub vocab: Vocabulary,
    /// Training count per id (the unknown token counts out-of-list words).
    pub counts: Vec<usize>,
}

impl CorpusVocab {
    /// Keeps the `size` most frequent words; ties go to the word seen first.
    pub fn build<'a>(sentences: impl IntoIterator<Item = Vec<&'a str>>, size: usize) -> Result<Self> {
        let mut stats: HashMap<&str, (usize, usize)> = HashMap::new();
        let mut total = 0;
        for sentence in sentences {
            for word in sentence {
                let next = stats.len();
                stats.entry(word).or_insert((0, next)).0 += 1;
                total += 1;
            }
        }
        let mut ranked: Vec<(&str, usize, usize)> =
            stats.into_iter().filter(|(w, _)| *w != UNK).map(|(w, (c, first))| (w, c, first)).collect();
        ranked.sort_by_key(|&(_, count, first)| (std::cmp::Reverse(count), first));
        ranked.truncate(size);
        let mut counts: Vec<usize> = ranked.iter().map(|r| r.1).collect();
        counts.push(total - counts.iter().sum::<usize>());
        let words = ranked.iter().map(|r| r.0).chain(std::iter::once(UNK));
        Ok(Self { vocab: Vocabulary::from_words(words)?, counts })
    }

    pub fn unk(&self) -> usize {
        self.vocab.len() - 1
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    pub fn encode(&self, words: &[&str]) -> Sentence {
        Sentence::new(words.iter().map(|w| self.vocab.id(w).unwrap_or(self.unk())).collect())
    }

    /// `word<TAB>id<TAB>count` per line.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(fs::File::create(path)?);
        for (id, (word, count)) in self.vocab.words().iter().zip(&self.counts).enumerate() {
            writeln!(f, "{word}\t{id}\t{count}")?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut words = Vec::new();
        let mut counts = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            let err = |message: &str| Error::Parse { path: path.to_path_buf(), line: idx + 1, message: message.into() };
            let parts: Vec<&str> = line.split('\t').collect();
            if parts.len() != 3 {
                return Err(err("expected word, id and count"));
            }
            if parts[1].parse::<usize>().ok() != Some(idx) {
                return Err(err("ids must be consecutive from 0"));
            }
            words.push(parts[0].to_string());
            counts.push(parts[2].parse().map_err(|_| err("bad count"))?);
        }
        if words.last().map(String::as_str) != Some(UNK) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: words.len(),
                message: format!("last entry must be {UNK}"),
            });
        }
        Ok(Self { vocab: Vocabulary::from_words(words)?, counts })
    }
}

/// Sentences sampled from a grammar with their true derivations.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledCorpus {
    pub sentences: Vec<Sentence>,
    /// Spans labeled by nonterminal id; tags hold preterminal symbol ids.
    pub trees: Vec<ParseTree>,
    pub attempts: usize,
}

impl SampledCorpus {
    /// Renders the corpus as a treebank with labels `NT<a>` and tags
    /// `T<t>` over vocabulary words.
    pub fn to_treebank(&self, n: usize, vocab: &Vocabulary) -> Vec<TreeNode> {
        self.sentences.iter().zip(&self.trees).map(|(s, t)| derivation_tree(t, s, n, vocab)).collect()
    }
}

/// Converts a labeled derivation into a [`TreeNode`].
pub fn derivation_tree(tree: &ParseTree, sentence: &Sentence, n: usize, vocab: &Vocabulary) -> TreeNode {
    let tags = tree.tags.clone().unwrap_or_else(|| vec![n; tree.len]);
    let leaf = |i: usize| {
        let word = vocab.word(sentence.ids()[i]).unwrap_or(UNK);
        TreeNode::preterminal(&format!("T{}", tags[i] - n), word)
    };
    fn build(spans: &[Span], i: usize, j: usize, leaf: &dyn Fn(usize) -> TreeNode) -> TreeNode {
        if i == j {
            return leaf(i);
        }
        let span = spans.iter().find(|s| s.start == i && s.end == j);
        let label = span.and_then(|s| s.label).map_or("X".to_string(), |a| format!("NT{a}"));
        let split = spans.iter().filter(|s| s.start == i && s.end < j).map(|s| s.end).max().unwrap_or(i);
        TreeNode { label, children: vec![build(spans, i, split, leaf), build(spans, split + 1, j, leaf)], word: None }
    }
    build(&tree.spans, 0, tree.len - 1, &leaf)
}

struct Sampler {
    n: usize,
    start: WeightedIndex<f64>,
    u_rows: Vec<WeightedIndex<f64>>,
    v_cols: Vec<WeightedIndex<f64>>,
    w_cols: Vec<WeightedIndex<f64>>,
    emissions: Vec<WeightedIndex<f64>>,
}

impl Sampler {
    fn new(g: &TdPcfg) -> Result<Self> {
        let dist = |w: Vec<f64>, what: &str| {
            WeightedIndex::new(w).map_err(|e| Error::InvalidInput(format!("cannot sample from {what}: {e}")))
        };
        let (u, v, w, q) = (&g.u, &g.v, &g.w, &g.emission);
        Ok(Self {
            n: g.n(),
            start: dist(g.start.data().to_vec(), "r")?,
            u_rows: (0..g.n()).map(|a| dist(u.row_slice(a).to_vec(), "U")).collect::<Result<_>>()?,
            v_cols: (0..g.rank())
                .map(|l| dist((0..g.m()).map(|b| v.get(b, l)).collect(), "V"))
                .collect::<Result<_>>()?,
            w_cols: (0..g.rank())
                .map(|l| dist((0..g.m()).map(|c| w.get(c, l)).collect(), "W"))
                .collect::<Result<_>>()?,
            emissions: (0..g.p()).map(|t| dist(q.row_slice(t).to_vec(), "Q")).collect::<Result<_>>()?,
        })
    }

    /// Expands `symbol` at position `start`; `None` once the number of
    /// leaves emitted or owed to pending symbols exceeds `max_len`.
    fn expand(
        &self,
        rng: &mut ChaCha8Rng,
        symbol: usize,
        pending: usize,
        max_len: usize,
        words: &mut Vec<usize>,
        tags: &mut Vec<usize>,
        spans: &mut Vec<Span>,
    ) -> Option<()> {
        if words.len() + 1 + pending > max_len {
            return None;
        }
        if symbol >= self.n {
            words.push(self.emissions[symbol - self.n].sample(rng));
            tags.push(symbol);
            return Some(());
        }
        let rank = self.u_rows[symbol].sample(rng);
        let left = self.v_cols[rank].sample(rng);
        let right = self.w_cols[rank].sample(rng);
        let at = spans.len();
        let start = words.len();
        spans.push(Span::labeled(start, start, symbol));
        self.expand(rng, left, pending + 1, max_len, words, tags, spans)?;
        self.expand(rng, right, pending, max_len, words, tags, spans)?;
        spans[at].end = words.len() - 1;
        Some(())
    }
}

/// Draws `count` sentences by ancestral sampling, rejecting derivations
/// longer than `max_length` words. Fails when nearly every draw is rejected.
pub fn sample_corpus(g: &TdPcfg, count: usize, max_length: usize, seed: u64) -> Result<SampledCorpus> {
    if max_length < 2 {
        return Err(Error::InvalidInput("max_length must be >= 2".into()));
    }
    let sampler = Sampler::new(g)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let budget = 100 * count + 1000;
    let mut out = SampledCorpus { sentences: Vec::new(), trees: Vec::new(), attempts: 0 };
    while out.sentences.len() < count {
        if out.attempts >= budget {
            return Err(Error::InvalidInput(format!(
                "rejected {} of {} derivations longer than {max_length} words; \
                 raise max_length or use a grammar with shorter expected sentences",
                out.attempts - out.sentences.len(),
                out.attempts
            )));
        }
        out.attempts += 1;
        let root = sampler.start.sample(&mut rng);
        let (mut words, mut tags, mut spans) = (Vec::new(), Vec::new(), Vec::new());
        if sampler.expand(&mut rng, root, 0, max_length, &mut words, &mut tags, &mut spans).is_some() {
            let len = words.len();
            out.sentences.push(Sentence::new(words));
            out.trees.push(ParseTree { len, spans, tags: Some(tags) });
        }
    }
    Ok(out)
}
