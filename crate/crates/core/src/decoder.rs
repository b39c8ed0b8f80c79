//! Decoding: span posteriors, MBR trees, exact Viterbi on dense grammars
//! and exhaustive enumeration for small inputs.
//!
//! Posteriors are derivatives of `log p(w)` with respect to multiplicative
//! gates placed on every completed inside vector of width two or more. A
//! gate per `(span, symbol)` coordinate yields the labeled marginal
//! `p(A spans i..j | w)`; summing over symbols gives the span marginal.

use std::fmt;

use autodiff::Tape;

use crate::grammar::{DensePcfg, TdPcfg};
use crate::inside::taped::{inside_on_tape, TapeGrammar};
use crate::inside::Sentence;
use crate::{Error, Result};

/// Largest sentence [`enumerate_trees`] accepts.
pub const MAX_ENUMERATION_LEN: usize = 10;

/// Span marginals `p(w[i..=j] is a constituent | w)` for `j > i`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpanPosteriors {
    len: usize,
    n: usize,
    span: Vec<f64>,
    /// Per span, `n` labeled marginals (row-major over spans).
    symbol: Vec<f64>,
    /// `log p(w)` from the same inside pass.
    pub log_likelihood: f64,
}

impl SpanPosteriors {
    /// Builds posteriors from explicit span marginals; symbol marginals are
    /// left empty.
    pub fn from_fn(len: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut span = vec![0.0; len * len];
        for i in 0..len {
            for j in i + 1..len {
                span[i * len + j] = f(i, j);
            }
        }
        Self { len, n: 0, span, symbol: Vec::new(), log_likelihood: f64::NAN }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.span[i * self.len + j]
    }

    /// Labeled marginals for span `(i, j)` over nonterminals, if computed.
    pub fn symbols(&self, i: usize, j: usize) -> Option<&[f64]> {
        if self.symbol.is_empty() {
            return None;
        }
        let at = (i * self.len + j) * self.n;
        Some(&self.symbol[at..at + self.n])
    }

    /// Sum of posteriors over all spans of width >= 2.
    pub fn total(&self) -> f64 {
        self.span.iter().sum()
    }
}

/// Posteriors by differentiating the factored inside pass.
pub fn span_posteriors(g: &TdPcfg, sentence: &Sentence) -> Result<SpanPosteriors> {
    let len = sentence.len();
    if len < 2 {
        return Err(Error::InvalidInput(format!("posteriors undefined for a sentence of length {len}")));
    }
    let n = g.n();
    let mut tape = Tape::new();
    let tg = TapeGrammar::constant(&mut tape, g)?;
    let out = inside_on_tape(&mut tape, &tg, sentence, true)?;
    let grads = tape.backward(out.log_likelihood)?;
    let mut span = vec![0.0; len * len];
    let mut symbol = vec![0.0; len * len * n];
    for (w_idx, &gate) in out.gates.iter().enumerate() {
        let width = w_idx + 2;
        let gate_grad = grads.get(gate);
        for i in 0..=len - width {
            let j = i + width - 1;
            let row = gate_grad.row_slice(i);
            span[i * len + j] = row.iter().sum();
            let at = (i * len + j) * n;
            symbol[at..at + n].copy_from_slice(row);
        }
    }
    Ok(SpanPosteriors { len, n, span, symbol, log_likelihood: tape.value(out.log_likelihood).get(0, 0) })
}

/// A constituent `(start, end)` inclusive, with an optional symbol id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub label: Option<usize>,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end, label: None }
    }

    pub fn labeled(start: usize, end: usize, label: usize) -> Self {
        Self { start, end, label: Some(label) }
    }

    pub fn width(&self) -> usize {
        self.end - self.start + 1
    }
}

/// Binary-branching tree over `len` leaves, stored as its internal spans
/// (width >= 2) in pre-order. A single-word sentence is the lone span
/// `(0, 0)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ParseTree {
    pub len: usize,
    pub spans: Vec<Span>,
    /// Preterminal symbol id per leaf, when known.
    pub tags: Option<Vec<usize>>,
}

impl ParseTree {
    pub fn trivial(len: usize) -> Self {
        Self { len, spans: vec![Span::new(0, len.saturating_sub(1))], tags: None }
    }

    pub fn unlabeled_spans(&self) -> Vec<(usize, usize)> {
        self.spans.iter().map(|s| (s.start, s.end)).collect()
    }

    /// Nested-or-disjoint, exactly `len - 1` internal spans, includes the
    /// whole sentence, and every internal span has exactly one split.
    pub fn is_valid(&self) -> bool {
        if self.len == 0 {
            return false;
        }
        if self.len == 1 {
            return self.spans.iter().all(|s| s.start == 0 && s.end == 0) && self.spans.len() <= 1;
        }
        if self.spans.len() != self.len - 1 {
            return false;
        }
        let mut set: Vec<(usize, usize)> = self.unlabeled_spans();
        set.sort_unstable();
        set.dedup();
        if set.len() != self.len - 1 || !set.contains(&(0, self.len - 1)) {
            return false;
        }
        if set.iter().any(|&(i, j)| j <= i || j >= self.len) {
            return false;
        }
        for (a, &(i1, j1)) in set.iter().enumerate() {
            for &(i2, j2) in &set[a + 1..] {
                let disjoint = j1 < i2 || j2 < i1;
                let nested = (i1 <= i2 && j2 <= j1) || (i2 <= i1 && j1 <= j2);
                if !disjoint && !nested {
                    return false;
                }
            }
        }
        true
    }

    /// Words covered by each span, for reports.
    pub fn span_text<'a>(&self, words: &'a [String], span: &Span) -> Vec<&'a str> {
        words[span.start..=span.end].iter().map(String::as_str).collect()
    }
}

impl fmt::Display for ParseTree {
    /// Bracketed rendering, e.g. `((0 1) 2)`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn render(spans: &[Span], i: usize, j: usize, f: &mut fmt::Formatter<'_>) -> fmt::Result {
            if i == j {
                return write!(f, "{i}");
            }
            let split = spans.iter().filter(|s| s.start == i && s.end < j).map(|s| s.end).max().unwrap_or(i);
            f.write_str("(")?;
            render(spans, i, split, f)?;
            f.write_str(" ")?;
            render(spans, split + 1, j, f)?;
            f.write_str(")")
        }
        if self.len == 0 {
            return Ok(());
        }
        render(&self.spans, 0, self.len - 1, f)
    }
}

/// Tree maximizing the summed posterior of its spans:
/// `best(i,j) = post(i,j) + max_k best(i,k) + best(k+1,j)`, ties broken
/// by the smallest split point `k`.
pub fn mbr_parse(post: &SpanPosteriors) -> ParseTree {
    let len = post.len();
    if len < 2 {
        return ParseTree::trivial(len.max(1));
    }
    let mut best = vec![0.0; len * len];
    let mut split = vec![0usize; len * len];
    for width in 2..=len {
        for i in 0..=len - width {
            let j = i + width - 1;
            let mut arg = i;
            let mut top = f64::NEG_INFINITY;
            for k in i..j {
                let v = best[i * len + k] + best[(k + 1) * len + j];
                if v > top {
                    top = v;
                    arg = k;
                }
            }
            best[i * len + j] = post.get(i, j) + top;
            split[i * len + j] = arg;
        }
    }
    let mut spans = Vec::with_capacity(len - 1);
    let mut stack = vec![(0, len - 1)];
    while let Some((i, j)) = stack.pop() {
        if i == j {
            continue;
        }
        spans.push(Span::new(i, j));
        let k = split[i * len + j];
        stack.push((k + 1, j));
        stack.push((i, k));
    }
    ParseTree { len, spans, tags: None }
}

/// Summed posterior of a tree's internal spans.
pub fn mbr_objective(post: &SpanPosteriors, tree: &ParseTree) -> f64 {
    tree.spans.iter().filter(|s| s.width() >= 2).map(|s| post.get(s.start, s.end)).sum()
}

/// Labels each span with its most probable nonterminal (smallest id on
/// ties) using labeled posteriors.
pub fn label_with_posteriors(post: &SpanPosteriors, tree: &ParseTree) -> Result<ParseTree> {
    let mut out = tree.clone();
    for span in &mut out.spans {
        if span.width() < 2 {
            continue;
        }
        let dist = post
            .symbols(span.start, span.end)
            .ok_or_else(|| Error::InvalidInput("posteriors carry no symbol marginals".into()))?;
        let mut arg = 0;
        for (a, &v) in dist.iter().enumerate() {
            if v > dist[arg] {
                arg = a;
            }
        }
        span.label = Some(arg);
    }
    Ok(out)
}

pub fn label_spans(g: &TdPcfg, sentence: &Sentence, tree: &ParseTree) -> Result<ParseTree> {
    if tree.len != sentence.len() {
        return Err(Error::InvalidInput(format!(
            "tree over {} leaves for a sentence of {} words",
            tree.len,
            sentence.len()
        )));
    }
    let post = span_posteriors(g, sentence)?;
    label_with_posteriors(&post, tree)
}

/// Parse output for one sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct ParseRecord {
    pub id: usize,
    pub tree: ParseTree,
    pub log_likelihood: f64,
}

impl ParseRecord {
    /// `id<TAB>len<TAB>loglik<TAB>i,j,A;i,j,A;...` (label `-` when unknown).
    pub fn to_line(&self) -> String {
        let spans: Vec<String> = self
            .tree
            .spans
            .iter()
            .map(|s| match s.label {
                Some(a) => format!("{},{},{}", s.start, s.end, a),
                None => format!("{},{},-", s.start, s.end),
            })
            .collect();
        format!("{}\t{}\t{}\t{}", self.id, self.tree.len, self.log_likelihood, spans.join(";"))
    }

    pub fn from_line(line: &str) -> Result<Self> {
        let bad = |what: &str| Error::InvalidInput(format!("malformed parse record ({what}): {line:?}"));
        let mut fields = line.split('\t');
        let id = fields.next().and_then(|f| f.parse().ok()).ok_or_else(|| bad("id"))?;
        let len = fields.next().and_then(|f| f.parse().ok()).ok_or_else(|| bad("length"))?;
        let log_likelihood = fields.next().and_then(|f| f.parse().ok()).ok_or_else(|| bad("loglik"))?;
        let span_field = fields.next().ok_or_else(|| bad("spans"))?;
        let mut spans = Vec::new();
        for item in span_field.split(';').filter(|s| !s.is_empty()) {
            let parts: Vec<&str> = item.split(',').collect();
            if parts.len() != 3 {
                return Err(bad("span"));
            }
            let start = parts[0].parse().map_err(|_| bad("span start"))?;
            let end = parts[1].parse().map_err(|_| bad("span end"))?;
            let label = match parts[2] {
                "-" => None,
                s => Some(s.parse().map_err(|_| bad("span label"))?),
            };
            spans.push(Span { start, end, label });
        }
        Ok(Self { id, tree: ParseTree { len, spans, tags: None }, log_likelihood })
    }
}

/// Posteriors, MBR tree and labels for one sentence. Single-word sentences
/// get the trivial tree and a `-inf` likelihood.
pub fn parse_sentence(g: &TdPcfg, id: usize, sentence: &Sentence) -> Result<ParseRecord> {
    if sentence.len() < 2 {
        log::debug!("sentence {id}: length {} cannot be derived; emitting trivial tree", sentence.len());
        return Ok(ParseRecord {
            id,
            tree: ParseTree::trivial(sentence.len().max(1)),
            log_likelihood: f64::NEG_INFINITY,
        });
    }
    let post = span_posteriors(g, sentence)?;
    let tree = mbr_parse(&post);
    let tree = label_with_posteriors(&post, &tree)?;
    Ok(ParseRecord { id, tree, log_likelihood: post.log_likelihood })
}

/// Exact most probable labeled tree under a dense grammar (max-product
/// inside with back-pointers). `None` when the sentence has probability 0.
pub fn cyk_viterbi_dense(g: &DensePcfg, sentence: &Sentence) -> Result<Option<(ParseTree, f64)>> {
    sentence.check_vocab(g.q())?;
    let len = sentence.len();
    if len < 2 {
        return Ok(None);
    }
    let (n, m) = (g.n(), g.m());
    let log_rules: Vec<f64> = g.rules().iter().map(|x| x.ln()).collect();
    let idx = |i: usize, j: usize| (i * len + j) * m;
    let mut score = vec![f64::NEG_INFINITY; len * len * m];
    let mut back = vec![(0usize, 0usize, 0usize); len * len * m];
    for (i, &word) in sentence.ids().iter().enumerate() {
        for t in 0..g.p() {
            score[idx(i, i) + n + t] = g.emission.get(t, word).ln();
        }
    }
    for width in 2..=len {
        for i in 0..=len - width {
            let j = i + width - 1;
            for a in 0..n {
                let mut top = f64::NEG_INFINITY;
                let mut arg = (0, 0, 0);
                for k in i..j {
                    for b in 0..m {
                        let left = score[idx(i, k) + b];
                        if left == f64::NEG_INFINITY {
                            continue;
                        }
                        for c in 0..m {
                            let right = score[idx(k + 1, j) + c];
                            let v = log_rules[(a * m + b) * m + c] + left + right;
                            if v > top {
                                top = v;
                                arg = (k, b, c);
                            }
                        }
                    }
                }
                score[idx(i, j) + a] = top;
                back[idx(i, j) + a] = arg;
            }
        }
    }
    let mut best = f64::NEG_INFINITY;
    let mut root = 0;
    for a in 0..n {
        let v = g.start.get(0, a).ln() + score[idx(0, len - 1) + a];
        if v > best {
            best = v;
            root = a;
        }
    }
    if best == f64::NEG_INFINITY {
        return Ok(None);
    }
    let mut spans = Vec::with_capacity(len - 1);
    let mut tags = vec![0; len];
    let mut stack = vec![(0, len - 1, root)];
    while let Some((i, j, a)) = stack.pop() {
        if i == j {
            tags[i] = a;
            continue;
        }
        spans.push(Span::labeled(i, j, a));
        let (k, b, c) = back[idx(i, j) + a];
        stack.push((k + 1, j, c));
        stack.push((i, k, b));
    }
    Ok(Some((ParseTree { len, spans, tags: Some(tags) }, best)))
}

/// Unlabeled binary tree shape over a span.
#[derive(Debug, Clone)]
enum Shape {
    Leaf(usize),
    Node(usize, usize, Box<Shape>, Box<Shape>),
}

fn shapes(i: usize, j: usize) -> Vec<Shape> {
    if i == j {
        return vec![Shape::Leaf(i)];
    }
    let mut out = Vec::new();
    for k in i..j {
        for left in shapes(i, k) {
            for right in shapes(k + 1, j) {
                out.push(Shape::Node(i, j, Box::new(left.clone()), Box::new(right)));
            }
        }
    }
    out
}

/// Every binary bracketing of `len` leaves, as internal span lists.
pub fn enumerate_bracketings(len: usize) -> Vec<Vec<(usize, usize)>> {
    fn collect(shape: &Shape, out: &mut Vec<(usize, usize)>) {
        if let Shape::Node(i, j, l, r) = shape {
            out.push((*i, *j));
            collect(l, out);
            collect(r, out);
        }
    }
    if len == 0 {
        return Vec::new();
    }
    shapes(0, len - 1)
        .iter()
        .map(|s| {
            let mut spans = Vec::new();
            collect(s, &mut spans);
            spans
        })
        .collect()
}

/// All labeled trees with nonzero probability and their exact rule
/// products `r[root] · Π T[A,B,C] · Π Q[T,w]`.
pub fn enumerate_trees(g: &DensePcfg, sentence: &Sentence) -> Result<Vec<(ParseTree, f64)>> {
    sentence.check_vocab(g.q())?;
    let len = sentence.len();
    if len > MAX_ENUMERATION_LEN {
        return Err(Error::InvalidInput(format!(
            "refusing to enumerate trees for length {len} > {MAX_ENUMERATION_LEN}"
        )));
    }
    if len < 2 {
        return Ok(Vec::new());
    }
    struct Walker<'a> {
        g: &'a DensePcfg,
        words: &'a [usize],
        len: usize,
        out: Vec<(ParseTree, f64)>,
    }
    impl Walker<'_> {
        fn walk(
            &mut self,
            pending: &mut Vec<(&Shape, usize)>,
            spans: &mut Vec<Span>,
            tags: &mut Vec<usize>,
            prob: f64,
        ) {
            let Some((shape, sym)) = pending.pop() else {
                let mut tree_tags = vec![0; self.len];
                // tags were pushed in leaf order
                tree_tags.copy_from_slice(tags);
                self.out.push((ParseTree { len: self.len, spans: spans.clone(), tags: Some(tree_tags) }, prob));
                return;
            };
            let (n, m) = (self.g.n(), self.g.m());
            match shape {
                Shape::Leaf(i) => {
                    if sym >= n {
                        let pr = prob * self.g.emission.get(sym - n, self.words[*i]);
                        if pr > 0.0 {
                            tags.push(sym);
                            self.walk(pending, spans, tags, pr);
                            tags.pop();
                        }
                    }
                }
                Shape::Node(i, j, left, right) => {
                    if sym < n {
                        spans.push(Span::labeled(*i, *j, sym));
                        for b in 0..m {
                            for c in 0..m {
                                let pr = prob * self.g.rule(sym, b, c);
                                if pr > 0.0 {
                                    pending.push((right, c));
                                    pending.push((left, b));
                                    self.walk(pending, spans, tags, pr);
                                    pending.pop();
                                    pending.pop();
                                }
                            }
                        }
                        spans.pop();
                    }
                }
            }
            pending.push((shape, sym));
        }
    }
    let mut walker = Walker { g, words: sentence.ids(), len, out: Vec::new() };
    for shape in shapes(0, len - 1) {
        for a in 0..g.n() {
            let r = g.start.get(0, a);
            if r > 0.0 {
                walker.walk(&mut vec![(&shape, a)], &mut Vec::new(), &mut Vec::new(), r);
            }
        }
    }
    Ok(walker.out)
}

/// Span marginals implied by an explicit tree list (oracle for
/// [`span_posteriors`]).
pub fn marginals_from_trees(len: usize, trees: &[(ParseTree, f64)]) -> SpanPosteriors {
    let total: f64 = trees.iter().map(|(_, p)| p).sum();
    let mut mass = vec![0.0; len * len];
    for (tree, p) in trees {
        for s in &tree.spans {
            mass[s.start * len + s.end] += p / total;
        }
    }
    let mut post = SpanPosteriors::from_fn(len, |i, j| mass[i * len + j]);
    post.log_likelihood = total.ln();
    post
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{g2, g2_factored, single_parse, single_parse_factored};

    fn aba() -> Sentence {
        Sentence::new(vec![0, 1, 0])
    }

    #[test]
    fn g2_posteriors() {
        let post = span_posteriors(&g2_factored(), &aba()).unwrap();
        assert!((post.get(0, 1) - 0.75).abs() < 1e-12);
        assert!((post.get(1, 2) - 0.25).abs() < 1e-12);
        assert!((post.get(0, 2) - 1.0).abs() < 1e-12);
        assert!((post.total() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn g2_mbr_tree() {
        let post = span_posteriors(&g2_factored(), &aba()).unwrap();
        let tree = mbr_parse(&post);
        assert_eq!(tree.unlabeled_spans(), vec![(0, 2), (0, 1)]);
        assert_eq!(tree.to_string(), "((0 1) 2)");
        assert!(tree.is_valid());
    }

    #[test]
    fn two_words_have_one_tree() {
        let post = SpanPosteriors::from_fn(2, |_, _| 0.123);
        assert_eq!(mbr_parse(&post).unlabeled_spans(), vec![(0, 1)]);
    }

    #[test]
    fn uniform_ties_take_smallest_split() {
        let post = SpanPosteriors::from_fn(4, |_, _| 0.5);
        let tree = mbr_parse(&post);
        // smallest split everywhere puts a single word on the left
        assert_eq!(tree.unlabeled_spans(), vec![(0, 3), (1, 3), (2, 3)]);
        assert!(tree.is_valid());
    }

    #[test]
    fn deterministic_grammar_posteriors_are_one() {
        let post = span_posteriors(&single_parse_factored(), &Sentence::new(vec![0, 0])).unwrap();
        assert!((post.get(0, 1) - 1.0).abs() < 1e-15);
        assert!(post.log_likelihood.abs() < 1e-15);
    }

    #[test]
    fn single_nonterminal_labels_are_zero() {
        let g = g2_factored();
        let post = span_posteriors(&g, &aba()).unwrap();
        let tree = label_with_posteriors(&post, &mbr_parse(&post)).unwrap();
        assert!(tree.spans.iter().all(|s| s.label == Some(0)));
    }

    #[test]
    fn viterbi_on_g2() {
        let (tree, score) = cyk_viterbi_dense(&g2(), &aba()).unwrap().unwrap();
        assert_eq!(tree.unlabeled_spans(), vec![(0, 2), (0, 1)]);
        assert!((score - 0.01728f64.ln()).abs() < 1e-12);
        let (_, score) = cyk_viterbi_dense(&single_parse(), &Sentence::new(vec![0, 0])).unwrap().unwrap();
        assert_eq!(score, 0.0);
    }

    #[test]
    fn viterbi_reports_no_parse() {
        // single_parse cannot derive three words: N -> T T only
        assert!(cyk_viterbi_dense(&single_parse(), &Sentence::new(vec![0, 0, 0])).unwrap().is_none());
    }

    #[test]
    fn enumeration_of_g2() {
        let trees = enumerate_trees(&g2(), &aba()).unwrap();
        assert_eq!(trees.len(), 2);
        let mut probs: Vec<f64> = trees.iter().map(|t| t.1).collect();
        probs.sort_by(|a, b| b.partial_cmp(a).unwrap());
        assert!((probs[0] - 0.01728).abs() < 1e-15);
        assert!((probs[1] - 0.00576).abs() < 1e-15);
    }

    #[test]
    fn enumeration_counts_and_limits() {
        let g = crate::grammar::random_dense_pcfg(3, 1, 2, 0).unwrap();
        let two = enumerate_trees(&g, &Sentence::new(vec![0, 1])).unwrap();
        assert!(two.len() <= 3);
        let g = crate::grammar::random_dense_pcfg(1, 1, 2, 0).unwrap();
        assert!(enumerate_trees(&g, &Sentence::new(vec![0, 1, 1])).unwrap().len() <= 2);
        assert!(enumerate_trees(&g, &Sentence::new(vec![0; 11])).is_err());
        assert_eq!(enumerate_bracketings(4).len(), 5);
        assert_eq!(enumerate_bracketings(6).len(), 42);
    }

    #[test]
    fn validity_checks() {
        let ok = ParseTree { len: 3, spans: vec![Span::new(0, 2), Span::new(1, 2)], tags: None };
        assert!(ok.is_valid());
        let crossing = ParseTree { len: 3, spans: vec![Span::new(0, 1), Span::new(1, 2)], tags: None };
        assert!(!crossing.is_valid());
        let short = ParseTree { len: 4, spans: vec![Span::new(0, 3), Span::new(0, 1)], tags: None };
        assert!(!short.is_valid());
        assert!(ParseTree::trivial(1).is_valid());
    }

    #[test]
    fn record_round_trip() {
        let rec = ParseRecord {
            id: 4,
            tree: ParseTree { len: 3, spans: vec![Span::labeled(0, 2, 1), Span::new(0, 1)], tags: None },
            log_likelihood: -3.25,
        };
        assert_eq!(ParseRecord::from_line(&rec.to_line()).unwrap(), rec);
        assert!(ParseRecord::from_line("x").is_err());
    }

    #[test]
    fn short_sentences_get_trivial_trees() {
        let rec = parse_sentence(&g2_factored(), 0, &Sentence::new(vec![1])).unwrap();
        assert_eq!(rec.tree.unlabeled_spans(), vec![(0, 0)]);
        assert_eq!(rec.log_likelihood, f64::NEG_INFINITY);
    }
}
