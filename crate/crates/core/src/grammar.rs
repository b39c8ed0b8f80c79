//! Grammar data model.
//!
//! Symbol ids follow a single layout: nonterminals occupy `[0, n)` and
//! preterminals `[n, m)` with `m = n + p`. Terminals have their own id space
//! `[0, q)`. The start symbol is implicit; start rules `S -> A` only reach
//! nonterminals.
//!
//! Two grammar representations exist. [`DensePcfg`] stores the binary rule
//! tensor `T` (`n x m x m`) explicitly. [`TdPcfg`] stores it only through
//! its rank-`d` factors `U` (`n x d`), `V` and `W` (`m x d`):
//! `T[i,j,k] = Σ_l U[i,l] V[j,l] W[k,l]`. When `U` is row-stochastic and
//! `V`, `W` are column-stochastic every slice `T[i]` sums to one, so the
//! factored grammar is a proper PCFG without ever materializing `T`.

use std::collections::HashMap;

use autodiff::Array;
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

/// Tolerance for factors emitted by softmax.
pub const LEARNED_TOLERANCE: f64 = 1e-6;
/// Tolerance for hand-built double precision grammars.
pub const EXACT_TOLERANCE: f64 = 1e-9;

/// Terminal vocabulary with dense ids.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Vocabulary {
    word_to_id: HashMap<String, usize>,
    id_to_word: Vec<String>,
}

impl Vocabulary {
    pub fn from_words<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Self::default();
        for w in words {
            let w = w.into();
            if vocab.word_to_id.contains_key(&w) {
                return Err(Error::InvalidInput(format!("duplicate vocabulary entry {w:?}")));
            }
            vocab.push(w);
        }
        Ok(vocab)
    }

    /// Placeholder vocabulary `w0, w1, ...` for synthetic grammars.
    pub fn synthetic(q: usize) -> Self {
        Self::from_words((0..q).map(|i| format!("w{i}"))).expect("names are distinct")
    }

    fn push(&mut self, word: String) -> usize {
        let id = self.id_to_word.len();
        self.word_to_id.insert(word.clone(), id);
        self.id_to_word.push(word);
        id
    }

    pub fn len(&self) -> usize {
        self.id_to_word.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_word.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.word_to_id.get(word).copied()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.id_to_word.get(id).map(String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.id_to_word
    }
}

/// A grammar symbol classified by its id range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Symbol {
    /// Index into `[0, n)`.
    Nonterminal(usize),
    /// Index into `[0, p)`; its symbol id is `n + index`.
    Preterminal(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SymbolTable {
    pub n: usize,
    pub p: usize,
    pub vocab: Vocabulary,
}

impl SymbolTable {
    pub fn new(n: usize, p: usize, vocab: Vocabulary) -> Result<Self> {
        if n == 0 || p == 0 || vocab.is_empty() {
            return Err(Error::Structural(format!("symbol counts must be >= 1 (n={n}, p={p}, q={})", vocab.len())));
        }
        Ok(Self { n, p, vocab })
    }

    pub fn m(&self) -> usize {
        self.n + self.p
    }

    pub fn q(&self) -> usize {
        self.vocab.len()
    }

    pub fn classify(&self, id: usize) -> Option<Symbol> {
        if id < self.n {
            Some(Symbol::Nonterminal(id))
        } else if id < self.m() {
            Some(Symbol::Preterminal(id - self.n))
        } else {
            None
        }
    }

    pub fn id(&self, symbol: Symbol) -> usize {
        match symbol {
            Symbol::Nonterminal(i) => i,
            Symbol::Preterminal(i) => self.n + i,
        }
    }
}

/// A PCFG with an explicit binary rule tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct DensePcfg {
    n: usize,
    p: usize,
    /// `n x m x m`, row-major: `rules[(a * m + b) * m + c] = π(A -> B C)`.
    rules: Vec<f64>,
    /// `p x q` emission probabilities.
    pub emission: Array,
    /// Start probabilities over nonterminals (`1 x n`).
    pub start: Array,
}

impl DensePcfg {
    pub fn new(n: usize, p: usize, rules: Vec<f64>, emission: Array, start: Array) -> Result<Self> {
        let m = n + p;
        if n == 0 || p == 0 {
            return Err(Error::Structural("grammar needs n >= 1 and p >= 1".into()));
        }
        if rules.len() != n * m * m {
            return Err(Error::Structural(format!("rule tensor has {} entries, expected {n}x{m}x{m}", rules.len())));
        }
        if emission.rows() != p {
            return Err(Error::Structural(format!("emission has {} rows, expected {p}", emission.rows())));
        }
        if start.shape() != [1, n] {
            return Err(Error::Structural(format!("start vector is {:?}, expected [1, {n}]", start.shape())));
        }
        Ok(Self { n, p, rules, emission, start })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn m(&self) -> usize {
        self.n + self.p
    }

    pub fn q(&self) -> usize {
        self.emission.cols()
    }

    #[inline]
    pub fn rule(&self, a: usize, b: usize, c: usize) -> f64 {
        let m = self.m();
        self.rules[(a * m + b) * m + c]
    }

    /// The `m x m` slice `T[a]`, row-major.
    pub fn slice(&self, a: usize) -> &[f64] {
        let mm = self.m() * self.m();
        &self.rules[a * mm..(a + 1) * mm]
    }

    pub fn rules(&self) -> &[f64] {
        &self.rules
    }

    /// Checks non-negativity and normalization of `T`, `Q` and `r` within
    /// `tol`.
    pub fn validate(&self, tol: f64) -> ValidationReport {
        let mut report = ValidationReport::default();
        let negative =
            self.rules.iter().chain(self.emission.data()).chain(self.start.data()).fold(0.0f64, |acc, &x| acc.max(-x));
        report.check(Condition::NonNegativity, negative, tol);
        let slice_dev = (0..self.n).map(|a| (self.slice(a).iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max);
        report.check(Condition::RuleNormalization, slice_dev, tol);
        report.check(Condition::EmissionNormalization, row_deviation(&self.emission), tol);
        report.check(Condition::StartNormalization, (self.start.sum() - 1.0).abs(), tol);
        report
    }
}

/// A PCFG whose binary rule tensor is stored in Kruskal form.
#[derive(Debug, Clone, PartialEq)]
pub struct TdPcfg {
    /// `n x d`, row-stochastic.
    pub u: Array,
    /// `m x d`, column-stochastic.
    pub v: Array,
    /// `m x d`, column-stochastic.
    pub w: Array,
    /// `p x q`, row-stochastic.
    pub emission: Array,
    /// `1 x n`.
    pub start: Array,
}

impl TdPcfg {
    pub fn new(u: Array, v: Array, w: Array, emission: Array, start: Array) -> Result<Self> {
        let g = Self { u, v, w, emission, start };
        g.check_shapes()?;
        Ok(g)
    }

    fn check_shapes(&self) -> Result<()> {
        check_factor_shapes(&self.u, &self.v, &self.w)?;
        let (n, m) = (self.u.rows(), self.v.rows());
        if m <= n {
            return Err(Error::Structural(format!("V has {m} rows but U has {n}; need m > n")));
        }
        if self.emission.rows() != m - n {
            return Err(Error::Structural(format!(
                "emission has {} rows, expected p = {}",
                self.emission.rows(),
                m - n
            )));
        }
        if self.start.shape() != [1, n] {
            return Err(Error::Structural(format!("start vector is {:?}, expected [1, {n}]", self.start.shape())));
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.u.rows()
    }

    pub fn m(&self) -> usize {
        self.v.rows()
    }

    pub fn p(&self) -> usize {
        self.m() - self.n()
    }

    pub fn q(&self) -> usize {
        self.emission.cols()
    }

    pub fn rank(&self) -> usize {
        self.u.cols()
    }

    /// Stochastic-slice conditions on the factors plus normalization of `Q`, `r`.
    pub fn validate(&self, tol: f64) -> Result<ValidationReport> {
        let mut report = validate_factored_with(&self.u, &self.v, &self.w, tol)?;
        let negative = self.emission.data().iter().chain(self.start.data()).fold(0.0f64, |acc, &x| acc.max(-x));
        report.check(Condition::NonNegativity, negative, tol);
        report.check(Condition::EmissionNormalization, row_deviation(&self.emission), tol);
        report.check(Condition::StartNormalization, (self.start.sum() - 1.0).abs(), tol);
        Ok(report)
    }
}

/// A normalization or sign condition a grammar can violate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Condition {
    NonNegativity,
    URowNormalization,
    VColumnNormalization,
    WColumnNormalization,
    RuleNormalization,
    EmissionNormalization,
    StartNormalization,
}

impl Condition {
    pub fn name(self) -> &'static str {
        match self {
            Condition::NonNegativity => "non-negativity",
            Condition::URowNormalization => "U row-normalization",
            Condition::VColumnNormalization => "V column-normalization",
            Condition::WColumnNormalization => "W column-normalization",
            Condition::RuleNormalization => "T slice-normalization",
            Condition::EmissionNormalization => "Q row-normalization",
            Condition::StartNormalization => "r normalization",
        }
    }
}

impl std::fmt::Display for Condition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Violation {
    pub condition: Condition,
    /// Largest absolute deviation observed for this condition.
    pub deviation: f64,
}

/// Violated conditions; empty when everything holds.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn get(&self, condition: Condition) -> Option<&Violation> {
        self.violations.iter().find(|v| v.condition == condition)
    }

    fn check(&mut self, condition: Condition, deviation: f64, tol: f64) {
        if !(deviation <= tol) {
            match self.violations.iter_mut().find(|v| v.condition == condition) {
                Some(v) => v.deviation = v.deviation.max(deviation),
                None => self.violations.push(Violation { condition, deviation }),
            }
        }
    }
}

impl std::fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.is_empty() {
            return f.write_str("ok");
        }
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{} (deviation {:.3e})", v.condition, v.deviation)?;
        }
        Ok(())
    }
}

fn check_factor_shapes(u: &Array, v: &Array, w: &Array) -> Result<()> {
    let d = u.cols();
    if v.cols() != d || w.cols() != d {
        return Err(Error::Structural(format!("factor ranks differ: U {}, V {}, W {}", d, v.cols(), w.cols())));
    }
    if v.rows() != w.rows() {
        return Err(Error::Structural(format!("V has {} rows, W has {}", v.rows(), w.rows())));
    }
    Ok(())
}

fn row_deviation(a: &Array) -> f64 {
    (0..a.rows()).map(|r| (a.row_slice(r).iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max)
}

fn column_deviation(a: &Array) -> f64 {
    (0..a.cols()).map(|c| ((0..a.rows()).map(|r| a.get(r, c)).sum::<f64>() - 1.0).abs()).fold(0.0, f64::max)
}

/// Checks the Kruskal-normalization preconditions at [`LEARNED_TOLERANCE`].
pub fn validate_factored(u: &Array, v: &Array, w: &Array) -> Result<ValidationReport> {
    validate_factored_with(u, v, w, LEARNED_TOLERANCE)
}

pub fn validate_factored_with(u: &Array, v: &Array, w: &Array, tol: f64) -> Result<ValidationReport> {
    check_factor_shapes(u, v, w)?;
    let mut report = ValidationReport::default();
    let negative = u.data().iter().chain(v.data()).chain(w.data()).fold(0.0f64, |acc, &x| acc.max(-x));
    report.check(Condition::NonNegativity, negative, tol);
    report.check(Condition::URowNormalization, row_deviation(u), tol);
    report.check(Condition::VColumnNormalization, column_deviation(v), tol);
    report.check(Condition::WColumnNormalization, column_deviation(w), tol);
    Ok(report)
}

/// `T[i,j,k] = Σ_l u[i,l] v[j,l] w[k,l]` for row-major `n x d`, `m x d`,
/// `m x d` factors. Returns the `n x m x m` tensor, row-major.
pub fn kruskal_tensor<F: Float>(u: &[F], v: &[F], w: &[F], n: usize, m: usize, d: usize) -> Vec<F> {
    assert_eq!(u.len(), n * d);
    assert_eq!(v.len(), m * d);
    assert_eq!(w.len(), m * d);
    let mut t = vec![F::zero(); n * m * m];
    for i in 0..n {
        for l in 0..d {
            let ui = u[i * d + l];
            if ui == F::zero() {
                continue;
            }
            for j in 0..m {
                let uv = ui * v[j * d + l];
                let base = (i * m + j) * m;
                for k in 0..m {
                    t[base + k] = t[base + k] + uv * w[k * d + l];
                }
            }
        }
    }
    t
}

/// Materializes the dense grammar of a factored one.
pub fn reconstruct_tensor(g: &TdPcfg) -> Result<DensePcfg> {
    g.check_shapes()?;
    let (n, m, d) = (g.n(), g.m(), g.rank());
    if d == 0 {
        return Err(Error::Structural("rank-0 factors".into()));
    }
    let rules = kruskal_tensor(g.u.data(), g.v.data(), g.w.data(), n, m, d);
    DensePcfg::new(n, g.p(), rules, g.emission.clone(), g.start.clone())
}

fn normalize_rows(a: &mut Array) {
    for r in 0..a.rows() {
        let row = a.row_slice_mut(r);
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= s);
    }
}

fn normalize_columns(a: &mut Array) {
    for c in 0..a.cols() {
        let s: f64 = (0..a.rows()).map(|r| a.get(r, c)).sum();
        for r in 0..a.rows() {
            a.set(r, c, a.get(r, c) / s);
        }
    }
}

fn positive(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array {
    Array::from_fn(rows, cols, |_, _| rng.gen_range(0.05..1.0))
}

/// Random grammar with all invariants satisfied. Deterministic per seed.
pub fn random_td_pcfg(n: usize, p: usize, q: usize, d: usize, seed: u64) -> Result<TdPcfg> {
    if n == 0 || p == 0 || q == 0 || d == 0 {
        return Err(Error::Structural(format!("counts must be >= 1 (n={n}, p={p}, q={q}, d={d})")));
    }
    let m = n + p;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u = positive(&mut rng, n, d);
    let mut v = positive(&mut rng, m, d);
    let mut w = positive(&mut rng, m, d);
    let mut emission = positive(&mut rng, p, q);
    let mut start = positive(&mut rng, 1, n);
    normalize_rows(&mut u);
    normalize_columns(&mut v);
    normalize_columns(&mut w);
    normalize_rows(&mut emission);
    normalize_rows(&mut start);
    TdPcfg::new(u, v, w, emission, start)
}

/// Random grammar whose factor entries are softmaxes of Gaussian logits
/// scaled by `sharpness`; larger values give lower-entropy rules.
pub fn random_peaked_td_pcfg(n: usize, p: usize, q: usize, d: usize, sharpness: f64, seed: u64) -> Result<TdPcfg> {
    use rand_distr::{Distribution, StandardNormal};
    if n == 0 || p == 0 || q == 0 || d == 0 {
        return Err(Error::Structural(format!("counts must be >= 1 (n={n}, p={p}, q={q}, d={d})")));
    }
    let m = n + p;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut logits = |rows: usize, cols: usize| {
        Array::from_fn(rows, cols, |_, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            (sharpness * z).exp()
        })
    };
    let mut u = logits(n, d);
    let mut v = logits(m, d);
    let mut w = logits(m, d);
    let mut emission = logits(p, q);
    let mut start = logits(1, n);
    normalize_rows(&mut u);
    normalize_columns(&mut v);
    normalize_columns(&mut w);
    normalize_rows(&mut emission);
    normalize_rows(&mut start);
    TdPcfg::new(u, v, w, emission, start)
}

/// Random dense grammar (unrestricted rank). Deterministic per seed.
pub fn random_dense_pcfg(n: usize, p: usize, q: usize, seed: u64) -> Result<DensePcfg> {
    if n == 0 || p == 0 || q == 0 {
        return Err(Error::Structural(format!("counts must be >= 1 (n={n}, p={p}, q={q})")));
    }
    let m = n + p;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rules = positive(&mut rng, n, m * m);
    let mut emission = positive(&mut rng, p, q);
    let mut start = positive(&mut rng, 1, n);
    normalize_rows(&mut rules);
    normalize_rows(&mut emission);
    normalize_rows(&mut start);
    DensePcfg::new(n, p, rules.into_data(), emission, start)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(v: &[f64]) -> Array {
        Array::column(v.to_vec()).unwrap()
    }

    fn row(v: &[f64]) -> Array {
        Array::row(v.to_vec()).unwrap()
    }

    #[test]
    fn rank_one_reconstruction() {
        let g = TdPcfg::new(Array::scalar(1.0), col(&[0.5, 0.5]), col(&[0.3, 0.7]), row(&[1.0]), row(&[1.0])).unwrap();
        let dense = reconstruct_tensor(&g).unwrap();
        let expect = [0.15, 0.35, 0.15, 0.35];
        for (got, want) in dense.slice(0).iter().zip(expect) {
            assert!((got - want).abs() < 1e-15);
        }
        assert!(dense.validate(EXACT_TOLERANCE).is_empty());
    }

    #[test]
    fn degenerate_u_row_gives_single_outer_product() {
        let mut g = random_td_pcfg(2, 2, 3, 3, 11).unwrap();
        for l in 0..3 {
            g.u.set(1, l, if l == 2 { 1.0 } else { 0.0 });
        }
        let dense = reconstruct_tensor(&g).unwrap();
        for j in 0..4 {
            for k in 0..4 {
                let expect = g.v.get(j, 2) * g.w.get(k, 2);
                assert!((dense.rule(1, j, k) - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn random_grammar_slices_are_stochastic() {
        let g = random_td_pcfg(3, 3, 5, 8, 7).unwrap();
        let dense = reconstruct_tensor(&g).unwrap();
        for a in 0..3 {
            let s: f64 = dense.slice(a).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn reconstruct_rejects_mismatched_factors() {
        let mut g = random_td_pcfg(2, 2, 3, 4, 0).unwrap();
        g.w = Array::filled(4, 3, 0.25);
        assert!(matches!(reconstruct_tensor(&g), Err(Error::Structural(_))));
    }

    #[test]
    fn validator_names_u_row_violation() {
        let g = random_td_pcfg(2, 2, 3, 4, 1).unwrap();
        let mut u = g.u.clone();
        let row0: Vec<f64> = u.row_slice(0).iter().map(|x| x * 0.9).collect();
        u.row_slice_mut(0).copy_from_slice(&row0);
        let report = validate_factored(&u, &g.v, &g.w).unwrap();
        assert_eq!(report.violations.len(), 1);
        let v = report.get(Condition::URowNormalization).unwrap();
        assert_eq!(v.condition.name(), "U row-normalization");
        assert!((v.deviation - 0.1).abs() < 1e-12);
    }

    #[test]
    fn validator_names_negative_entry() {
        let g = random_td_pcfg(2, 2, 3, 4, 1).unwrap();
        let mut v = g.v.clone();
        // keep the column sum intact so only the sign condition fires
        let (a, b) = (v.get(0, 0), v.get(1, 0));
        v.set(0, 0, -0.01);
        v.set(1, 0, b + a + 0.01);
        let report = validate_factored(&g.u, &v, &g.w).unwrap();
        assert_eq!(report.violations.len(), 1);
        let viol = report.get(Condition::NonNegativity).unwrap();
        assert_eq!(viol.condition.name(), "non-negativity");
        assert!((viol.deviation - 0.01).abs() < 1e-15);
    }

    #[test]
    fn validator_rejects_shape_mismatch() {
        let g = random_td_pcfg(2, 2, 3, 4, 1).unwrap();
        assert!(validate_factored(&g.u, &g.v, &Array::zeros(5, 4)).is_err());
    }

    #[test]
    fn random_grammar_is_deterministic_and_valid() {
        let a = random_td_pcfg(1, 1, 2, 1, 0).unwrap();
        let b = random_td_pcfg(1, 1, 2, 1, 0).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.m(), 2);
        let g = random_td_pcfg(4, 8, 50, 16, 3).unwrap();
        assert!(validate_factored(&g.u, &g.v, &g.w).unwrap().is_empty());
        assert!(g.validate(EXACT_TOLERANCE).unwrap().is_empty());
        assert!(random_td_pcfg(0, 1, 1, 1, 0).is_err());
    }

    #[test]
    fn symbol_layout_round_trips() {
        let table = SymbolTable::new(3, 5, Vocabulary::synthetic(4)).unwrap();
        assert_eq!(table.m(), 8);
        for id in 0..table.m() {
            let sym = table.classify(id).unwrap();
            assert_eq!(table.id(sym), id);
            assert_eq!(matches!(sym, Symbol::Nonterminal(_)), id < 3);
        }
        assert_eq!(table.classify(8), None);
    }

    #[test]
    fn vocabulary_ids_are_inverse() {
        let v = Vocabulary::from_words(["a", "b", "c"]).unwrap();
        for id in 0..v.len() {
            assert_eq!(v.id(v.word(id).unwrap()), Some(id));
        }
        assert!(Vocabulary::from_words(["a", "a"]).is_err());
    }
}
