//! Inside algorithm over dense and factored grammars.
//!
//! Charts hold linear-space inside vectors rescaled per span so that the
//! largest entry is one; the dropped factor is tracked as an additive log
//! exponent. True inside vector: `s[i,j] = scaled[i,j] · exp(log_scale[i,j])`.
//! Matrix contractions therefore keep their exact structure, which is what
//! the factored recursion's speedup depends on.

mod dense;
mod factored;
pub mod taped;

pub use dense::inside_dense;
pub use factored::{batch_log_likelihood, inside_factored};

use crate::{Error, Result};

/// Word ids of one sentence.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Sentence(pub Vec<usize>);

impl Sentence {
    pub fn new(ids: Vec<usize>) -> Self {
        Self(ids)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn ids(&self) -> &[usize] {
        &self.0
    }

    pub(crate) fn check_vocab(&self, q: usize) -> Result<()> {
        if let Some(&bad) = self.0.iter().find(|&&id| id >= q) {
            return Err(Error::InvalidInput(format!("word id {bad} outside vocabulary of size {q}")));
        }
        Ok(())
    }
}

impl From<Vec<usize>> for Sentence {
    fn from(ids: Vec<usize>) -> Self {
        Self(ids)
    }
}

/// One chart cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    /// Length-`m` inside vector divided by its max entry (all zeros when the
    /// span is underivable).
    pub scaled: Vec<f64>,
    /// Natural-log exponent; `-inf` for an underivable span.
    pub log_scale: f64,
    /// Cached `Vᵀ s` and `Wᵀ s` (same scale), factored path only.
    pub proj_v: Vec<f64>,
    pub proj_w: Vec<f64>,
}

impl Cell {
    fn from_unscaled(mut values: Vec<f64>, log_base: f64) -> Self {
        let max = values.iter().cloned().fold(0.0f64, f64::max);
        let log_scale = if max > 0.0 && log_base.is_finite() {
            values.iter_mut().for_each(|x| *x /= max);
            log_base + max.ln()
        } else {
            values.iter_mut().for_each(|x| *x = 0.0);
            f64::NEG_INFINITY
        };
        Self { scaled: values, log_scale, proj_v: Vec::new(), proj_w: Vec::new() }
    }

    /// `log s[A]`.
    pub fn log_inside(&self, symbol: usize) -> f64 {
        self.scaled[symbol].ln() + self.log_scale
    }
}

/// Per-span inside vectors for spans `(i, j)`, `0 <= i <= j < len`.
#[derive(Debug, Clone, PartialEq)]
pub struct Chart {
    len: usize,
    cells: Vec<Option<Cell>>,
}

impl Chart {
    fn new(len: usize) -> Self {
        Self { len, cells: vec![None; len * len] }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn cell(&self, i: usize, j: usize) -> &Cell {
        self.cells[i * self.len + j].as_ref().expect("span filled by inside pass")
    }

    fn set(&mut self, i: usize, j: usize, cell: Cell) {
        self.cells[i * self.len + j] = Some(cell);
    }

    pub fn spans(&self) -> impl Iterator<Item = ((usize, usize), &Cell)> + '_ {
        self.cells
            .iter()
            .enumerate()
            .filter_map(move |(idx, c)| c.as_ref().map(|cell| ((idx / self.len, idx % self.len), cell)))
    }
}

#[derive(Debug, Clone)]
pub struct InsideResult {
    /// `log p(w)`; `-inf` for a zero-probability sentence.
    pub log_likelihood: f64,
    pub chart: Chart,
    /// Set when the sentence cannot be derived for structural reasons.
    pub diagnostic: Option<String>,
}

pub(crate) fn too_short(len: usize) -> InsideResult {
    InsideResult {
        log_likelihood: f64::NEG_INFINITY,
        chart: Chart::new(len),
        diagnostic: Some(format!(
            "sentence of length {len} has probability 0: start rules reach nonterminals, which only rewrite to two symbols"
        )),
    }
}

/// Combines split contributions carrying different exponents: returns the
/// common exponent and each split's relative weight.
pub(crate) fn split_weights(exponents: &[f64]) -> (f64, Vec<f64>) {
    let max = exponents.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights = exponents.iter().map(|&c| if max.is_finite() { (c - max).exp() } else { 0.0 }).collect();
    (max, weights)
}

pub(crate) fn root_log_likelihood(chart: &Chart, start: &[f64]) -> f64 {
    let root = chart.cell(0, chart.len() - 1);
    let total: f64 = start.iter().zip(&root.scaled).map(|(r, s)| r * s).sum();
    if total > 0.0 {
        root.log_scale + total.ln()
    } else {
        f64::NEG_INFINITY
    }
}
