//! Differentiable factored inside pass recorded on an autodiff tape.
//!
//! Per-span rescaling factors are read off the forward values and enter the
//! tape as constants. `log p(w)` is recovered by adding the tracked log
//! exponents back, and since rescaling by a constant does not change
//! `∂ log(r · s) / ∂θ`, gradients are exact.

use autodiff::{Array, Tape, Var};

use super::Sentence;
use crate::grammar::TdPcfg;
use crate::{Error, Result};

/// Grammar arrays living on a tape.
#[derive(Debug, Clone, Copy)]
pub struct TapeGrammar {
    pub n: usize,
    pub p: usize,
    /// `n x d`.
    pub u: Var,
    /// Nonterminal and preterminal rows of `V` and `W`.
    pub v_non: Var,
    pub v_pre: Var,
    pub w_non: Var,
    pub w_pre: Var,
    /// Transposed emission matrix, `q x p`.
    pub emission_t: Var,
    /// Start probabilities as an `n x 1` column.
    pub start: Var,
}

impl TapeGrammar {
    /// Splits full `m x d` factors into nonterminal and preterminal rows.
    pub fn new(tape: &mut Tape, u: Var, v: Var, w: Var, emission_t: Var, start: Var) -> Result<Self> {
        let n = tape.value(u).rows();
        let m = tape.value(v).rows();
        if m <= n {
            return Err(Error::Structural(format!("V has {m} rows, U has {n}")));
        }
        let v_non = tape.select_rows(v, 0..n)?;
        let v_pre = tape.select_rows(v, n..m)?;
        let w_non = tape.select_rows(w, 0..n)?;
        let w_pre = tape.select_rows(w, n..m)?;
        Ok(Self { n, p: m - n, u, v_non, v_pre, w_non, w_pre, emission_t, start })
    }

    /// Records a fixed grammar as non-differentiable constants.
    pub fn constant(tape: &mut Tape, g: &TdPcfg) -> Result<Self> {
        let u = tape.constant(g.u.clone());
        let v = tape.constant(g.v.clone());
        let w = tape.constant(g.w.clone());
        let e = tape.constant(g.emission.transpose());
        let r = tape.constant(g.start.transpose());
        Self::new(tape, u, v, w, e, r)
    }

    /// Records a fixed grammar as differentiable leaves; returns the
    /// grammar and the leaves `[U, V, W, Qᵀ, rᵀ]`.
    pub fn leaves(tape: &mut Tape, g: &TdPcfg) -> Result<(Self, [Var; 5])> {
        let u = tape.param(g.u.clone());
        let v = tape.param(g.v.clone());
        let w = tape.param(g.w.clone());
        let e = tape.param(g.emission.transpose());
        let r = tape.param(g.start.transpose());
        Ok((Self::new(tape, u, v, w, e, r)?, [u, v, w, e, r]))
    }
}

/// Output of [`inside_on_tape`].
#[derive(Debug, Clone)]
pub struct TapedInside {
    /// `1 x 1` log-likelihood.
    pub log_likelihood: Var,
    /// For each width `w >= 2` (index `w - 2`): a `(len - w + 1) x n` gate
    /// leaf of ones multiplying the inside values of spans of that width;
    /// row `i` is span `(i, i + w - 1)`. Empty when gates were not requested.
    pub gates: Vec<Var>,
}

/// Records the factored inside pass. Fails with
/// [`Error::ZeroProbability`] if some span (or the sentence) is
/// underivable, since gradients of `log p` are then undefined.
pub fn inside_on_tape(tape: &mut Tape, g: &TapeGrammar, sentence: &Sentence, with_gates: bool) -> Result<TapedInside> {
    let len = sentence.len();
    let q = tape.value(g.emission_t).rows();
    sentence.check_vocab(q)?;
    if len < 2 {
        return Err(Error::ZeroProbability { index: 0 });
    }

    // Width-1 spans: rows of Qᵀ, rescaled to max 1.
    let base = tape.select_rows(g.emission_t, sentence.ids().iter().copied())?;
    let (base, base_exp) = rescale_rows(tape, base)?;
    let mut proj_v = vec![tape.matmul(base, g.v_pre)?];
    let mut proj_w = vec![tape.matmul(base, g.w_pre)?];
    let mut exps = vec![base_exp];
    let mut gates = Vec::new();
    let mut last = base;

    for width in 2..=len {
        let count = len - width + 1;
        let mut left = Vec::new();
        let mut right = Vec::new();
        let mut agg = Array::zeros(count, (width - 1) * count);
        let mut span_exp = Vec::with_capacity(count);
        for i in 0..count {
            let j = i + width - 1;
            let split_exp: Vec<f64> = (i..j).map(|k| exps[k - i][i] + exps[j - k - 1][k + 1]).collect();
            let (base, weights) = super::split_weights(&split_exp);
            for (k, weight) in (i..j).zip(weights) {
                agg.set(i, left.len(), weight);
                left.push((proj_v[k - i], i));
                right.push((proj_w[j - k - 1], k + 1));
            }
            span_exp.push(base);
        }
        let left = tape.gather_rows(&left)?;
        let right = tape.gather_rows(&right)?;
        let prod = tape.hadamard(left, right)?;
        let agg = tape.constant(agg);
        let mixed = tape.matmul(agg, prod)?;
        let mut inside = tape.matmul_transposed(mixed, g.u)?;
        if with_gates {
            let gate = tape.param(Array::filled(count, g.n, 1.0));
            inside = tape.hadamard(inside, gate)?;
            gates.push(gate);
        }
        let (scaled, row_exp) = rescale_rows(tape, inside)?;
        let total: Vec<f64> = span_exp.iter().zip(&row_exp).map(|(a, b)| a + b).collect();
        if let Some(pos) = total.iter().position(|e| !e.is_finite()) {
            return Err(Error::Structural(format!("span ({pos}, {}) is underivable", pos + width - 1)));
        }
        if width < len {
            proj_v.push(tape.matmul(scaled, g.v_non)?);
            proj_w.push(tape.matmul(scaled, g.w_non)?);
        }
        exps.push(total);
        last = scaled;
    }

    let root_exp = exps[len - 1][0];
    let root = tape.matmul(last, g.start)?;
    if tape.value(root).get(0, 0) <= 0.0 {
        return Err(Error::ZeroProbability { index: 0 });
    }
    let log_root = tape.log(root);
    let offset = tape.constant(Array::scalar(root_exp));
    let log_likelihood = tape.add(log_root, offset)?;
    Ok(TapedInside { log_likelihood, gates })
}

/// Divides each row by its max entry; returns the log of the dropped factor
/// per row.
fn rescale_rows(tape: &mut Tape, x: Var) -> Result<(Var, Vec<f64>)> {
    let value = tape.value(x);
    let maxima: Vec<f64> =
        (0..value.rows()).map(|r| value.row_slice(r).iter().cloned().fold(0.0f64, f64::max)).collect();
    if maxima.iter().any(|&m| m <= 0.0) {
        return Err(Error::ZeroProbability { index: 0 });
    }
    let inv: Vec<f64> = maxima.iter().map(|m| 1.0 / m).collect();
    let scaled = tape.scale(x, &inv)?;
    Ok((scaled, maxima.iter().map(|m| m.ln()).collect()))
}
