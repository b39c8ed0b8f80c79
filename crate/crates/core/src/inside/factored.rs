use autodiff::Array;
use rayon::prelude::*;

use super::{root_log_likelihood, split_weights, too_short, Cell, Chart, InsideResult, Sentence};
use crate::grammar::TdPcfg;
use crate::Result;

/// Inside pass over a factored grammar in `O(d l³ + m d l²)`:
/// `s[i,j] = U · Σ_k (Vᵀ s[i,k]) ⊙ (Wᵀ s[k+1,j])`.
///
/// Each span's projections `Vᵀ s` and `Wᵀ s` are computed once when the span
/// is completed. Spans of one width are processed together so the `U` and
/// projection products are single matrix contractions.
pub fn inside_factored(g: &TdPcfg, sentence: &Sentence) -> Result<InsideResult> {
    sentence.check_vocab(g.q())?;
    let len = sentence.len();
    if len < 2 {
        return Ok(too_short(len));
    }
    let (n, m, d) = (g.n(), g.m(), g.rank());
    let p = g.p();
    let mut chart = Chart::new(len);

    // Base cells: preterminal coordinates only.
    let mut base = Vec::with_capacity(len);
    for &word in sentence.ids() {
        let mut s = vec![0.0; m];
        for t in 0..p {
            s[n + t] = g.emission.get(t, word);
        }
        base.push(Cell::from_unscaled(s, 0.0));
    }
    let pre_rows = Array::from_fn(len, p, |i, t| base[i].scaled[n + t]);
    let (v_pre, w_pre) = (rows(&g.v, n, m), rows(&g.w, n, m));
    let proj_v = pre_rows.matmul(&v_pre, false)?;
    let proj_w = pre_rows.matmul(&w_pre, false)?;
    for (i, mut cell) in base.into_iter().enumerate() {
        cell.proj_v = proj_v.row_slice(i).to_vec();
        cell.proj_w = proj_w.row_slice(i).to_vec();
        chart.set(i, i, cell);
    }

    let (v_non, w_non) = (rows(&g.v, 0, n), rows(&g.w, 0, n));
    for width in 2..=len {
        let count = len - width + 1;
        let mut mixed = Array::zeros(count, d);
        let mut bases = Vec::with_capacity(count);
        for i in 0..count {
            let j = i + width - 1;
            let exps: Vec<f64> = (i..j).map(|k| chart.cell(i, k).log_scale + chart.cell(k + 1, j).log_scale).collect();
            let (base, weights) = split_weights(&exps);
            let acc = mixed.row_slice_mut(i);
            for (k, &weight) in (i..j).zip(&weights) {
                if weight == 0.0 {
                    continue;
                }
                let left = &chart.cell(i, k).proj_v;
                let right = &chart.cell(k + 1, j).proj_w;
                for ((a, &x), &y) in acc.iter_mut().zip(left).zip(right) {
                    *a += weight * x * y;
                }
            }
            bases.push(base);
        }
        // count x n nonterminal inside values
        let inside = mixed.matmul(&g.u, true)?;
        let mut cells: Vec<Cell> = (0..count)
            .map(|i| {
                let mut s = vec![0.0; m];
                s[..n].copy_from_slice(inside.row_slice(i));
                Cell::from_unscaled(s, bases[i])
            })
            .collect();
        if width < len {
            let scaled = Array::from_fn(count, n, |i, a| cells[i].scaled[a]);
            let pv = scaled.matmul(&v_non, false)?;
            let pw = scaled.matmul(&w_non, false)?;
            for (i, cell) in cells.iter_mut().enumerate() {
                cell.proj_v = pv.row_slice(i).to_vec();
                cell.proj_w = pw.row_slice(i).to_vec();
            }
        }
        for (i, cell) in cells.into_iter().enumerate() {
            chart.set(i, i + width - 1, cell);
        }
    }
    let log_likelihood = root_log_likelihood(&chart, g.start.data());
    Ok(InsideResult { log_likelihood, chart, diagnostic: None })
}

fn rows(a: &Array, from: usize, to: usize) -> Array {
    Array::from_fn(to - from, a.cols(), |r, c| a.get(from + r, c))
}

/// Log-likelihoods of a batch, in input order. Sentences are processed in
/// parallel over the shared grammar.
pub fn batch_log_likelihood(g: &TdPcfg, batch: &[Sentence]) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(crate::Error::InvalidInput("empty batch".into()));
    }
    batch.par_iter().map(|s| inside_factored(g, s).map(|r| r.log_likelihood)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::g2_factored;
    use crate::grammar::{random_td_pcfg, reconstruct_tensor};
    use crate::inside::inside_dense;

    #[test]
    fn g2_factored_matches_hand_values() {
        let g = g2_factored();
        let two = inside_factored(&g, &Sentence::new(vec![0, 1])).unwrap();
        assert!((two.log_likelihood.exp() - 0.096).abs() < 1e-15);
        let three = inside_factored(&g, &Sentence::new(vec![0, 1, 0])).unwrap();
        assert!((three.log_likelihood.exp() - 0.02304).abs() < 1e-15);
    }

    #[test]
    fn rank_one_grammar_collapses_to_scalars() {
        // U=[[1]], V=[0.5,0.5], W=[0.3,0.7]; Q emits the single word.
        let g = TdPcfg::new(
            Array::scalar(1.0),
            Array::column(vec![0.5, 0.5]).unwrap(),
            Array::column(vec![0.3, 0.7]).unwrap(),
            Array::row(vec![1.0]).unwrap(),
            Array::row(vec![1.0]).unwrap(),
        )
        .unwrap();
        // Vᵀ s_T = 0.5, Wᵀ s_T = 0.7 -> p = 0.35 = T[N,T,T]
        let r = inside_factored(&g, &Sentence::new(vec![0, 0])).unwrap();
        assert!((r.log_likelihood.exp() - 0.35).abs() < 1e-15);
    }

    #[test]
    fn agrees_with_dense_on_reconstruction() {
        for seed in 0..5 {
            let g = random_td_pcfg(3, 4, 5, 6, seed).unwrap();
            let dense = reconstruct_tensor(&g).unwrap();
            let s = Sentence::new(vec![0, 3, 1, 4, 2, 2]);
            let a = inside_factored(&g, &s).unwrap().log_likelihood;
            let b = inside_dense(&dense, &s).unwrap().log_likelihood;
            assert!((a - b).abs() <= 1e-9 * b.abs());
        }
    }

    #[test]
    fn batch_preserves_order() {
        let g = random_td_pcfg(2, 3, 4, 4, 9).unwrap();
        let batch = vec![Sentence::new(vec![0, 1, 2]), Sentence::new(vec![3, 3])];
        let got = batch_log_likelihood(&g, &batch).unwrap();
        for (s, ll) in batch.iter().zip(got) {
            assert_eq!(ll, inside_factored(&g, s).unwrap().log_likelihood);
        }
        assert!(batch_log_likelihood(&g, &[]).is_err());
    }
}
