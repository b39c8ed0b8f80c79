use super::{root_log_likelihood, split_weights, too_short, Cell, Chart, InsideResult, Sentence};
use crate::grammar::DensePcfg;
use crate::Result;

/// Reference inside pass over an explicit rule tensor, `O(m³ l³)`.
///
/// `s[i,j][A] = Σ_k Σ_{B,C} T[A,B,C] s[i,k][B] s[k+1,j][C]`; preterminal
/// rows of the padded tensor are zero so only `A < n` is computed.
pub fn inside_dense(g: &DensePcfg, sentence: &Sentence) -> Result<InsideResult> {
    sentence.check_vocab(g.q())?;
    let len = sentence.len();
    if len < 2 {
        return Ok(too_short(len));
    }
    let (n, m) = (g.n(), g.m());
    let mut chart = Chart::new(len);
    for (i, &word) in sentence.ids().iter().enumerate() {
        let mut s = vec![0.0; m];
        for t in 0..g.p() {
            s[n + t] = g.emission.get(t, word);
        }
        chart.set(i, i, Cell::from_unscaled(s, 0.0));
    }

    for width in 2..=len {
        for i in 0..=len - width {
            let j = i + width - 1;
            let exps: Vec<f64> = (i..j).map(|k| chart.cell(i, k).log_scale + chart.cell(k + 1, j).log_scale).collect();
            let (base, weights) = split_weights(&exps);
            let mut acc = vec![0.0; m];
            for (k, &weight) in (i..j).zip(&weights) {
                if weight == 0.0 {
                    continue;
                }
                let x = &chart.cell(i, k).scaled;
                let y = &chart.cell(k + 1, j).scaled;
                for (a, slot) in acc.iter_mut().enumerate().take(n) {
                    let slice = g.slice(a);
                    let mut z = 0.0;
                    for (b, &xb) in x.iter().enumerate() {
                        if xb == 0.0 {
                            continue;
                        }
                        let row = &slice[b * m..(b + 1) * m];
                        let ty: f64 = row.iter().zip(y).map(|(t, yc)| t * yc).sum();
                        z += xb * ty;
                    }
                    *slot += weight * z;
                }
            }
            chart.set(i, j, Cell::from_unscaled(acc, base));
        }
    }
    let log_likelihood = root_log_likelihood(&chart, g.start.data());
    Ok(InsideResult { log_likelihood, chart, diagnostic: None })
}
