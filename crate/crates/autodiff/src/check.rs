//! Central finite-difference gradient checking.

use crate::{Array, Result, Tape, Var};

/// Outcome of [`finite_difference_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdReport {
    /// Largest elementwise relative error over compared coordinates.
    pub max_rel_error: f64,
    /// Coordinates compared.
    pub compared: usize,
    /// Coordinates skipped because the function has a kink there.
    pub excluded: usize,
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences with step `eps`.
///
/// `build` records the function on a fresh tape given the input leaf and
/// returns the scalar output. Relative error uses the denominator
/// `max(|a|, |b|, 1e-8)`. A coordinate whose one-sided differences
/// disagree by more than `1e-2 · max(|fwd|, |bwd|, 1)` sits on a
/// nondifferentiable point (e.g. relu at exactly 0) and is excluded.
pub fn finite_difference_check<F>(build: F, point: &Array, eps: f64) -> Result<FdReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let eval = |x: &Array| -> Result<f64> {
        let mut tape = Tape::new();
        let leaf = tape.constant(x.clone());
        let out = build(&mut tape, leaf)?;
        Ok(tape.value(out).get(0, 0))
    };

    let mut tape = Tape::new();
    let leaf = tape.param(point.clone());
    let out = build(&mut tape, leaf)?;
    let analytic = tape.backward(out)?.get(leaf);
    let f0 = tape.value(out).get(0, 0);

    let mut report = FdReport { max_rel_error: 0.0, compared: 0, excluded: 0 };
    let mut probe = point.clone();
    for idx in 0..point.len() {
        let orig = probe.data()[idx];
        probe.data_mut()[idx] = orig + eps;
        let f_plus = eval(&probe)?;
        probe.data_mut()[idx] = orig - eps;
        let f_minus = eval(&probe)?;
        probe.data_mut()[idx] = orig;

        let fwd = (f_plus - f0) / eps;
        let bwd = (f0 - f_minus) / eps;
        if (fwd - bwd).abs() > 1e-2 * fwd.abs().max(bwd.abs()).max(1.0) {
            report.excluded += 1;
            continue;
        }
        let numeric = (f_plus - f_minus) / (2.0 * eps);
        let a = analytic.data()[idx];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        report.max_rel_error = report.max_rel_error.max(rel);
        report.compared += 1;
    }
    Ok(report)
}
