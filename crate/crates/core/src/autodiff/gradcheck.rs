//! Central finite-difference oracle for tape gradients.
//!
//! The numeric side only ever evaluates forward values on fresh tapes, so it
//! stays independent of every backward rule it checks.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradReport {
    /// Max over entries of `|analytic - numeric| / max(|analytic|, |numeric|, floor)`
    /// where `floor` is 1e-3 of the largest analytic magnitude in that input
    /// (and never below 1e-10), so entries that are pure noise do not dominate.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub entries: usize,
}

/// Relative error used by every gradient check in the crate.
pub fn rel_errors(analytic: &[f64], numeric: &[f64]) -> (f64, f64) {
    let scale = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-3 * scale).max(1e-10);
    let mut max_rel = 0.0f64;
    let mut max_abs = 0.0f64;
    for (a, n) in analytic.iter().zip(numeric) {
        let abs = (a - n).abs();
        max_abs = max_abs.max(abs);
        max_rel = max_rel.max(abs / a.abs().max(n.abs()).max(floor));
    }
    (max_rel, max_abs)
}

/// Central differences of a scalar function of a flat parameter vector.
pub fn numeric_gradient(f: impl Fn(&[f64]) -> Result<f64>, x: &[f64], h: f64) -> Result<Vec<f64>> {
    let mut xs = x.to_vec();
    let mut g = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = xs[i];
        xs[i] = orig + h;
        let fp = f(&xs)?;
        xs[i] = orig - h;
        let fm = f(&xs)?;
        xs[i] = orig;
        g[i] = (fp - fm) / (2.0 * h);
    }
    Ok(g)
}

/// Compare reverse-mode gradients of `build` against central differences
/// with step `h`, for every input tensor.
pub fn check_gradients<F>(build: F, inputs: &[Tensor], h: f64) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.var(t.clone())).collect();
    let root = build(&mut tape, &vars)?;
    let grads = tape.backward(root)?;

    let mut report = GradReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        entries: 0,
    };
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(&tape, vars[k]);
        let eval = |flat: &[f64]| -> Result<f64> {
            let mut t = Tape::new();
            let vs: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, inp)| {
                    if j == k {
                        t.var(Tensor::new(inp.shape().to_vec(), flat.to_vec()).unwrap())
                    } else {
                        t.var(inp.clone())
                    }
                })
                .collect();
            let r = build(&mut t, &vs)?;
            Ok(t.value(r).item())
        };
        let numeric = numeric_gradient(eval, input.data(), h)?;
        let (rel, abs) = rel_errors(analytic.data(), &numeric);
        report.max_rel_err = report.max_rel_err.max(rel);
        report.max_abs_err = report.max_abs_err.max(abs);
        report.entries += numeric.len();
    }
    Ok(report)
}
