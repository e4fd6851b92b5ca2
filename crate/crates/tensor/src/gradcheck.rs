//! Central finite-difference gradient checking.
//!
//! The numeric side only evaluates the forward function, so it is
//! independent of every backward rule it verifies.

use crate::{Graph, Tensor, TensorError, Var};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest elementwise relative error over all checked entries.
    pub max_rel_err: f64,
    /// `(input, element, analytic, numeric)` of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub checked: usize,
}

/// Compares reverse-mode gradients of the scalar `f(inputs)` with central
/// differences of step `h`.
///
/// Relative error is `|a - n| / max(|a|, |n|, floor)`; `floor` keeps entries
/// whose true gradient is zero from dominating through round-off.
///
/// The closure may use any error type that absorbs [`TensorError`], so
/// callers building on this crate can check their own composite operators.
pub fn check_gradients<F, E>(
    inputs: &[Tensor],
    h: f64,
    floor: f64,
    f: F,
) -> Result<GradCheckReport, E>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>, E>,
    E: From<TensorError>,
{
    let analytic = {
        let g = Graph::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let loss = f(&g, &vars)?;
        g.backward(loss)?;
        vars.iter().map(|v| v.grad_or_zeros()).collect::<Vec<_>>()
    };
    let eval = |ins: &[Tensor]| -> Result<f64, E> {
        let g = Graph::new();
        let vars: Vec<Var<'_>> = ins.iter().map(|t| g.constant(t.clone())).collect();
        Ok(f(&g, &vars)?.value().item()?)
    };
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
    };
    let mut work = inputs.to_vec();
    for (i, grad) in analytic.iter().enumerate() {
        for e in 0..inputs[i].numel() {
            let orig = inputs[i].data()[e];
            work[i].data_mut()[e] = orig + h;
            let plus = eval(&work)?;
            work[i].data_mut()[e] = orig - h;
            let minus = eval(&work)?;
            work[i].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = grad.data()[e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            report.checked += 1;
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(rel);
                report.worst = Some((i, e, a, numeric));
            }
        }
    }
    Ok(report)
}
