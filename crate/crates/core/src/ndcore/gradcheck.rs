//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates forward values, so it stays
//! independent of every backward rule it checks.

use crate::error::Result;
use crate::ndcore::{ParamStore, Tape, Var};

/// Entries whose absolute error is below this are considered exact.
pub const ABS_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub checked: usize,
    pub failures: usize,
    /// Largest relative error over entries whose absolute error exceeds [`ABS_FLOOR`].
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Compares tape gradients of `loss_fn` against central differences with
/// step `h` for every scalar in `params`, flagging entries whose relative
/// error exceeds `rel_tol`. `loss_fn` must be deterministic.
pub fn check<F>(params: &mut ParamStore, h: f64, rel_tol: f64, mut loss_fn: F) -> Result<GradReport>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = loss_fn(&mut tape, params)?;
    tape.backward(loss)?;
    params.zero_grads();
    tape.accumulate_param_grads(params);
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|(_, _, t)| t.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();
    params.zero_grads();

    let mut eval = |p: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let l = loss_fn(&mut tape, p)?;
        Ok(tape.value(l).item())
    };

    let mut report = GradReport {
        checked: 0,
        failures: 0,
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: None,
    };
    let ids: Vec<_> = params.iter().map(|(id, _, _)| id).collect();
    for (pi, id) in ids.into_iter().enumerate() {
        for j in 0..params.get(id).len() {
            let orig = params.get(id).data()[j];
            params.get_mut(id).data_mut()[j] = orig + h;
            let up = eval(params)?;
            params.get_mut(id).data_mut()[j] = orig - h;
            let down = eval(params)?;
            params.get_mut(id).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[pi][j];
            let abs = (a - numeric).abs();
            report.checked += 1;
            report.max_abs_err = report.max_abs_err.max(abs);
            if abs <= ABS_FLOOR {
                continue;
            }
            let rel = abs / a.abs().max(numeric.abs());
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((params.name(id).to_string(), j, a, numeric));
            }
            if rel > rel_tol {
                report.failures += 1;
            }
        }
    }
    Ok(report)
}
