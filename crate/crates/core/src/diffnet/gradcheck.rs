//! Central finite-difference gradient checking against the tape.

use super::tape::{ParamStore, Tape, Var};
use crate::error::{Error, Result};

/// Denominator floor for relative errors; below it the error is effectively absolute.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn eval<F>(store: &ParamStore, f: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    let v = tape.value(out);
    if v.shape() != (1, 1) {
        return Err(Error::Shape("gradient check needs a scalar output".into()));
    }
    Ok(v.item())
}

/// Compare tape gradients of the scalar built by `f` with central differences
/// of step `h`, over every scalar in `store`. Leaves `store.grads` holding the
/// analytic gradient.
pub fn check_gradients<F>(store: &mut ParamStore, h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    store.zero_grads();
    {
        let mut tape = Tape::new();
        let out = f(&mut tape, store)?;
        tape.backward(out, store)?;
    }
    let analytic = store.grads.clone();
    let mut report = GradCheck { max_rel_error: 0.0, max_abs_error: 0.0, checked: 0 };
    for p in 0..store.values.len() {
        for k in 0..store.values[p].data.len() {
            let orig = store.values[p].data[k];
            store.values[p].data[k] = orig + h;
            let up = eval(store, &f)?;
            store.values[p].data[k] = orig - h;
            let dn = eval(store, &f)?;
            store.values[p].data[k] = orig;
            let numeric = (up - dn) / (2.0 * h);
            let a = analytic[p].data[k];
            report.max_rel_error = report.max_rel_error.max(relative_error(a, numeric));
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            report.checked += 1;
        }
    }
    Ok(report)
}
