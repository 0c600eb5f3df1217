//! Central finite-difference gradient checking.

use super::{Gradients, NumericsError, ParamId, ParamStore, Tape, Var};

/// Outcome of a gradient check over a set of parameters.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Relative error with a small floor on the denominator so that entries whose
/// true gradient is (numerically) zero are compared absolutely.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares reverse-mode gradients of `loss_fn` against central differences
/// with step `h` for every entry of every parameter in `ids` (or a strided
/// subset when `max_entries_per_param` is smaller than the tensor).
pub fn check_params<F>(
    store: &mut ParamStore,
    ids: &[ParamId],
    h: f64,
    max_entries_per_param: usize,
    loss_fn: F,
) -> Result<GradCheckReport, NumericsError>
where
    F: Fn(&mut Tape<'_>) -> Result<Var, NumericsError>,
{
    let mut grads = Gradients::new();
    {
        let mut tape = Tape::new(store);
        let loss = loss_fn(&mut tape)?;
        tape.backward(loss, &mut grads)?;
    }
    let eval = |store: &ParamStore| -> Result<f64, NumericsError> {
        let mut tape = Tape::new(store);
        let loss = loss_fn(&mut tape)?;
        Ok(tape.value(loss).item())
    };

    let mut report = GradCheckReport { checked: 0, max_rel_error: 0.0, worst: None };
    for &id in ids {
        let n = store.get(id).len();
        let stride = n.div_ceil(max_entries_per_param.max(1)).max(1);
        for k in (0..n).step_by(stride) {
            let original = store.get(id).data()[k];
            store.value_mut(id).data_mut()[k] = original + h;
            let plus = eval(store)?;
            store.value_mut(id).data_mut()[k] = original - h;
            let minus = eval(store)?;
            store.value_mut(id).data_mut()[k] = original;
            let numeric = (plus - minus) / (2.0 * h);
            let analytic = grads.get(id).map_or(0.0, |g| g.data()[k]);
            let err = relative_error(analytic, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                if err >= report.max_rel_error {
                    report.worst = Some((store.name(id).to_string(), k, analytic, numeric));
                }
            }
        }
    }
    Ok(report)
}
