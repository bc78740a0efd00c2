//! Central finite-difference check of tape gradients in f64.

use crate::diffcore::params::ParameterSet;
use crate::diffcore::tape::{Tape, Var};
use crate::error::Result;

/// Relative error used by [`finite_diff_check`].
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares backward-pass gradients against central differences.
///
/// `loss_fn` records a scalar loss on the tape it is handed. Every scalar of
/// every parameter is perturbed by `±step`. Returns the maximum relative
/// error over all of them.
pub fn finite_diff_check<F>(loss_fn: F, params: &ParameterSet<f64>, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape<'_, f64>) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new(params);
        let loss = loss_fn(&mut tape)?;
        tape.backward(loss)?
    };
    let eval = |p: &ParameterSet<f64>| -> Result<f64> {
        let mut tape = Tape::new(p);
        let loss = loss_fn(&mut tape)?;
        Ok(tape.scalar(loss))
    };

    let mut work = params.clone();
    let mut worst = 0.0f64;
    for id in params.ids() {
        for j in 0..params.value(id).len() {
            let orig = params.value(id).data()[j];
            work.value_mut(id).data_mut()[j] = orig + step;
            let plus = eval(&work)?;
            work.value_mut(id).data_mut()[j] = orig - step;
            let minus = eval(&work)?;
            work.value_mut(id).data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            worst = worst.max(relative_error(analytic.get(id).data()[j], numeric));
        }
    }
    Ok(worst)
}
