use super::{Matrix, Tape, Var};
use crate::error::{Error, Result};

/// Compares tape gradients of a scalar function against central differences.
///
/// `f` records the function on the tape given one leaf per entry of
/// `point`. Returns the largest `|analytic − numeric| / max(1, |analytic|)`
/// over every coordinate of every input.
pub fn finite_diff_check<F>(f: F, point: &[Matrix], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {step}")));
    }
    let eval = |inputs: &[Matrix]| -> Result<f64> {
        let mut t = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|m| t.leaf(m.clone())).collect();
        let out = f(&mut t, &vars);
        let v = t.value(out).item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite("finite-difference evaluation".into()))
        }
    };

    let mut t = Tape::new();
    let vars: Vec<Var> = point.iter().map(|m| t.leaf(m.clone())).collect();
    let out = f(&mut t, &vars);
    let grads = t.backward(out)?;

    let mut worst = 0.0f64;
    let mut probe = point.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var);
        for j in 0..point[k].len() {
            let orig = point[k].data()[j];
            probe[k].data_mut()[j] = orig + step;
            let plus = eval(&probe)?;
            probe[k].data_mut()[j] = orig - step;
            let minus = eval(&probe)?;
            probe[k].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.data()[j];
            if !a.is_finite() {
                return Err(Error::NonFinite("analytic gradient".into()));
            }
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}
