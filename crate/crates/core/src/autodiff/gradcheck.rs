use super::{DiffArray, Real, Tape, Var};
use crate::error::{Error, Result};

/// Absolute floor applied to the denominator of the relative error.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Compares the tape gradient of a scalar function against central
/// differences `(f(x+εeᵢ) − f(x−εeᵢ)) / 2ε` for every coordinate of `x`.
///
/// Returns the worst relative error `|a − n| / max(|a|, |n|, 1e-6)`.
/// Use ε ≈ 1e-3 for `f32` and ε ≈ 1e-6 for `f64`.
pub fn grad_check<T, F>(f: F, x: &DiffArray<T>, eps: f64) -> Result<f64>
where
    T: Real,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::Contract("grad_check needs eps > 0".into()));
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(&x.clone().with_grad(true));
    let y = f(&mut tape, xv)?;
    if tape.value(y).len() != 1 {
        return Err(Error::shape(format!("grad_check needs a scalar function, got shape {:?}", tape.shape(y))));
    }
    let grads = tape.backward(y)?;
    let zeros = vec![T::zero(); x.len()];
    let analytic = grads.get(xv).unwrap_or(&zeros).to_vec();

    let eval = |probe: &DiffArray<T>| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.leaf(probe);
        let out = f(&mut t, v)?;
        Ok(t.value(out)[0].to_f64_lossy())
    };

    let mut worst = 0.0f64;
    let mut probe = x.clone().with_grad(false);
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + T::lit(eps);
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - T::lit(eps);
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[i].to_f64_lossy();
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
        if !err.is_finite() {
            return Ok(f64::INFINITY);
        }
        worst = worst.max(err);
    }
    Ok(worst)
}
