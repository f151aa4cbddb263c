use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compares the tape gradient of a scalar function against central
/// differences at every entry of `x`.
///
/// Returns `max |analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..x.numel()).collect();
    grad_check_entries(f, x, eps, &all)
}

/// Like [`grad_check`] but probes only the listed flat indices of `x`.
pub fn grad_check_entries<F>(f: F, x: &Tensor, eps: f64, entries: &[usize]) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let out = f(&mut tape, xv)?;
    let fx = tape.value(out).data()[0];
    if !fx.is_finite() {
        return Err(Error::NonFinite("grad_check objective"));
    }
    let grads = tape.backward(out)?;
    let zeros = vec![0.0; x.numel()];
    let analytic = grads.get(xv).unwrap_or(&zeros);

    let eval = |probe: Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.constant(probe);
        let o = f(&mut t, v)?;
        let y = t.value(o).data()[0];
        if y.is_finite() {
            Ok(y)
        } else {
            Err(Error::NonFinite("grad_check objective"))
        }
    };

    let mut worst = 0.0f64;
    for &i in entries {
        if i >= x.numel() {
            return Err(Error::invalid("grad_check", format!("entry {i} out of range")));
        }
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}
