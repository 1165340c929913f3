use super::tape::{Tape, Var};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Denominator floor of the relative error. Coordinates whose gradient is
/// structurally zero produce central differences of pure rounding noise,
/// about `ε_mach·|f| / h` (≈1e-11 in f64 at `h = 1e-5`); the floor keeps
/// that noise from reading as a large relative error.
pub const FD_FLOOR: f64 = 1e-6;

/// Compares tape gradients against central differences.
///
/// `f` builds a scalar-valued graph from leaf vars bound to `params`.
/// Returns the max over all coordinates of
/// `|analytic − numeric| / (|analytic| + |numeric| + FD_FLOOR)`.
pub fn finite_difference_check<T, F>(f: F, params: &[Tensor<T>], h: T) -> Result<f64>
where
    T: Real,
    F: Fn(&mut Tape<'_, T>, &[Var]) -> Var,
{
    let eval = |ps: &[Tensor<T>]| -> Result<T> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p)).collect();
        let out = f(&mut tape, &vars);
        let v = tape.value(out);
        if v.len() != 1 {
            return Err(Error::Usage("finite-difference check needs a scalar function".into()));
        }
        Ok(v.data()[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
    let out = f(&mut tape, &vars);
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor<T>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();

    let two_h = h + h;
    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<T>> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        for k in 0..p.len() {
            let orig = p.data()[k];
            work[pi].data_mut()[k] = orig + h;
            let plus = eval(&work)?;
            work[pi].data_mut()[k] = orig - h;
            let minus = eval(&work)?;
            work[pi].data_mut()[k] = orig;
            let numeric = ((plus - minus) / two_h).to_f64().unwrap();
            let a = analytic[pi].data()[k].to_f64().unwrap();
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + FD_FLOOR);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
