//! Central-difference gradient checks.

use super::params::{Forward, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::{Scalar, Tensor};
use crate::error::Result;

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn eval_scalar<T: Scalar>(f: &impl Fn(&mut Tape<T>, Var) -> Result<Var>, x: &Tensor<T>) -> Result<f64> {
    let mut tape = Tape::new();
    let v = tape.leaf(x)?;
    let out = f(&mut tape, v)?;
    Ok(tape.value(out)[0].f64())
}

/// Max over coordinates of `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`
/// for a scalar function of one tensor.
pub fn grad_check<T: Scalar>(f: impl Fn(&mut Tape<T>, Var) -> Result<Var>, x: &Tensor<T>, eps: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let xv = tape.leaf(&x.clone().with_grad())?;
    let out = f(&mut tape, xv)?;
    let grads = tape.backward(out)?;
    let zeros = vec![T::zero(); x.len()];
    let analytic = grads.get(xv).unwrap_or(&zeros).to_vec();

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + T::of(eps);
        let plus = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig - T::of(eps);
        let minus = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        worst = worst.max(relative_error(analytic[i].f64(), numeric));
    }
    Ok(worst)
}

/// Per-parameter worst relative error of a scalar loss built on a
/// [`Forward`] pass, checked over every scalar of every parameter.
/// `loss` must be deterministic (evaluation-mode dropout).
pub fn grad_check_params<T: Scalar>(
    store: &ParamStore<T>,
    loss: impl Fn(&mut Forward<'_, T>) -> Result<Var>,
    eps: f64,
) -> Result<Vec<(String, f64)>> {
    let mut fw = Forward::eval(store);
    let out = loss(&mut fw)?;
    let (grads, bound) = fw.backward(out)?;
    let mut analytic = store.clone();
    analytic.zero_grads();
    analytic.absorb(&grads, &bound)?;

    let eval = |s: &ParamStore<T>| -> Result<f64> {
        let mut fw = Forward::eval(s);
        let out = loss(&mut fw)?;
        Ok(fw.tape.value(out)[0].f64())
    };

    let mut probe = store.clone();
    let mut report = Vec::with_capacity(store.len());
    for (idx, entry) in analytic.entries().iter().enumerate() {
        let zeros = vec![T::zero(); entry.tensor.len()];
        let g = entry.tensor.grad().unwrap_or(&zeros);
        let mut worst = 0.0f64;
        for (i, &gi) in g.iter().enumerate() {
            let orig = probe.entries()[idx].tensor.data()[i];
            probe.entries_mut()[idx].tensor.data_mut()[i] = orig + T::of(eps);
            let plus = eval(&probe)?;
            probe.entries_mut()[idx].tensor.data_mut()[i] = orig - T::of(eps);
            let minus = eval(&probe)?;
            probe.entries_mut()[idx].tensor.data_mut()[i] = orig;
            worst = worst.max(relative_error(gi.f64(), (plus - minus) / (2.0 * eps)));
        }
        report.push((entry.name.clone(), worst));
    }
    Ok(report)
}
