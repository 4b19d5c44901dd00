//! Central finite-difference gradient checks.

use super::tape::{Tape, Var};
use super::value::Tensor;
use crate::error::{contract_err, Error, Result};

/// Max over coordinates of `|analytic - numeric| / max(1, |numeric|)` for a
/// scalar function of one tensor.
pub fn check_gradient<F>(f: F, point: &Tensor, epsilon: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    check_gradients(|tape, vars| f(tape, vars[0]), std::slice::from_ref(point), epsilon)
}

/// Same as [`check_gradient`] over several input tensors at once.
pub fn check_gradients<F>(f: F, points: &[Tensor], epsilon: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    if epsilon <= 0.0 {
        return Err(Error::Param(format!("epsilon must be positive, got {epsilon}")));
    }
    let tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.leaf(p.clone(), true)).collect();
    let out = f(&tape, &vars)?;
    if !out.value().is_scalar() {
        return contract_err(format!("checked function must return a scalar, got {:?}", out.shape()));
    }
    let grads = out.backward()?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(points)
        .map(|(v, p)| grads.get(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();

    let eval = |pts: &[Tensor]| -> Result<f64> {
        let t = Tape::inference();
        let vs: Vec<Var> = pts.iter().map(|p| t.leaf(p.clone(), false)).collect();
        Ok(f(&t, &vs)?.item())
    };

    let mut worst = 0.0f64;
    let mut pts = points.to_vec();
    for (pi, a) in analytic.iter().enumerate() {
        for i in 0..pts[pi].numel() {
            let orig = pts[pi].data()[i];
            pts[pi].data_mut()[i] = orig + epsilon;
            let up = eval(&pts)?;
            pts[pi].data_mut()[i] = orig - epsilon;
            let down = eval(&pts)?;
            pts[pi].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * epsilon);
            let err = (a.data()[i] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
