//! Central finite differences, the independent oracle every reverse-mode
//! gradient in this crate is checked against.

use crate::error::{Error, Result};
use crate::graph::{NodeId, Tape};
use crate::tensor::Tensor;

/// Central-difference gradient estimate of a scalar-valued function,
/// element by element.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, step: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if step <= 0.0 {
        return Err(Error::Parameter {
            name: "step",
            detail: format!("must be positive, got {step}"),
        });
    }
    let mut grad = vec![0.0; x.numel()];
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - step;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad[i] = (plus - minus) / (2.0 * step);
    }
    Tensor::from_vec(x.shape().to_vec(), grad)
}

/// Largest elementwise relative difference, guarded for near-zero entries.
pub fn max_rel_error(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

/// Compare the tape's reverse-mode gradient of a scalar expression against
/// finite differences, for every tracked input. Returns the worst relative
/// error across all inputs and elements.
///
/// The builder receives fresh `var` nodes for the inputs each evaluation, so
/// the finite-difference path replays the forward pass from scratch and stays
/// independent of the backward implementation.
pub fn gradcheck_scalar_fn<F>(build: &mut F, inputs: &[Tensor], step: f64) -> Result<f64>
where
    F: FnMut(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.var(t.clone())).collect();
    let root = build(&mut tape, &ids)?;
    let grads = tape.backward(root)?;

    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(ids[i])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape().to_vec()));
        let numeric = finite_diff_grad(
            |probe| {
                let mut t = Tape::new();
                let mut fresh = Vec::with_capacity(inputs.len());
                for (j, orig) in inputs.iter().enumerate() {
                    let val = if j == i { probe.clone() } else { orig.clone() };
                    fresh.push(t.var(val));
                }
                let r = build(&mut t, &fresh)?;
                Ok(t.scalar_value(r))
            },
            input,
            step,
        )?;
        worst = worst.max(max_rel_error(&analytic, &numeric));
    }
    Ok(worst)
}
