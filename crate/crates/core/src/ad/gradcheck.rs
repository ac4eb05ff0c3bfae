use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compares reverse-mode gradients of a scalar function with central
/// differences.
///
/// Returns `max_i |analytic_i - numeric_i| / (|numeric_i| + 1e-12)`. Both
/// passes run on a [surrogate](Tape::surrogate) tape, so straight-through
/// nodes are checked against their identity surrogate.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::contract(format!("eps {eps} outside [1e-7, 1e-3]")));
    }
    let eval = |input: &Tensor| -> Result<f64> {
        let mut tape = Tape::surrogate();
        let v = tape.constant(input.clone());
        let out = f(&mut tape, v)?;
        scalar_of(&tape, out)
    };

    let mut tape = Tape::surrogate();
    let v = tape.leaf(x.clone());
    let out = f(&mut tape, v)?;
    scalar_of(&tape, out)?;
    let grads = tape.backward(out)?;
    let zeros = Tensor::zeros(x.shape().to_vec());
    let analytic = grads.get(v).unwrap_or(&zeros);

    let mut probe = x.clone();
    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let err = (analytic.data()[i] - numeric).abs() / (numeric.abs() + 1e-12);
        worst = worst.max(err);
    }
    Ok(worst)
}

fn scalar_of(tape: &Tape, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.numel() != 1 {
        return Err(Error::contract(format!(
            "grad_check needs a scalar-valued function, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.item())
}
