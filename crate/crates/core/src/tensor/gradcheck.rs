use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Central-difference estimate of the gradient of a scalar function at `point`.
pub fn central_difference<F>(f: &F, point: &Tensor, h: f64) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let eval = |x: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let out = f(&mut tape, v)?;
        scalar_of(&tape, out)
    };
    let mut probe = point.detached();
    let mut grad = Vec::with_capacity(point.numel());
    for i in 0..point.numel() {
        let x0 = probe.data()[i];
        probe.data_mut()[i] = x0 + h;
        let up = eval(&probe)?;
        probe.data_mut()[i] = x0 - h;
        let down = eval(&probe)?;
        probe.data_mut()[i] = x0;
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// Largest per-coordinate relative disagreement between the tape gradient
/// and central differences: `|a - c| / (|a| + |c| + 1e-12)`.
pub fn grad_check<F>(f: F, point: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::invalid(format!("step h must be positive, got {h}")));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(point);
    let out = f(&mut tape, x)?;
    scalar_of(&tape, out)?;
    let grads = tape.backward(out)?;
    let zeros = vec![0.0; point.numel()];
    let analytic = grads.wrt(x).unwrap_or(&zeros);
    let numeric = central_difference(&f, point, h)?;
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(a, c)| (a - c).abs() / (a.abs() + c.abs() + 1e-12))
        .fold(0.0, f64::max))
}

fn scalar_of(tape: &Tape, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.numel() != 1 {
        return Err(Error::invalid(format!(
            "grad_check needs a scalar function, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.item())
}
