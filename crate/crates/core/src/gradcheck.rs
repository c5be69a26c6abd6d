//! Finite-difference gradient checking with the fourth-order central stencil
//! `(f(x-2h) - 8f(x-h) + 8f(x+h) - f(x+2h)) / 12h`.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Agreement between the tape gradient and central differences.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub analytic: Tensor,
    pub numeric: Tensor,
}

impl GradCheck {
    /// `max_i |a_i - n_i| / (|n_i| + 1e-12)`.
    pub fn max_rel_error(&self) -> f64 {
        self.analytic
            .data()
            .iter()
            .zip(self.numeric.data())
            .map(|(a, n)| (a - n).abs() / (n.abs() + 1e-12))
            .fold(0.0, f64::max)
    }

    /// Relative error of the whole gradient vector, `|a - n|_2 / |n|_2`.
    pub fn vector_rel_error(&self) -> f64 {
        let diff = self.analytic.axpy(-1.0, &self.numeric).expect("same shapes");
        diff.norm() / (self.numeric.norm() + 1e-12)
    }
}

fn eval_scalar<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone(), false);
    let out = f(&mut tape, v)?;
    let val = tape.value(out);
    if val.numel() != 1 {
        return Err(Error::invalid(format!("gradient check: f returned shape {:?}", val.shape())));
    }
    let y = val.item();
    if !y.is_finite() {
        return Err(Error::NonFinite { op: "finite_difference" });
    }
    Ok(y)
}

/// Evaluates the gradient of `f` at `x` on a tape and by central differences with step `eps`.
pub fn check_gradient<F>(f: F, x: &Tensor, eps: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone(), true);
    let out = f(&mut tape, v)?;
    let analytic = tape.gradient(out, &[v])?.remove(0);

    let mut numeric = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        let mut at = |step: f64| {
            probe.data_mut()[i] = orig + step;
            eval_scalar(&f, &probe)
        };
        let (p1, m1, p2, m2) = (at(eps)?, at(-eps)?, at(2.0 * eps)?, at(-2.0 * eps)?);
        probe.data_mut()[i] = orig;
        numeric.data_mut()[i] = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * eps);
    }
    Ok(GradCheck { analytic, numeric })
}

/// Max over coordinates of `|analytic - numeric| / (|numeric| + 1e-12)`.
pub fn finite_difference_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    Ok(check_gradient(f, x, eps)?.max_rel_error())
}
