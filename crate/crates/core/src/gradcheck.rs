//! Central finite-difference gradient checking against the tape.
//!
//! The numeric side only ever evaluates forward values, so it stays
//! independent of every backward kernel it is used to validate.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-input comparison of analytic and numeric gradients.
#[derive(Debug, Clone)]
pub struct GradCheck {
    /// `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)` for each input
    /// (zero when both gradients vanish).
    pub rel_errors: Vec<f64>,
    /// `‖analytic − numeric‖₂` for each input.
    pub abs_errors: Vec<f64>,
    /// `max(‖analytic‖₂, ‖numeric‖₂)` for each input.
    pub magnitudes: Vec<f64>,
}

impl GradCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().copied().fold(0.0, f64::max)
    }

    /// Every input agrees in relative terms, except inputs whose gradient
    /// vanishes identically: both sides below `zero_tol`, leaving only
    /// rounding noise to compare.
    pub fn passes(&self, rel_tol: f64, zero_tol: f64) -> bool {
        self.rel_errors
            .iter()
            .zip(&self.magnitudes)
            .all(|(&r, &m)| r < rel_tol || m < zero_tol)
    }

    /// Largest relative error among inputs with a non-vanishing gradient.
    pub fn worst(&self, zero_tol: f64) -> f64 {
        self.rel_errors
            .iter()
            .zip(&self.magnitudes)
            .filter(|(_, &m)| m >= zero_tol)
            .map(|(&r, _)| r)
            .fold(0.0, f64::max)
    }
}

fn evaluate<F>(inputs: &[Tensor], f: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.numel() != 1 {
        return Err(Error::invalid("gradcheck: function must return a scalar"));
    }
    Ok(v.item())
}

/// Compares tape gradients of the scalar `f(inputs)` with central
/// differences of step `step` taken on every input element.
pub fn check<F>(inputs: &[Tensor], step: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut rel_errors = Vec::with_capacity(inputs.len());
    let mut abs_errors = Vec::with_capacity(inputs.len());
    let mut magnitudes = Vec::with_capacity(inputs.len());
    let mut probe = inputs.to_vec();
    for (idx, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[idx].shape()));
        let mut diff2 = 0.0;
        let mut a2 = 0.0;
        let mut n2 = 0.0;
        for j in 0..inputs[idx].numel() {
            let orig = inputs[idx].data()[j];
            probe[idx].data_mut()[j] = orig + step;
            let plus = evaluate(&probe, &f)?;
            probe[idx].data_mut()[j] = orig - step;
            let minus = evaluate(&probe, &f)?;
            probe[idx].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.data()[j];
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
        }
        let denom = a2.sqrt().max(n2.sqrt());
        rel_errors.push(if denom == 0.0 { 0.0 } else { diff2.sqrt() / denom });
        abs_errors.push(diff2.sqrt());
        magnitudes.push(denom);
    }
    Ok(GradCheck {
        rel_errors,
        abs_errors,
        magnitudes,
    })
}

/// Reduces a tensor-valued output to a scalar by a fixed random projection,
/// so gradient checks exercise every output element.
pub fn project(tape: &mut Tape, x: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let n = tape.value(x).numel();
    if weights.numel() != n {
        return Err(Error::invalid("project: weight count mismatch"));
    }
    let xf = tape.reshape(x, &[1, 1, n])?;
    let wf = tape.reshape(w, &[1, n, 1])?;
    let s = tape.matmul(xf, wf, false, false)?;
    tape.reshape(s, &[1])
}
