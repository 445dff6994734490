//! Central finite-difference verification of tape gradients.

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Denominator floor for the relative error, so near-zero gradients are
/// compared absolutely instead of amplifying rounding noise.
pub const RELATIVE_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// max over all coordinates of `|analytic - numeric| / max(|analytic|, |numeric|, RELATIVE_FLOOR)`
    pub max_rel_error: f64,
    /// (input index, flat element index) of the worst coordinate.
    pub worst: (usize, usize),
    pub tol: f64,
    pub passed: bool,
}

fn eval<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&tape, &vars)?;
    tape.with_value(out, Tensor::item)?
}

/// Checks the gradient of a scalar function of several tensors.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    if h <= 0.0 || tol <= 0.0 {
        return Err(Error::param("grad_check needs h > 0 and tol > 0"));
    }
    let first = eval(&f, inputs)?;
    let again = eval(&f, inputs)?;
    if first.to_bits() != again.to_bits() {
        return Err(Error::state(format!(
            "function is not deterministic: {first} then {again}"
        )));
    }

    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|&v| tape.grad(v).map(|g| g.expect("params track gradients")))
        .collect::<Result<_>>()?;

    let mut max_rel = 0.0f64;
    let mut worst = (0, 0);
    let mut probe = inputs.to_vec();
    for (ti, grad) in analytic.iter().enumerate() {
        for i in 0..probe[ti].len() {
            let x0 = probe[ti].data()[i];
            let (xp, xm) = (x0 + h, x0 - h);
            probe[ti].data_mut()[i] = xp;
            let fp = eval(&f, &probe)?;
            probe[ti].data_mut()[i] = xm;
            let fm = eval(&f, &probe)?;
            probe[ti].data_mut()[i] = x0;
            // divide by the representable step, not 2h
            let numeric = (fp - fm) / (xp - xm);
            let a = grad.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
            if rel > max_rel {
                max_rel = rel;
                worst = (ti, i);
            }
        }
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        worst,
        tol,
        passed: max_rel <= tol,
    })
}

/// Single-input form of [`grad_check_many`].
pub fn grad_check<F>(f: F, x: &Tensor, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tape, Var) -> Result<Var>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), h, tol)
}
