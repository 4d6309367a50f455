//! Central finite-difference gradient checking.
//!
//! The numeric side only ever runs forward passes on fresh tapes, so it
//! shares no code with [`Tape::backward`].

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-4;
pub const MAX_REL_ERR: f64 = 1e-4;
/// Denominator floor for the relative error. Gradients smaller than this are
/// compared in absolute terms, where central differences carry O(h²) noise.
pub const REL_FLOOR: f64 = 1e-3;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Largest relative error between analytic gradients of `f` and central
/// differences with step [`STEP`], over every element of every input.
///
/// `f` receives the tape and one tracked leaf per input and must return a
/// scalar.
pub fn check_gradients<F>(inputs: &[Tensor], f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).item()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut worst: f64 = 0.0;
    let mut work = inputs.to_vec();
    for (k, &v) in vars.iter().enumerate() {
        let analytic = grads.get(v);
        for j in 0..inputs[k].numel() {
            let orig = inputs[k].data()[j];
            work[k].data_mut()[j] = orig + STEP;
            let up = eval(&work)?;
            work[k].data_mut()[j] = orig - STEP;
            let down = eval(&work)?;
            work[k].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            worst = worst.max(rel_err(analytic.data()[j], numeric));
        }
    }
    Ok(worst)
}
