//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates the forward pass, so it stays
//! independent of the backward rules it is used to verify.

use crate::math;
use alloc::string::String;
use alloc::vec::Vec;

use crate::autograd::{Tape, Var};
use crate::nn::{Bound, ParamStore};
use crate::Tensor;

/// Per-input comparison between analytic and numeric gradients.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub name: String,
    /// `||analytic - numeric|| / max(||analytic||, ||numeric||)`.
    pub rel_error: f64,
    pub analytic_norm: f64,
}

/// Checks `d f / d inputs` for a scalar-valued `f` built on a tape.
///
/// `step` is the central-difference half-width. Inputs whose analytic and
/// numeric gradients are both exactly zero report a relative error of 0.
pub fn check<F>(names: &[&str], inputs: &[Tensor], step: f64, f: F) -> Vec<GradCheck>
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Var,
{
    assert_eq!(names.len(), inputs.len());
    let analytic: Vec<Tensor> = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
        let out = f(&mut tape, &vars);
        let mut grads = tape.backward(out);
        vars.iter()
            .zip(inputs)
            .map(|(&v, t)| grads.take_or_zeros(v, t))
            .collect()
    };
    let eval = |perturbed: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.param(t)).collect();
        let out = f(&mut tape, &vars);
        tape.value(out).data()[0]
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut report = Vec::with_capacity(inputs.len());
    for (i, name) in names.iter().enumerate() {
        let mut diff2 = 0.0;
        let mut a2 = 0.0;
        let mut n2 = 0.0;
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let plus = eval(&work);
            work[i].data_mut()[j] = orig - step;
            let minus = eval(&work);
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[i].data()[j];
            diff2 += (a - numeric) * (a - numeric);
            a2 += a * a;
            n2 += numeric * numeric;
        }
        let denom = math::sqrt(a2.max(n2));
        let rel_error = if denom == 0.0 { 0.0 } else { math::sqrt(diff2) / denom };
        report.push(GradCheck {
            name: String::from(*name),
            rel_error,
            analytic_norm: math::sqrt(a2),
        });
    }
    report
}

/// [`check`] over every tensor of a parameter store, for models whose
/// forward pass is written against a [`Bound`] store.
pub fn check_store<F>(store: &ParamStore, step: f64, f: F) -> Vec<GradCheck>
where
    F: Fn(&mut Tape<'_>, &Bound<'_>) -> Var,
{
    let names: Vec<&str> = store.names().iter().map(String::as_str).collect();
    check(&names, store.tensors(), step, |tape, vars| {
        // the perturbed copies live on the tape; the store only supplies names
        let bound = Bound::from_vars(store, vars.to_vec());
        f(tape, &bound)
    })
}

/// Largest relative error in a report.
pub fn max_rel_error(report: &[GradCheck]) -> f64 {
    report.iter().map(|r| r.rel_error).fold(0.0, f64::max)
}
