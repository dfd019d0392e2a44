//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates the forward function, so it stays
//! independent of every backward rule it is used to check. Detached
//! constants (the positive-shift minimum, min/max reductions) are held at
//! their unperturbed values during the numeric evaluations, so both sides
//! differentiate the same stop-gradient function.

use super::{Tape, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Per input: `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂, 1e-12)`.
    pub rel_errors: Vec<f64>,
    /// Per input: largest absolute elementwise difference.
    pub max_abs_errors: Vec<f64>,
}

impl GradCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().copied().fold(0.0, f64::max)
    }
}

/// Compare the tape gradient of the scalar `f(inputs)` against central
/// differences with step `h`, for every input.
pub fn check<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let frozen = tape.detached_values().to_vec();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();

    let eval = |ins: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        tape.replay_detached(frozen.clone());
        let vars: Vec<Var> = ins.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };

    let mut rel_errors = Vec::with_capacity(inputs.len());
    let mut max_abs_errors = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, an) in analytic.iter().enumerate() {
        let mut num = vec![0.0; an.len()];
        for j in 0..an.len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let fp = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let fm = eval(&work)?;
            work[i].data_mut()[j] = orig;
            num[j] = (fp - fm) / (2.0 * h);
        }
        let diff: f64 = an.iter().zip(&num).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let na = an.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nn = num.iter().map(|v| v * v).sum::<f64>().sqrt();
        rel_errors.push(diff / na.max(nn).max(1e-12));
        max_abs_errors.push(
            an.iter()
                .zip(&num)
                .fold(0.0, |m, (a, b)| f64::max(m, (a - b).abs())),
        );
    }
    Ok(GradCheck {
        rel_errors,
        max_abs_errors,
    })
}
