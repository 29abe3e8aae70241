//! Central finite-difference gradient checking.
//!
//! The numerical side only ever runs forward passes, so it is independent of
//! every backward rule on the tape.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Norm-wise relative error per input: `|a - n| / (|a| + |n|)`.
    pub rel_errors: Vec<f64>,
}

impl GradCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().copied().fold(0.0, f64::max)
    }
}

/// Compares tape gradients of the scalar built by `f` against central
/// differences with step `h`, for every element of every input.
pub fn check<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| grads.get(v).expect("param grad").data().to_vec())
        .collect();

    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut rel_errors = Vec::with_capacity(inputs.len());
    for (i, a) in analytic.iter().enumerate() {
        let mut diff2 = 0.0;
        let mut an2 = 0.0;
        let mut num2 = 0.0;
        for j in 0..a.len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let num = (plus - minus) / (2.0 * h);
            diff2 += (a[j] - num).powi(2);
            an2 += a[j] * a[j];
            num2 += num * num;
        }
        let denom = an2.sqrt() + num2.sqrt();
        rel_errors.push(if denom == 0.0 { 0.0 } else { diff2.sqrt() / denom });
    }
    Ok(GradCheck { rel_errors })
}
