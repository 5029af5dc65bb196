//! Central finite-difference gradient checks.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub step: f64,
    /// Check at most this many coordinates per input (evenly strided).
    pub max_coords: usize,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_coords: usize::MAX,
        }
    }
}

/// Relative error `|a - n| / max(|a|, |n|)` over the checked coordinates
/// (Euclidean norms), where `a` is the tape gradient and `n` the
/// central-difference estimate. Zero when both vanish.
#[derive(Clone, Debug)]
pub struct GradCheckResult {
    pub rel_error: Vec<f64>,
    pub analytic_norm: Vec<f64>,
}

impl GradCheckResult {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_error.iter().copied().fold(0.0, f64::max)
    }
}

impl GradCheck {
    /// `f` builds a scalar loss from leaf vars holding `inputs`.
    pub fn run<F>(&self, inputs: &[Tensor], f: F) -> Result<GradCheckResult>
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        let grads = tape.backward(loss)?;

        let eval = |xs: &[Tensor]| -> Result<f64> {
            let mut tape = Tape::inference();
            let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
            let loss = f(&mut tape, &vars)?;
            Ok(tape.value(loss).item())
        };

        let mut rel_error = Vec::with_capacity(inputs.len());
        let mut analytic_norm = Vec::with_capacity(inputs.len());
        let mut work: Vec<Tensor> = inputs.to_vec();
        for (k, input) in inputs.iter().enumerate() {
            let zero = Tensor::zeros(input.shape());
            let analytic = grads.wrt(vars[k]).unwrap_or(&zero).clone();
            let stride = input.len().div_ceil(self.max_coords.max(1)).max(1);
            let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
            for i in (0..input.len()).step_by(stride) {
                let orig = input.data()[i];
                work[k].data_mut()[i] = orig + self.step;
                let plus = eval(&work)?;
                work[k].data_mut()[i] = orig - self.step;
                let minus = eval(&work)?;
                work[k].data_mut()[i] = orig;
                let numeric = (plus - minus) / (2.0 * self.step);
                let a = analytic.data()[i];
                diff2 += (a - numeric).powi(2);
                a2 += a * a;
                n2 += numeric * numeric;
            }
            let denom = a2.sqrt().max(n2.sqrt());
            rel_error.push(if denom == 0.0 { 0.0 } else { diff2.sqrt() / denom });
            analytic_norm.push(a2.sqrt());
        }
        Ok(GradCheckResult {
            rel_error,
            analytic_norm,
        })
    }
}
