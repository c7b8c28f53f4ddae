use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(1, |numeric|)` over all input entries.
    pub max_rel_error: f64,
    /// Input index and flat element index of the worst entry.
    pub worst: (usize, usize),
    pub evaluations: usize,
}

/// Compares tape gradients of a scalar-valued function against central
/// finite differences with the given step.
///
/// `f` receives the tape and the input leaves (all learnable) and must
/// return a single-element node.
pub fn grad_check<F>(inputs: &[Tensor<f64>], f: F, step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    grad_check_sampled(inputs, f, step, usize::MAX)
}

/// Like [`grad_check`], but probes at most `per_input` evenly spaced entries
/// of each input (always including the first and last).
pub fn grad_check_sampled<F>(inputs: &[Tensor<f64>], f: F, step: f64, per_input: usize) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::config("grad_check step must be positive"));
    }
    if inputs.iter().flat_map(|t| t.data()).any(|v| !v.is_finite()) {
        return Err(Error::config("grad_check point must be finite"));
    }
    let eval = |point: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = point.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        match tape.value(out) {
            [v] => Ok(*v),
            _ => Err(Error::shape("grad_check (scalar output)", tape.shape(out), &[1])),
        }
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport { max_rel_error: 0.0, worst: (0, 0), evaluations: 1 };
    let mut point = inputs.to_vec();
    for (ti, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[ti].numel()]);
        let n = inputs[ti].numel();
        let probes: Vec<usize> = if per_input >= n {
            (0..n).collect()
        } else if per_input <= 1 {
            vec![0]
        } else {
            (0..per_input).map(|i| i * (n - 1) / (per_input - 1)).collect()
        };
        for j in probes {
            let orig = inputs[ti].data()[j];
            point[ti].data_mut()[j] = orig + step;
            let up = eval(&point)?;
            point[ti].data_mut()[j] = orig - step;
            let down = eval(&point)?;
            point[ti].data_mut()[j] = orig;
            report.evaluations += 2;
            let numeric = (up - down) / (2.0 * step);
            let err = (analytic[j] - numeric).abs() / numeric.abs().max(1.0);
            if err > report.max_rel_error || err.is_nan() {
                report.max_rel_error = err;
                report.worst = (ti, j);
            }
        }
    }
    Ok(report)
}
