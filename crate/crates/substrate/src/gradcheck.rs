//! Central-difference verification of tape gradients.

use crate::error::{Result, SubstrateError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Finite-difference step `h`.
    pub step: f64,
    /// Lower bound on the relative-error denominator, so coordinates whose
    /// true gradient is ~0 are judged by absolute error.
    pub floor: f64,
    /// Coordinates to probe; all when `None`.
    pub indices: Option<Vec<usize>>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            floor: 1e-6,
            indices: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Coordinate with the largest relative error.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Compares the reverse-mode gradient of `f` at `x` against
/// `(f(x + h e_i) - f(x - h e_i)) / 2h`, returning the maximum relative error.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let opts = GradCheckOptions {
        step,
        ..GradCheckOptions::default()
    };
    Ok(grad_check_with(f, x, &opts)?.max_rel_error)
}

pub fn grad_check_with<F>(f: F, x: &Tensor<f64>, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let eval = |point: Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(point);
        let out = f(&mut tape, v)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let v = tape.variable(x.clone());
    let out = f(&mut tape, v)?;
    let grads = tape.backward(out)?;
    let full = grads
        .get(v)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let indices: Vec<usize> = match &opts.indices {
        Some(ix) => ix.clone(),
        None => (0..x.len()).collect(),
    };
    if let Some(&bad) = indices.iter().find(|&&i| i >= x.len()) {
        return Err(SubstrateError::InvalidArgument {
            op: "grad_check",
            reason: format!("index {bad} outside tensor of {} values", x.len()),
        });
    }

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst_index: indices.first().copied().unwrap_or(0),
        analytic: Vec::with_capacity(indices.len()),
        numeric: Vec::with_capacity(indices.len()),
    };
    for &i in &indices {
        let mut plus = x.clone();
        plus.data_mut()[i] += opts.step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= opts.step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * opts.step);
        let analytic = full.data()[i];
        let abs = (analytic - numeric).abs();
        let rel = abs / analytic.abs().max(numeric.abs()).max(opts.floor);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = i;
        }
        report.max_abs_error = report.max_abs_error.max(abs);
        report.analytic.push(analytic);
        report.numeric.push(numeric);
    }
    Ok(report)
}
