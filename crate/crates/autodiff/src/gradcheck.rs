use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Outcome of comparing analytic gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / (|numeric| + 1e-8)` over all coordinates.
    pub max_rel_error: f64,
    /// `(parameter index, flat element index)` of the worst coordinate.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

/// Checks the gradient of a scalar function of several parameter tensors.
///
/// `f` builds the function on a fresh tape from parameter handles. Each
/// coordinate is perturbed by `+-h`.
pub fn grad_check<F>(f: F, params: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if v.len() != 1 {
            return Err(TensorError::NonScalarRoot(v.shape().to_vec()));
        }
        Ok(v.item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let root = f(&mut tape, &vars)?;
    let base = tape.item(root);
    if !base.is_finite() {
        return Err(TensorError::NonFinite(base));
    }
    let grads = tape.backward(root)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
    };
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var);
        for j in 0..params[pi].len() {
            let orig = params[pi].data()[j];
            work[pi].data_mut()[j] = orig + h;
            let up = eval(&work)?;
            work[pi].data_mut()[j] = orig - h;
            let down = eval(&work)?;
            work[pi].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[j];
            let rel = (a - numeric).abs() / (numeric.abs() + 1e-8);
            report.coordinates += 1;
            if rel > report.max_rel_error || rel.is_nan() {
                report.max_rel_error = if rel.is_nan() { f64::INFINITY } else { rel };
                report.worst = (pi, j);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
