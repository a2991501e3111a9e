//! Central finite-difference gradient verification.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use super::TensorError;

pub const DEFAULT_EPS: f64 = 1e-4;

/// Denominator floor for relative error, so entries whose true gradient is
/// ~0 are compared absolutely.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (input index, flat element index) of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Builds the graph with every input as a leaf, back-propagates from the
/// returned scalar, and compares each input's gradient with central
/// differences of step `eps`.
pub fn grad_check<F>(build: F, inputs: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| tape.leaf(t.clone()))
        .collect::<Result<Vec<_>, _>>()?;
    let out = build(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            grads
                .get(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.rows(), t.cols()))
        })
        .collect();
    compare_gradients(&analytic, |xs| scalar_output(&build, xs), inputs, eps)
}

fn scalar_output<F>(build: &F, inputs: &[Tensor<f64>]) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| tape.leaf(t.clone()))
        .collect::<Result<Vec<_>, _>>()?;
    let out = build(&mut tape, &vars)?;
    Ok(tape.value(out).data()[0])
}

/// Compares supplied gradients against central differences of `eval`.
pub fn compare_gradients<F>(
    analytic: &[Tensor<f64>],
    mut eval: F,
    inputs: &[Tensor<f64>],
    eps: f64,
) -> Result<GradCheckReport, TensorError>
where
    F: FnMut(&[Tensor<f64>]) -> Result<f64, TensorError>,
{
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut work = inputs.to_vec();
    for (i, grad) in analytic.iter().enumerate() {
        for j in 0..work[i].len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - eps;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[j];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.checked == 1 {
                report.max_rel_error = err;
                report.worst = (i, j);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
