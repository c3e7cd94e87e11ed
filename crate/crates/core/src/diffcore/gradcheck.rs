//! Central-difference verification of analytic gradients.

use super::graph::Graph;
use super::params::{NamedTensors, ParameterSet};
use super::tensor::Tensor;
use super::{DiffError, Program};

/// Outcome of a gradient check; `max_rel_error` is the headline number.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_path: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub entries_checked: usize,
}

fn eval_loss<P: Program + ?Sized>(
    program: &P,
    inputs: &NamedTensors<f64>,
    params: &ParameterSet<f64>,
) -> Result<f64, DiffError> {
    let mut g = Graph::new(params).with_inputs(inputs).no_grad();
    let out = program.build(&mut g)?;
    let v = g.value(out.loss);
    if v.len() != 1 {
        return Err(DiffError::NotScalar { shape: v.shape().to_vec() });
    }
    Ok(v.item())
}

/// Compares reverse-mode gradients against `(f(p+ε) − f(p−ε)) / 2ε` for every
/// parameter entry, in f64. Relative error uses `max(1e-8, |numeric|)` as the
/// denominator.
pub fn grad_check_report<P: Program + ?Sized>(
    program: &P,
    inputs: &NamedTensors<f64>,
    params: &ParameterSet<f64>,
    epsilon: f64,
) -> Result<GradCheckReport, DiffError> {
    if epsilon <= 0.0 || !epsilon.is_finite() {
        return Err(DiffError::InvalidArgument(format!("epsilon must be positive, got {epsilon}")));
    }
    let analytic = {
        let mut g = Graph::new(params).with_inputs(inputs);
        let out = program.build(&mut g)?;
        g.backward(out.loss)?
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_path: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        entries_checked: 0,
    };
    let mut work = params.clone();
    for (path, t) in params.iter() {
        let grad = analytic.get(path).expect("backward covers every parameter");
        for i in 0..t.len() {
            let base = t.data()[i];
            let mut shifted = |delta: f64| -> Result<f64, DiffError> {
                let mut data = t.to_vec();
                data[i] = base + delta;
                work.insert(path.clone(), Tensor::new(t.shape().to_vec(), data)?);
                eval_loss(program, inputs, &work)
            };
            let plus = shifted(epsilon)?;
            let minus = shifted(-epsilon)?;
            work.insert(path.clone(), t.clone());
            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = grad.data()[i];
            let rel = (a - numeric).abs() / numeric.abs().max(1e-8);
            report.entries_checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_path = path.clone();
                report.worst_index = i;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Maximum relative error between analytic and central-difference gradients.
pub fn grad_check<P: Program + ?Sized>(
    program: &P,
    inputs: &NamedTensors<f64>,
    params: &ParameterSet<f64>,
    epsilon: f64,
) -> Result<f64, DiffError> {
    grad_check_report(program, inputs, params, epsilon).map(|r| r.max_rel_error)
}
