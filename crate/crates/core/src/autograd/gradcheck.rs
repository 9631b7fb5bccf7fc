//! Central finite-difference verification of tape gradients.

use super::tape::{Tape, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Default central-difference step for `f64` checks.
pub const DEFAULT_STEP: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Per checked input: `‖analytic - numeric‖ / max(‖analytic‖, ‖numeric‖)`.
    pub relative_errors: Vec<f64>,
    pub max_abs_error: f64,
}

impl GradCheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.relative_errors.iter().copied().fold(0.0, f64::max)
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_relative_error() < tolerance
    }
}

/// Norm-relative discrepancy between two gradient tensors; 0 when both vanish.
pub fn relative_error<T: Scalar>(analytic: &Tensor<T>, numeric: &Tensor<T>) -> f64 {
    let norm = |t: &Tensor<T>| t.data().iter().map(|x| x.to_f64_lossy().powi(2)).sum::<f64>().sqrt();
    let diff: f64 = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a.to_f64_lossy() - n.to_f64_lossy()).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn evaluate<T: Scalar>(inputs: &[Tensor<T>], build: &impl Fn(&mut Tape<T>, &[Var]) -> Var) -> T {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars);
    tape.value(out).item()
}

/// Central-difference gradient of the scalar built by `build` with respect
/// to `inputs[which]`.
pub fn numerical_gradient<T: Scalar>(
    inputs: &[Tensor<T>],
    which: usize,
    step: T,
    build: &impl Fn(&mut Tape<T>, &[Var]) -> Var,
) -> Tensor<T> {
    let mut probe = inputs.to_vec();
    let mut grad = Tensor::zeros(inputs[which].shape());
    for k in 0..inputs[which].numel() {
        let x0 = inputs[which].data()[k];
        probe[which].data_mut()[k] = x0 + step;
        let plus = evaluate(&probe, build);
        probe[which].data_mut()[k] = x0 - step;
        let minus = evaluate(&probe, build);
        probe[which].data_mut()[k] = x0;
        grad.data_mut()[k] = (plus - minus) / (step + step);
    }
    grad
}

/// Tape gradient of the scalar built by `build` with respect to every input.
pub fn analytic_gradients<T: Scalar>(
    inputs: &[Tensor<T>],
    build: &impl Fn(&mut Tape<T>, &[Var]) -> Var,
) -> Vec<Tensor<T>> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars);
    let grads = tape.backward(out);
    vars.iter().zip(inputs).map(|(&v, t)| grads.get_or_zeros(v, t.shape())).collect()
}

/// Compares tape gradients with central differences for every input.
pub fn check_gradients<T: Scalar>(
    inputs: &[Tensor<T>],
    step: T,
    build: impl Fn(&mut Tape<T>, &[Var]) -> Var,
) -> GradCheckReport {
    let analytic = analytic_gradients(inputs, &build);
    let mut relative_errors = Vec::with_capacity(inputs.len());
    let mut max_abs_error = 0.0f64;
    for (which, a) in analytic.iter().enumerate() {
        let n = numerical_gradient(inputs, which, step, &build);
        relative_errors.push(relative_error(a, &n));
        for (x, y) in a.data().iter().zip(n.data()) {
            max_abs_error = max_abs_error.max((x.to_f64_lossy() - y.to_f64_lossy()).abs());
        }
    }
    GradCheckReport { relative_errors, max_abs_error }
}
