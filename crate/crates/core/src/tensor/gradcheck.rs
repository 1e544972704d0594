//! Central finite-difference verification of tape gradients.

use super::tape::{Tape, Var};
use super::{Tensor, TensorError};
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel_err: f64,
    /// (input index, flat coordinate) of the worst disagreement.
    pub worst: Option<(usize, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub coords_checked: usize,
}

pub const DEFAULT_EPS: f64 = 1e-5;

/// Compares tape gradients of a scalar-valued graph against central finite
/// differences. `build` must deterministically construct the loss from the
/// given leaves. Relative error uses `max(|analytic|, |numeric|, 1e-8)` as
/// the denominator.
pub fn finite_diff_check<T, F>(
    build: F,
    inputs: &[Tensor<T>],
    eps: f64,
) -> Result<FdReport, TensorError>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var, TensorError>,
{
    // Analytic pass.
    let mut tape: Tape<T> = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = build(&mut tape, &vars)?;
    let grads = tape.backward(root)?;
    let analytic: Vec<Option<Tensor<T>>> = vars.iter().map(|&v| grads.wrt(v).cloned()).collect();

    let eval = |perturbed: &[Tensor<T>]| -> Result<f64, TensorError> {
        let mut tape: Tape<T> = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let root = build(&mut tape, &vars)?;
        Ok(tape.value(root).item().as_f64())
    };

    let step = T::cast(eps);
    let mut report = FdReport {
        max_rel_err: 0.0,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        coords_checked: 0,
    };
    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let orig = input.data()[j];
            work[i].data_mut()[j] = orig + step;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - step;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[i].as_ref().map_or(0.0, |g| g.data()[j].as_f64());
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let rel = (a - numeric).abs() / denom;
            report.coords_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((i, j));
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    Ok(report)
}
