//! AdamW with decoupled weight decay.
//!
//! Decay multiplies the parameter by `1 - lr * weight_decay` before the
//! moment update, so decay never flows through the adaptive denominators.

use super::{Tensor, TensorError};
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct AdamWConfig<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub weight_decay: T,
}

impl<T: Scalar> AdamWConfig<T> {
    pub fn new(lr: T, weight_decay: T) -> Self {
        AdamWConfig {
            lr,
            beta1: T::cast(0.9),
            beta2: T::cast(0.999),
            eps: T::cast(1e-8),
            weight_decay,
        }
    }
}

/// First/second moment buffers plus the step counter.
#[derive(Clone, Debug, Default)]
pub struct AdamWState<T> {
    t: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamWState<T> {
    pub fn new() -> Self {
        AdamWState { t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

/// One optimizer step over named parameters. Gradients are validated before
/// any parameter is touched: a non-finite gradient aborts the whole step.
pub fn adamw_step<T: Scalar>(
    cfg: &AdamWConfig<T>,
    state: &mut AdamWState<T>,
    names: &[String],
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
) -> Result<(), TensorError> {
    if params.len() != grads.len() || params.len() != names.len() {
        return Err(TensorError::DataLength {
            op: "adamw_step",
            shape: vec![params.len()],
            expected: params.len(),
            got: grads.len().min(names.len()),
        });
    }
    for ((name, p), g) in names.iter().zip(params.iter()).zip(grads.iter()) {
        if p.shape() != g.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "adamw_step",
                left: p.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
        if !g.is_finite() {
            return Err(TensorError::PoisonedGradient { name: name.clone() });
        }
    }
    if state.m.is_empty() {
        state.m = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        state.v = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = T::one() - cfg.beta1.powi(t);
    let bc2 = T::one() - cfg.beta2.powi(t);
    let decay = T::one() - cfg.lr * cfg.weight_decay;
    let one = T::one();
    for i in 0..params.len() {
        let p = params[i].data_mut();
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for j in 0..p.len() {
            p[j] *= decay;
            m[j] = cfg.beta1 * m[j] + (one - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (one - cfg.beta2) * g[j] * g[j];
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            p[j] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
