use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First/second moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub first_moment: Vec<Vec<T>>,
    pub second_moment: Vec<Vec<T>>,
    pub step: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &[&Tensor<T>]) -> Self {
        OptimizerState {
            first_moment: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
            second_moment: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update using the gradients stored in each
/// parameter's `grad` slot. A missing gradient counts as zero.
///
/// Non-finite gradients abort the step before any parameter is touched.
pub fn adam_step<T: Scalar>(params: &mut [&mut Tensor<T>], state: &mut OptimizerState<T>, cfg: &AdamConfig) -> Result<()> {
    if params.len() != state.first_moment.len() {
        return Err(Error::shape(format!(
            "optimizer tracks {} tensors, got {}",
            state.first_moment.len(),
            params.len()
        )));
    }
    for (pi, p) in params.iter().enumerate() {
        if p.len() != state.first_moment[pi].len() {
            return Err(Error::shape(format!(
                "parameter {pi} has {} elements, moments have {}",
                p.len(),
                state.first_moment[pi].len()
            )));
        }
        if let Some(g) = p.grad() {
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    context: format!("gradient of parameter tensor {pi} (shape {:?}) at step {}", p.shape(), state.step + 1),
                    index: i,
                    value: g[i].as_f64(),
                });
            }
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let b1 = T::from_f64(cfg.beta1);
    let b2 = T::from_f64(cfg.beta2);
    let one = T::one();
    let bc1 = T::from_f64(1.0 - cfg.beta1.powi(t));
    let bc2 = T::from_f64(1.0 - cfg.beta2.powi(t));
    let lr = T::from_f64(cfg.learning_rate);
    let eps = T::from_f64(cfg.epsilon);

    for (pi, p) in params.iter_mut().enumerate() {
        let m = &mut state.first_moment[pi];
        let v = &mut state.second_moment[pi];
        match p.grad() {
            Some(_) => {
                let (values, grads) = p.data_and_grad_mut();
                for (((w, &g), m), v) in values.iter_mut().zip(grads.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
            None => {
                for ((w, m), v) in p.data_mut().iter_mut().zip(m.iter_mut()).zip(v.iter_mut()) {
                    *m = b1 * *m;
                    *v = b2 * *v;
                    *w = *w - lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
                }
            }
        }
    }
    Ok(())
}
