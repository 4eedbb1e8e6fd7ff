//! Adam with bias correction.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::real::Real;

pub const DEFAULT_LR: f64 = 1e-4;
pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Real = f32> {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// First moments, one tensor per parameter, same order and shapes.
    pub m: Vec<Tensor<T>>,
    /// Second moments.
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ModelParams<T>, lr: f64) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|p| Tensor::zeros(p.tensor.shape()))
                .collect::<Vec<_>>()
        };
        AdamState {
            step: 0,
            lr,
            beta1: BETA1,
            beta2: BETA2,
            eps: EPSILON,
            m: zeros(),
            v: zeros(),
        }
    }

    fn check(&self, params: &ModelParams<T>, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Shape(format!(
                "{} parameters, {} gradients, {} moment tensors",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.tensor.shape() != g.shape() || p.tensor.shape() != m.shape() {
                return Err(Error::Shape(format!(
                    "parameter {} has shape {:?}, gradient {:?}",
                    p.name,
                    p.tensor.shape(),
                    g.shape()
                )));
            }
            if let Some(bad) = g.data().iter().find(|v| !v.is_finite()) {
                return Err(Error::DivergedGradient(format!("{bad} in gradient of {}", p.name)));
            }
        }
        Ok(())
    }
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v.to64() * v.to64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = T::of(max_norm / norm);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// One Adam update. On error nothing is modified.
pub fn adam_step<T: Real>(params: &mut ModelParams<T>, grads: &[Tensor<T>], state: &mut AdamState<T>) -> Result<()> {
    state.check(params, grads)?;
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let (lr, eps) = (state.lr, state.eps);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        for (((w, &gi), mi), vi) in p
            .tensor
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            let g = gi.to64();
            let m_new = b1 * mi.to64() + (1.0 - b1) * g;
            let v_new = b2 * vi.to64() + (1.0 - b2) * g * g;
            *mi = T::of(m_new);
            *vi = T::of(v_new);
            let m_hat = m_new / c1;
            let v_hat = v_new / c2;
            *w = T::of(w.to64() - lr * m_hat / (v_hat.sqrt() + eps));
        }
    }
    Ok(())
}
