//! Adaptive-moment optimizer with bias correction.

use serde::{Deserialize, Serialize};

use super::{Real, Tensor};
use crate::error::{contract, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment estimates for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<E> {
    pub step: u64,
    pub m: Tensor<E>,
    pub v: Tensor<E>,
}

impl<E: Real> AdamState<E> {
    pub fn new(shape: &[usize]) -> Self {
        Self {
            step: 0,
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
        }
    }
}

/// Optimizer over an ordered list of parameters.
#[derive(Clone, Debug)]
pub struct Adam<E> {
    pub config: AdamConfig,
    pub states: Vec<AdamState<E>>,
}

impl<E: Real> Adam<E> {
    pub fn new(config: AdamConfig, shapes: &[&[usize]]) -> Self {
        Self {
            config,
            states: shapes.iter().map(|s| AdamState::new(s)).collect(),
        }
    }

    /// Applies one update; `names` label parameters in diagnostics.
    pub fn step(&mut self, params: &mut [Tensor<E>], grads: &[Tensor<E>], names: &[String]) -> Result<()> {
        contract!(
            params.len() == self.states.len() && grads.len() == params.len(),
            "adam: {} params, {} grads, {} states",
            params.len(),
            grads.len(),
            self.states.len()
        );
        contract!(self.config.lr >= 0.0, "adam: learning rate must be >= 0");
        for (i, g) in grads.iter().enumerate() {
            contract!(
                g.shape() == params[i].shape(),
                "adam: grad shape {:?} vs param shape {:?}",
                g.shape(),
                params[i].shape()
            );
            if !g.all_finite() {
                return Err(Error::NonFinite {
                    step: self.states[i].step + 1,
                    term: format!("gradient of parameter {}", names.get(i).map_or("?", |s| s)),
                    max_grad: g.max_abs(),
                });
            }
        }
        let c = self.config;
        let (b1, b2) = (E::lit(c.beta1), E::lit(c.beta2));
        let (lr, eps) = (E::lit(c.lr), E::lit(c.epsilon));
        let one = E::one();
        for ((p, g), st) in params.iter_mut().zip(grads).zip(&mut self.states) {
            st.step += 1;
            let t = st.step as i32;
            let bc1 = one - b1.powi(t);
            let bc2 = one - b2.powi(t);
            let m = st.m.data_mut();
            let v = st.v.data_mut();
            for (j, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = b1 * m[j] + (one - b1) * gv;
                v[j] = b2 * v[j] + (one - b2) * gv * gv;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *pv = *pv - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
