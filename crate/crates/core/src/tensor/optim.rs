use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Clone, Debug, Default)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
}

/// Adam with bias-corrected moments.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub state: AdamState<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            state: AdamState {
                m: Vec::new(),
                v: Vec::new(),
                t: 0,
            },
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Dimension(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.state.m.is_empty() {
            self.state.m = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
            self.state.v = self.state.m.clone();
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || self.state.m[i].len() != p.len() {
                return Err(Error::Dimension(format!(
                    "parameter {i} has shape {:?}, gradient {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
        }
        self.state.t += 1;
        let c = &self.config;
        let t = self.state.t as i32;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one, eps, lr) = (T::one(), T::lit(c.eps), T::lit(c.lr));
        let bc1 = T::lit(1.0 - c.beta1.powi(t));
        let bc2 = T::lit(1.0 - c.beta2.powi(t));
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.state.m.iter_mut().zip(self.state.v.iter_mut()))
        {
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// `lambda · Σ w²` and its gradient `2·lambda·w` for each tensor.
pub fn l2_penalty<T: Scalar>(params: &[&Tensor<T>], lambda: f64) -> Result<(T, Vec<Tensor<T>>)> {
    if lambda < 0.0 || !lambda.is_finite() {
        return Err(Error::Parameter(format!("L2 weight must be finite and non-negative, got {lambda}")));
    }
    let l = T::lit(lambda);
    let two_l = T::lit(2.0 * lambda);
    let value = params
        .iter()
        .flat_map(|p| p.data().iter())
        .fold(T::zero(), |acc, &w| acc + w * w)
        * l;
    let grads = params.iter().map(|p| p.map(|w| w * two_l)).collect();
    Ok((value, grads))
}
