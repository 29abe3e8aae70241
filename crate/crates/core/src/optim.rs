//! Adam with decoupled weight decay and a constant learning rate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-4,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

pub struct OptimizerState<T> {
    pub config: AdamConfig,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
    step: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(config: AdamConfig) -> Self {
        OptimizerState {
            config,
            first: Vec::new(),
            second: Vec::new(),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update over `params` (name, tensor) with matching `grads`.
    ///
    /// Parameters must be passed in the same order on every call. Any NaN
    /// in a gradient aborts the step before anything is modified.
    pub fn step(&mut self, params: &mut [(String, &mut Tensor<T>)], grads: &[&Tensor<T>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::InvalidArgument(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for ((name, p), g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::Shape {
                    op: "optimizer_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if g.data().iter().any(|v| v.is_nan()) {
                return Err(Error::NanGradient { param: name.clone() });
            }
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|(_, p)| vec![T::zero(); p.numel()]).collect();
            self.second = self.first.clone();
        } else if self.first.len() != params.len()
            || self.first.iter().zip(params.iter()).any(|(m, (_, p))| m.len() != p.numel())
        {
            return Err(Error::InvalidArgument(
                "parameter set changed between optimizer steps".into(),
            ));
        }

        self.step += 1;
        let c = &self.config;
        let lr = T::lit(c.learning_rate);
        let decay = T::one() - T::lit(c.learning_rate * c.weight_decay);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = T::one() - T::lit(c.beta1.powi(self.step as i32));
        let bc2 = T::one() - T::lit(c.beta2.powi(self.step as i32));
        let eps = T::lit(c.epsilon);

        for (((_, p), g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *w *= decay;
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
