//! Momentum gradient descent with decoupled weight decay.

use ndarray::{Array, Dimension, Zip};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// Velocity buffer for one parameter tensor.
#[derive(Debug, Clone)]
pub struct Momentum<D: Dimension> {
    velocity: Array<f64, D>,
}

impl<D: Dimension> Momentum<D> {
    pub fn new(like: &Array<f64, D>) -> Self {
        Self {
            velocity: Array::zeros(like.raw_dim()),
        }
    }

    /// `v = mu * v + g; p -= lr * v + lr * wd * p`.
    pub fn step(&mut self, cfg: &SgdConfig, param: &mut Array<f64, D>, grad: &Array<f64, D>) {
        let decay = cfg.learning_rate * cfg.weight_decay;
        Zip::from(&mut self.velocity)
            .and(param)
            .and(grad)
            .for_each(|v, p, &g| {
                *v = cfg.momentum * *v + g;
                *p -= cfg.learning_rate * *v + decay * *p;
            });
    }
}
