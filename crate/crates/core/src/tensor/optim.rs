//! Stochastic gradient descent with classical momentum.

use crate::error::{Error, Result};

use super::Tensor;

/// SGD with momentum. Velocity buffers live here, one per parameter, so a
/// single optimizer must drive the same parameter list across steps.
///
/// Update rule: `v <- momentum * v + grad; p <- p - lr * v`. Gradients are
/// consumed (zeroed) by the step.
pub struct Sgd {
    lr: f64,
    momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Result<Self> {
        if !(lr.is_finite() && lr >= 0.0) {
            return Err(Error::Config(format!("learning rate {lr} must be >= 0")));
        }
        if !(momentum.is_finite() && (0.0..1.0).contains(&momentum)) {
            return Err(Error::Config(format!("momentum {momentum} must be in [0,1)")));
        }
        Ok(Sgd {
            lr,
            momentum,
            velocity: Vec::new(),
        })
    }

    /// Apply one update to every parameter. Errors if any parameter is
    /// missing its gradient.
    pub fn step(&mut self, params: &mut [Tensor]) -> Result<()> {
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(Error::State(format!(
                "optimizer tracks {} parameters, got {}",
                self.velocity.len(),
                params.len()
            )));
        }
        // Validate all gradients before mutating anything.
        for (i, p) in params.iter().enumerate() {
            if p.grad().is_none() {
                return Err(Error::State(format!("parameter {i} has no gradient")));
            }
        }
        for (p, v) in params.iter_mut().zip(self.velocity.iter_mut()) {
            let g = p.take_grad().expect("validated above");
            let lr = self.lr;
            let momentum = self.momentum;
            let data = p.data_mut();
            for i in 0..g.len() {
                v[i] = momentum * v[i] + g[i];
                data[i] -= lr * v[i];
            }
        }
        Ok(())
    }
}
