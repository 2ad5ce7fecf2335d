//! SGD with classical momentum and L2 weight decay.

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl SgdConfig {
    pub fn new(learning_rate: f64) -> Self {
        SgdConfig { learning_rate, momentum: 0.9, weight_decay: 0.0 }
    }
}

/// Optimizer state: one velocity buffer per parameter slot.
///
/// Call `step` with the same parameters in the same order every time; the
/// velocity buffers are positional.
pub struct Sgd {
    cfg: SgdConfig,
    velocities: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(cfg: SgdConfig) -> Result<Self> {
        if !(cfg.learning_rate > 0.0) {
            return Err(Error::invalid_argument(format!(
                "learning rate must be > 0, got {}",
                cfg.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&cfg.momentum) {
            return Err(Error::invalid_argument(format!(
                "momentum must be in [0, 1), got {}",
                cfg.momentum
            )));
        }
        if cfg.weight_decay < 0.0 {
            return Err(Error::invalid_argument(format!(
                "weight decay must be >= 0, got {}",
                cfg.weight_decay
            )));
        }
        Ok(Sgd { cfg, velocities: Vec::new() })
    }

    /// Adjust the step size between calls (for schedules).
    pub fn set_learning_rate(&mut self, lr: f64) -> Result<()> {
        if !(lr > 0.0) {
            return Err(Error::invalid_argument(format!(
                "learning rate must be > 0, got {lr}"
            )));
        }
        self.cfg.learning_rate = lr;
        Ok(())
    }

    /// v <- momentum * v + grad + weight_decay * param;
    /// param <- param - lr * v.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::invalid_argument(format!(
                "{} params but {} grads",
                params.len(),
                grads.len()
            )));
        }
        if self.velocities.is_empty() {
            self.velocities = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        if self.velocities.len() != params.len() {
            return Err(Error::invalid_argument(
                "parameter count changed between steps",
            ));
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocities) {
            if p.shape() != g.shape() || p.numel() != v.len() {
                return Err(Error::invalid_argument(format!(
                    "sgd shape mismatch: param {:?} vs grad {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
            g.assert_finite("gradient")?;
            let pd = p.data_mut();
            for i in 0..pd.len() {
                v[i] = self.cfg.momentum * v[i]
                    + g.data()[i]
                    + self.cfg.weight_decay * pd[i];
                pd[i] -= self.cfg.learning_rate * v[i];
            }
        }
        Ok(())
    }
}
