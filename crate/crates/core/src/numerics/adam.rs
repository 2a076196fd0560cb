//! Bias-corrected Adam.

use crate::error::{Error, Result};

use super::tensor::Tensor;

/// Optimizer state for one parameter tensor: moment accumulators plus a
/// strictly increasing step counter.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first_moment: Tensor,
    second_moment: Tensor,
}

impl AdamState {
    pub fn new(lr: f64, shape: &[usize]) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first_moment: Tensor::zeros(shape),
            second_moment: Tensor::zeros(shape),
        }
    }

    /// One bias-corrected update applied in place.
    pub fn apply(&mut self, param: &mut Tensor, grad: &Tensor) -> Result<()> {
        if param.shape() != grad.shape() || param.shape() != self.first_moment.shape() {
            return Err(Error::invalid(format!(
                "adam shape mismatch: param {:?}, grad {:?}, state {:?}",
                param.shape(),
                grad.shape(),
                self.first_moment.shape()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for i in 0..param.len() {
            let g = grad.data()[i];
            let m = &mut self.first_moment.data_mut()[i];
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            let v = &mut self.second_moment.data_mut()[i];
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            param.data_mut()[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Default learning rate used throughout.
pub const DEFAULT_LR: f64 = 1e-4;
