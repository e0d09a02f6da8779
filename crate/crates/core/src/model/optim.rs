//! SGD with momentum (weight decay folded into the gradient) and the cosine
//! annealing learning-rate schedule.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

use super::LayerStack;

/// Momentum buffers plus the optimizer hyperparameters.
#[derive(Debug, Clone)]
pub struct OptimizerState<T: Element = f32> {
    velocity: Vec<Tensor<T>>,
    pub momentum: T,
    pub weight_decay: T,
    pub lr: T,
}

impl<T: Element> OptimizerState<T> {
    pub fn new(stack: &LayerStack<T>, momentum: T, weight_decay: T, lr: T) -> Self {
        Self {
            velocity: stack
                .params()
                .iter()
                .map(|p| Tensor::zeros(p.shape()))
                .collect(),
            momentum,
            weight_decay,
            lr,
        }
    }

    pub fn velocity(&self) -> &[Tensor<T>] {
        &self.velocity
    }

    /// One update: `v <- mu*v + (g + wd*theta); theta <- theta - lr*v`.
    pub fn step(&mut self, stack: &mut LayerStack<T>, grads: &[Tensor<T>]) -> Result<()> {
        let mut params = stack.params_mut();
        if grads.len() != params.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} gradients for {} parameter tensors",
                grads.len(),
                params.len()
            )));
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(self.velocity.iter_mut()) {
            if p.shape() != g.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "gradient {:?} for parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            for ((pv, &gv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(v.data_mut().iter_mut())
            {
                *vv = self.momentum * *vv + (gv + self.weight_decay * *pv);
                *pv = *pv - self.lr * *vv;
            }
        }
        Ok(())
    }
}

/// `lr0 * 0.5 * (1 + cos(pi * epoch / total_epochs))`.
pub fn cosine_lr(epoch: usize, total_epochs: usize, lr0: f64) -> Result<f64> {
    if epoch >= total_epochs {
        return Err(Error::InvalidArgument(format!(
            "epoch {epoch} out of range for {total_epochs} total epochs"
        )));
    }
    Ok(lr0 * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / total_epochs as f64).cos()))
}
