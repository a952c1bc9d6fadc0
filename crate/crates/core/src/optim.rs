//! SGD with classic momentum and a cosine-annealed learning rate.

use crate::tensor::Tensor;
use std::f64::consts::PI;

/// Cosine annealing from `base_lr` at epoch 0 down to 0 at `total_epochs`.
pub fn cosine_lr(base_lr: f64, epoch: usize, total_epochs: usize) -> f64 {
    if total_epochs == 0 {
        return base_lr;
    }
    let t = (epoch.min(total_epochs)) as f64 / total_epochs as f64;
    base_lr * 0.5 * (1.0 + (PI * t).cos())
}

/// Momentum-SGD state. Velocities are keyed by parameter position, so the
/// parameter list handed to [`SgdState::step`] must keep a stable order for
/// the lifetime of the optimizer.
#[derive(Debug, Clone)]
pub struct SgdState {
    pub base_lr: f64,
    pub momentum: f64,
    pub epoch: usize,
    pub total_epochs: usize,
    velocity: Vec<Vec<f64>>,
}

impl SgdState {
    pub fn new(base_lr: f64, momentum: f64, total_epochs: usize, param_count: usize) -> Self {
        SgdState {
            base_lr,
            momentum,
            epoch: 0,
            total_epochs,
            velocity: vec![Vec::new(); param_count],
        }
    }

    /// Learning rate for the current epoch.
    pub fn learning_rate(&self) -> f64 {
        cosine_lr(self.base_lr, self.epoch, self.total_epochs)
    }

    pub fn set_epoch(&mut self, epoch: usize) {
        self.epoch = epoch;
    }

    /// Applies `v <- momentum * v + g; p <- p - lr * v` to every parameter
    /// carrying a gradient. Parameters without a gradient (frozen) are left
    /// untouched, velocities included.
    pub fn step(&mut self, params: &mut [&mut Tensor]) {
        assert_eq!(params.len(), self.velocity.len(), "parameter count changed");
        let lr = self.learning_rate();
        for (p, v) in params.iter_mut().zip(self.velocity.iter_mut()) {
            let Some(grad) = p.grad.take() else { continue };
            assert_eq!(grad.len(), p.data.len(), "gradient length mismatch");
            if v.is_empty() {
                *v = vec![0.0; grad.len()];
            }
            for i in 0..grad.len() {
                v[i] = self.momentum * v[i] + grad[i];
                p.data[i] -= lr * v[i];
            }
        }
    }
}
