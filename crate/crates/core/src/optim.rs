//! Adam optimizer with bias correction, plus global-norm gradient clipping.

use crate::param::ParamStore;
use crate::tensor::Tensor;

pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step_count: u64,
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let first_moment = store.iter().map(|p| Tensor::zeros(p.value().shape())).collect();
        let second_moment = store.iter().map(|p| Tensor::zeros(p.value().shape())).collect();
        Adam {
            lr,
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            eps: DEFAULT_EPS,
            step_count: 0,
            first_moment,
            second_moment,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.first_moment, &self.second_moment)
    }

    /// Rebuilds optimizer state, e.g. from a checkpoint.
    pub fn from_state(
        lr: f64,
        step_count: u64,
        first_moment: Vec<Tensor>,
        second_moment: Vec<Tensor>,
    ) -> Self {
        Adam {
            lr,
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            eps: DEFAULT_EPS,
            step_count,
            first_moment,
            second_moment,
        }
    }

    /// Applies one bias-corrected update to every parameter, then resets the
    /// gradients.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.step_count += 1;
        let bias1 = 1.0 - self.beta1.powi(self.step_count as i32);
        let bias2 = 1.0 - self.beta2.powi(self.step_count as i32);
        let (lr, beta1, beta2, eps) = (self.lr, self.beta1, self.beta2, self.eps);
        let (first, second) = (&mut self.first_moment, &mut self.second_moment);
        store.update_each(|slot, value, grad| {
            let m = first[slot].data_mut();
            let v = second[slot].data_mut();
            for ((x, &g), (mi, vi)) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = beta1 * *mi + (1.0 - beta1) * g;
                *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                let m_hat = *mi / bias1;
                let v_hat = *vi / bias2;
                *x -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        });
        store.reset_grads();
    }
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store.grad_norm();
    if norm > max_norm && norm > 0.0 {
        store.scale_grads(max_norm / norm);
    }
    norm
}
