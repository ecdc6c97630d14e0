//! Learnable parameters and their gradient buffers.

use rand::Rng;

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

/// Uniform init in `[-1/sqrt(fan_in), +1/sqrt(fan_in)]`.
pub fn uniform_init(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("uniform_init shape")
}

/// Strictly positive uniform init in `[0.25/sqrt(fan_in), 1/sqrt(fan_in)]`.
/// Used where a rectifier follows: a sign-mixed draw can zero the whole
/// rectified output at initialization, killing its gradient permanently.
pub fn uniform_init_positive(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| rng.random_range(0.25 * bound..bound))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("uniform_init shape")
}

/// A learnable tensor with a same-shaped gradient accumulator and a stable
/// name used for checkpointing.
#[derive(Debug, Clone)]
pub struct Parameter {
    name: String,
    value: Tensor,
    grad: Tensor,
}

impl Parameter {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn grad(&self) -> &Tensor {
        &self.grad
    }
}

/// Registry of all parameters of one model instance.
///
/// Slots are allocated in registration order, which is fixed by model
/// construction, so slot indices are stable and deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter and returns its slot. Names must be unique.
    pub fn register(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        let name = name.into();
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name:?}"
        );
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter { name, value, grad });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, slot: usize) -> &Parameter {
        &self.params[slot]
    }

    pub fn value(&self, slot: usize) -> &Tensor {
        &self.params[slot].value
    }

    pub fn value_mut(&mut self, slot: usize) -> &mut Tensor {
        &mut self.params[slot].value
    }

    pub fn grad(&self, slot: usize) -> &Tensor {
        &self.params[slot].grad
    }

    /// Adds `delta` into the slot's gradient accumulator.
    pub fn accumulate_grad(&mut self, slot: usize, delta: &Tensor) -> Result<()> {
        let grad = &mut self.params[slot].grad;
        if grad.shape() != delta.shape() {
            return Err(CoreError::ShapeMismatch {
                op: "accumulate_grad",
                lhs: grad.shape().to_vec(),
                rhs: delta.shape().to_vec(),
            });
        }
        for (g, d) in grad.data_mut().iter_mut().zip(delta.data()) {
            *g += d;
        }
        Ok(())
    }

    /// Zeroes every gradient accumulator.
    pub fn reset_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    /// Applies `f(value, grad)` to every parameter, e.g. for optimizer steps.
    pub fn update_each(&mut self, mut f: impl FnMut(usize, &mut Tensor, &Tensor)) {
        for (slot, p) in self.params.iter_mut().enumerate() {
            f(slot, &mut p.value, &p.grad);
        }
    }

    /// Global L2 norm over all gradients.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.data())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Scales every gradient in place.
    pub fn scale_grads(&mut self, factor: f64) {
        for p in &mut self.params {
            for g in p.grad.data_mut() {
                *g *= factor;
            }
        }
    }

    /// Snapshot of all parameter values, in slot order.
    pub fn snapshot_values(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    /// Restores values from a snapshot taken on an identically-shaped store.
    pub fn restore_values(&mut self, values: &[Tensor]) {
        assert_eq!(values.len(), self.params.len(), "snapshot length mismatch");
        for (p, v) in self.params.iter_mut().zip(values) {
            assert_eq!(p.value.shape(), v.shape(), "snapshot shape mismatch");
            p.value = v.clone();
        }
    }
}
