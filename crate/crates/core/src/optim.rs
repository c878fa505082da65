//! Momentum SGD over named parameter tensors.

use std::collections::BTreeMap;

use crate::tensor::Tensor;

/// Classic momentum SGD (`v = mu * v + g; w -= lr * v`), no weight decay.
/// Velocity buffers are keyed by parameter name so detector, discriminators
/// and transfer module can share one optimizer or use separate ones.
pub struct MomentumSgd {
    pub momentum: f64,
    velocity: BTreeMap<String, Tensor>,
}

impl MomentumSgd {
    pub fn new(momentum: f64) -> Self {
        MomentumSgd {
            momentum,
            velocity: BTreeMap::new(),
        }
    }

    /// Apply one update. `grads` entries missing for a parameter leave it
    /// untouched (frozen or unused parameters).
    pub fn step(
        &mut self,
        lr: f64,
        params: &mut [(String, &mut Tensor)],
        grads: &BTreeMap<String, Tensor>,
    ) {
        for (name, tensor) in params.iter_mut() {
            let Some(grad) = grads.get(name) else {
                continue;
            };
            let vel = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(tensor.shape()));
            for ((w, v), &g) in tensor
                .data_mut()
                .iter_mut()
                .zip(vel.data_mut())
                .zip(grad.data())
            {
                *v = self.momentum * *v + g;
                *w -= lr * *v;
            }
        }
    }
}
