use crate::error::{Error, Result};
use crate::model::{Grads, ParamStore};
use crate::tensor::Tensor;

/// SGD with momentum and decoupled-from-norm weight decay:
/// `v = momentum * v + grad + wd * param`, `param -= lr * v`.
/// Decay applies to weight tensors only.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub momentum: f32,
    pub weight_decay: f32,
    velocity: Vec<Option<Tensor>>,
}

impl Sgd {
    pub fn new(momentum: f32, weight_decay: f32) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    /// Momentum buffer of parameter `index`, if it has been updated.
    pub fn velocity(&self, index: usize) -> Option<&Tensor> {
        self.velocity.get(index).and_then(Option::as_ref)
    }

    pub(crate) fn set_velocity(&mut self, index: usize, v: Tensor) {
        if self.velocity.len() <= index {
            self.velocity.resize(index + 1, None);
        }
        self.velocity[index] = Some(v);
    }

    /// Updates every parameter that received a gradient; the rest are left
    /// alone, including their momentum.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads, lr: f32) -> Result<()> {
        if !(lr > 0.0) {
            return Err(Error::invalid(format!("learning rate must be > 0, got {lr}")));
        }
        if self.velocity.len() < store.len() {
            self.velocity.resize(store.len(), None);
        }
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let Some(grad) = grads.get(id) else { continue };
            let decay = if store.get(id).kind.decays() { self.weight_decay } else { 0.0 };
            let param = store.value_mut(id);
            if grad.shape() != param.shape() {
                return Err(Error::ShapeMismatch {
                    op: "sgd step",
                    lhs: param.shape().to_vec(),
                    rhs: grad.shape().to_vec(),
                });
            }
            let v = self.velocity[i].get_or_insert_with(|| Tensor::zeros(param.shape().to_vec()));
            for ((vv, &gv), pv) in v.data_mut().iter_mut().zip(grad.data()).zip(param.data_mut()) {
                *vv = self.momentum * *vv + gv + decay * *pv;
                *pv -= lr * *vv;
            }
        }
        Ok(())
    }
}
