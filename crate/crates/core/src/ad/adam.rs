use super::error::AdError;
use super::params::{ParamId, ParamStore};
use super::scalar::Scalar;
use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam with one first/second moment buffer per trainable parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub slots: Vec<MomentSlot<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentSlot<T> {
    pub param: ParamId,
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Self {
        let slots = store
            .trainable_ids()
            .map(|id| MomentSlot {
                param: id,
                m: Tensor::zeros(store.get(id).shape()),
                v: Tensor::zeros(store.get(id).shape()),
            })
            .collect();
        Self {
            config,
            step: 0,
            slots,
        }
    }

    /// Applies one update from the gradients held in `store`. A parameter
    /// without a gradient is updated as if its gradient were zero. Nothing is
    /// modified if any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<(), AdError> {
        for slot in &self.slots {
            if let Some(g) = store.grad(slot.param) {
                if !g.is_finite() {
                    return Err(AdError::NonFiniteGradient(
                        store.name(slot.param).to_string(),
                    ));
                }
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        let (b1, b2) = (T::of(beta1), T::of(beta2));
        let (ob1, ob2) = (T::of(1.0 - beta1), T::of(1.0 - beta2));
        let (ic1, ic2, lr, eps) = (T::of(1.0 / c1), T::of(1.0 / c2), T::of(lr), T::of(eps));
        for slot in &mut self.slots {
            let g = store
                .grad(slot.param)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(slot.m.shape()));
            let p = store.get_mut(slot.param).data_mut();
            for (((p, g), m), v) in p
                .iter_mut()
                .zip(g.data())
                .zip(slot.m.data_mut())
                .zip(slot.v.data_mut())
            {
                *m = b1 * *m + ob1 * *g;
                *v = b2 * *v + ob2 * *g * *g;
                let mhat = *m * ic1;
                let vhat = *v * ic2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
