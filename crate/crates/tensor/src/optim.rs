//! AdaDelta (Zeiler, 2012) with an optional step multiplier.

use crate::error::{Result, TensorError};
use crate::params::{GradBuffer, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Running averages for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaDeltaSlot<T> {
    pub accum_grad_sq: Tensor<T>,
    pub accum_update_sq: Tensor<T>,
}

impl<T: Scalar> AdaDeltaSlot<T> {
    pub fn zeros_like(param: &Tensor<T>) -> Self {
        Self {
            accum_grad_sq: Tensor::zeros(param.shape()),
            accum_update_sq: Tensor::zeros(param.shape()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdaDelta {
    pub rho: f64,
    pub eps: f64,
    /// Multiplier on the AdaDelta step; 1.0 is the unscaled rule.
    pub lr: f64,
    /// Parameters whose name starts with the prefix use the paired multiplier.
    pub group_lr: Vec<(String, f64)>,
}

impl Default for AdaDelta {
    fn default() -> Self {
        Self {
            rho: 0.95,
            eps: 1e-6,
            lr: 1.0,
            group_lr: Vec::new(),
        }
    }
}

impl AdaDelta {
    pub fn with_lr(mut self, lr: f64) -> Self {
        self.lr = lr;
        self
    }

    pub fn with_group_lr(mut self, prefix: impl Into<String>, lr: f64) -> Self {
        self.group_lr.push((prefix.into(), lr));
        self
    }

    pub fn lr_for(&self, name: &str) -> f64 {
        self.group_lr
            .iter()
            .find(|(p, _)| name.starts_with(p.as_str()))
            .map_or(self.lr, |(_, lr)| *lr)
    }

    /// One elementwise AdaDelta update of `param` in place.
    ///
    /// ```text
    /// E[g²] ← ρ E[g²] + (1−ρ) g²
    /// Δ     = −√(E[Δ²] + ε) / √(E[g²] + ε) · g
    /// E[Δ²] ← ρ E[Δ²] + (1−ρ) Δ²
    /// θ     ← θ + lr·Δ
    /// ```
    pub fn update<T: Scalar>(&self, param: &mut Tensor<T>, grad: &Tensor<T>, slot: &mut AdaDeltaSlot<T>, lr: f64) -> Result<()> {
        if param.shape() != grad.shape() || slot.accum_grad_sq.shape() != param.shape() {
            return Err(TensorError::Shape {
                op: "adadelta_update",
                lhs: param.shape().to_vec(),
                rhs: grad.shape().to_vec(),
            });
        }
        let (rho, eps, lr) = (T::of(self.rho), T::of(self.eps), T::of(lr));
        let one = T::one();
        let eg = slot.accum_grad_sq.data_mut();
        let ed = slot.accum_update_sq.data_mut();
        for (i, (p, &g)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
            eg[i] = rho * eg[i] + (one - rho) * g * g;
            let delta = -((ed[i] + eps).sqrt() / (eg[i] + eps).sqrt()) * g;
            ed[i] = rho * ed[i] + (one - rho) * delta * delta;
            *p += lr * delta;
        }
        Ok(())
    }

    /// Apply `grads` to every trainable parameter that has one.
    pub fn step<T: Scalar>(&self, store: &mut ParamStore<T>, grads: &GradBuffer<T>) -> Result<()> {
        for (name, param) in store.iter_mut() {
            if !param.trainable {
                continue;
            }
            let Some(g) = grads.get(name) else { continue };
            let lr = self.lr_for(name);
            let slot = param.slot.get_or_insert_with(|| AdaDeltaSlot::zeros_like(&param.value));
            let value = std::sync::Arc::make_mut(&mut param.value);
            self.update(value, g, slot, lr)?;
        }
        Ok(())
    }
}
