use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use super::graph::Gradients;
use super::layers::ParamId;
use super::NnError;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.003,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam state: first/second moments per parameter and the step counter.
#[derive(Clone, Debug)]
pub struct Adam<T: Real = f32> {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<ParamId, (Vec<T>, Vec<T>)>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn moments(&self, id: ParamId) -> Option<(&[T], &[T])> {
        self.moments.get(&id).map(|(m, v)| (m.as_slice(), v.as_slice()))
    }

    /// One bias-corrected update of every parameter present in `grads`.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = (ParamId, &'a mut Tensor<T>)>,
        grads: &Gradients<T>,
    ) -> Result<(), NnError> {
        let mut work = Vec::new();
        for (id, p) in params {
            let Some(g) = grads.get(id) else { continue };
            if g.shape() != p.shape() {
                return Err(NnError::Shape {
                    op: "adam",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            work.push((id, p, g));
        }
        self.step += 1;
        let t = self.step as i32;
        let c = self.config;
        let bc1 = 1.0 - num_traits::Float::powi(c.beta1, t);
        let bc2 = 1.0 - num_traits::Float::powi(c.beta2, t);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (ib1, ib2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let (lr, eps) = (T::lit(c.lr), T::lit(c.eps));
        let (inv_bc1, inv_bc2) = (T::lit(1.0 / bc1), T::lit(1.0 / bc2));
        for (id, p, g) in work {
            let (m, v) = self
                .moments
                .entry(id)
                .or_insert_with(|| (vec![T::zero(); g.len()], vec![T::zero(); g.len()]));
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = b1 * *mi + ib1 * gi;
                *vi = b2 * *vi + ib2 * gi * gi;
                let mhat = *mi * inv_bc1;
                let vhat = *vi * inv_bc2;
                *pi -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
