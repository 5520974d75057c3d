//! Adaptive-moment optimizer with bias correction.

use serde::{Deserialize, Serialize};

use crate::params::ParamStore;
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub first: ParamStore<T>,
    pub second: ParamStore<T>,
}

/// One optimizer may own several parameter groups; they share the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub moments: Vec<Moments<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, groups: &[&ParamStore<T>]) -> Self {
        Self {
            config,
            step: 0,
            moments: groups
                .iter()
                .map(|g| Moments {
                    first: g.zeros_like(),
                    second: g.zeros_like(),
                })
                .collect(),
        }
    }

    /// Applies one update to every group; `params[i]` pairs with `grads[i]`.
    pub fn step(&mut self, params: &mut [&mut ParamStore<T>], grads: &[&ParamStore<T>]) {
        assert_eq!(params.len(), self.moments.len(), "parameter groups");
        assert_eq!(grads.len(), self.moments.len(), "gradient groups");
        self.step += 1;
        let c = self.config;
        let b1 = T::lit(c.beta1);
        let b2 = T::lit(c.beta2);
        let one = T::one();
        let bc1 = T::lit(1.0 - c.beta1.powf(self.step as f64));
        let bc2 = T::lit(1.0 - c.beta2.powf(self.step as f64));
        let lr = T::lit(c.learning_rate);
        let eps = T::lit(c.eps);
        for ((p, g), mom) in params.iter_mut().zip(grads).zip(&mut self.moments) {
            let tensors = p
                .tensors_mut()
                .iter_mut()
                .zip(g.tensors())
                .zip(mom.first.tensors_mut().iter_mut().zip(mom.second.tensors_mut()));
            for ((pt, gt), (mt, vt)) in tensors {
                let it = pt
                    .data_mut()
                    .iter_mut()
                    .zip(gt.data())
                    .zip(mt.data_mut().iter_mut().zip(vt.data_mut()));
                for ((pv, &gv), (mv, vv)) in it {
                    *mv = b1 * *mv + (one - b1) * gv;
                    *vv = b2 * *vv + (one - b2) * gv * gv;
                    let mhat = *mv / bc1;
                    let vhat = *vv / bc2;
                    *pv = *pv - lr * mhat / (vhat.sqrt() + eps);
                }
            }
        }
    }
}
