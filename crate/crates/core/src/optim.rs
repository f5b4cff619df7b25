//! Decoupled-weight-decay Adam with a cosine schedule and per-group rates.

use glitr_substrate::{Real, Tensor};

use crate::params::{GradBuffer, ParamGroup, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupRates {
    pub spatial: f64,
    pub classifier: f64,
    pub locator: f64,
}

impl GroupRates {
    pub fn uniform(lr: f64) -> Self {
        Self {
            spatial: lr,
            classifier: lr,
            locator: lr,
        }
    }

    pub fn get(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Spatial => self.spatial,
            ParamGroup::Classifier => self.classifier,
            ParamGroup::Locator => self.locator,
        }
    }
}

/// Cosine decay from the base rates to zero over `total_steps`. The locator
/// group additionally ramps linearly from 0 during its first `locator_warmup`
/// steps.
#[derive(Debug, Clone, Copy)]
pub struct CosineSchedule {
    pub base: GroupRates,
    pub total_steps: usize,
    pub locator_warmup: usize,
}

impl CosineSchedule {
    pub fn rates(&self, step: usize) -> GroupRates {
        let total = self.total_steps.max(1) as f64;
        let progress = (step as f64 / total).min(1.0);
        let c = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        let ramp = if self.locator_warmup == 0 {
            1.0
        } else {
            (step as f64 / self.locator_warmup as f64).min(1.0)
        };
        GroupRates {
            spatial: self.base.spatial * c,
            classifier: self.base.classifier * c,
            locator: self.base.locator * c * ramp,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW<R> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Tensor<R>>,
    v: Vec<Tensor<R>>,
    steps: Vec<u64>,
}

impl<R: Real> AdamW<R> {
    pub fn new(store: &ParamStore<R>, weight_decay: f64) -> Self {
        let zeros = |_| store.ids().map(|id| Tensor::zeros(store.value(id).shape())).collect::<Vec<_>>();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: zeros(()),
            v: zeros(()),
            steps: vec![0; store.len()],
        }
    }

    /// Updates every trainable parameter that received a gradient.
    pub fn step(&mut self, store: &mut ParamStore<R>, grads: &GradBuffer<R>, rates: &GroupRates) {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let p = store.get(id);
            if !p.trainable {
                continue;
            }
            let Some(g) = grads.get(id) else { continue };
            let lr = rates.get(p.group);
            let wd = if p.decay { self.weight_decay } else { 0.0 };
            let i = id.index();
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let bc1 = 1.0 - self.beta1.powi(t);
            let bc2 = 1.0 - self.beta2.powi(t);
            let (b1, b2) = (R::lit(self.beta1), R::lit(self.beta2));
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let w = store.value_mut(id).data_mut();
            for j in 0..w.len() {
                let gj = g.data()[j];
                m[j] = b1 * m[j] + (R::one() - b1) * gj;
                v[j] = b2 * v[j] + (R::one() - b2) * gj * gj;
                let mhat = m[j].to_f64_lossy() / bc1;
                let vhat = v[j].to_f64_lossy() / bc2;
                let wj = w[j].to_f64_lossy();
                let upd = wj - lr * (mhat / (vhat.sqrt() + self.eps) + wd * wj);
                w[j] = R::lit(upd);
            }
        }
    }
}
