//! Adam with an inverse-square-root learning-rate schedule.

use super::params::{Arr, GradStore, ParamId, ParamStore};

pub struct Adam {
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup: u64,
    pub step: u64,
    m: Vec<Arr>,
    v: Vec<Arr>,
}

impl Adam {
    pub fn new(store: &ParamStore, base_lr: f64, beta1: f64, beta2: f64, eps: f64, warmup: u64) -> Self {
        let m = store.ids().map(|id| store.value(id).mapv(|_| 0.0)).collect();
        let v = store.ids().map(|id| store.value(id).mapv(|_| 0.0)).collect();
        Adam { base_lr, beta1, beta2, eps, warmup, step: 0, m, v }
    }

    /// Linear warmup to `base_lr`, then 1/sqrt(step) decay.
    pub fn lr_at(&self, step: u64) -> f64 {
        let s = step.max(1) as f64;
        if self.warmup == 0 {
            return self.base_lr / s.sqrt();
        }
        let w = self.warmup as f64;
        self.base_lr * (s / w).min((w / s).sqrt())
    }

    /// One update over every parameter that received a gradient.
    pub fn apply(&mut self, store: &mut ParamStore, grads: &GradStore) {
        self.step += 1;
        let lr = self.lr_at(self.step);
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for id in store.ids() {
            let g = match grads.get(id) {
                Some(g) => g,
                None => continue,
            };
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            *m = &*m * self.beta1 + g * (1.0 - self.beta1);
            *v = &*v * self.beta2 + &(g * g) * (1.0 - self.beta2);
            let p = store.value_mut(id);
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                let mhat = m / bc1;
                let vhat = v / bc2;
                *p -= lr * mhat / (vhat.sqrt() + self.eps);
            });
        }
    }

    /// Moment arrays for checkpointing, in `ParamId` order.
    pub fn state(&self) -> (&[Arr], &[Arr]) {
        (&self.m, &self.v)
    }

    pub fn restore(&mut self, m: Vec<Arr>, v: Vec<Arr>, step: u64) {
        assert_eq!(m.len(), self.m.len());
        assert_eq!(v.len(), self.v.len());
        self.m = m;
        self.v = v;
        self.step = step;
    }

    pub fn moment_for(&self, id: ParamId) -> (&Arr, &Arr) {
        (&self.m[id.0], &self.v[id.0])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params;

    #[test]
    fn warmup_then_decay() {
        let store = ParamStore::new();
        let adam = Adam::new(&store, 1e-3, 0.9, 0.98, 1e-9, 400);
        assert!(adam.lr_at(1) < adam.lr_at(400));
        assert!((adam.lr_at(400) - 1e-3).abs() < 1e-12);
        assert!(adam.lr_at(1600) < adam.lr_at(400));
        assert!((adam.lr_at(1600) - 1e-3 * 0.5).abs() < 1e-12);
    }

    #[test]
    fn descends_on_quadratic() {
        // Minimize (p - 3)^2 elementwise.
        let mut store = ParamStore::new();
        let id = store.add("p", params::zeros(&[2, 2]));
        let mut adam = Adam::new(&store, 0.1, 0.9, 0.98, 1e-9, 1);
        for _ in 0..500 {
            let mut grads = GradStore::new(&store);
            let g = store.value(id).mapv(|p| 2.0 * (p - 3.0));
            grads.accumulate(id, &g);
            adam.apply(&mut store, &grads);
        }
        for &x in store.value(id).iter() {
            assert!((x - 3.0).abs() < 1e-2, "got {x}");
        }
    }
}
