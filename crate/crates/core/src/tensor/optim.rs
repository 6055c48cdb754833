//! Adaptive-moment optimizer over a [`ParamStore`].

use super::params::ParamStore;
use ndarray::ArrayD;
use std::collections::BTreeMap;

/// Adam with bias correction. State is keyed by parameter name, so the same
/// optimizer instance keeps working as long as shapes do not change.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: BTreeMap<String, ArrayD<f64>>,
    v: BTreeMap<String, ArrayD<f64>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn with_defaults(lr: f64) -> Self {
        Adam::new(lr, 0.9, 0.999)
    }

    /// Applies one update from the gradients currently held by trainable
    /// parameters, then leaves gradients untouched (callers zero them).
    pub fn step(&mut self, params: &ParamStore) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, p) in params.iter() {
            if !p.trainable() {
                continue;
            }
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(p.value().raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(p.value().raw_dim()));
            {
                let g = p.grad();
                ndarray::Zip::from(&mut *m).and(&*g).for_each(|m, &g| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                });
                ndarray::Zip::from(&mut *v).and(&*g).for_each(|v, &g| {
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                });
            }
            let lr = self.lr;
            let eps = self.eps;
            let mv = m.view();
            let vv = v.view();
            let mut value = p.value().clone();
            ndarray::Zip::from(&mut value)
                .and(&mv)
                .and(&vv)
                .for_each(|w, &m, &v| {
                    let mhat = m / bc1;
                    let vhat = v / bc2;
                    *w -= lr * mhat / (vhat.sqrt() + eps);
                });
            p.set_value(value);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use ndarray::arr1;

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let p = store.add("x", arr1(&[5.0, -3.0]).into_dyn(), true);
        let mut opt = Adam::with_defaults(0.1);
        for _ in 0..400 {
            store.zero_grad();
            let x = Tensor::from_param(&p);
            let loss = x.square().sum();
            loss.backward();
            opt.step(&store);
        }
        for v in p.value().iter() {
            assert!(v.abs() < 1e-3, "did not converge: {v}");
        }
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let mut store = ParamStore::new();
        let p = store.add("frozen", arr1(&[1.0]).into_dyn(), false);
        let q = store.add("free", arr1(&[1.0]).into_dyn(), true);
        let mut opt = Adam::with_defaults(0.05);
        for _ in 0..10 {
            store.zero_grad();
            let a = Tensor::from_param(&p);
            let b = Tensor::from_param(&q);
            a.mul(&b).sum().backward();
            opt.step(&store);
        }
        assert_eq!(p.value()[[0]], 1.0);
        assert!(q.value()[[0]] < 1.0);
    }
}
