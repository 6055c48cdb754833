//! Named parameter storage shared between models, optimizers and checkpoints.

use ndarray::{ArrayD, IxDyn};
use sha2::{Digest, Sha256};
use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;
use std::rc::Rc;

/// One named weight array with its gradient accumulator.
pub struct Parameter {
    name: String,
    value: RefCell<ArrayD<f64>>,
    grad: RefCell<ArrayD<f64>>,
    trainable: Cell<bool>,
}

impl Parameter {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> std::cell::Ref<'_, ArrayD<f64>> {
        self.value.borrow()
    }

    pub fn set_value(&self, v: ArrayD<f64>) {
        assert_eq!(v.shape(), self.value.borrow().shape(), "parameter shape change");
        *self.value.borrow_mut() = v;
    }

    pub fn grad(&self) -> std::cell::Ref<'_, ArrayD<f64>> {
        self.grad.borrow()
    }

    pub fn trainable(&self) -> bool {
        self.trainable.get()
    }

    pub fn set_trainable(&self, t: bool) {
        self.trainable.set(t);
    }

    pub(crate) fn accumulate_grad(&self, g: &ArrayD<f64>) {
        *self.grad.borrow_mut() += g;
    }

    pub fn zero_grad(&self) {
        self.grad.borrow_mut().fill(0.0);
    }

    /// In-place update used by optimizers.
    pub fn update(&self, f: impl FnMut(&mut f64, &f64)) {
        let mut v = self.value.borrow_mut();
        let g = self.grad.borrow();
        ndarray::Zip::from(&mut *v).and(&*g).for_each(f);
    }
}

/// Ordered (by name) collection of parameters. Iteration order is
/// deterministic, which keeps optimizers and checkpoints reproducible.
#[derive(Default)]
pub struct ParamStore {
    params: BTreeMap<String, Rc<Parameter>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: ArrayD<f64>, trainable: bool) -> Rc<Parameter> {
        assert!(
            !self.params.contains_key(name),
            "duplicate parameter name: {name}"
        );
        let shape = value.shape().to_vec();
        let p = Rc::new(Parameter {
            name: name.to_string(),
            value: RefCell::new(value),
            grad: RefCell::new(ArrayD::zeros(IxDyn(&shape))),
            trainable: Cell::new(trainable),
        });
        self.params.insert(name.to_string(), Rc::clone(&p));
        p
    }

    pub fn get(&self, name: &str) -> Option<Rc<Parameter>> {
        self.params.get(name).cloned()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Rc<Parameter>)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn zero_grad(&self) {
        for p in self.params.values() {
            p.zero_grad();
        }
    }

    pub fn set_all_trainable(&self, t: bool) {
        for p in self.params.values() {
            p.set_trainable(t);
        }
    }

    /// Global L2 norm over trainable gradients.
    pub fn grad_norm(&self) -> f64 {
        let mut acc = 0.0;
        for p in self.params.values() {
            if p.trainable() {
                acc += p.grad().iter().map(|g| g * g).sum::<f64>();
            }
        }
        acc.sqrt()
    }

    /// Scales trainable gradients down so the global norm is at most `max_norm`.
    pub fn clip_grad_norm(&self, max_norm: f64) {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            for p in self.params.values() {
                if p.trainable() {
                    p.grad.borrow_mut().mapv_inplace(|g| g * s);
                }
            }
        }
    }

    /// SHA-256 over parameter names and raw value bytes, in name order.
    /// Used by the frozen-module guarantees.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, p) in &self.params {
            h.update(name.as_bytes());
            h.update([0u8]);
            for v in p.value().iter() {
                h.update(v.to_le_bytes());
            }
        }
        hex_string(&h.finalize())
    }
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        use std::fmt::Write;
        let _ = write!(s, "{b:02x}");
    }
    s
}
