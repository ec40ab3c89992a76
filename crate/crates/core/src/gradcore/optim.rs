use serde::{Deserialize, Serialize};

use super::array::Array;
use super::tape::Gradients;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A trainable array with its gradient accumulator and optimizer moments.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Array,
    pub grad: Array,
    pub m: Array,
    pub v: Array,
    pub step: u64,
}

impl Parameter {
    fn new(name: String, value: Array) -> Self {
        let zeros = Array::zeros(value.shape());
        Self { name, grad: zeros.clone(), m: zeros.clone(), v: zeros, value, step: 0 }
    }
}

/// Named collection of parameters owned by one model.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    frozen: bool,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique within a store.
    pub fn add(&mut self, name: impl Into<String>, value: Array) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter name {name}");
        self.params.push(Parameter::new(name, value));
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Array {
        &self.params[id.0].value
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Frozen stores bind parameters as constants on a tape.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Adds tape gradients into the accumulators.
    pub fn accumulate(&mut self, grads: &Gradients) -> Result<()> {
        self.accumulate_scaled(grads, 1.0)
    }

    pub fn accumulate_scaled(&mut self, grads: &Gradients, scale: f64) -> Result<()> {
        for (id, g) in grads.params() {
            let p = &mut self.params[id.0];
            if p.grad.shape() != g.shape() {
                return Err(Error::shape(
                    "accumulate",
                    format!("{}: grad {:?} for value {:?}", p.name, g.shape(), p.value.shape()),
                ));
            }
            for (a, b) in p.grad.data_mut().iter_mut().zip(g.data()) {
                *a += scale * b;
            }
        }
        Ok(())
    }

    /// Global L2 norm of all accumulated gradients.
    pub fn grad_norm(&self) -> f64 {
        self.params.iter().map(|p| p.grad.data().iter().map(|g| g * g).sum::<f64>()).sum::<f64>().sqrt()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Rescale gradients whose global norm exceeds this value.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.99, eps: 1e-8, weight_decay: 0.0, clip_norm: None }
    }
}

/// Outcome of one optimizer step.
#[derive(Clone, Debug, Default)]
pub struct StepReport {
    /// Parameters whose gradient held a non-finite value and were left untouched.
    pub skipped: Vec<String>,
    pub grad_norm: f64,
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, Default)]
pub struct AdamW {
    pub config: AdamWConfig,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self { config }
    }

    pub fn step(&self, store: &mut ParamStore) -> StepReport {
        let c = &self.config;
        let mut report = StepReport::default();
        let finite_norm = store
            .params
            .iter()
            .filter(|p| p.grad.all_finite())
            .map(|p| p.grad.data().iter().map(|g| g * g).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        report.grad_norm = finite_norm;
        let factor = match c.clip_norm {
            Some(max) if finite_norm > max => max / finite_norm,
            _ => 1.0,
        };
        for p in &mut store.params {
            if !p.grad.all_finite() {
                report.skipped.push(p.name.clone());
                continue;
            }
            p.step += 1;
            let t = p.step as i32;
            let bc1 = 1.0 - c.beta1.powi(t);
            let bc2 = 1.0 - c.beta2.powi(t);
            let g = p.grad.data();
            let m = p.m.data_mut();
            for (mi, gi) in m.iter_mut().zip(g) {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi * factor;
            }
            let v = p.v.data_mut();
            for (vi, gi) in v.iter_mut().zip(g) {
                let gs = gi * factor;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gs * gs;
            }
            let (m, v) = (p.m.data(), p.v.data());
            for (i, x) in p.value.data_mut().iter_mut().enumerate() {
                *x -= c.lr * c.weight_decay * *x;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                *x -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        report
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(value: f64, grad: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Array::scalar(value));
        s.get_mut(id).grad = Array::scalar(grad);
        (s, id)
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let (mut s, id) = store_with(1.0, 1.0);
        AdamW::default().step(&mut s);
        // mhat = 1, vhat = 1 → Δ = lr / (1 + eps)
        let want = 1.0 - 1e-4 / (1.0 + 1e-8);
        assert!((s.value(id).item() - want).abs() < 1e-15);
        assert_eq!(s.get(id).step, 1);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let (mut s, id) = store_with(0.37, 0.0);
        AdamW::default().step(&mut s);
        assert_eq!(s.value(id).item(), 0.37);
    }

    #[test]
    fn non_finite_gradient_is_skipped() {
        let (mut s, id) = store_with(2.0, f64::NAN);
        let r = AdamW::default().step(&mut s);
        assert_eq!(r.skipped, vec!["w".to_string()]);
        assert_eq!(s.value(id).item(), 2.0);
        assert_eq!(s.get(id).step, 0);
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let cfg = AdamWConfig { weight_decay: 0.5, lr: 0.1, ..Default::default() };
        let (mut s, id) = store_with(1.0, 0.0);
        AdamW::new(cfg).step(&mut s);
        assert!((s.value(id).item() - 0.95).abs() < 1e-15);
    }
}
