use std::sync::atomic::{AtomicU64, Ordering};

use super::tape::{Grads, Tape};
use super::Tensor;
use crate::error::{Error, Result};

static NEXT_UID: AtomicU64 = AtomicU64::new(1);

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// A named trainable tensor with its Adam state.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Vec<f64>>,
    pub adam_m: Vec<f64>,
    pub adam_v: Vec<f64>,
    pub step_count: u64,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let n = value.numel();
        Parameter {
            name: name.into(),
            value,
            grad: None,
            adam_m: vec![0.0; n],
            adam_v: vec![0.0; n],
            step_count: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One Adam update with bias correction over every parameter; grads are cleared.
///
/// Fails before touching any value if a parameter has no gradient.
pub fn adam_step(params: &mut [Parameter], cfg: &AdamConfig) -> Result<()> {
    if let Some(p) = params.iter().find(|p| p.grad.is_none()) {
        return Err(Error::MissingGrad(p.name.clone()));
    }
    for p in params.iter_mut() {
        let g = p.grad.take().expect("checked above");
        p.step_count += 1;
        let t = p.step_count as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let data = p.value.data_mut();
        for i in 0..data.len() {
            p.adam_m[i] = cfg.beta1 * p.adam_m[i] + (1.0 - cfg.beta1) * g[i];
            p.adam_v[i] = cfg.beta2 * p.adam_v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let mhat = p.adam_m[i] / bc1;
            let vhat = p.adam_v[i] / bc2;
            data[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Owner of a network's parameters.
///
/// A store is bound to tapes read-only; gradients come back through
/// [`ParamStore::accumulate`] at the synchronization point.
#[derive(Debug)]
pub struct ParamStore {
    uid: u64,
    params: Vec<Parameter>,
    frozen: bool,
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        ParamStore {
            uid: NEXT_UID.fetch_add(1, Ordering::Relaxed),
            params: self.params.clone(),
            frozen: self.frozen,
        }
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            uid: NEXT_UID.fetch_add(1, Ordering::Relaxed),
            params: Vec::new(),
            frozen: false,
        }
    }

    pub fn uid(&self) -> u64 {
        self.uid
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.params.push(Parameter::new(name, value));
        ParamId(self.params.len() - 1)
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

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Frozen stores bind as constants and ignore optimizer steps.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Add the gradients of every parameter this store bound on `tape`.
    /// A bound parameter that the loss never reached receives an explicit zero.
    pub fn accumulate(&mut self, tape: &Tape, grads: &Grads) {
        if self.frozen {
            return;
        }
        for (idx, var) in tape.bindings_for(self.uid) {
            let p = &mut self.params[idx];
            let n = p.value.numel();
            let slot = p.grad.get_or_insert_with(|| vec![0.0; n]);
            if let Some(g) = grads.get(var) {
                for (s, x) in slot.iter_mut().zip(g) {
                    *s += x;
                }
            }
        }
    }

    /// Gradients of this store's parameters on `tape`, in store order, without
    /// touching the store. A bound parameter the loss never reached gets zeros.
    pub fn collect_grads(&self, tape: &Tape, grads: &Grads) -> Vec<Option<Vec<f64>>> {
        let mut out: Vec<Option<Vec<f64>>> = vec![None; self.params.len()];
        if self.frozen {
            return out;
        }
        for (idx, var) in tape.bindings_for(self.uid) {
            let n = self.params[idx].value.numel();
            let slot = out[idx].get_or_insert_with(|| vec![0.0; n]);
            if let Some(g) = grads.get(var) {
                for (s, x) in slot.iter_mut().zip(g) {
                    *s += x;
                }
            }
        }
        out
    }

    /// Add raw gradient arrays (one per parameter, store order) as produced
    /// by [`ParamStore::take_grads`] on a worker copy.
    pub fn add_grads(&mut self, grads: &[Option<Vec<f64>>]) {
        for (p, g) in self.params.iter_mut().zip(grads) {
            if let Some(g) = g {
                let n = p.value.numel();
                let slot = p.grad.get_or_insert_with(|| vec![0.0; n]);
                for (s, x) in slot.iter_mut().zip(g) {
                    *s += x;
                }
            }
        }
    }

    pub fn take_grads(&mut self) -> Vec<Option<Vec<f64>>> {
        self.params.iter_mut().map(|p| p.grad.take()).collect()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub fn scale_grads(&mut self, k: f64) {
        for g in self.params.iter_mut().filter_map(|p| p.grad.as_mut()) {
            g.iter_mut().for_each(|x| *x *= k);
        }
    }

    /// Fill absent grads with zeros (for parameters legitimately idle this step).
    pub fn fill_missing_grads(&mut self) {
        for p in &mut self.params {
            if p.grad.is_none() {
                p.grad = Some(vec![0.0; p.value.numel()]);
            }
        }
    }

    pub fn grads_finite(&self) -> bool {
        self.params
            .iter()
            .filter_map(|p| p.grad.as_ref())
            .all(|g| g.iter().all(|x| x.is_finite()))
    }

    pub fn step(&mut self, cfg: &AdamConfig) -> Result<()> {
        if self.frozen {
            self.zero_grads();
            return Ok(());
        }
        adam_step(&mut self.params, cfg)
    }

    /// Name/value pairs in store order, for serialization.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect()
    }

    /// Overwrite values by name; every parameter must be present with its shape.
    pub fn load_named(&mut self, tensors: &[(String, Tensor)]) -> Result<()> {
        for p in &mut self.params {
            let (_, t) = tensors
                .iter()
                .find(|(n, _)| *n == p.name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks parameter `{}`", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(Error::shape(
                    "checkpoint",
                    format!("`{}` is {:?}, expected {:?}", p.name, t.shape(), p.value.shape()),
                ));
            }
            p.value = t.clone();
        }
        Ok(())
    }
}
