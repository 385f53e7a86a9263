use std::collections::HashMap;
use std::sync::Arc;

use super::{DiffError, ParamGrads, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Named parameters with their Adam moments and a global step counter.
///
/// Names are unique and a parameter's shape never changes after creation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    names: Vec<String>,
    values: Vec<Arc<Tensor>>,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: u64,
    index: HashMap<String, ParamId>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> Result<ParamId, DiffError> {
        if self.index.contains_key(name) {
            return Err(DiffError::DuplicateParam(name.to_owned()));
        }
        let id = ParamId(self.values.len());
        self.first.push(Tensor::zeros(value.shape().to_vec()));
        self.second.push(Tensor::zeros(value.shape().to_vec()));
        self.values.push(Arc::new(value));
        self.names.push(name.to_owned());
        self.index.insert(name.to_owned(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Result<ParamId, DiffError> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| DiffError::UnknownParam(name.to_owned()))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub(crate) fn value_arc(&self, id: ParamId) -> Arc<Tensor> {
        self.values[id.0].clone()
    }

    pub fn moments(&self, id: ParamId) -> (&Tensor, &Tensor) {
        (&self.first[id.0], &self.second[id.0])
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Overwrites a parameter value, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<(), DiffError> {
        if value.shape() != self.values[id.0].shape() {
            return Err(DiffError::ParamShape {
                name: self.names[id.0].clone(),
                expected: self.values[id.0].shape().to_vec(),
                got: value.shape().to_vec(),
            });
        }
        self.values[id.0] = Arc::new(value);
        Ok(())
    }

    /// Restores moments and the step counter (checkpoint loading).
    pub fn set_state(&mut self, id: ParamId, first: Tensor, second: Tensor) -> Result<(), DiffError> {
        let expected = self.values[id.0].shape();
        for t in [&first, &second] {
            if t.shape() != expected {
                return Err(DiffError::ParamShape {
                    name: self.names[id.0].clone(),
                    expected: expected.to_vec(),
                    got: t.shape().to_vec(),
                });
            }
        }
        self.first[id.0] = first;
        self.second[id.0] = second;
        Ok(())
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    /// One bias-corrected Adam update of `trainable` parameters. A trainable
    /// parameter without a gradient is skipped with a warning. The step
    /// counter advances once per call.
    pub fn adam_step(&mut self, grads: &ParamGrads, lr: f64, trainable: &[ParamId], cfg: AdamConfig) {
        self.step += 1;
        let t = self.step as f64;
        let c1 = 1.0 - cfg.beta1.powf(t);
        let c2 = 1.0 - cfg.beta2.powf(t);
        for &id in trainable {
            let Some(g) = grads.get(id) else {
                log::warn!("no gradient for parameter `{}`; skipped", self.names[id.0]);
                continue;
            };
            let m = self.first[id.0].data_mut();
            let v = self.second[id.0].data_mut();
            let p = Arc::make_mut(&mut self.values[id.0]).data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p[i] -= lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
    }
}
