use std::collections::BTreeMap;

use super::tape::Mat;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
struct Slot {
    value: Mat,
    first_moment: Mat,
    second_moment: Mat,
    step: u64,
}

/// Named trainable parameters with their Adam state, plus non-trainable
/// buffers (batch-norm running statistics).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Slot>,
    buffers: BTreeMap<String, Mat>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Mat) -> Result<()> {
        if self.params.contains_key(name) || self.buffers.contains_key(name) {
            return Err(Error::Argument(format!("parameter `{name}` already exists")));
        }
        let zeros = Mat::zeros(value.dim());
        self.params.insert(
            name.to_string(),
            Slot {
                value,
                first_moment: zeros.clone(),
                second_moment: zeros,
                step: 0,
            },
        );
        Ok(())
    }

    pub fn insert_buffer(&mut self, name: &str, value: Mat) -> Result<()> {
        if self.params.contains_key(name) || self.buffers.contains_key(name) {
            return Err(Error::Argument(format!("parameter `{name}` already exists")));
        }
        self.buffers.insert(name.to_string(), value);
        Ok(())
    }

    /// Parameter or buffer value.
    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.params
            .get(name)
            .map(|s| &s.value)
            .or_else(|| self.buffers.get(name))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat> {
        match self.params.get_mut(name) {
            Some(s) => Some(&mut s.value),
            None => self.buffers.get_mut(name),
        }
    }

    pub fn is_buffer(&self, name: &str) -> bool {
        self.buffers.contains_key(name)
    }

    pub fn step_count(&self, name: &str) -> Option<u64> {
        self.params.get(name).map(|s| s.step)
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    /// Parameters and buffers in path order.
    pub fn entries(&self) -> impl Iterator<Item = (&str, &Mat)> {
        let mut all: Vec<(&str, &Mat)> = self
            .params
            .iter()
            .map(|(k, s)| (k.as_str(), &s.value))
            .chain(self.buffers.iter().map(|(k, v)| (k.as_str(), v)))
            .collect();
        all.sort_by(|a, b| a.0.cmp(b.0));
        all.into_iter()
    }

    pub fn n_scalars(&self) -> usize {
        self.params.values().map(|s| s.value.len()).sum()
    }

    /// Moves every entry of `other` into `self`, failing on name clashes.
    pub fn merge(&mut self, other: ParamStore) -> Result<()> {
        for (k, s) in other.params {
            if self.get(&k).is_some() {
                return Err(Error::Argument(format!("parameter `{k}` already exists")));
            }
            self.params.insert(k, s);
        }
        for (k, v) in other.buffers {
            if self.get(&k).is_some() {
                return Err(Error::Argument(format!("parameter `{k}` already exists")));
            }
            self.buffers.insert(k, v);
        }
        Ok(())
    }

    /// Entries whose path starts with `prefix`, with fresh optimizer state.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        let mut out = ParamStore::new();
        for (k, s) in self.params.iter().filter(|(k, _)| k.starts_with(prefix)) {
            out.insert(k, s.value.clone()).expect("unique");
        }
        for (k, v) in self.buffers.iter().filter(|(k, _)| k.starts_with(prefix)) {
            out.insert_buffer(k, v.clone()).expect("unique");
        }
        out
    }

    pub fn set_buffer(&mut self, name: &str, value: Mat) -> Result<()> {
        match self.buffers.get_mut(name) {
            Some(b) if b.dim() == value.dim() => {
                *b = value;
                Ok(())
            }
            Some(b) => Err(Error::Dimension(format!(
                "buffer `{name}` is {:?}, update is {:?}",
                b.dim(),
                value.dim()
            ))),
            None => Err(Error::Argument(format!("unknown buffer `{name}`"))),
        }
    }

    /// Applies one optimizer step using only the gradients of parameters this
    /// store holds, then writes any recorded buffer updates it owns.
    pub fn update_owned(
        &mut self,
        grads: &BTreeMap<String, Mat>,
        buffer_updates: &[(String, Mat)],
        cfg: &AdamConfig,
    ) -> Result<()> {
        let own: BTreeMap<String, Mat> = grads
            .iter()
            .filter(|(k, _)| self.params.contains_key(k.as_str()))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        self.adam_step(&own, cfg)?;
        for (name, value) in buffer_updates {
            if self.buffers.contains_key(name) {
                self.set_buffer(name, value.clone())?;
            }
        }
        Ok(())
    }

    /// One bias-corrected Adam update for every parameter that has a
    /// gradient. Parameters without a gradient keep their value and state.
    pub fn adam_step(&mut self, grads: &BTreeMap<String, Mat>, cfg: &AdamConfig) -> Result<()> {
        for (name, g) in grads {
            let slot = self
                .params
                .get(name)
                .ok_or_else(|| Error::Argument(format!("gradient for unknown parameter `{name}`")))?;
            if slot.value.dim() != g.dim() {
                return Err(Error::Dimension(format!(
                    "gradient for `{name}` is {:?}, parameter is {:?}",
                    g.dim(),
                    slot.value.dim()
                )));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Training(format!(
                    "non-finite gradient for parameter `{name}`"
                )));
            }
        }
        for (name, g) in grads {
            let slot = self.params.get_mut(name).expect("checked above");
            slot.step += 1;
            let t = slot.step as i32;
            let bc1 = 1.0 - cfg.beta1.powi(t);
            let bc2 = 1.0 - cfg.beta2.powi(t);
            ndarray::Zip::from(&mut slot.value)
                .and(&mut slot.first_moment)
                .and(&mut slot.second_moment)
                .and(g)
                .for_each(|p, m, v, &gv| {
                    *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * gv;
                    *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * gv * gv;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
                });
            if slot.value.iter().any(|v| !v.is_finite()) {
                return Err(Error::Training(format!(
                    "parameter `{name}` became non-finite"
                )));
            }
        }
        Ok(())
    }
}
