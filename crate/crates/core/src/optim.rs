//! Adaptive-moment optimizer with inspectable state so that checkpoints can
//! carry it.

use std::collections::BTreeMap;

use candle_core::{backprop::GradStore, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

struct Slot {
    var: Var,
    m: Tensor,
    v: Tensor,
}

/// One optimizer group. Parameters that get no gradient in a step are left
/// untouched, moments included.
pub struct Adam {
    pub config: AdamConfig,
    steps: u64,
    slots: BTreeMap<String, Slot>,
}

impl Adam {
    pub fn new(vars: Vec<(String, Var)>, config: AdamConfig) -> Result<Self> {
        let mut slots = BTreeMap::new();
        for (name, var) in vars {
            let m = var.as_tensor().zeros_like()?;
            let v = m.clone();
            if slots.insert(name.clone(), Slot { var, m, v }).is_some() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` registered twice in one optimizer group"
                )));
            }
        }
        Ok(Self {
            config,
            steps: 0,
            slots,
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.slots.keys().map(String::as_str)
    }

    pub fn contains(&self, var: &Var) -> bool {
        self.slots
            .values()
            .any(|s| s.var.as_tensor().id() == var.as_tensor().id())
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.steps += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.steps as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for slot in self.slots.values_mut() {
            let Some(g) = grads.get(slot.var.as_tensor()) else {
                continue;
            };
            // gradients carry autograd history; keep the moments detached
            let g = g.detach();
            slot.m = ((&slot.m * beta1)? + (&g * (1.0 - beta1))?)?.detach();
            slot.v = ((&slot.v * beta2)? + (g.sqr()? * (1.0 - beta2))?)?.detach();
            let m_hat = (&slot.m / bc1)?;
            let v_hat = (&slot.v / bc2)?;
            let update = (m_hat / (v_hat.sqrt()? + eps)?)?;
            let next = (slot.var.as_tensor().detach() - (update * lr)?)?;
            slot.var.set(&next)?;
        }
        Ok(())
    }

    /// Moment tensors keyed `<param>.m` / `<param>.v`.
    pub fn state_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(self.slots.len() * 2);
        for (name, s) in &self.slots {
            out.push((format!("{name}.m"), s.m.clone()));
            out.push((format!("{name}.v"), s.v.clone()));
        }
        out
    }

    pub fn load_state(
        &mut self,
        steps: u64,
        mut lookup: impl FnMut(&str) -> Option<Tensor>,
    ) -> Result<()> {
        for (name, s) in self.slots.iter_mut() {
            for (suffix, slot) in [("m", &mut s.m), ("v", &mut s.v)] {
                let key = format!("{name}.{suffix}");
                let t = lookup(&key).ok_or_else(|| Error::MissingKey(key.clone()))?;
                if t.dims() != slot.dims() {
                    return Err(Error::ShapeMismatch {
                        name: key,
                        expected: slot.dims().to_vec(),
                        found: t.dims().to_vec(),
                    });
                }
                *slot = t.to_dtype(slot.dtype())?;
            }
        }
        self.steps = steps;
        Ok(())
    }
}
