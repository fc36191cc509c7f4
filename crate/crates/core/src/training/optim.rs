use std::collections::BTreeMap;

use candle_core::{backprop::GradStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.0, beta2: 0.99, eps: 1e-8 }
    }
}

/// Adam with bias correction. Moments are kept per parameter name so they
/// can be checkpointed alongside the weights.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub config: AdamConfig,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64, config: AdamConfig) -> Result<Self> {
        let zeros = |_: ()| -> Result<BTreeMap<String, Tensor>> {
            store.trainable().map(|(n, v)| Ok((n.to_string(), v.as_tensor().zeros_like()?))).collect()
        };
        Ok(Self { lr, config, step: 0, m: zeros(())?, v: zeros(())? })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&BTreeMap<String, Tensor>, &BTreeMap<String, Tensor>) {
        (&self.m, &self.v)
    }

    /// Restores moments and the step counter; every moment must match the
    /// shape of an existing one.
    pub fn restore(&mut self, step: u64, m: BTreeMap<String, Tensor>, v: BTreeMap<String, Tensor>) -> Result<()> {
        for (which, cur, new) in [("first", &self.m, &m), ("second", &self.v, &v)] {
            for (name, t) in cur {
                let n = new
                    .get(name)
                    .ok_or_else(|| Error::Checkpoint(format!("missing {which} moment for '{name}'")))?;
                if n.dims() != t.dims() {
                    return Err(Error::Checkpoint(format!(
                        "{which} moment for '{name}' has shape {:?}, expected {:?}",
                        n.dims(),
                        t.dims()
                    )));
                }
            }
            if new.len() != cur.len() {
                return Err(Error::Checkpoint(format!("{which} moments do not match the parameter set")));
            }
        }
        let dtype = self.m.values().next().map(|t| t.dtype());
        let cast = |map: BTreeMap<String, Tensor>| -> Result<BTreeMap<String, Tensor>> {
            map.into_iter().map(|(k, t)| Ok((k, if let Some(d) = dtype { t.to_dtype(d)? } else { t }))).collect()
        };
        self.m = cast(m)?;
        self.v = cast(v)?;
        self.step = step;
        Ok(())
    }

    /// One update of every trainable parameter in `store` from `grads`.
    pub fn step(&mut self, store: &ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (name, var) in store.trainable() {
            let g = grads.get(name).ok_or_else(|| Error::Config(format!("no gradient for '{name}'")))?;
            let m = self.m.get_mut(name).ok_or_else(|| Error::Config(format!("no optimiser state for '{name}'")))?;
            *m = (m.affine(beta1, 0.0)? + g.affine(1.0 - beta1, 0.0)?)?;
            let v = self.v.get_mut(name).expect("moments share keys");
            *v = (v.affine(beta2, 0.0)? + g.sqr()?.affine(1.0 - beta2, 0.0)?)?;
            let denom = v.affine(1.0 / bc2, 0.0)?.sqrt()?.affine(1.0, eps)?;
            let update = (m.affine(self.lr / bc1, 0.0)? / denom)?;
            var.set(&(var.as_tensor() - update)?)?;
        }
        Ok(())
    }
}

/// Named gradients of every trainable parameter; parameters the loss does
/// not reach get zeros.
pub fn collect_grads(store: &ParamStore, grads: &GradStore) -> Result<BTreeMap<String, Tensor>> {
    store
        .trainable()
        .map(|(n, v)| {
            let g = match grads.get(v.as_tensor()) {
                Some(g) => g.detach(),
                None => v.as_tensor().zeros_like()?,
            };
            Ok((n.to_string(), g))
        })
        .collect()
}

/// Running sum of micro-batch gradients.
#[derive(Debug, Clone, Default)]
pub struct GradAccumulator {
    sums: BTreeMap<String, Tensor>,
    count: usize,
}

impl GradAccumulator {
    pub fn count(&self) -> usize {
        self.count
    }

    pub fn sums(&self) -> &BTreeMap<String, Tensor> {
        &self.sums
    }

    pub fn add(&mut self, grads: BTreeMap<String, Tensor>) -> Result<()> {
        if self.count == 0 {
            self.sums = grads;
        } else {
            for (name, g) in grads {
                let s = self
                    .sums
                    .get_mut(&name)
                    .ok_or_else(|| Error::Config(format!("gradient '{name}' appeared mid-accumulation")))?;
                *s = (&*s + g)?;
            }
        }
        self.count += 1;
        Ok(())
    }

    /// Mean gradient; resets the accumulator.
    pub fn take_mean(&mut self) -> Result<BTreeMap<String, Tensor>> {
        let n = self.count as f64;
        let out = std::mem::take(&mut self.sums)
            .into_iter()
            .map(|(k, s)| Ok((k, s.affine(1.0 / n, 0.0)?)))
            .collect::<Result<_>>()?;
        self.count = 0;
        Ok(out)
    }

    pub fn restore(&mut self, count: usize, sums: BTreeMap<String, Tensor>) {
        self.count = count;
        self.sums = if count == 0 { BTreeMap::new() } else { sums };
    }
}
