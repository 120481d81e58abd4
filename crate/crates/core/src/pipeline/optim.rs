//! Adam over a named set of candle variables.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use super::config::AdamConfig;
use crate::error::{Error, Result};

#[derive(Debug)]
struct Slot {
    name: String,
    var: Var,
    m: Tensor,
    v: Tensor,
}

/// Adam with bias correction. Parameters without a gradient in a step are left untouched.
#[derive(Debug)]
pub struct Adam {
    cfg: AdamConfig,
    slots: Vec<Slot>,
    t: u64,
}

impl Adam {
    pub fn new(vars: Vec<(String, Var)>, cfg: AdamConfig) -> Result<Self> {
        cfg.validate()?;
        let slots = vars
            .into_iter()
            .map(|(name, var)| {
                let m = var.as_tensor().zeros_like()?;
                let v = m.clone();
                Ok(Slot { name, var, m, v })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { cfg, slots, t: 0 })
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.t += 1;
        let AdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            eps,
        } = self.cfg;
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for slot in &mut self.slots {
            let Some(g) = grads.get(slot.var.as_tensor()) else {
                continue;
            };
            // moments must not keep the autograd history of earlier steps alive
            let g = g.detach();
            let m = (slot.m.affine(b1, 0.0)? + g.affine(1.0 - b1, 0.0)?)?;
            let v = (slot.v.affine(b2, 0.0)? + g.sqr()?.affine(1.0 - b2, 0.0)?)?;
            let m_hat = m.affine(1.0 / c1, 0.0)?;
            let v_hat = v.affine(1.0 / c2, 0.0)?;
            let update = m_hat.div(&(v_hat.sqrt()? + eps)?)?.affine(lr, 0.0)?;
            slot.var.set(&slot.var.as_tensor().detach().sub(&update)?)?;
            slot.m = m;
            slot.v = v;
        }
        Ok(())
    }

    /// Moment estimates keyed as `<param>.m` / `<param>.v`.
    pub fn state(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for s in &self.slots {
            out.insert(format!("{}.m", s.name), s.m.clone());
            out.insert(format!("{}.v", s.name), s.v.clone());
        }
        out
    }

    pub fn load_state(&mut self, state: &BTreeMap<String, Tensor>, steps: u64) -> Result<()> {
        for s in &mut self.slots {
            for (suffix, slot) in [("m", &mut s.m), ("v", &mut s.v)] {
                let key = format!("{}.{suffix}", s.name);
                let t = state
                    .get(&key)
                    .ok_or_else(|| Error::Config(format!("optimizer state {key} missing")))?;
                if t.dims() != slot.dims() {
                    return Err(Error::shape(format!("optimizer state {key}: {:?} vs {:?}", t.dims(), slot.dims())));
                }
                *slot = t.to_dtype(slot.dtype())?.to_device(slot.device())?;
            }
        }
        self.t = steps;
        Ok(())
    }
}
