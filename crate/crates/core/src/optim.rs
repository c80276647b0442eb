//! AdamW with decoupled weight decay, and the exponential learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{GradMap, ParameterStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
        }
    }
}

impl AdamW {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }

    /// One update of every parameter in `store`. Each parameter must have a
    /// gradient in `grads`.
    pub fn step(&self, store: &mut ParameterStore, grads: &GradMap) -> Result<()> {
        let names: Vec<String> = store.names().map(str::to_string).collect();
        if let Some(missing) = names.iter().find(|n| !grads.contains_key(*n)) {
            return Err(Error::Usage(format!("no gradient for parameter {missing}")));
        }
        for name in names {
            let g = &grads[&name];
            let (p, st) = store.param_and_state_mut(&name).expect("name from store");
            if g.shape() != p.shape() {
                return Err(Error::dim("adamw_step", p.shape(), g.shape()));
            }
            st.step += 1;
            let t = st.step as i32;
            let bc1 = 1.0 - self.beta1.powi(t);
            let bc2 = 1.0 - self.beta2.powi(t);
            let decay = 1.0 - self.lr * self.weight_decay;
            let (pd, md, vd) = (p.data_mut(), st.m.data_mut(), st.v.data_mut());
            for (i, &gi) in g.data().iter().enumerate() {
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * gi;
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                pd[i] = pd[i] * decay - self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

pub const LR_DECAY: f64 = 0.95;

/// `lr0 · 0.95^epoch`.
pub fn lr_schedule(lr0: f64, epoch: usize) -> f64 {
    lr0 * LR_DECAY.powi(epoch as i32)
}
