use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Learning rate as a function of the iteration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay from the base rate to `final_lr` over the run.
    Cosine { final_lr: f64 },
}

impl LrSchedule {
    pub fn lr(&self, base: f64, iteration: usize, total: usize) -> f64 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine { final_lr } => {
                if total <= 1 {
                    return base;
                }
                let progress = iteration.min(total - 1) as f64 / (total - 1) as f64;
                final_lr + 0.5 * (base - final_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            LrSchedule::Cosine { final_lr } if !(final_lr >= 0.0) => {
                Err(Error::Config(format!("schedule final_lr must be nonnegative, got {final_lr}")))
            }
            _ => Ok(()),
        }
    }
}

/// Adam with weight decay, either decoupled from the gradient (AdamW) or
/// added to it (classic L2).
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub decoupled: bool,
    step: u64,
    moments: BTreeMap<ParamId, (Tensor, Tensor)>,
}

impl AdamW {
    pub fn new(betas: [f64; 2], eps: f64, weight_decay: f64, decoupled: bool) -> Self {
        Self {
            beta1: betas[0],
            beta2: betas[1],
            eps,
            weight_decay,
            decoupled,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every parameter in `grads`.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)], lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (id, grad) in grads {
            let p = store.get(*id).clone();
            let g = if self.decoupled || self.weight_decay == 0.0 {
                grad.clone()
            } else {
                grad + &(&p * self.weight_decay)
            };
            let (m, v) = self
                .moments
                .entry(*id)
                .or_insert_with(|| (Tensor::zeros(p.raw_dim()), Tensor::zeros(p.raw_dim())));
            m.zip_mut_with(&g, |m, g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            v.zip_mut_with(&g, |v, g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            let decay = if self.decoupled { lr * self.weight_decay } else { 0.0 };
            let target = store.get_mut(*id);
            ndarray::Zip::from(target).and(&*m).and(&*v).for_each(|w, &m, &v| {
                let update = (m / c1) / ((v / c2).sqrt() + self.eps);
                *w -= decay * *w + lr * update;
            });
        }
    }

    /// Moment tensors keyed by parameter name, plus the step counter, for
    /// checkpointing.
    pub fn state(&self, store: &ParamStore) -> Vec<(String, Tensor)> {
        let mut out = vec![("optim.step".to_string(), Tensor::from_elem((1, 1), self.step as f64))];
        for (id, (m, v)) in &self.moments {
            out.push((format!("optim.m.{}", store.name(*id)), m.clone()));
            out.push((format!("optim.v.{}", store.name(*id)), v.clone()));
        }
        out
    }

    pub fn restore(&mut self, store: &ParamStore, state: &std::collections::HashMap<String, Tensor>) -> Result<()> {
        let step = state
            .get("optim.step")
            .ok_or_else(|| Error::Config("checkpoint has no optimizer state".into()))?;
        self.step = step[[0, 0]] as u64;
        self.moments.clear();
        for id in store.ids() {
            let name = store.name(id);
            let m = state.get(&format!("optim.m.{name}"));
            let v = state.get(&format!("optim.v.{name}"));
            match (m, v) {
                (Some(m), Some(v)) => {
                    if m.dim() != store.get(id).dim() || v.dim() != m.dim() {
                        return Err(Error::Config(format!("optimizer state for {name} has the wrong shape")));
                    }
                    self.moments.insert(id, (m.clone(), v.clone()));
                }
                (None, None) => {}
                _ => return Err(Error::Config(format!("optimizer state for {name} is incomplete"))),
            }
        }
        Ok(())
    }
}

/// Scales `grads` so their joint L2 norm is at most `max_norm`. Returns the
/// norm before clipping.
pub(crate) fn clip_global_norm(grads: &mut [(ParamId, Tensor)], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|(_, g)| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            g.mapv_inplace(|v| v * s);
        }
    }
    norm
}
