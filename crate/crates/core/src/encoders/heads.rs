//! Task heads trained from scratch on top of the towers: the two-layer
//! classifier used by vision-only finetuning and the projector that feeds the
//! view-contrastive loss.

use ndarray::Array2;
use rand::Rng;

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::nn::{kaiming_uniform, leaf, Grad, Linear};

/// `Linear(width → hidden) → ReLU → Linear(hidden → 2)`.
#[derive(Clone, Debug)]
pub struct MlpHead {
    fc1: Linear,
    fc2: Linear,
}

impl MlpHead {
    pub fn register(store: &mut ParamStore, input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            fc1: Linear::register(store, "head.fc1", kaiming_uniform(rng, hidden, input), true),
            fc2: Linear::register(store, "head.fc2", kaiming_uniform(rng, 2, hidden), true),
        }
    }

    /// `tokens` is `n × width`; returns `n × 2` logits (real, spoof).
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, tokens: Var, grad: Grad) -> Var {
        let h = self.fc1.forward(g, store, tokens, grad);
        let h = g.relu(h);
        self.fc2.forward(g, store, h, grad)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.fc1.params();
        p.extend(self.fc2.params());
        p
    }
}

#[derive(Clone, Debug)]
struct BatchNorm {
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
}

impl BatchNorm {
    fn register(store: &mut ParamStore, name: &str, width: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.weight"), Array2::ones((1, width))),
            beta: store.add(format!("{name}.bias"), Array2::zeros((1, width))),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Array2::zeros((1, width))),
            running_var: store.add_buffer(format!("{name}.running_var"), Array2::ones((1, width))),
        }
    }
}

/// Batch statistics gathered by a training-mode projector pass, applied to
/// the running averages once the step commits.
#[derive(Clone, Debug, Default)]
pub struct RunningStatUpdate {
    updates: Vec<(ParamId, ParamId, Vec<f64>, Vec<f64>)>,
}

impl RunningStatUpdate {
    /// Exponential moving average with the conventional momentum 0.1.
    pub fn apply(&self, store: &mut ParamStore) {
        const MOMENTUM: f64 = 0.1;
        for (mean_id, var_id, mean, var) in &self.updates {
            let rm = store.get_mut(*mean_id);
            for (r, m) in rm.iter_mut().zip(mean) {
                *r = (1.0 - MOMENTUM) * *r + MOMENTUM * m;
            }
            let rv = store.get_mut(*var_id);
            for (r, v) in rv.iter_mut().zip(var) {
                *r = (1.0 - MOMENTUM) * *r + MOMENTUM * v;
            }
        }
    }

    pub fn merge(&mut self, other: RunningStatUpdate) {
        self.updates.extend(other.updates);
    }
}

/// Non-linear projector: three linear layers, the first two followed by
/// batch normalization and ReLU.
#[derive(Clone, Debug)]
pub struct ProjectorH {
    fc1: Linear,
    bn1: BatchNorm,
    fc2: Linear,
    bn2: BatchNorm,
    fc3: Linear,
}

/// Batch-norm behaviour of a projector pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Normalize with the batch's statistics.
    Train,
    /// Normalize with the running statistics.
    Eval,
}

impl ProjectorH {
    pub fn register(store: &mut ParamStore, input: usize, dims: [usize; 3], rng: &mut impl Rng) -> Self {
        Self {
            fc1: Linear::register(store, "projector.fc1", kaiming_uniform(rng, dims[0], input), true),
            bn1: BatchNorm::register(store, "projector.bn1", dims[0]),
            fc2: Linear::register(store, "projector.fc2", kaiming_uniform(rng, dims[1], dims[0]), true),
            bn2: BatchNorm::register(store, "projector.bn2", dims[1]),
            fc3: Linear::register(store, "projector.fc3", kaiming_uniform(rng, dims[2], dims[1]), true),
        }
    }

    /// Projects `n × input` embeddings to `n × dims[2]`. Training mode needs
    /// at least two rows.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        mode: NormMode,
        grad: Grad,
    ) -> Result<(Var, RunningStatUpdate)> {
        let n = g.value(x).nrows();
        if mode == NormMode::Train && n < 2 {
            return Err(Error::DegenerateBatch(n));
        }
        let mut update = RunningStatUpdate::default();
        let mut h = x;
        for (fc, bn) in [(&self.fc1, &self.bn1), (&self.fc2, &self.bn2)] {
            h = fc.forward(g, store, h, grad);
            let gamma = leaf(g, store, bn.gamma, grad);
            let beta = leaf(g, store, bn.beta, grad);
            h = match mode {
                NormMode::Train => {
                    let (y, mean, var) = g.batch_norm_train(h, gamma, beta);
                    update.updates.push((bn.running_mean, bn.running_var, mean, var));
                    y
                }
                NormMode::Eval => {
                    let mean = store.get(bn.running_mean);
                    let var = store.get(bn.running_var);
                    let shift = g.constant(-mean);
                    let inv = g.constant(var.mapv(|v| 1.0 / (v + crate::autograd::BN_EPS).sqrt()));
                    let c = g.add_row(h, shift);
                    let c = g.mul_row(c, inv);
                    let c = g.mul_row(c, gamma);
                    g.add_row(c, beta)
                }
            };
            h = g.relu(h);
        }
        Ok((self.fc3.forward(g, store, h, grad), update))
    }

    /// Trainable parameters (the running statistics are buffers).
    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.fc1.params();
        p.extend([self.bn1.gamma, self.bn1.beta]);
        p.extend(self.fc2.params());
        p.extend([self.bn2.gamma, self.bn2.beta]);
        p.extend(self.fc3.params());
        p
    }
}
