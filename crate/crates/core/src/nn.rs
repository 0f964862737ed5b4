//! Layers shared by the image and text towers.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::autograd::{Graph, ParamId, ParamStore, Tensor, Var};

/// How a forward pass treats parameters: trainable leaves or frozen
/// constants.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Grad {
    Track,
    Frozen,
}

pub(crate) fn leaf(g: &mut Graph, store: &ParamStore, id: ParamId, grad: Grad) -> Var {
    match grad {
        Grad::Track => g.param(store, id),
        Grad::Frozen => g.frozen(store, id),
    }
}

pub(crate) fn normal(rng: &mut impl Rng, shape: (usize, usize), std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    Array2::from_shape_simple_fn(shape, || dist.sample(rng))
}

/// Uniform fan-in initialization, `U(-√(6/fan_in), √(6/fan_in))`.
pub(crate) fn kaiming_uniform(rng: &mut impl Rng, out: usize, fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Array2::from_shape_simple_fn((out, fan_in), || dist.sample(rng))
}

/// Affine map `x · Wᵀ + b` with `W` stored as `[out, in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn register(store: &mut ParamStore, name: &str, weight: Tensor, bias: bool) -> Self {
        let out = weight.nrows();
        let weight = store.add(format!("{name}.weight"), weight);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Array2::zeros((1, out))));
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, grad: Grad) -> Var {
        let w = leaf(g, store, self.weight, grad);
        let y = g.matmul_bt(x, w);
        match self.bias {
            Some(b) => {
                let b = leaf(g, store, b, grad);
                g.add_row(y, b)
            }
            None => y,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn register(store: &mut ParamStore, name: &str, width: usize) -> Self {
        Self {
            weight: store.add(format!("{name}.weight"), Array2::ones((1, width))),
            bias: store.add(format!("{name}.bias"), Array2::zeros((1, width))),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, grad: Grad) -> Var {
        let w = leaf(g, store, self.weight, grad);
        let b = leaf(g, store, self.bias, grad);
        g.layer_norm(x, w, b)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }
}

/// Pre-norm transformer block: `x + Attn(LN(x))`, then `x + MLP(LN(x))`.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    heads: usize,
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl ResidualBlock {
    pub fn register(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(width % heads == 0, "width {width} not divisible by {heads} heads");
        let std = 0.02;
        let mut lin = |store: &mut ParamStore, n: &str, out: usize, inp: usize| {
            Linear::register(store, &format!("{name}.{n}"), normal(rng, (out, inp), std), true)
        };
        let q = lin(store, "self_attn.q_proj", width, width);
        let k = lin(store, "self_attn.k_proj", width, width);
        let v = lin(store, "self_attn.v_proj", width, width);
        let out = lin(store, "self_attn.out_proj", width, width);
        let fc1 = lin(store, "mlp.fc1", 4 * width, width);
        let fc2 = lin(store, "mlp.fc2", width, 4 * width);
        Self {
            heads,
            ln1: LayerNorm::register(store, &format!("{name}.layer_norm1"), width),
            q,
            k,
            v,
            out,
            ln2: LayerNorm::register(store, &format!("{name}.layer_norm2"), width),
            fc1,
            fc2,
        }
    }

    /// Runs one sequence (`tokens × width`). `mask`, when given, is added to
    /// every head's attention scores.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        mask: Option<Var>,
        grad: Grad,
    ) -> Var {
        let width = g.value(x).ncols();
        let head_dim = width / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();

        let h = self.ln1.forward(g, store, x, grad);
        let q = self.q.forward(g, store, h, grad);
        let k = self.k.forward(g, store, h, grad);
        let v = self.v.forward(g, store, h, grad);
        let mut heads = Vec::with_capacity(self.heads);
        for i in 0..self.heads {
            let qh = g.slice_cols(q, i * head_dim, head_dim);
            let kh = g.slice_cols(k, i * head_dim, head_dim);
            let vh = g.slice_cols(v, i * head_dim, head_dim);
            let scores = g.matmul_bt(qh, kh);
            let mut scores = g.scale(scores, scale);
            if let Some(m) = mask {
                scores = g.add(scores, m);
            }
            let attn = g.softmax_rows(scores);
            heads.push(g.matmul(attn, vh));
        }
        let merged = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)
        };
        let attn_out = self.out.forward(g, store, merged, grad);
        let x = g.add(x, attn_out);

        let h = self.ln2.forward(g, store, x, grad);
        let h = self.fc1.forward(g, store, h, grad);
        let h = g.quick_gelu(h);
        let h = self.fc2.forward(g, store, h, grad);
        g.add(x, h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.ln1.params();
        for l in [&self.q, &self.k, &self.v, &self.out] {
            p.extend(l.params());
        }
        p.extend(self.ln2.params());
        p.extend(self.fc1.params());
        p.extend(self.fc2.params());
        p
    }
}
