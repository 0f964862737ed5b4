//! A small reverse-mode automatic differentiation tape over dense `f64`
//! matrices.
//!
//! Every value on the tape is a 2-D [`Tensor`]; vectors are `1 × n` rows and
//! scalars are `1 × 1`. Parameters live in a [`ParamStore`] and enter a
//! [`Graph`] as leaves that share storage with the store, so building a graph
//! never copies weights.

use std::collections::HashMap;
use std::sync::Arc;

use ndarray::{s, Array2, Axis};

/// Dense row-major matrix used for every value on the tape.
pub type Tensor = Array2<f64>;

/// Index of a parameter tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
struct ParamEntry {
    name: String,
    value: Arc<Tensor>,
    trainable: bool,
}

/// Named parameter tensors plus non-trainable buffers (e.g. batch-norm
/// running statistics).
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a trainable parameter. Panics on a duplicate name, which is
    /// always a model-construction bug.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.insert(name.into(), value, true)
    }

    /// Registers a buffer that is saved with the model but never optimized.
    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.insert(name.into(), value, false)
    }

    fn insert(&mut self, name: String, value: Tensor, trainable: bool) -> ParamId {
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.entries.len());
        self.index.insert(name.clone(), id);
        self.entries.push(ParamEntry {
            name,
            value: Arc::new(value),
            trainable,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.entries[id.0].value)
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) {
        self.entries[id.0].value = Arc::new(value);
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    /// Total number of scalar entries across all tensors.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    fn shared(&self, id: ParamId) -> Arc<Tensor> {
        Arc::clone(&self.entries[id.0].value)
    }
}

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Param,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Exp(Var),
    Square(Var),
    Relu(Var),
    QuickGelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
    },
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    L2NormalizeRows(Var),
    SumCols(Var),
    MeanRows(Var),
    Sum(Var),
    Mean(Var),
    Pick(Var, Vec<usize>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    needs_grad: bool,
    // Normalized input and per-row (layer norm) or per-column (batch norm)
    // inverse standard deviation.
    cache: Option<(Tensor, Vec<f64>)>,
}

/// A recording of the forward computation that can be differentiated.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    per_node: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient of the differentiated output with respect to `v`, if `v`
    /// participated in it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.per_node.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for a parameter; `None` when the parameter did not influence
    /// the output.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| self.wrt(*v))
    }

    /// All parameter gradients, ordered by parameter id.
    pub fn params(&self) -> Vec<(ParamId, &Tensor)> {
        let mut out: Vec<_> = self
            .params
            .iter()
            .filter_map(|(p, v)| self.wrt(*v).map(|g| (*p, g)))
            .collect();
        out.sort_by_key(|(p, _)| *p);
        out
    }
}

const LN_EPS: f64 = 1e-5;
pub(crate) const BN_EPS: f64 = 1e-5;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        debug_assert_eq!(t.dim(), (1, 1));
        t[[0, 0]]
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.push_cached(value, op, None)
    }

    fn push_cached(&mut self, value: Tensor, op: Op, cache: Option<(Tensor, Vec<f64>)>) -> Var {
        let needs_grad = match &op {
            Op::Constant => false,
            Op::Param => true,
            other => parents(other).iter().any(|p| self.nodes[p.0].needs_grad),
        };
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            needs_grad,
            cache,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn scalar_constant(&mut self, value: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), value))
    }

    /// Leaf for a stored parameter. Repeated calls for the same id return the
    /// same node so gradients accumulate in one place.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        self.nodes.push(Node {
            value: store.shared(id),
            op: Op::Param,
            needs_grad: true,
            cache: None,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    /// Leaf for a stored tensor that is treated as a constant (frozen weights,
    /// buffers).
    pub fn frozen(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: store.shared(id),
            op: Op::Constant,
            needs_grad: false,
            cache: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`; the natural form for `[out, in]` weight layouts.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b).t());
        self.push(out, Op::MatMulBt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) - self.value(b);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) * self.value(b);
        self.push(out, Op::Mul(a, b))
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let out = self.value(a) + self.value(row);
        self.push(out, Op::AddRow(a, row))
    }

    /// Multiplies every row of `a` elementwise by a `1 × n` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let out = self.value(a) * self.value(row);
        self.push(out, Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) * c;
        self.push(out, Op::Scale(a, c))
    }

    /// Multiplies `a` by the `1 × 1` node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        let c = self.scalar(s);
        let out = self.value(a) * c;
        self.push(out, Op::ScaleBy(a, s))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::exp);
        self.push(out, Op::Exp(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x * x);
        self.push(out, Op::Square(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    /// `x · σ(1.702 x)`, the activation used by the pretrained dual encoder.
    pub fn quick_gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x * sigmoid(1.702 * x));
        self.push(out, Op::QuickGelu(a))
    }

    /// Row-wise layer normalization with affine `1 × n` gamma and beta.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.dim();
        let mut xhat = Array2::zeros((rows, cols));
        let mut inv_std = Vec::with_capacity(rows);
        for (r, row) in xv.axis_iter(Axis(0)).enumerate() {
            let mean = row.sum() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for (c, v) in row.iter().enumerate() {
                xhat[[r, c]] = (v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let out = &xhat * self.value(gamma) + self.value(beta);
        self.push_cached(out, Op::LayerNorm { x, gamma, beta }, Some((xhat, inv_std)))
    }

    /// Batch normalization over rows using the batch's own (biased)
    /// statistics. Returns the output together with the batch mean and the
    /// unbiased batch variance, for running-statistic updates.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var) -> (Var, Vec<f64>, Vec<f64>) {
        let xv = self.value(x);
        let (rows, cols) = xv.dim();
        assert!(rows >= 2, "batch norm needs at least two rows");
        let mut xhat = Array2::zeros((rows, cols));
        let mut inv_std = Vec::with_capacity(cols);
        let mut means = Vec::with_capacity(cols);
        let mut unbiased = Vec::with_capacity(cols);
        for (c, col) in xv.axis_iter(Axis(1)).enumerate() {
            let mean = col.sum() / rows as f64;
            let ss = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
            let inv = 1.0 / (ss / rows as f64 + BN_EPS).sqrt();
            for (r, v) in col.iter().enumerate() {
                xhat[[r, c]] = (v - mean) * inv;
            }
            inv_std.push(inv);
            means.push(mean);
            unbiased.push(ss / (rows - 1) as f64);
        }
        let out = &xhat * self.value(gamma) + self.value(beta);
        let v = self.push_cached(out, Op::BatchNorm { x, gamma, beta }, Some((xhat, inv_std)));
        (v, means, unbiased)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = softmax_rows(self.value(a));
        self.push(out, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let out = log_softmax_rows(self.value(a));
        self.push(out, Op::LogSoftmaxRows(a))
    }

    /// Scales each row to unit Euclidean norm. A zero row yields NaN.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for mut row in out.axis_iter_mut(Axis(0)) {
            let n = row.dot(&row).sqrt();
            row.mapv_inplace(|v| v / n);
        }
        self.push(out, Op::L2NormalizeRows(a))
    }

    /// Row sums as an `n × 1` column.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let out = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(out, Op::SumCols(a))
    }

    /// Column means over rows as a `1 × n` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = v.sum_axis(Axis(0)).insert_axis(Axis(0)) / v.nrows() as f64;
        self.push(out, Op::MeanRows(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = Array2::from_elem((1, 1), v.sum() / v.len() as f64);
        self.push(out, Op::Mean(a))
    }

    /// Selects column `idx[r]` from each row `r`, producing `n × 1`.
    pub fn pick(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let v = self.value(a);
        assert_eq!(v.nrows(), idx.len(), "pick index count must match rows");
        let out = Array2::from_shape_fn((idx.len(), 1), |(r, _)| v[[r, idx[r]]]);
        self.push(out, Op::Pick(a, idx))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice(s![start..start + len, ..]).to_owned();
        self.push(out, Op::SliceRows(a, start))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(out, Op::SliceCols(a, start))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("concat_rows: column mismatch");
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    /// Embedding lookup: row `idx[i]` of `table` becomes output row `i`.
    pub fn gather_rows(&mut self, table: Var, idx: Vec<usize>) -> Var {
        let t = self.value(table);
        let out = t.select(Axis(0), &idx);
        self.push(out, Op::GatherRows(table, idx))
    }

    /// Differentiates the `1 × 1` node `output` with respect to every node
    /// that depends on a parameter.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(
            self.value(output).dim(),
            (1, 1),
            "backward needs a scalar output"
        );
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Array2::ones((1, 1)));

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }

        let params = self.params.iter().map(|(p, v)| (*p, *v)).collect();
        Gradients {
            per_node: grads,
            params,
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| -> &Tensor { &self.nodes[v.0].value };
        let mut acc = |v: Var, delta: Tensor| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &delta,
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Constant | Op::Param => {}
            Op::MatMul(a, b) => {
                if self.nodes[a.0].needs_grad {
                    acc(*a, g.dot(&val(*b).t()));
                }
                if self.nodes[b.0].needs_grad {
                    acc(*b, val(*a).t().dot(g));
                }
            }
            Op::MatMulBt(a, b) => {
                if self.nodes[a.0].needs_grad {
                    acc(*a, g.dot(val(*b)));
                }
                if self.nodes[b.0].needs_grad {
                    acc(*b, g.t().dot(val(*a)));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, -g);
            }
            Op::Mul(a, b) => {
                acc(*a, g * val(*b));
                acc(*b, g * val(*a));
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                acc(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::MulRow(a, row) => {
                acc(*a, g * val(*row));
                let prod = g * val(*a);
                acc(*row, prod.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Scale(a, c) => acc(*a, g * *c),
            Op::ScaleBy(a, s) => {
                let c = val(*s)[[0, 0]];
                acc(*a, g * c);
                let ds = (g * val(*a)).sum();
                acc(*s, Array2::from_elem((1, 1), ds));
            }
            Op::Exp(a) => acc(*a, g * &*node.value),
            Op::Square(a) => acc(*a, g * val(*a) * 2.0),
            Op::Relu(a) => {
                let mask = val(*a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                acc(*a, g * &mask);
            }
            Op::QuickGelu(a) => {
                let d = val(*a).mapv(|x| {
                    let s = sigmoid(1.702 * x);
                    s + 1.702 * x * s * (1.0 - s)
                });
                acc(*a, g * &d);
            }
            Op::LayerNorm { x, gamma, beta } => {
                let (xhat, inv_std) = node.cache.as_ref().expect("layer norm cache");
                let gam = val(*gamma);
                acc(*beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                acc(*gamma, (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                if self.nodes[x.0].needs_grad {
                    let dxhat = g * gam;
                    let n = xhat.ncols() as f64;
                    let mut dx = Array2::zeros(xhat.dim());
                    for r in 0..xhat.nrows() {
                        let dr = dxhat.row(r);
                        let xr = xhat.row(r);
                        let sum_d = dr.sum();
                        let sum_dx = dr.dot(&xr);
                        for c in 0..xhat.ncols() {
                            dx[[r, c]] =
                                inv_std[r] / n * (n * dr[c] - sum_d - xr[c] * sum_dx);
                        }
                    }
                    acc(*x, dx);
                }
            }
            Op::BatchNorm { x, gamma, beta } => {
                let (xhat, inv_std) = node.cache.as_ref().expect("batch norm cache");
                let gam = val(*gamma);
                acc(*beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                acc(*gamma, (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                if self.nodes[x.0].needs_grad {
                    let dxhat = g * gam;
                    let n = xhat.nrows() as f64;
                    let mut dx = Array2::zeros(xhat.dim());
                    for c in 0..xhat.ncols() {
                        let dc = dxhat.column(c);
                        let xc = xhat.column(c);
                        let sum_d = dc.sum();
                        let sum_dx = dc.dot(&xc);
                        for r in 0..xhat.nrows() {
                            dx[[r, c]] =
                                inv_std[c] / n * (n * dc[r] - sum_d - xc[r] * sum_dx);
                        }
                    }
                    acc(*x, dx);
                }
            }
            Op::SoftmaxRows(a) => {
                let y = &*node.value;
                let mut dx = y * g;
                for (mut row, yr) in dx.axis_iter_mut(Axis(0)).zip(y.axis_iter(Axis(0))) {
                    let dot: f64 = row.sum();
                    row.zip_mut_with(&yr, |d, &yv| *d -= yv * dot);
                }
                acc(*a, dx);
            }
            Op::LogSoftmaxRows(a) => {
                let y = &*node.value;
                let mut dx = g.clone();
                for (mut row, yr) in dx.axis_iter_mut(Axis(0)).zip(y.axis_iter(Axis(0))) {
                    let total: f64 = row.sum();
                    row.zip_mut_with(&yr, |d, &lv| *d -= lv.exp() * total);
                }
                acc(*a, dx);
            }
            Op::L2NormalizeRows(a) => {
                let y = &*node.value;
                let xv = val(*a);
                let mut dx = g.clone();
                for r in 0..y.nrows() {
                    let norm = xv.row(r).dot(&xv.row(r)).sqrt();
                    let yg = y.row(r).dot(&g.row(r));
                    for c in 0..y.ncols() {
                        dx[[r, c]] = (g[[r, c]] - y[[r, c]] * yg) / norm;
                    }
                }
                acc(*a, dx);
            }
            Op::SumCols(a) => {
                let cols = val(*a).ncols();
                let dx = Array2::from_shape_fn((g.nrows(), cols), |(r, _)| g[[r, 0]]);
                acc(*a, dx);
            }
            Op::MeanRows(a) => {
                let rows = val(*a).nrows();
                let dx = Array2::from_shape_fn((rows, g.ncols()), |(_, c)| g[[0, c]] / rows as f64);
                acc(*a, dx);
            }
            Op::Sum(a) => acc(*a, Array2::from_elem(val(*a).dim(), g[[0, 0]])),
            Op::Mean(a) => {
                let n = val(*a).len() as f64;
                acc(*a, Array2::from_elem(val(*a).dim(), g[[0, 0]] / n));
            }
            Op::Pick(a, idx) => {
                let mut dx = Array2::zeros(val(*a).dim());
                for (r, &c) in idx.iter().enumerate() {
                    dx[[r, c]] = g[[r, 0]];
                }
                acc(*a, dx);
            }
            Op::SliceRows(a, start) => {
                let mut dx = Array2::zeros(val(*a).dim());
                dx.slice_mut(s![*start..*start + g.nrows(), ..]).assign(g);
                acc(*a, dx);
            }
            Op::SliceCols(a, start) => {
                let mut dx = Array2::zeros(val(*a).dim());
                dx.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                acc(*a, dx);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let rows = val(*p).nrows();
                    if self.nodes[p.0].needs_grad {
                        acc(*p, g.slice(s![offset..offset + rows, ..]).to_owned());
                    }
                    offset += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let cols = val(*p).ncols();
                    if self.nodes[p.0].needs_grad {
                        acc(*p, g.slice(s![.., offset..offset + cols]).to_owned());
                    }
                    offset += cols;
                }
            }
            Op::GatherRows(table, idx) => {
                if self.nodes[table.0].needs_grad {
                    let mut dx = Array2::zeros(val(*table).dim());
                    for (i, &row) in idx.iter().enumerate() {
                        let mut target = dx.row_mut(row);
                        target += &g.row(i);
                    }
                    acc(*table, dx);
                }
            }
        }
    }
}

fn parents(op: &Op) -> Vec<Var> {
    match op {
        Op::Constant | Op::Param => vec![],
        Op::MatMul(a, b)
        | Op::MatMulBt(a, b)
        | Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::AddRow(a, b)
        | Op::MulRow(a, b)
        | Op::ScaleBy(a, b) => vec![*a, *b],
        Op::Scale(a, _)
        | Op::Exp(a)
        | Op::Square(a)
        | Op::Relu(a)
        | Op::QuickGelu(a)
        | Op::SoftmaxRows(a)
        | Op::LogSoftmaxRows(a)
        | Op::L2NormalizeRows(a)
        | Op::SumCols(a)
        | Op::MeanRows(a)
        | Op::Sum(a)
        | Op::Mean(a)
        | Op::Pick(a, _)
        | Op::SliceRows(a, _)
        | Op::SliceCols(a, _)
        | Op::GatherRows(a, _) => vec![*a],
        Op::LayerNorm { x, gamma, beta } | Op::BatchNorm { x, gamma, beta } => {
            vec![*x, *gamma, *beta]
        }
        Op::ConcatRows(p) | Op::ConcatCols(p) => p.clone(),
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Numerically stable row-wise softmax. Entries equal to `-inf` get
/// probability zero.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row.mapv_inplace(|v| v / total);
    }
    out
}

/// Numerically stable row-wise log-softmax.
pub fn log_softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central finite differences of `f` with respect to every entry of the
    /// parameter `id`.
    fn numeric_grad(
        store: &mut ParamStore,
        id: ParamId,
        f: &dyn Fn(&ParamStore) -> f64,
    ) -> Tensor {
        let h = 1e-5;
        let shape = store.get(id).dim();
        let mut out = Array2::zeros(shape);
        for r in 0..shape.0 {
            for c in 0..shape.1 {
                let orig = store.get(id)[[r, c]];
                store.get_mut(id)[[r, c]] = orig + h;
                let up = f(store);
                store.get_mut(id)[[r, c]] = orig - h;
                let down = f(store);
                store.get_mut(id)[[r, c]] = orig;
                out[[r, c]] = (up - down) / (2.0 * h);
            }
        }
        out
    }

    fn check(store: &mut ParamStore, ids: &[ParamId], f: &dyn Fn(&ParamStore, &mut Graph) -> Var) {
        let mut g = Graph::new();
        let out = f(store, &mut g);
        let grads = g.backward(out);
        for &id in ids {
            let analytic = grads.param(id).cloned().unwrap_or_else(|| Array2::zeros(store.get(id).dim()));
            let numeric = numeric_grad(store, id, &|s| {
                let mut g = Graph::new();
                let o = f(s, &mut g);
                g.scalar(o)
            });
            for (a, n) in analytic.iter().zip(numeric.iter()) {
                let denom = a.abs().max(n.abs()).max(1e-6);
                assert!((a - n).abs() / denom < 1e-5, "{}: analytic {a} vs numeric {n}", store.name(id));
            }
        }
    }

    #[test]
    fn matmul_and_elementwise_gradients() {
        let mut store = ParamStore::new();
        let a = store.add("a", array![[0.3, -1.2, 0.5], [0.7, 0.1, -0.4]]);
        let b = store.add("b", array![[1.1, -0.3], [0.2, 0.9], [-0.6, 0.4]]);
        let w = store.add("w", array![[0.5, -0.2, 0.3], [0.1, 0.8, -0.7]]);
        let row = store.add("row", array![[0.2, -0.1]]);
        check(&mut store, &[a, b, w, row], &|s, g| {
            let a = g.param(s, a);
            let b = g.param(s, b);
            let w = g.param(s, w);
            let row = g.param(s, row);
            let ab = g.matmul(a, b);
            let aw = g.matmul_bt(a, w);
            let m = g.mul(ab, aw);
            let m = g.add_row(m, row);
            let m = g.mul_row(m, row);
            let e = g.exp(m);
            let q = g.quick_gelu(e);
            let sq = g.square(q);
            let d = g.sub(sq, ab);
            g.mean(d)
        });
    }

    #[test]
    fn normalization_gradients() {
        let mut store = ParamStore::new();
        let x = store.add("x", array![[0.3, -1.2, 0.5, 2.0], [0.7, 0.1, -0.4, 0.3], [1.5, -0.2, 0.0, 0.9]]);
        let gamma = store.add("gamma", array![[1.1, 0.9, -0.5, 1.3]]);
        let beta = store.add("beta", array![[0.1, -0.2, 0.3, 0.0]]);
        let coef = store.add("coef", array![[0.4, -0.7, 1.1, 0.2], [0.3, 0.5, -0.9, 0.8], [-0.2, 0.6, 0.1, -1.0]]);
        check(&mut store, &[x, gamma, beta], &|s, g| {
            let x = g.param(s, x);
            let gamma = g.param(s, gamma);
            let beta = g.param(s, beta);
            let c = g.frozen(s, coef);
            let ln = g.layer_norm(x, gamma, beta);
            let (bn, _, _) = g.batch_norm_train(ln, gamma, beta);
            let r = g.relu(bn);
            let n = g.l2_normalize_rows(r);
            let n = g.add(n, x);
            let p = g.mul(n, c);
            g.sum(p)
        });
    }

    #[test]
    fn softmax_slicing_and_gather_gradients() {
        let mut store = ParamStore::new();
        let table = store.add("table", array![[0.3, -1.2, 0.5], [0.7, 0.1, -0.4], [1.0, 0.2, 0.3], [-0.5, 0.6, 0.9]]);
        let s = store.add("s", array![[1.7]]);
        check(&mut store, &[table, s], &|st, g| {
            let t = g.param(st, table);
            let s = g.param(st, s);
            let rows = g.gather_rows(t, vec![2, 0, 2, 3]);
            let top = g.slice_rows(rows, 0, 2);
            let bottom = g.slice_rows(rows, 2, 2);
            let left = g.slice_cols(top, 0, 2);
            let right = g.slice_cols(bottom, 1, 2);
            let both = g.concat_cols(&[left, right]);
            let swapped = g.concat_cols(&[right, left]);
            let stacked = g.concat_rows(&[both, swapped]);
            let scaled = g.scale_by(stacked, s);
            let sm = g.softmax_rows(scaled);
            let lsm = g.log_softmax_rows(scaled);
            let prod = g.mul(sm, lsm);
            let picked = g.pick(lsm, vec![0, 1, 1, 0]);
            let sc = g.sum_cols(prod);
            let mr = g.mean_rows(stacked);
            let mr = g.sum(mr);
            let a = g.add(sc, picked);
            let a = g.scale(a, -0.5);
            let a = g.sum(a);
            g.add(a, mr)
        });
    }

    #[test]
    fn param_leaves_are_shared() {
        let mut store = ParamStore::new();
        let w = store.add("w", array![[2.0]]);
        let mut g = Graph::new();
        let a = g.param(&store, w);
        let b = g.param(&store, w);
        assert_eq!(a, b);
        let p = g.mul(a, b);
        let out = g.sum(p);
        let grads = g.backward(out);
        assert_eq!(grads.param(w).unwrap()[[0, 0]], 4.0);
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let mut store = ParamStore::new();
        let w = store.add("w", array![[2.0, 1.0]]);
        let mut g = Graph::new();
        let a = g.frozen(&store, w);
        let out = g.sum(a);
        let grads = g.backward(out);
        assert!(grads.param(w).is_none());
        assert!(grads.wrt(a).is_none());
    }

    #[test]
    fn softmax_masks_negative_infinity() {
        let x = array![[0.0, f64::NEG_INFINITY, 0.0]];
        let y = softmax_rows(&x);
        assert_eq!(y[[0, 1]], 0.0);
        assert!((y[[0, 0]] - 0.5).abs() < 1e-15);
    }
}
