//! Tape-based reverse-mode differentiation over dense `f64` matrices.
//!
//! Every value in the denoiser is a 2-D matrix (`rows × cols`): sequences are
//! `L × C`, row vectors are `1 × C` and scalars are `1 × 1`. A [`Graph`] records
//! operations as they are executed and [`Graph::backward`] walks the tape in
//! reverse to accumulate gradients for parameters and marked inputs.
//!
//! Graphs are cheap and single-use: build one per forward pass, call
//! `backward` once, drop it.

use std::collections::HashMap;
use std::sync::Arc;

use ndarray::{s, Array1, Array2, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Index of a trainable tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Flat, named collection of trainable matrices.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// SHA-256 over names, shapes and the exact bit patterns of every value.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, v) in self.names.iter().zip(&self.values) {
            h.update(name.as_bytes());
            h.update((v.nrows() as u64).to_le_bytes());
            h.update((v.ncols() as u64).to_le_bytes());
            for x in v.iter() {
                h.update(x.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub(crate) fn values(&self) -> &[Array2<f64>] {
        &self.values
    }

    pub(crate) fn names(&self) -> &[String] {
        &self.names
    }

    pub(crate) fn from_parts(names: Vec<String>, values: Vec<Array2<f64>>) -> Self {
        assert_eq!(names.len(), values.len());
        Self { names, values }
    }
}

enum Value {
    Owned(Array2<f64>),
    Param(ParamId),
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Arc<Array2<f64>>),
    LeftMulConst(Arc<Array2<f64>>, Var),
    Sigmoid(Var),
    Relu(Var),
    Silu(Var),
    Square(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize, usize),
    SliceRows(Var, usize, usize),
    Transpose(Var),
    BroadcastRows(Var),
    Gather(Var, Arc<Vec<Option<usize>>>),
    DepthwiseConv(Var, Var),
    LayerNormRows { x: Var, xhat: Array2<f64>, inv_std: Array1<f64> },
    GroupNorm { x: Var, groups: usize, xhat: Array2<f64>, inv_std: Array1<f64> },
    L2NormalizeRows { x: Var, norms: Array1<f64> },
    MeanRows(Var),
    Sum(Var),
    Mean(Var),
}

struct Node {
    value: Value,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. Parameters are referenced, not copied.
pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, Var>,
    /// When false, parameters enter the graph as constants.
    track_params: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads {
    nodes: Vec<Option<Array2<f64>>>,
    params: HashMap<ParamId, Var>,
}

impl Grads {
    /// Gradient with respect to a graph node, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&Array2<f64>> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Array2<f64>> {
        self.params.get(&id).and_then(|v| self.wrt(*v))
    }

    /// Dense per-parameter gradient list aligned with `store`, zero-filled
    /// for parameters the loss does not depend on.
    pub fn into_param_grads(mut self, store: &ParamStore) -> Vec<Array2<f64>> {
        store
            .ids()
            .map(|id| {
                self.params
                    .get(&id)
                    .and_then(|v| self.nodes[v.0].take())
                    .unwrap_or_else(|| Array2::zeros(store.get(id).raw_dim()))
            })
            .collect()
    }
}

fn same_shape(a: &Array2<f64>, b: &Array2<f64>, what: &str) {
    assert_eq!(a.dim(), b.dim(), "{what}: shape mismatch {:?} vs {:?}", a.dim(), b.dim());
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self { store, nodes: Vec::with_capacity(512), param_nodes: HashMap::new(), track_params: true }
    }

    /// Graph for inference: parameters are not differentiated.
    pub fn inference(store: &'p ParamStore) -> Self {
        let mut g = Self::new(store);
        g.track_params = false;
        g
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        match &self.nodes[v.0].value {
            Value::Owned(a) => a,
            Value::Param(id) => self.store.get(*id),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value: Value::Owned(value), op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Constant input.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Input leaf whose gradient is reported by [`Grads::wrt`].
    pub fn input(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Parameter leaf; repeated calls with the same id return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes.get(&id) {
            return *v;
        }
        self.nodes.push(Node { value: Value::Param(id), op: Op::Leaf, requires_grad: self.track_params });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.ncols(), vb.nrows(), "matmul: {:?} x {:?}", va.dim(), vb.dim());
        let out = va.dot(vb);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(va, vb, "add");
        let out = va + vb;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(va, vb, "sub");
        let out = va - vb;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(va, vb, "mul");
        let out = va * vb;
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul(a, b), rg)
    }

    /// `a + row` with `row` (1 × C) broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(row));
        assert_eq!(vr.nrows(), 1, "add_row: row must be 1 x C");
        assert_eq!(va.ncols(), vr.ncols(), "add_row: width mismatch");
        let out = va + vr;
        let rg = self.rg(a) || self.rg(row);
        self.push(out, Op::AddRow(a, row), rg)
    }

    /// `a ⊙ row` with `row` (1 × C) broadcast over the rows of `a`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(row));
        assert_eq!(vr.nrows(), 1, "mul_row: row must be 1 x C");
        assert_eq!(va.ncols(), vr.ncols(), "mul_row: width mismatch");
        let out = va * vr;
        let rg = self.rg(a) || self.rg(row);
        self.push(out, Op::MulRow(a, row), rg)
    }

    /// `a · s` for a 1 × 1 node `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        let vs = self.value(s);
        assert_eq!(vs.dim(), (1, 1), "mul_scalar: scalar must be 1 x 1");
        let out = self.value(a) * vs[[0, 0]];
        let rg = self.rg(a) || self.rg(s);
        self.push(out, Op::MulScalar(a, s), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) * c;
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    /// Elementwise product with a constant of the same shape (dropout masks).
    pub fn mul_const(&mut self, a: Var, c: Arc<Array2<f64>>) -> Var {
        same_shape(self.value(a), &c, "mul_const");
        let out = self.value(a) * &*c;
        let rg = self.rg(a);
        self.push(out, Op::MulConst(a, c), rg)
    }

    /// `c · a` for a constant matrix `c` (fixed resampling operators).
    pub fn left_mul_const(&mut self, c: Arc<Array2<f64>>, a: Var) -> Var {
        let out = c.dot(self.value(a));
        let rg = self.rg(a);
        self.push(out, Op::LeftMulConst(c, a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(sigmoid);
        let rg = self.rg(a);
        self.push(out, Op::Sigmoid(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x * sigmoid(x));
        let rg = self.rg(a);
        self.push(out, Op::Silu(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x * x);
        let rg = self.rg(a);
        self.push(out, Op::Square(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = softmax_rows(self.value(a));
        let rg = self.rg(a);
        self.push(out, Op::SoftmaxRows(a), rg)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for mut row in out.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            row.mapv_inplace(|x| x - lse);
        }
        let rg = self.rg(a);
        self.push(out, Op::LogSoftmaxRows(a), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(out, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("concat_rows: col counts differ");
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(out, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let out = self.value(a).slice(s![.., start..end]).to_owned();
        let rg = self.rg(a);
        self.push(out, Op::SliceCols(a, start, end), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let out = self.value(a).slice(s![start..end, ..]).to_owned();
        let rg = self.rg(a);
        self.push(out, Op::SliceRows(a, start, end), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).t().to_owned();
        let rg = self.rg(a);
        self.push(out, Op::Transpose(a), rg)
    }

    /// Repeat a 1 × C row `n` times.
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Var {
        let va = self.value(a);
        assert_eq!(va.nrows(), 1, "broadcast_rows: expected 1 x C");
        let out = va.broadcast((n, va.ncols())).unwrap().to_owned();
        let rg = self.rg(a);
        self.push(out, Op::BroadcastRows(a), rg)
    }

    /// Build a `rows × cols` matrix whose flat (row-major) entry `i` is the
    /// flat entry `index[i]` of `a`, or zero for `None`.
    pub fn gather(&mut self, a: Var, index: Arc<Vec<Option<usize>>>, rows: usize, cols: usize) -> Var {
        assert_eq!(index.len(), rows * cols, "gather: index length");
        let va = self.value(a);
        let flat = va.as_standard_layout();
        let flat = flat.as_slice().unwrap();
        let data: Vec<f64> = index.iter().map(|i| i.map_or(0.0, |i| flat[i])).collect();
        let out = Array2::from_shape_vec((rows, cols), data).unwrap();
        let rg = self.rg(a);
        self.push(out, Op::Gather(a, index), rg)
    }

    /// Select whole rows of `a` (embedding lookup).
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let cols = self.shape(a).1;
        let index: Vec<Option<usize>> =
            rows.iter().flat_map(|&r| (0..cols).map(move |c| Some(r * cols + c))).collect();
        self.gather(a, Arc::new(index), rows.len(), cols)
    }

    /// Depthwise 1-D convolution along rows, stride 1, "same" length.
    /// `x` is `L × C`, `w` is `k × C`; for even `k` the extra tap looks ahead.
    pub fn depthwise_conv(&mut self, x: Var, w: Var) -> Var {
        let (vx, vw) = (self.value(x), self.value(w));
        assert_eq!(vx.ncols(), vw.ncols(), "depthwise_conv: channel mismatch");
        let out = depthwise_forward(vx, vw);
        let rg = self.rg(x) || self.rg(w);
        self.push(out, Op::DepthwiseConv(x, w), rg)
    }

    /// Per-row normalisation to zero mean / unit variance (no affine).
    pub fn layer_norm_rows(&mut self, x: Var, eps: f64) -> Var {
        let vx = self.value(x);
        let c = vx.ncols() as f64;
        let mut xhat = vx.clone();
        let mut inv_std = Array1::zeros(vx.nrows());
        for (i, mut row) in xhat.rows_mut().into_iter().enumerate() {
            let mean = row.sum() / c;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c;
            let r = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * r);
            inv_std[i] = r;
        }
        let rg = self.rg(x);
        self.push(xhat.clone(), Op::LayerNormRows { x, xhat, inv_std }, rg)
    }

    /// GroupNorm over an `L × C` sequence: each group of `C / groups`
    /// channels is normalised jointly over time and channels (no affine).
    pub fn group_norm(&mut self, x: Var, groups: usize, eps: f64) -> Var {
        let vx = self.value(x);
        let (l, c) = vx.dim();
        assert!(groups >= 1 && c % groups == 0, "group_norm: {c} channels not divisible by {groups}");
        let gs = c / groups;
        let n = (l * gs) as f64;
        let mut xhat = vx.clone();
        let mut inv_std = Array1::zeros(groups);
        for gi in 0..groups {
            let mut blk = xhat.slice_mut(s![.., gi * gs..(gi + 1) * gs]);
            let mean = blk.sum() / n;
            let var = blk.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let r = 1.0 / (var + eps).sqrt();
            blk.mapv_inplace(|v| (v - mean) * r);
            inv_std[gi] = r;
        }
        let rg = self.rg(x);
        self.push(xhat.clone(), Op::GroupNorm { x, groups, xhat, inv_std }, rg)
    }

    /// Scale each row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let norms: Array1<f64> = vx.rows().into_iter().map(|r| r.dot(&r).sqrt().max(1e-12)).collect();
        let out = vx / &norms.view().insert_axis(Axis(1));
        let rg = self.rg(x);
        self.push(out, Op::L2NormalizeRows { x, norms }, rg)
    }

    /// Column means as a 1 × C row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let out = self.value(a).mean_axis(Axis(0)).unwrap().insert_axis(Axis(0));
        let rg = self.rg(a);
        self.push(out, Op::MeanRows(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Array2::from_elem((1, 1), self.value(a).sum());
        let rg = self.rg(a);
        self.push(out, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let out = Array2::from_elem((1, 1), va.sum() / va.len() as f64);
        let rg = self.rg(a);
        self.push(out, Op::Mean(a), rg)
    }

    /// `x · w + b`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let y = self.matmul(x, w);
        match b {
            Some(b) => self.add_row(y, b),
            None => y,
        }
    }

    /// Reverse sweep from a scalar (1 × 1) output.
    pub fn backward(&self, out: Var) -> Grads {
        assert_eq!(self.shape(out), (1, 1), "backward: output must be scalar");
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Array2::ones((1, 1)));
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads { nodes: grads, params: self.param_nodes.clone() }
    }

    fn acc(&self, grads: &mut [Option<Array2<f64>>], v: Var, delta: Array2<f64>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn backprop_node(&self, i: usize, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let out_val = self.value(Var(i));
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    self.acc(grads, *a, g.dot(&self.value(*b).t()));
                }
                if self.rg(*b) {
                    self.acc(grads, *b, self.value(*a).t().dot(g));
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, -g);
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.acc(grads, *a, g * self.value(*b));
                }
                if self.rg(*b) {
                    self.acc(grads, *b, g * self.value(*a));
                }
            }
            Op::AddRow(a, r) => {
                self.acc(grads, *a, g.clone());
                if self.rg(*r) {
                    self.acc(grads, *r, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulRow(a, r) => {
                if self.rg(*a) {
                    self.acc(grads, *a, g * self.value(*r));
                }
                if self.rg(*r) {
                    let d = (g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.acc(grads, *r, d);
                }
            }
            Op::MulScalar(a, s) => {
                let sv = self.value(*s)[[0, 0]];
                if self.rg(*a) {
                    self.acc(grads, *a, g * sv);
                }
                if self.rg(*s) {
                    let d = (g * self.value(*a)).sum();
                    self.acc(grads, *s, Array2::from_elem((1, 1), d));
                }
            }
            Op::Scale(a, c) => self.acc(grads, *a, g * *c),
            Op::MulConst(a, c) => self.acc(grads, *a, g * &**c),
            Op::LeftMulConst(c, a) => self.acc(grads, *a, c.t().dot(g)),
            Op::Sigmoid(a) => {
                let d = ndarray::Zip::from(g).and(out_val).map_collect(|&g, &y| g * y * (1.0 - y));
                self.acc(grads, *a, d);
            }
            Op::Relu(a) => {
                let d = ndarray::Zip::from(g)
                    .and(self.value(*a))
                    .map_collect(|&g, &x| if x > 0.0 { g } else { 0.0 });
                self.acc(grads, *a, d);
            }
            Op::Silu(a) => {
                let d = ndarray::Zip::from(g).and(self.value(*a)).map_collect(|&g, &x| {
                    let s = sigmoid(x);
                    g * (s + x * s * (1.0 - s))
                });
                self.acc(grads, *a, d);
            }
            Op::Square(a) => self.acc(grads, *a, g * self.value(*a) * 2.0),
            Op::SoftmaxRows(a) => {
                let mut d = g * out_val;
                for (mut drow, yrow) in d.rows_mut().into_iter().zip(out_val.rows()) {
                    let dot = drow.sum();
                    drow.zip_mut_with(&yrow, |dv, &y| *dv -= y * dot);
                }
                self.acc(grads, *a, d);
            }
            Op::LogSoftmaxRows(a) => {
                let mut d = g.clone();
                for (mut drow, yrow) in d.rows_mut().into_iter().zip(out_val.rows()) {
                    let gsum = drow.sum();
                    drow.zip_mut_with(&yrow, |dv, &y| *dv -= y.exp() * gsum);
                }
                self.acc(grads, *a, d);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let w = self.shape(*p).1;
                    if self.rg(*p) {
                        self.acc(grads, *p, g.slice(s![.., off..off + w]).to_owned());
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let h = self.shape(*p).0;
                    if self.rg(*p) {
                        self.acc(grads, *p, g.slice(s![off..off + h, ..]).to_owned());
                    }
                    off += h;
                }
            }
            Op::SliceCols(a, start, end) => {
                let mut d = Array2::zeros(self.value(*a).raw_dim());
                d.slice_mut(s![.., *start..*end]).assign(g);
                self.acc(grads, *a, d);
            }
            Op::SliceRows(a, start, end) => {
                let mut d = Array2::zeros(self.value(*a).raw_dim());
                d.slice_mut(s![*start..*end, ..]).assign(g);
                self.acc(grads, *a, d);
            }
            Op::Transpose(a) => self.acc(grads, *a, g.t().to_owned()),
            Op::BroadcastRows(a) => self.acc(grads, *a, g.sum_axis(Axis(0)).insert_axis(Axis(0))),
            Op::Gather(a, index) => {
                let (r, c) = self.shape(*a);
                let mut d = vec![0.0; r * c];
                let gflat = g.as_standard_layout();
                for (gi, src) in gflat.iter().zip(index.iter()) {
                    if let Some(src) = src {
                        d[*src] += gi;
                    }
                }
                self.acc(grads, *a, Array2::from_shape_vec((r, c), d).unwrap());
            }
            Op::DepthwiseConv(x, w) => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (l, c) = vx.dim();
                let k = vw.nrows();
                let left = (k - 1) / 2;
                let mut dx = Array2::zeros((l, c));
                let mut dw = Array2::zeros((k, c));
                for i in 0..l {
                    for j in 0..k {
                        let src = i as isize + j as isize - left as isize;
                        if src < 0 || src >= l as isize {
                            continue;
                        }
                        let src = src as usize;
                        for ch in 0..c {
                            dx[[src, ch]] += vw[[j, ch]] * g[[i, ch]];
                            dw[[j, ch]] += vx[[src, ch]] * g[[i, ch]];
                        }
                    }
                }
                self.acc(grads, *x, dx);
                self.acc(grads, *w, dw);
            }
            Op::LayerNormRows { x, xhat, inv_std } => {
                let c = xhat.ncols() as f64;
                let mut d = Array2::zeros(xhat.raw_dim());
                for (r, mut drow) in d.rows_mut().into_iter().enumerate() {
                    let grow = g.row(r);
                    let xrow = xhat.row(r);
                    let mg = grow.sum() / c;
                    let mgx = grow.dot(&xrow) / c;
                    for k in 0..drow.len() {
                        drow[k] = inv_std[r] * (grow[k] - mg - xrow[k] * mgx);
                    }
                }
                self.acc(grads, *x, d);
            }
            Op::GroupNorm { x, groups, xhat, inv_std } => {
                let (l, c) = xhat.dim();
                let gs = c / groups;
                let n = (l * gs) as f64;
                let mut d = Array2::zeros((l, c));
                for gi in 0..*groups {
                    let cols = s![.., gi * gs..(gi + 1) * gs];
                    let gb = g.slice(cols);
                    let xb = xhat.slice(cols);
                    let mg = gb.sum() / n;
                    let mgx = (&gb * &xb).sum() / n;
                    let r = inv_std[gi];
                    let blk = ndarray::Zip::from(&gb).and(&xb).map_collect(|&gv, &xv| r * (gv - mg - xv * mgx));
                    d.slice_mut(cols).assign(&blk);
                }
                self.acc(grads, *x, d);
            }
            Op::L2NormalizeRows { x, norms } => {
                let mut d = g.clone();
                for (r, mut drow) in d.rows_mut().into_iter().enumerate() {
                    let yrow = out_val.row(r);
                    let dot = drow.dot(&yrow);
                    let n = norms[r];
                    drow.zip_mut_with(&yrow, |dv, &y| *dv = (*dv - y * dot) / n);
                }
                self.acc(grads, *x, d);
            }
            Op::MeanRows(a) => {
                let l = self.shape(*a).0;
                let d = g.broadcast((l, g.ncols())).unwrap().to_owned() / l as f64;
                self.acc(grads, *a, d);
            }
            Op::Sum(a) => {
                let d = Array2::from_elem(self.value(*a).raw_dim(), g[[0, 0]]);
                self.acc(grads, *a, d);
            }
            Op::Mean(a) => {
                let va = self.value(*a);
                let d = Array2::from_elem(va.raw_dim(), g[[0, 0]] / va.len() as f64);
                self.acc(grads, *a, d);
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_rows(a: &Array2<f64>) -> Array2<f64> {
    let mut out = a.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        row.mapv_inplace(|x| (x - m).exp());
        let z = row.sum();
        row.mapv_inplace(|x| x / z);
    }
    out
}

fn depthwise_forward(x: &Array2<f64>, w: &Array2<f64>) -> Array2<f64> {
    let (l, c) = x.dim();
    let k = w.nrows();
    let left = (k - 1) / 2;
    let mut out = Array2::zeros((l, c));
    for i in 0..l {
        for j in 0..k {
            let src = i as isize + j as isize - left as isize;
            if src < 0 || src >= l as isize {
                continue;
            }
            let src = src as usize;
            for ch in 0..c {
                out[[i, ch]] += w[[j, ch]] * x[[src, ch]];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_input_grad, GradCheck};
    use ndarray::array;

    fn rand_mat(r: usize, c: usize, seed: u64) -> Array2<f64> {
        crate::nn::init::normal(&mut crate::nn::init::rng(seed), r, c, 1.0)
    }

    fn check(x: Array2<f64>, f: impl Fn(&mut Graph, Var) -> Var) {
        let rep = check_input_grad(&x, |g, v| {
            let y = f(g, v);
            // weighted sum so every output entry carries a distinct cotangent
            let (r, c) = g.shape(y);
            let w = g.constant(Array2::from_shape_fn((r, c), |(i, j)| 0.3 + 0.1 * i as f64 - 0.07 * j as f64));
            let p = g.mul(y, w);
            g.sum(p)
        });
        rep.assert_within(GradCheck::DEFAULT_TOL);
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let x = rand_mat(3, 4, 1);
        check(x.clone(), |g, v| g.sigmoid(v));
        check(x.clone(), |g, v| g.silu(v));
        check(x.clone(), |g, v| g.square(v));
        check(x.clone(), |g, v| g.softmax_rows(v));
        check(x.clone(), |g, v| g.log_softmax_rows(v));
        check(x.clone(), |g, v| g.l2_normalize_rows(v));
        check(x.clone(), |g, v| g.layer_norm_rows(v, 1e-5));
        check(x.clone(), |g, v| g.group_norm(v, 2, 1e-5));
        check(x.clone(), |g, v| g.mean_rows(v));
        check(x, |g, v| g.transpose(v));
    }

    #[test]
    fn structural_ops_match_finite_differences() {
        let x = rand_mat(5, 4, 2);
        let w = rand_mat(3, 4, 3);
        check(x.clone(), |g, v| {
            let wv = g.constant(w.clone());
            g.depthwise_conv(v, wv)
        });
        let w4 = rand_mat(4, 4, 4);
        check(x.clone(), |g, v| {
            let wv = g.constant(w4.clone());
            g.depthwise_conv(v, wv)
        });
        check(x.clone(), |g, v| {
            let a = g.slice_cols(v, 1, 3);
            let b = g.slice_rows(v, 0, 2);
            let c = g.matmul(a, b);
            g.concat_cols(&[c, v])
        });
        check(x.clone(), |g, v| g.gather_rows(v, &[4, 0, 0, 2]));
        check(x, |g, v| {
            let r = g.slice_rows(v, 1, 2);
            let s = g.slice_rows(v, 2, 3);
            let s = g.slice_cols(s, 0, 1);
            let a = g.mul_row(v, r);
            let b = g.add_row(a, r);
            g.mul_scalar(b, s)
        });
    }

    #[test]
    fn depthwise_conv_known_values() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.constant(array![[1.0], [2.0], [3.0]]);
        let w = g.constant(array![[1.0], [10.0], [100.0]]);
        let y = g.depthwise_conv(x, w);
        // taps: x[i-1]*1 + x[i]*10 + x[i+1]*100, zero padded
        assert_eq!(g.value(y), &array![[210.0], [321.0], [32.0]]);
    }

    #[test]
    fn param_nodes_are_memoised() {
        let mut store = ParamStore::new();
        let id = store.add("w", Array2::ones((2, 2)));
        let mut g = Graph::new(&store);
        let a = g.param(id);
        let b = g.param(id);
        assert_eq!(a, b);
        let y = g.add(a, b);
        let s = g.sum(y);
        let grads = g.backward(s);
        assert_eq!(grads.param(id).unwrap(), &Array2::from_elem((2, 2), 2.0));
    }

    #[test]
    fn inference_graph_does_not_track_params() {
        let mut store = ParamStore::new();
        let id = store.add("w", Array2::ones((1, 1)));
        let mut g = Graph::inference(&store);
        let a = g.param(id);
        let s = g.sum(a);
        let grads = g.backward(s);
        assert!(grads.param(id).is_none());
    }
}
