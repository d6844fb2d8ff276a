//! Sublayers of the denoiser block.

use std::sync::Arc;

use ndarray::Array2;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::nn::{init, LayerNorm, Linear};

/// Recorded intermediate values, for invariant checks.
#[derive(Clone, Debug, Default)]
pub struct Probe {
    /// One entry per (block, head): L′ × L′.
    pub sa_attention: Vec<Array2<f64>>,
    /// One entry per (block, head): L′ × K.
    pub eca_attention: Vec<Array2<f64>>,
    /// One entry per block: L′ × D_y sigmoid outputs.
    pub gates: Vec<Array2<f64>>,
}

/// Per-forward state: dropout randomness and optional probes.
#[derive(Default)]
pub struct Ctx {
    pub dropout_rng: Option<init::Rng>,
    pub probe: Option<Probe>,
}

impl Ctx {
    pub fn eval() -> Self {
        Self::default()
    }

    pub fn train(rng: init::Rng) -> Self {
        Self { dropout_rng: Some(rng), probe: None }
    }

    pub fn probing() -> Self {
        Self { dropout_rng: None, probe: Some(Probe::default()) }
    }

    pub fn dropout(&mut self, g: &mut Graph, x: Var, p: f64) -> Var {
        let Some(rng) = self.dropout_rng.as_mut() else { return x };
        if p <= 0.0 {
            return x;
        }
        let (r, c) = g.shape(x);
        let keep = 1.0 / (1.0 - p);
        let mask = Array2::from_shape_simple_fn((r, c), || if rng.random::<f64>() < p { 0.0 } else { keep });
        g.mul_const(x, Arc::new(mask))
    }

    fn record(&mut self, f: impl FnOnce(&mut Probe)) {
        if let Some(p) = self.probe.as_mut() {
            f(p);
        }
    }
}

/// Largest divisor of `channels` not exceeding `groups`.
pub fn clamp_groups(groups: usize, channels: usize) -> usize {
    (1..=groups.min(channels).max(1)).rev().find(|g| channels % g == 0).unwrap_or(1)
}

fn dw_kernel(store: &mut ParamStore, rng: &mut init::Rng, name: &str, k: usize, c: usize) -> (ParamId, ParamId) {
    let w = store.add(format!("{name}.w"), init::normal(rng, k, c, 1.0 / (k as f64).sqrt()));
    let b = store.add(format!("{name}.b"), Array2::zeros((1, c)));
    (w, b)
}

fn depthwise(g: &mut Graph, x: Var, w: ParamId, b: ParamId) -> Var {
    let w = g.param(w);
    let b = g.param(b);
    let y = g.depthwise_conv(x, w);
    g.add_row(y, b)
}

/// ReLU(GN(PW(DW(x)))): depthwise kernel, pointwise `c_in → d`, GroupNorm with affine.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Limm {
    pub dw: ParamId,
    pub dw_b: ParamId,
    pub pw: Linear,
    pub gn_gain: ParamId,
    pub gn_shift: ParamId,
    pub groups: usize,
}

impl Limm {
    pub const EPS: f64 = 1e-5;

    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut init::Rng,
        name: &str,
        c_in: usize,
        d: usize,
        kernel: usize,
        groups: usize,
    ) -> Self {
        let (dw, dw_b) = dw_kernel(store, rng, &format!("{name}.dw"), kernel, c_in);
        let pw = Linear::new(store, rng, &format!("{name}.pw"), c_in, d, true);
        let gn_gain = store.add(format!("{name}.gn.gain"), Array2::ones((1, d)));
        let gn_shift = store.add(format!("{name}.gn.shift"), Array2::zeros((1, d)));
        Self { dw, dw_b, pw, gn_gain, gn_shift, groups: clamp_groups(groups, d) }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = depthwise(g, x, self.dw, self.dw_b);
        let h = self.pw.forward(g, h);
        let h = g.group_norm(h, self.groups, Self::EPS);
        let gain = g.param(self.gn_gain);
        let shift = g.param(self.gn_shift);
        let h = g.mul_row(h, gain);
        let h = g.add_row(h, shift);
        g.relu(h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = vec![self.dw, self.dw_b];
        v.extend(self.pw.params());
        v.extend([self.gn_gain, self.gn_shift]);
        v
    }
}

/// Index map folding `s` consecutive frames into one row (zero padded at the end).
pub fn fold_index(len: usize, cols: usize, s: usize) -> (Arc<Vec<Option<usize>>>, usize) {
    let out_len = len.div_ceil(s);
    let mut idx = Vec::with_capacity(out_len * s * cols);
    for j in 0..out_len {
        for k in 0..s {
            let frame = j * s + k;
            for c in 0..cols {
                idx.push((frame < len).then_some(frame * cols + c));
            }
        }
    }
    (Arc::new(idx), out_len)
}

/// Gated global-text injection with optional strided downsampling.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Atii {
    /// Strided pointwise conv (kernel = stride = `stride`) as a linear map on folded frames.
    pub down: Option<Linear>,
    pub stride: usize,
    pub w_c: Linear,
    pub w_f: Linear,
}

impl Atii {
    pub fn new(store: &mut ParamStore, rng: &mut init::Rng, name: &str, d: usize, d_y: usize, stride: usize) -> Self {
        let down = (stride > 1).then(|| Linear::new(store, rng, &format!("{name}.down"), stride * d, d, true));
        let w_c = Linear::new(store, rng, &format!("{name}.w_c"), d + d_y, d_y, true);
        let w_f = Linear::new(store, rng, &format!("{name}.w_f"), d + d_y, d, true);
        Self { down, stride, w_c, w_f }
    }

    pub fn downsample(&self, g: &mut Graph, x: Var) -> Var {
        match &self.down {
            Some(lin) => {
                let (l, d) = g.shape(x);
                let (idx, out_len) = fold_index(l, d, self.stride);
                let folded = g.gather(x, idx, out_len, self.stride * d);
                lin.forward(g, folded)
            }
            None => x,
        }
    }

    /// `global` is a 1 × D_y row.
    pub fn forward(&self, g: &mut Graph, x: Var, global: Var, ctx: &mut Ctx) -> Var {
        let m = self.downsample(g, x);
        let l = g.shape(m).0;
        let gb = g.broadcast_rows(global, l);
        let cat = g.concat_cols(&[m, gb]);
        let logits = self.w_c.forward(g, cat);
        let gate = g.sigmoid(logits);
        let gate_val = g.value(gate).clone();
        ctx.record(|p| p.gates.push(gate_val));
        let ghat = g.mul(gate, gb);
        let fused = g.concat_cols(&[m, ghat]);
        self.w_f.forward(g, fused)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v: Vec<ParamId> = self.down.iter().flat_map(|l| l.params()).collect();
        v.extend(self.w_c.params());
        v.extend(self.w_f.params());
        v
    }
}

/// Learned bias per (signed offset bucket, head); exact buckets within
/// `max_exact` frames each side, log-spaced out to `max_distance`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct RelativeBias {
    pub table: ParamId,
    pub buckets: usize,
    pub max_exact: usize,
    pub max_distance: usize,
    pub heads: usize,
}

impl RelativeBias {
    pub fn new(store: &mut ParamStore, name: &str, buckets: usize, max_exact: usize, max_distance: usize, heads: usize) -> Self {
        let table = store.add(format!("{name}.table"), Array2::zeros((buckets, heads)));
        Self { table, buckets, max_exact, max_distance, heads }
    }

    /// Bucket of offset `rel = key - query`.
    pub fn bucket(&self, rel: i64) -> usize {
        let half = self.buckets / 2;
        let base = if rel > 0 { half } else { 0 };
        let n = rel.unsigned_abs() as usize;
        let exact = self.max_exact.min(half);
        if n < exact {
            return base + n;
        }
        let span = (half - exact) as f64;
        let ratio = (n as f64 / exact as f64).ln() / (self.max_distance as f64 / exact as f64).ln();
        let b = exact + (ratio * span) as usize;
        base + b.min(half - 1)
    }

    pub fn index(&self, len: usize, head: usize) -> Arc<Vec<Option<usize>>> {
        let mut idx = Vec::with_capacity(len * len);
        for q in 0..len {
            for k in 0..len {
                idx.push(Some(self.bucket(k as i64 - q as i64) * self.heads + head));
            }
        }
        Arc::new(idx)
    }

    pub fn forward(&self, g: &mut Graph, len: usize, head: usize) -> Var {
        let t = g.param(self.table);
        g.gather(t, self.index(len, head), len, len)
    }
}

/// Additive mask excluding invalid keys.
pub fn key_mask_bias(rows: usize, valid: &[bool]) -> Array2<f64> {
    Array2::from_shape_fn((rows, valid.len()), |(_, k)| if valid[k] { 0.0 } else { -1e9 })
}

/// Pre-norm multi-head self-attention with optional relative position bias.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ConformerSa {
    pub ln: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub head_dim: usize,
}

impl ConformerSa {
    pub fn new(store: &mut ParamStore, rng: &mut init::Rng, name: &str, d: usize, heads: usize) -> Self {
        let ln = LayerNorm::new(store, &format!("{name}.ln"), d);
        let q = Linear::new(store, rng, &format!("{name}.q"), d, d, true);
        let k = Linear::new(store, rng, &format!("{name}.k"), d, d, true);
        let v = Linear::new(store, rng, &format!("{name}.v"), d, d, true);
        let o = Linear::new(store, rng, &format!("{name}.o"), d, d, true);
        Self { ln, q, k, v, o, heads, head_dim: d / heads }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        x: Var,
        rel: Option<&RelativeBias>,
        key_valid: Option<&[bool]>,
        ctx: &mut Ctx,
    ) -> Var {
        let h = self.ln.forward(g, x);
        let q = self.q.forward(g, h);
        let k = self.k.forward(g, h);
        let v = self.v.forward(g, h);
        let l = g.shape(x).0;
        let mask = key_valid.map(|m| g.constant(key_mask_bias(l, m)));
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        for hd in 0..self.heads {
            let (a, b) = (hd * self.head_dim, (hd + 1) * self.head_dim);
            let qh = g.slice_cols(q, a, b);
            let kh = g.slice_cols(k, a, b);
            let vh = g.slice_cols(v, a, b);
            let kt = g.transpose(kh);
            let s = g.matmul(qh, kt);
            let mut s = g.scale(s, scale);
            if let Some(rel) = rel {
                let bias = rel.forward(g, l, hd);
                s = g.add(s, bias);
            }
            if let Some(m) = mask {
                s = g.add(s, m);
            }
            let att = g.softmax_rows(s);
            let att_val = g.value(att).clone();
            ctx.record(|p| p.sa_attention.push(att_val));
            heads.push(g.matmul(att, vh));
        }
        let z = g.concat_cols(&heads);
        self.o.forward(g, z)
    }

    pub fn params(&self) -> Vec<ParamId> {
        [self.ln.params(), self.q.params(), self.k.params(), self.v.params(), self.o.params()].concat()
    }
}

/// Event cross-attention: motion queries, event keys/values, scaled by γ.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Eca {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub gamma: ParamId,
    /// Learned per-position vectors added to E before the key/value projections.
    pub order: Option<ParamId>,
    pub heads: usize,
    pub head_dim: usize,
    pub dropout: f64,
}

impl Eca {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut init::Rng,
        name: &str,
        d: usize,
        d_y: usize,
        heads: usize,
        order_positions: Option<usize>,
        dropout: f64,
    ) -> Self {
        let q = Linear::new(store, rng, &format!("{name}.q"), d, d, false);
        let k = Linear::new(store, rng, &format!("{name}.k"), d_y, d, false);
        let v = Linear::new(store, rng, &format!("{name}.v"), d_y, d, false);
        let o = Linear::new(store, rng, &format!("{name}.o"), d, d, false);
        let gamma = store.add(format!("{name}.gamma"), Array2::zeros((1, 1)));
        let order = order_positions
            .map(|p| store.add(format!("{name}.order"), init::normal(rng, p, d_y, 1.0 / (d_y as f64).sqrt())));
        Self { q, k, v, o, gamma, order, heads, head_dim: d / heads, dropout }
    }

    /// `events` is K × D_y.
    pub fn forward(&self, g: &mut Graph, x: Var, events: Var, ctx: &mut Ctx) -> Var {
        let n_events = g.shape(events).0;
        let e = match self.order {
            Some(table) => {
                let t = g.param(table);
                let positions = g.shape(t).0;
                let rows: Vec<usize> = (0..n_events).map(|i| i.min(positions - 1)).collect();
                let pe = g.gather_rows(t, &rows);
                g.add(events, pe)
            }
            None => events,
        };
        let q = self.q.forward(g, x);
        let k = self.k.forward(g, e);
        let v = self.v.forward(g, e);
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        for hd in 0..self.heads {
            let (a, b) = (hd * self.head_dim, (hd + 1) * self.head_dim);
            let qh = g.slice_cols(q, a, b);
            let kh = g.slice_cols(k, a, b);
            let vh = g.slice_cols(v, a, b);
            let kt = g.transpose(kh);
            let s = g.matmul(qh, kt);
            let s = g.scale(s, scale);
            let att = g.softmax_rows(s);
            let att_val = g.value(att).clone();
            ctx.record(|p| p.eca_attention.push(att_val));
            heads.push(g.matmul(att, vh));
        }
        let z = g.concat_cols(&heads);
        let z = self.o.forward(g, z);
        let z = ctx.dropout(g, z, self.dropout);
        let gamma = g.param(self.gamma);
        g.mul_scalar(z, gamma)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = [self.q.params(), self.k.params(), self.v.params(), self.o.params()].concat();
        v.push(self.gamma);
        v.extend(self.order);
        v
    }
}

/// Pre-norm PW expand → GLU → depthwise conv → LayerNorm → SiLU → PW.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ConformerConv {
    pub ln: LayerNorm,
    pub expand: Linear,
    pub dw: ParamId,
    pub dw_b: ParamId,
    pub norm: LayerNorm,
    pub project: Linear,
    pub channels: usize,
}

impl ConformerConv {
    pub fn new(store: &mut ParamStore, rng: &mut init::Rng, name: &str, d: usize, kernel: usize) -> Self {
        let ln = LayerNorm::new(store, &format!("{name}.ln"), d);
        let expand = Linear::new(store, rng, &format!("{name}.expand"), d, 2 * d, true);
        let (dw, dw_b) = dw_kernel(store, rng, &format!("{name}.dw"), kernel, d);
        let norm = LayerNorm::new(store, &format!("{name}.norm"), d);
        let project = Linear::new(store, rng, &format!("{name}.project"), d, d, true);
        Self { ln, expand, dw, dw_b, norm, project, channels: d }
    }

    /// Gated linear unit over the expanded channels; returns `L × channels`.
    pub fn glu(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.ln.forward(g, x);
        let h = self.expand.forward(g, h);
        let c = g.shape(h).1 / 2;
        let a = g.slice_cols(h, 0, c);
        let b = g.slice_cols(h, c, 2 * c);
        let gate = g.sigmoid(b);
        g.mul(a, gate)
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.glu(g, x);
        let h = depthwise(g, h, self.dw, self.dw_b);
        let h = self.norm.forward(g, h);
        let h = g.silu(h);
        self.project.forward(g, h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = [self.ln.params(), self.expand.params()].concat();
        v.extend([self.dw, self.dw_b]);
        v.extend(self.norm.params());
        v.extend(self.project.params());
        v
    }
}

/// Pre-norm feed-forward: LN → Linear(D, eD) → SiLU → Dropout → Linear(eD, D) → Dropout.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Ffn {
    pub ln: LayerNorm,
    pub l1: Linear,
    pub l2: Linear,
    pub dropout: f64,
}

impl Ffn {
    pub fn new(store: &mut ParamStore, rng: &mut init::Rng, name: &str, d: usize, expansion: usize, dropout: f64) -> Self {
        let ln = LayerNorm::new(store, &format!("{name}.ln"), d);
        let l1 = Linear::new(store, rng, &format!("{name}.l1"), d, d * expansion, true);
        let l2 = Linear::new(store, rng, &format!("{name}.l2"), d * expansion, d, true);
        Self { ln, l1, l2, dropout }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, ctx: &mut Ctx) -> Var {
        let h = self.ln.forward(g, x);
        let h = self.l1.forward(g, h);
        let h = g.silu(h);
        let h = ctx.dropout(g, h, self.dropout);
        let h = self.l2.forward(g, h);
        ctx.dropout(g, h, self.dropout)
    }

    pub fn params(&self) -> Vec<ParamId> {
        [self.ln.params(), self.l1.params(), self.l2.params()].concat()
    }
}

/// Linear-interpolation weights mapping `l_in` frames to `l_out` (half-pixel centres).
pub fn interpolation_matrix(l_out: usize, l_in: usize) -> Array2<f64> {
    let mut m = Array2::zeros((l_out, l_in));
    let ratio = l_in as f64 / l_out as f64;
    for i in 0..l_out {
        let p = ((i as f64 + 0.5) * ratio - 0.5).clamp(0.0, (l_in - 1) as f64);
        let lo = p.floor() as usize;
        let hi = (lo + 1).min(l_in - 1);
        let w = p - lo as f64;
        m[[i, lo]] += 1.0 - w;
        m[[i, hi]] += w;
    }
    m
}

/// Fixed interpolation to the target length, then a learned depthwise and pointwise conv.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Upsampler {
    pub dw: ParamId,
    pub dw_b: ParamId,
    pub pw: Linear,
}

impl Upsampler {
    pub fn new(store: &mut ParamStore, rng: &mut init::Rng, name: &str, d: usize, width: usize) -> Self {
        let (dw, dw_b) = dw_kernel(store, rng, &format!("{name}.dw"), width, d);
        let pw = Linear::new(store, rng, &format!("{name}.pw"), d, d, true);
        Self { dw, dw_b, pw }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, l_out: usize) -> Var {
        let l_in = g.shape(x).0;
        let up = g.left_mul_const(Arc::new(interpolation_matrix(l_out, l_in)), x);
        let h = depthwise(g, up, self.dw, self.dw_b);
        self.pw.forward(g, h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = vec![self.dw, self.dw_b];
        v.extend(self.pw.params());
        v
    }
}

/// Sinusoidal embedding of a scalar position or timestep, 1 × dim.
pub fn sinusoidal(pos: f64, dim: usize) -> Array2<f64> {
    let half = dim / 2;
    let mut out = Array2::zeros((1, dim));
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half.max(1) as f64).exp();
        out[[0, i]] = (pos * freq).sin();
        out[[0, half + i]] = (pos * freq).cos();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups_clamp_to_divisors() {
        assert_eq!(clamp_groups(8, 64), 8);
        assert_eq!(clamp_groups(8, 4), 4);
        assert_eq!(clamp_groups(8, 12), 6);
        assert_eq!(clamp_groups(8, 7), 7);
        assert_eq!(clamp_groups(8, 1), 1);
    }

    #[test]
    fn buckets_exact_then_log_spaced() {
        let mut store = ParamStore::new();
        let rb = RelativeBias::new(&mut store, "rel", 32, 8, 128, 2);
        for r in 0..8 {
            assert_eq!(rb.bucket(-r), r as usize);
        }
        for r in 1..8 {
            assert_eq!(rb.bucket(r), 16 + r as usize);
        }
        assert!(rb.bucket(9) >= 24 && rb.bucket(9) < 32);
        assert_eq!(rb.bucket(10_000), 31);
        assert_eq!(rb.bucket(-10_000), 15);
        let mut prev = 0;
        for r in 0..300 {
            let b = rb.bucket(r);
            assert!(b >= prev || r == 1);
            prev = b;
        }
    }

    #[test]
    fn interpolation_rows_sum_to_one_and_identity() {
        let m = interpolation_matrix(19, 3);
        for r in m.rows() {
            assert!((r.sum() - 1.0).abs() < 1e-12);
        }
        assert_eq!(interpolation_matrix(5, 5), Array2::<f64>::eye(5));
    }

    #[test]
    fn fold_index_pads_tail() {
        let (idx, n) = fold_index(5, 1, 2);
        assert_eq!(n, 3);
        assert_eq!(idx.as_slice(), &[Some(0), Some(1), Some(2), Some(3), Some(4), None]);
    }
}
