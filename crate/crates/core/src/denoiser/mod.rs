//! The conditional denoiser: stacked blocks of local convolution, gated global
//! text injection, self-attention, event cross-attention and convolution.

pub mod layers;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::nn::{init, Linear};
use crate::text::{ConditioningBundle, ConditioningMode, NullTokens};

pub use layers::{Atii, ConformerConv, ConformerSa, Ctx, Eca, Ffn, Limm, Probe, RelativeBias, Upsampler};

#[derive(Debug, Error, PartialEq)]
pub enum DenoiserError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("timestep {t} outside 1..={max}")]
    TimestepOutOfRange { t: usize, max: usize },
    #[error("invalid denoiser config: {0}")]
    Config(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    Conformer,
    Transformer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub n_blocks: usize,
    pub hidden: usize,
    pub downsample: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub ffn_expansion: usize,
    pub conv_kernel: usize,
    /// Depthwise kernel width of the upsampler.
    pub conv_width: usize,
    pub dropout_p: f64,
    pub backbone: Backbone,
    pub motion_dim: usize,
    pub text_dim: usize,
    pub gn_groups: usize,
    pub rel_buckets: usize,
    pub rel_exact: usize,
    pub rel_max_distance: usize,
    /// Downsample and upsample inside every block instead of once around the stack.
    pub downsample_per_block: bool,
    /// Add learned position vectors to event tokens before cross-attention.
    pub event_order_embedding: bool,
    pub max_event_positions: usize,
    pub conditioning: ConditioningMode,
    /// Largest valid diffusion timestep.
    pub timesteps: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            n_blocks: 4,
            hidden: 256,
            downsample: 8,
            heads: 4,
            head_dim: 64,
            ffn_expansion: 2,
            conv_kernel: 3,
            conv_width: 4,
            dropout_p: 0.1,
            backbone: Backbone::Conformer,
            motion_dim: 263,
            text_dim: 256,
            gn_groups: 8,
            rel_buckets: 32,
            rel_exact: 8,
            rel_max_distance: 128,
            downsample_per_block: false,
            event_order_embedding: true,
            max_event_positions: 64,
            conditioning: ConditioningMode::Event,
            timesteps: 1000,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<(), DenoiserError> {
        let bad = |m: String| Err(DenoiserError::Config(m));
        if self.heads * self.head_dim != self.hidden {
            return bad(format!("heads {} x head_dim {} != hidden {}", self.heads, self.head_dim, self.hidden));
        }
        if self.downsample < 1 {
            return bad("downsample must be at least 1".into());
        }
        if self.n_blocks < 1 || self.motion_dim < 1 || self.text_dim < 1 || self.conv_kernel < 1 || self.conv_width < 1 {
            return bad("block count, widths and kernels must be positive".into());
        }
        if self.rel_buckets < 2 || self.rel_buckets % 2 != 0 || self.rel_exact < 1 || self.rel_max_distance <= self.rel_exact {
            return bad("relative bias needs an even bucket count and max_distance > exact".into());
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout_p));
        }
        if self.timesteps < 1 || self.max_event_positions < 1 {
            return bad("timesteps and event positions must be positive".into());
        }
        Ok(())
    }

    /// Hidden length after downsampling `len` frames.
    pub fn reduced_len(&self, len: usize) -> usize {
        len.div_ceil(self.downsample)
    }
}

/// Hidden sequence and timestep embedding passed between blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockState {
    pub x: Array2<f64>,
    pub t_embed: Array1<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Block {
    pub limm_in: Limm,
    pub atii: Atii,
    pub ffn1: Ffn,
    pub sa: ConformerSa,
    pub eca: Eca,
    pub conv: Option<ConformerConv>,
    /// Replaces the convolution module in the transformer backbone.
    pub ffn_mid: Option<Ffn>,
    pub ffn2: Ffn,
    pub limm_out: Limm,
}

impl Block {
    fn new(store: &mut ParamStore, rng: &mut init::Rng, cfg: &DenoiserConfig, i: usize, stride: usize) -> Self {
        let d = cfg.hidden;
        let name = |s: &str| format!("block{i}.{s}");
        let limm_in = Limm::new(store, rng, &name("limm_in"), 2 * d, d, cfg.conv_kernel, cfg.gn_groups);
        let atii = Atii::new(store, rng, &name("atii"), d, cfg.text_dim, stride);
        let ffn1 = Ffn::new(store, rng, &name("ffn1"), d, cfg.ffn_expansion, cfg.dropout_p);
        let sa = ConformerSa::new(store, rng, &name("sa"), d, cfg.heads);
        let order = cfg.event_order_embedding.then_some(cfg.max_event_positions);
        let eca = Eca::new(store, rng, &name("eca"), d, cfg.text_dim, cfg.heads, order, cfg.dropout_p);
        let (conv, ffn_mid) = match cfg.backbone {
            Backbone::Conformer => (Some(ConformerConv::new(store, rng, &name("conv"), d, cfg.conv_kernel)), None),
            Backbone::Transformer => (None, Some(Ffn::new(store, rng, &name("ffn_mid"), d, cfg.ffn_expansion, cfg.dropout_p))),
        };
        let ffn2 = Ffn::new(store, rng, &name("ffn2"), d, cfg.ffn_expansion, cfg.dropout_p);
        let limm_out = Limm::new(store, rng, &name("limm_out"), d, d, cfg.conv_kernel, cfg.gn_groups);
        Self { limm_in, atii, ffn1, sa, eca, conv, ffn_mid, ffn2, limm_out }
    }

    /// One block. `t_embed` and `global` are row vectors; `events` is `None`
    /// when cross-attention is disabled.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        x: Var,
        t_embed: Var,
        global: Var,
        events: Option<Var>,
        rel: Option<&RelativeBias>,
        ctx: &mut Ctx,
    ) -> Var {
        let l = g.shape(x).0;
        let tb = g.broadcast_rows(t_embed, l);
        let xt = g.concat_cols(&[x, tb]);
        let h = self.limm_in.forward(g, xt);
        let x = g.add(x, h);

        let x = self.atii.forward(g, x, global, ctx);

        let h = self.ffn1.forward(g, x, ctx);
        let x = g.scale(x, 0.5);
        let x = g.add(x, h);

        let h = self.sa.forward(g, x, rel, None, ctx);
        let x = g.add(x, h);

        let x = match events {
            Some(e) => {
                let h = self.eca.forward(g, x, e, ctx);
                g.add(x, h)
            }
            None => x,
        };

        let h = match (&self.conv, &self.ffn_mid) {
            (Some(conv), _) => conv.forward(g, x),
            (None, Some(ffn)) => ffn.forward(g, x, ctx),
            (None, None) => unreachable!("block has neither convolution nor feed-forward"),
        };
        let x = g.add(x, h);

        let h = self.ffn2.forward(g, x, ctx);
        let x = g.scale(x, 0.5);
        let x = g.add(x, h);

        let h = self.limm_out.forward(g, x);
        g.add(x, h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.limm_in.params();
        v.extend(self.atii.params());
        v.extend(self.ffn1.params());
        v.extend(self.sa.params());
        v.extend(self.eca.params());
        v.extend(self.conv.iter().flat_map(|c| c.params()));
        v.extend(self.ffn_mid.iter().flat_map(|f| f.params()));
        v.extend(self.ffn2.params());
        v.extend(self.limm_out.params());
        v
    }
}

/// Parameter layout of the full network.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Layout {
    pub input: Linear,
    pub blocks: Vec<Block>,
    pub rel: Option<RelativeBias>,
    pub upsamplers: Vec<Upsampler>,
    pub output: Linear,
    pub null: NullTokens,
}

#[derive(Clone, Debug)]
pub struct Denoiser {
    pub cfg: DenoiserConfig,
    pub store: ParamStore,
    pub layout: Layout,
}

impl Denoiser {
    pub fn new(cfg: DenoiserConfig, seed: u64) -> Result<Self, DenoiserError> {
        cfg.validate()?;
        let mut rng = init::rng(seed);
        let mut store = ParamStore::new();
        let d = cfg.hidden;
        let input = Linear::new(&mut store, &mut rng, "input", cfg.motion_dim, d, true);
        let blocks: Vec<Block> = (0..cfg.n_blocks)
            .map(|i| {
                let stride = if i == 0 || cfg.downsample_per_block { cfg.downsample } else { 1 };
                Block::new(&mut store, &mut rng, &cfg, i, stride)
            })
            .collect();
        let rel = (cfg.backbone == Backbone::Conformer)
            .then(|| RelativeBias::new(&mut store, "rel", cfg.rel_buckets, cfg.rel_exact, cfg.rel_max_distance, cfg.heads));
        let n_up = if cfg.downsample_per_block { cfg.n_blocks } else { 1 };
        let upsamplers =
            (0..n_up).map(|i| Upsampler::new(&mut store, &mut rng, &format!("up{i}"), d, cfg.conv_width)).collect();
        let output = Linear::new(&mut store, &mut rng, "output", d, cfg.motion_dim, true);
        let null = NullTokens::new(&mut store, &mut rng, cfg.text_dim);
        Ok(Self { cfg, store, layout: Layout { input, blocks, rel, upsamplers, output, null } })
    }

    /// Rebuild around an existing parameter store (e.g. from a checkpoint).
    pub fn from_store(cfg: DenoiserConfig, store: ParamStore) -> Result<Self, DenoiserError> {
        let fresh = Self::new(cfg, 0)?;
        if fresh.store.len() != store.len() {
            return Err(DenoiserError::ShapeMismatch(format!(
                "store has {} tensors, config expects {}",
                store.len(),
                fresh.store.len()
            )));
        }
        for id in fresh.store.ids() {
            if fresh.store.name(id) != store.name(id) || fresh.store.get(id).dim() != store.get(id).dim() {
                return Err(DenoiserError::ShapeMismatch(format!(
                    "tensor {} is {} {:?}, expected {} {:?}",
                    id.0,
                    store.name(id),
                    store.get(id).dim(),
                    fresh.store.name(id),
                    fresh.store.get(id).dim()
                )));
            }
        }
        Ok(Self { cfg: fresh.cfg, store, layout: fresh.layout })
    }

    pub fn null_tokens(&self) -> NullTokens {
        self.layout.null
    }

    /// Parameters of every event cross-attention γ.
    pub fn gammas(&self) -> Vec<ParamId> {
        self.layout.blocks.iter().map(|b| b.eca.gamma).collect()
    }

    pub fn timestep_embedding(&self, t: usize) -> Array2<f64> {
        layers::sinusoidal(t as f64, self.cfg.hidden)
    }

    pub fn check_inputs(&self, x_t: &Array2<f64>, t: usize, bundle: &ConditioningBundle) -> Result<(), DenoiserError> {
        if t < 1 || t > self.cfg.timesteps {
            return Err(DenoiserError::TimestepOutOfRange { t, max: self.cfg.timesteps });
        }
        if x_t.ncols() != self.cfg.motion_dim || x_t.nrows() == 0 {
            return Err(DenoiserError::ShapeMismatch(format!(
                "motion is {:?}, expected L x {} with L >= 1",
                x_t.dim(),
                self.cfg.motion_dim
            )));
        }
        if bundle.dim() != self.cfg.text_dim || bundle.global.len() != self.cfg.text_dim || bundle.k() == 0 {
            return Err(DenoiserError::ShapeMismatch(format!(
                "bundle is {} x {} with global {}, expected K >= 1 rows of width {}",
                bundle.k(),
                bundle.dim(),
                bundle.global.len(),
                self.cfg.text_dim
            )));
        }
        Ok(())
    }

    /// Conditioning nodes `(G, E)`. The null bundle reads the learned tokens
    /// as parameters so they receive gradients.
    pub fn condition(&self, g: &mut Graph, bundle: &ConditioningBundle) -> (Var, Option<Var>) {
        let (global, events) = if bundle.null {
            (g.param(self.layout.null.global), g.param(self.layout.null.event))
        } else {
            let gl = bundle.global.clone().insert_axis(ndarray::Axis(0));
            (g.constant(gl), g.constant(bundle.events.clone()))
        };
        let events = (self.cfg.conditioning != ConditioningMode::GlobalOnly).then_some(events);
        (global, events)
    }

    /// Graph-building forward pass returning x̂₀ (`L × D_m`). Inputs are assumed checked.
    pub fn forward_graph(&self, g: &mut Graph, x_t: Var, t: usize, bundle: &ConditioningBundle, ctx: &mut Ctx) -> Var {
        let len = g.shape(x_t).0;
        let mut h = self.layout.input.forward(g, x_t);
        if self.cfg.backbone == Backbone::Transformer {
            let pos = Array2::from_shape_fn((len, self.cfg.hidden), |(i, j)| {
                layers::sinusoidal(i as f64, self.cfg.hidden)[[0, j]]
            });
            let pos = g.constant(pos);
            h = g.add(h, pos);
        }
        let temb = g.constant(self.timestep_embedding(t));
        let (global, events) = self.condition(g, bundle);
        let rel = self.layout.rel.as_ref();
        for (i, block) in self.layout.blocks.iter().enumerate() {
            h = block.forward(g, h, temb, global, events, rel, ctx);
            if self.cfg.downsample_per_block {
                h = self.layout.upsamplers[i].forward(g, h, len);
            }
        }
        if !self.cfg.downsample_per_block {
            h = self.layout.upsamplers[0].forward(g, h, len);
        }
        self.layout.output.forward(g, h)
    }

    /// Eval-mode prediction of the clean motion.
    pub fn predict(&self, x_t: &Array2<f64>, t: usize, bundle: &ConditioningBundle) -> Result<Array2<f64>, DenoiserError> {
        self.predict_with(x_t, t, bundle, &mut Ctx::eval())
    }

    pub fn predict_with(
        &self,
        x_t: &Array2<f64>,
        t: usize,
        bundle: &ConditioningBundle,
        ctx: &mut Ctx,
    ) -> Result<Array2<f64>, DenoiserError> {
        self.check_inputs(x_t, t, bundle)?;
        let mut g = Graph::inference(&self.store);
        let x = g.constant(x_t.clone());
        let out = self.forward_graph(&mut g, x, t, bundle, ctx);
        Ok(g.value(out).clone())
    }

    /// Run block `i` on numeric state in eval mode.
    pub fn block_forward(&self, i: usize, state: &BlockState, bundle: &ConditioningBundle) -> Result<BlockState, DenoiserError> {
        let block = self
            .layout
            .blocks
            .get(i)
            .ok_or_else(|| DenoiserError::ShapeMismatch(format!("block {i} of {}", self.cfg.n_blocks)))?;
        if state.x.ncols() != self.cfg.hidden || state.t_embed.len() != self.cfg.hidden || state.x.nrows() == 0 {
            return Err(DenoiserError::ShapeMismatch(format!(
                "state {:?} with t_embed {}, expected width {}",
                state.x.dim(),
                state.t_embed.len(),
                self.cfg.hidden
            )));
        }
        if bundle.dim() != self.cfg.text_dim || bundle.k() == 0 {
            return Err(DenoiserError::ShapeMismatch(format!("bundle width {} != {}", bundle.dim(), self.cfg.text_dim)));
        }
        let mut g = Graph::inference(&self.store);
        let x = g.constant(state.x.clone());
        let t = g.constant(state.t_embed.clone().insert_axis(ndarray::Axis(0)));
        let (global, events) = self.condition(&mut g, bundle);
        let out = block.forward(&mut g, x, t, global, events, self.layout.rel.as_ref(), &mut Ctx::eval());
        Ok(BlockState { x: g.value(out).clone(), t_embed: state.t_embed.clone() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> DenoiserConfig {
        DenoiserConfig {
            n_blocks: 2,
            hidden: 8,
            downsample: 2,
            heads: 2,
            head_dim: 4,
            motion_dim: 3,
            text_dim: 4,
            ..DenoiserConfig::default()
        }
    }

    fn bundle(k: usize, d_y: usize) -> ConditioningBundle {
        let e = Array2::from_shape_fn((k, d_y), |(i, j)| ((i * 7 + j) as f64 * 0.37).sin());
        let g = Array1::from_shape_fn(d_y, |j| (j as f64 * 0.5).cos());
        ConditioningBundle::new(e, g)
    }

    #[test]
    fn config_validation() {
        assert!(DenoiserConfig::default().validate().is_ok());
        let bad = DenoiserConfig { heads: 3, ..tiny() };
        assert!(matches!(bad.validate(), Err(DenoiserError::Config(_))));
        let bad = DenoiserConfig { downsample: 0, ..tiny() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn rejects_bad_timestep_and_shape() {
        let m = Denoiser::new(tiny(), 0).unwrap();
        let x = Array2::zeros((5, 3));
        let b = bundle(2, 4);
        assert_eq!(m.predict(&x, 0, &b), Err(DenoiserError::TimestepOutOfRange { t: 0, max: 1000 }));
        assert!(matches!(m.predict(&x, 1001, &b), Err(DenoiserError::TimestepOutOfRange { .. })));
        assert!(matches!(m.predict(&Array2::zeros((5, 4)), 3, &b), Err(DenoiserError::ShapeMismatch(_))));
        assert!(matches!(m.predict(&x, 3, &bundle(2, 5)), Err(DenoiserError::ShapeMismatch(_))));
    }

    #[test]
    fn from_store_round_trip() {
        let m = Denoiser::new(tiny(), 3).unwrap();
        let r = Denoiser::from_store(tiny(), m.store.clone()).unwrap();
        let x = Array2::from_shape_fn((6, 3), |(i, j)| (i + j) as f64 * 0.1);
        let b = bundle(2, 4);
        assert_eq!(m.predict(&x, 10, &b).unwrap(), r.predict(&x, 10, &b).unwrap());
        let other = DenoiserConfig { n_blocks: 3, ..tiny() };
        assert!(Denoiser::from_store(other, m.store.clone()).is_err());
    }
}
