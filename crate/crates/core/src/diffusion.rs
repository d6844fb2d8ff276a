//! Forward noising, the x₀-prediction objective and the guided DDPM sampler.

use ndarray::Array2;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{Graph, ParamStore, Var};
use crate::data::{MotionSequence, NormStats};
use crate::denoiser::{Ctx, Denoiser, DenoiserError};
use crate::nn::init;
use crate::text::{null_bundle, ConditioningBundle};

#[derive(Debug, Error, PartialEq)]
pub enum DiffusionError {
    #[error("timestep {t} outside 1..={max}")]
    TimestepOutOfRange { t: usize, max: usize },
    #[error("cannot select {n} inference steps out of {t_max}")]
    InvalidStepCount { n: usize, t_max: usize },
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("invalid guidance: {0}")]
    Guidance(String),
    #[error(transparent)]
    Denoiser(#[from] DenoiserError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub inference_steps: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { timesteps: 1000, beta_start: 1e-4, beta_end: 2e-2, inference_steps: 10 }
    }
}

/// Tables indexed by timestep `t ∈ 1..=T` (stored at `t - 1`).
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    pub t_max: usize,
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
    /// Strictly decreasing.
    pub inference_steps: Vec<usize>,
}

impl DiffusionSchedule {
    pub fn new(cfg: &ScheduleConfig) -> Result<Self, DiffusionError> {
        let t_max = cfg.timesteps;
        if t_max < 1 {
            return Err(DiffusionError::Schedule("T must be at least 1".into()));
        }
        if !(cfg.beta_start > 0.0 && cfg.beta_end < 1.0 && (cfg.beta_start < cfg.beta_end || t_max == 1)) {
            return Err(DiffusionError::Schedule(format!(
                "betas must satisfy 0 < {} < {} < 1",
                cfg.beta_start, cfg.beta_end
            )));
        }
        let betas: Vec<f64> = (0..t_max)
            .map(|i| {
                if t_max == 1 {
                    cfg.beta_start
                } else {
                    cfg.beta_start + (cfg.beta_end - cfg.beta_start) * i as f64 / (t_max - 1) as f64
                }
            })
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(t_max);
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let inference_steps = select_inference_steps(t_max, cfg.inference_steps)?;
        Ok(Self { t_max, betas, alphas, alpha_bars, inference_steps })
    }

    pub fn with_steps(mut self, n: usize) -> Result<Self, DiffusionError> {
        self.inference_steps = select_inference_steps(self.t_max, n)?;
        Ok(self)
    }

    fn check(&self, t: usize) -> Result<(), DiffusionError> {
        if t < 1 || t > self.t_max {
            return Err(DiffusionError::TimestepOutOfRange { t, max: self.t_max });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// ᾱ_t, with ᾱ_0 = 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// x_t = √ᾱ_t x₀ + √(1−ᾱ_t) ε.
    pub fn forward_noise(&self, x0: &Array2<f64>, t: usize, eps: &Array2<f64>) -> Result<Array2<f64>, DiffusionError> {
        self.check(t)?;
        let ab = self.alpha_bar(t);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(ndarray::Zip::from(x0).and(eps).map_collect(|&x, &e| a * x + b * e))
    }

    /// Inverse of [`forward_noise`](Self::forward_noise) given the noise.
    pub fn recover_x0(&self, x_t: &Array2<f64>, t: usize, eps: &Array2<f64>) -> Result<Array2<f64>, DiffusionError> {
        self.check(t)?;
        let ab = self.alpha_bar(t);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(ndarray::Zip::from(x_t).and(eps).map_collect(|&x, &e| (x - b * e) / a))
    }

    /// Mean coefficients `(c_x0, c_xt)` and variance of q(x_prev | x_t, x₀)
    /// for a jump from `t` to `prev < t`.
    pub fn posterior(&self, t: usize, prev: usize) -> (f64, f64, f64) {
        let ab_t = self.alpha_bar(t);
        let ab_p = self.alpha_bar(prev);
        let beta = 1.0 - ab_t / ab_p;
        let alpha = 1.0 - beta;
        let c_x0 = ab_p.sqrt() * beta / (1.0 - ab_t);
        let c_xt = alpha.sqrt() * (1.0 - ab_p) / (1.0 - ab_t);
        let var = (1.0 - ab_p) / (1.0 - ab_t) * beta;
        (c_x0, c_xt, var)
    }
}

/// Evenly spaced timesteps from T down to 1 (just `[T]` for n = 1).
pub fn select_inference_steps(t_max: usize, n: usize) -> Result<Vec<usize>, DiffusionError> {
    if n < 1 || n > t_max {
        return Err(DiffusionError::InvalidStepCount { n, t_max });
    }
    if n == 1 {
        return Ok(vec![t_max]);
    }
    let mut steps: Vec<usize> = (0..n)
        .map(|i| (1.0 + i as f64 * (t_max - 1) as f64 / (n - 1) as f64).round() as usize)
        .collect();
    steps.dedup();
    steps.reverse();
    Ok(steps)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    pub scale: f64,
    /// Probability of replacing the bundle with the null bundle in training.
    pub dropout: f64,
    /// x̂₀ is clamped to ±clamp in normalised units.
    pub clamp: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self { scale: 4.0, dropout: 0.2, clamp: 6.0 }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<(), DiffusionError> {
        if !(self.scale >= 0.0 && self.scale.is_finite()) {
            return Err(DiffusionError::Guidance(format!("scale {} must be finite and >= 0", self.scale)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(DiffusionError::Guidance(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.clamp > 0.0) {
            return Err(DiffusionError::Guidance(format!("clamp {} must be positive", self.clamp)));
        }
        Ok(())
    }
}

/// uncond + s·(cond − uncond); s = 1 returns `cond` exactly.
pub fn guide(cond: &Array2<f64>, uncond: &Array2<f64>, s: f64) -> Array2<f64> {
    if s == 1.0 {
        return cond.clone();
    }
    ndarray::Zip::from(cond).and(uncond).map_collect(|&c, &u| u + s * (c - u))
}

/// Anything that predicts x̂₀ inside a graph.
pub trait X0Model {
    fn store(&self) -> &ParamStore;

    fn unconditional(&self) -> ConditioningBundle;

    fn x0_graph(&self, g: &mut Graph, x_t: Var, t: usize, bundle: &ConditioningBundle, ctx: &mut Ctx) -> Var;

    fn check(&self, _x_t: &Array2<f64>, _t: usize, _bundle: &ConditioningBundle) -> Result<(), DenoiserError> {
        Ok(())
    }

    fn predict_x0(&self, x_t: &Array2<f64>, t: usize, bundle: &ConditioningBundle) -> Result<Array2<f64>, DenoiserError> {
        self.check(x_t, t, bundle)?;
        let mut g = Graph::inference(self.store());
        let x = g.constant(x_t.clone());
        let out = self.x0_graph(&mut g, x, t, bundle, &mut Ctx::eval());
        Ok(g.value(out).clone())
    }
}

impl X0Model for Denoiser {
    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn unconditional(&self) -> ConditioningBundle {
        null_bundle(&self.store, &self.null_tokens())
    }

    fn x0_graph(&self, g: &mut Graph, x_t: Var, t: usize, bundle: &ConditioningBundle, ctx: &mut Ctx) -> Var {
        self.forward_graph(g, x_t, t, bundle, ctx)
    }

    fn check(&self, x_t: &Array2<f64>, t: usize, bundle: &ConditioningBundle) -> Result<(), DenoiserError> {
        self.check_inputs(x_t, t, bundle)
    }
}

/// Random choices for one training example.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainDraw {
    pub t: usize,
    pub eps: Array2<f64>,
    pub unconditional: bool,
}

pub fn draw_training(
    rng: &mut init::Rng,
    schedule: &DiffusionSchedule,
    guidance: &GuidanceConfig,
    shape: (usize, usize),
) -> TrainDraw {
    let t = rng.random_range(1..=schedule.t_max);
    let unconditional = rng.random::<f64>() < guidance.dropout;
    let eps = standard_normal(rng, shape);
    TrainDraw { t, eps, unconditional }
}

pub fn standard_normal(rng: &mut init::Rng, shape: (usize, usize)) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || StandardNormal.sample(rng))
}

/// Mean squared error between x₀ and the model's prediction from x_t.
pub fn training_loss<M: X0Model + ?Sized>(
    g: &mut Graph,
    model: &M,
    schedule: &DiffusionSchedule,
    x0: &Array2<f64>,
    bundle: &ConditioningBundle,
    draw: &TrainDraw,
    ctx: &mut Ctx,
) -> Result<Var, DiffusionError> {
    let x_t = schedule.forward_noise(x0, draw.t, &draw.eps)?;
    let null;
    let bundle = if draw.unconditional {
        null = model.unconditional();
        &null
    } else {
        bundle
    };
    model.check(&x_t, draw.t, bundle)?;
    let xv = g.constant(x_t);
    let pred = model.x0_graph(g, xv, draw.t, bundle, ctx);
    let target = g.constant(x0.clone());
    let d = g.sub(pred, target);
    let sq = g.square(d);
    Ok(g.mean(sq))
}

/// Reverse-process sampler producing motions in normalised feature space.
pub trait Sampler {
    #[allow(clippy::too_many_arguments)]
    fn sample(
        &self,
        model: &dyn X0Model,
        bundle: &ConditioningBundle,
        len: usize,
        dim: usize,
        schedule: &DiffusionSchedule,
        guidance: &GuidanceConfig,
        seed: u64,
    ) -> Result<Array2<f64>, DiffusionError>;
}

/// Ancestral sampling over the schedule's timestep subset with x̂₀-space guidance.
#[derive(Clone, Copy, Debug, Default)]
pub struct DdpmSampler;

impl DdpmSampler {
    /// Guided and clamped x̂₀ at one step.
    pub fn guided_x0(
        model: &dyn X0Model,
        x: &Array2<f64>,
        t: usize,
        bundle: &ConditioningBundle,
        null: &ConditioningBundle,
        guidance: &GuidanceConfig,
    ) -> Result<Array2<f64>, DiffusionError> {
        let s = guidance.scale;
        let x0 = if s == 1.0 {
            model.predict_x0(x, t, bundle)?
        } else if s == 0.0 {
            model.predict_x0(x, t, null)?
        } else {
            let c = model.predict_x0(x, t, bundle)?;
            let u = model.predict_x0(x, t, null)?;
            guide(&c, &u, s)
        };
        let clamp = guidance.clamp;
        Ok(x0.mapv(|v| v.clamp(-clamp, clamp)))
    }
}

impl Sampler for DdpmSampler {
    fn sample(
        &self,
        model: &dyn X0Model,
        bundle: &ConditioningBundle,
        len: usize,
        dim: usize,
        schedule: &DiffusionSchedule,
        guidance: &GuidanceConfig,
        seed: u64,
    ) -> Result<Array2<f64>, DiffusionError> {
        guidance.validate()?;
        let steps = &schedule.inference_steps;
        if steps.is_empty() || steps.windows(2).any(|w| w[0] <= w[1]) {
            return Err(DiffusionError::Schedule("inference steps must be non-empty and strictly decreasing".into()));
        }
        let mut rng = init::rng(seed);
        let null = model.unconditional();
        let mut x = standard_normal(&mut rng, (len, dim));
        for (i, &t) in steps.iter().enumerate() {
            let x0 = Self::guided_x0(model, &x, t, bundle, &null, guidance)?;
            let prev = steps.get(i + 1).copied().unwrap_or(0);
            if prev == 0 {
                x = x0;
                break;
            }
            let (c0, ct, var) = schedule.posterior(t, prev);
            let sd = var.sqrt();
            let z = standard_normal(&mut rng, (len, dim));
            x = ndarray::Zip::from(&x0).and(&x).and(&z).map_collect(|&a, &b, &z| c0 * a + ct * b + sd * z);
        }
        Ok(x)
    }
}

/// Sample and map back to raw feature units.
#[allow(clippy::too_many_arguments)]
pub fn sample_motion(
    model: &Denoiser,
    bundle: &ConditioningBundle,
    len: usize,
    schedule: &DiffusionSchedule,
    guidance: &GuidanceConfig,
    stats: &NormStats,
    fps: f64,
    id: &str,
    seed: u64,
) -> Result<MotionSequence, DiffusionError> {
    let x = DdpmSampler.sample(model, bundle, len, model.cfg.motion_dim, schedule, guidance, seed)?;
    let m = MotionSequence::new(id, fps, x).map_err(|e| DiffusionError::Schedule(e.to_string()))?;
    stats.denormalize(&m).map_err(|e| DiffusionError::Schedule(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let s = DiffusionSchedule::new(&ScheduleConfig::default()).unwrap();
        assert_eq!(s.beta(1), 1e-4);
        assert_eq!(s.beta(1000), 2e-2);
        assert_eq!(s.inference_steps.len(), 10);
        assert_eq!(s.inference_steps[0], 1000);
        assert_eq!(*s.inference_steps.last().unwrap(), 1);
    }

    #[test]
    fn step_selection_edges() {
        assert_eq!(select_inference_steps(1000, 1).unwrap(), vec![1000]);
        assert_eq!(select_inference_steps(5, 5).unwrap(), vec![5, 4, 3, 2, 1]);
        assert_eq!(select_inference_steps(10, 0), Err(DiffusionError::InvalidStepCount { n: 0, t_max: 10 }));
        assert!(select_inference_steps(10, 11).is_err());
    }

    #[test]
    fn guidance_validation() {
        assert!(GuidanceConfig::default().validate().is_ok());
        assert!(GuidanceConfig { dropout: 1.5, ..Default::default() }.validate().is_err());
        assert!(GuidanceConfig { scale: -1.0, ..Default::default() }.validate().is_err());
    }
}
