use evmotion::autograd::{Graph, ParamStore, Var};
use evmotion::denoiser::{Ctx, Denoiser, DenoiserConfig};
use evmotion::diffusion::{
    draw_training, guide, select_inference_steps, standard_normal, training_loss, DdpmSampler, DiffusionSchedule,
    GuidanceConfig, Sampler, ScheduleConfig, TrainDraw, X0Model,
};
use evmotion::gradcheck::{sample_entries, check_param_grads, GradCheck};
use evmotion::nn::init;
use evmotion::text::ConditioningBundle;
use ndarray::{Array1, Array2};
use proptest::prelude::*;

fn mat(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    init::normal(&mut init::rng(seed), rows, cols, 1.0)
}

fn schedule() -> DiffusionSchedule {
    DiffusionSchedule::new(&ScheduleConfig::default()).unwrap()
}

fn bundle(tag: f64) -> ConditioningBundle {
    ConditioningBundle::new(Array2::from_elem((2, 3), tag), Array1::from_elem(3, tag))
}

/// Predicts a fixed matrix regardless of input.
struct Constant {
    store: ParamStore,
    value: Array2<f64>,
}

impl X0Model for Constant {
    fn store(&self) -> &ParamStore {
        &self.store
    }
    fn unconditional(&self) -> ConditioningBundle {
        let mut b = bundle(0.0);
        b.null = true;
        b
    }
    fn x0_graph(&self, g: &mut Graph, _x: Var, _t: usize, _b: &ConditioningBundle, _c: &mut Ctx) -> Var {
        g.constant(self.value.clone())
    }
}

/// Affine in x_t with a bundle-dependent offset, so conditional and
/// unconditional predictions differ.
struct Affine {
    store: ParamStore,
}

impl X0Model for Affine {
    fn store(&self) -> &ParamStore {
        &self.store
    }
    fn unconditional(&self) -> ConditioningBundle {
        let mut b = bundle(-0.5);
        b.null = true;
        b
    }
    fn x0_graph(&self, g: &mut Graph, x: Var, t: usize, b: &ConditioningBundle, _c: &mut Ctx) -> Var {
        let (r, c) = g.shape(x);
        let xs = g.scale(x, 0.3 + 1e-4 * t as f64);
        let off = g.constant(Array2::from_shape_fn((r, c), |(i, j)| b.global[0] * (1.0 + i as f64 - 0.5 * j as f64)));
        g.add(xs, off)
    }
}

#[test]
fn schedule_endpoints_match_published_range() {
    let s = schedule();
    assert_eq!(s.t_max, 1000);
    assert_eq!(s.betas[0], 1e-4);
    assert_eq!(s.betas[999], 2e-2);
    assert!(s.betas.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn first_step_forward_noise() {
    let s = schedule();
    let x0 = mat(5, 4, 1);
    let eps = mat(5, 4, 2);
    let xt = s.forward_noise(&x0, 1, &eps).unwrap();
    let expect = &x0 * 0.9999f64.sqrt() + &eps * 0.0001f64.sqrt();
    assert!((&xt - &expect).iter().all(|d| d.abs() < 1e-12));
}

#[test]
fn zero_noise_scales_exactly() {
    let s = schedule();
    let x0 = mat(5, 4, 3);
    for t in [1, 10, 500, 1000] {
        let xt = s.forward_noise(&x0, t, &Array2::zeros((5, 4))).unwrap();
        assert_eq!(xt, x0.mapv(|v| s.alpha_bar(t).sqrt() * v + (1.0 - s.alpha_bar(t)).sqrt() * 0.0));
        assert_eq!(xt, x0.mapv(|v| s.alpha_bar(t).sqrt() * v));
    }
    assert!(s.forward_noise(&x0, 0, &x0).is_err());
    assert!(s.forward_noise(&x0, 1001, &x0).is_err());
}

#[test]
fn marginal_statistics() {
    let s = schedule();
    let n = 100_000;
    let x0 = 1.7;
    for t in [1usize, 100, 600, 1000] {
        let ab = s.alpha_bar(t);
        let eps = standard_normal(&mut init::rng(t as u64), (n, 1));
        let xt = s.forward_noise(&Array2::from_elem((n, 1), x0), t, &eps).unwrap();
        let mean = xt.mean().unwrap();
        let var = xt.mapv(|v| (v - mean).powi(2)).sum() / (n - 1) as f64;
        let sigma = (1.0 - ab).sqrt();
        assert!((mean - ab.sqrt() * x0).abs() < 4.0 * sigma / (n as f64).sqrt(), "t={t} mean {mean}");
        assert!((var / (1.0 - ab) - 1.0).abs() < 0.05, "t={t} var {var}");
    }
}

#[test]
fn posterior_matches_gaussian_conditioning() {
    // Oracle: combine the prior N(√ᾱ_p x₀, 1−ᾱ_p) on x_prev with the
    // likelihood N(x_t; √(ᾱ_t/ᾱ_p) x_prev, 1−ᾱ_t/ᾱ_p) by precision weighting.
    let s = schedule();
    for (t, prev) in [(2usize, 1usize), (1000, 889), (500, 1), (12, 11)] {
        let (c0, ct, var) = s.posterior(t, prev);
        let (ab_t, ab_p) = (s.alpha_bar(t), s.alpha_bar(prev));
        let a = (ab_t / ab_p).sqrt();
        let lik_var = 1.0 - ab_t / ab_p;
        let prior_var = 1.0 - ab_p;
        let post_var = 1.0 / (1.0 / prior_var + a * a / lik_var);
        let oracle_c0 = post_var * ab_p.sqrt() / prior_var;
        let oracle_ct = post_var * a / lik_var;
        assert!((var - post_var).abs() < 1e-12 * post_var.max(1e-300) + 1e-15);
        assert!((c0 - oracle_c0).abs() < 1e-9);
        assert!((ct - oracle_ct).abs() < 1e-9);
    }
}

#[test]
fn cfg_algebra() {
    let c = mat(4, 3, 1);
    let u = mat(4, 3, 2);
    assert_eq!(guide(&c, &u, 1.0), c);
    assert_eq!(guide(&c, &u, 0.0), u);
    let (g0, g1, g2) = (guide(&c, &u, 0.0), guide(&c, &u, 1.0), guide(&c, &u, 2.0));
    // Equal spacing in s implies g1 − g0 = g2 − g1 for an affine path.
    assert!(((&g1 - &g0) - (&g2 - &g1)).iter().all(|d| d.abs() < 1e-9));
    let g4 = guide(&c, &u, 4.0);
    assert!(((&g4 - &u) - (&c - &u) * 4.0).iter().all(|d| d.abs() < 1e-9));
}

#[test]
fn scale_one_follows_conditional_path() {
    let model = Affine { store: ParamStore::new() };
    let s = schedule();
    let guidance = GuidanceConfig { scale: 1.0, ..Default::default() };
    let b = bundle(0.8);
    let got = DdpmSampler.sample(&model, &b, 6, 3, &s, &guidance, 9).unwrap();

    // Reference loop using only conditional predictions.
    let mut rng = init::rng(9);
    let mut x = standard_normal(&mut rng, (6, 3));
    let steps = &s.inference_steps;
    for (i, &t) in steps.iter().enumerate() {
        let null = model.unconditional();
        let x0c = model.predict_x0(&x, t, &b).unwrap();
        let step_x0 = DdpmSampler::guided_x0(&model, &x, t, &b, &null, &guidance).unwrap();
        assert_eq!(step_x0, x0c.mapv(|v| v.clamp(-6.0, 6.0)));
        let prev = steps.get(i + 1).copied().unwrap_or(0);
        if prev == 0 {
            x = step_x0;
            break;
        }
        let (c0, ct, var) = s.posterior(t, prev);
        let z = standard_normal(&mut rng, (6, 3));
        x = ndarray::Zip::from(&step_x0).and(&x).and(&z).map_collect(|&a, &b, &z| c0 * a + ct * b + var.sqrt() * z);
    }
    assert_eq!(got, x);
}

#[test]
fn scale_zero_equals_unconditional_sampling() {
    let model = Affine { store: ParamStore::new() };
    let s = schedule();
    let zero = GuidanceConfig { scale: 0.0, ..Default::default() };
    let one = GuidanceConfig { scale: 1.0, ..Default::default() };
    let a = DdpmSampler.sample(&model, &bundle(0.8), 5, 3, &s, &zero, 4).unwrap();
    let b = DdpmSampler.sample(&model, &model.unconditional(), 5, 3, &s, &one, 4).unwrap();
    assert_eq!(a, b);
    let guided = DdpmSampler.sample(&model, &bundle(0.8), 5, 3, &s, &GuidanceConfig::default(), 4).unwrap();
    assert_ne!(guided, a);
}

#[test]
fn one_step_sampler_returns_constant_prediction() {
    let value = mat(7, 3, 5).mapv(|v| v * 0.5);
    let model = Constant { store: ParamStore::new(), value: value.clone() };
    let s = schedule().with_steps(1).unwrap();
    assert_eq!(s.inference_steps, vec![1000]);
    let out = DdpmSampler.sample(&model, &bundle(1.0), 7, 3, &s, &GuidanceConfig::default(), 0).unwrap();
    assert_eq!(out, value);
}

#[test]
fn clamp_applies_to_prediction() {
    let model = Constant { store: ParamStore::new(), value: Array2::from_elem((2, 2), 50.0) };
    let s = schedule().with_steps(1).unwrap();
    let out = DdpmSampler.sample(&model, &bundle(1.0), 2, 2, &s, &GuidanceConfig::default(), 0).unwrap();
    assert!(out.iter().all(|&v| v == 6.0));
}

fn tiny_denoiser(seed: u64) -> Denoiser {
    let cfg = DenoiserConfig {
        n_blocks: 2,
        hidden: 8,
        heads: 2,
        head_dim: 4,
        motion_dim: 3,
        text_dim: 3,
        downsample: 2,
        ..DenoiserConfig::default()
    };
    Denoiser::new(cfg, seed).unwrap()
}

#[test]
fn sampler_is_deterministic_and_leaves_parameters_alone() {
    let m = tiny_denoiser(1);
    let hash = m.store.fingerprint();
    let b = bundle(0.3);
    let mut outputs = Vec::new();
    for n in [5, 7, 10, 20] {
        let s = schedule().with_steps(n).unwrap();
        let a = DdpmSampler.sample(&m, &b, 9, 3, &s, &GuidanceConfig::default(), 17).unwrap();
        let c = DdpmSampler.sample(&m, &b, 9, 3, &s, &GuidanceConfig::default(), 17).unwrap();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            c.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(m.store.fingerprint(), hash);
        outputs.push(a);
    }
    assert_ne!(outputs[0], outputs[3]);
}

#[test]
fn perfect_predictor_has_zero_loss() {
    let x0 = mat(6, 3, 2);
    let model = Constant { store: ParamStore::new(), value: x0.clone() };
    let s = schedule();
    let mut rng = init::rng(0);
    for _ in 0..10 {
        let draw = draw_training(&mut rng, &s, &GuidanceConfig::default(), (6, 3));
        let mut g = Graph::new(&model.store);
        let l = training_loss(&mut g, &model, &s, &x0, &bundle(1.0), &draw, &mut Ctx::eval()).unwrap();
        assert_eq!(g.value(l)[[0, 0]], 0.0);
    }
}

#[test]
fn full_text_dropout_always_unconditional() {
    let s = schedule();
    let mut rng = init::rng(3);
    let always = GuidanceConfig { dropout: 1.0, ..Default::default() };
    let n_null = (0..500).filter(|_| draw_training(&mut rng, &s, &always, (2, 2)).unconditional).count();
    assert_eq!(n_null, 500);
    let never = GuidanceConfig { dropout: 0.0, ..Default::default() };
    assert!((0..500).all(|_| !draw_training(&mut rng, &s, &never, (2, 2)).unconditional));
    let default = GuidanceConfig::default();
    let n = (0..10_000).filter(|_| draw_training(&mut rng, &s, &default, (1, 1)).unconditional).count();
    // Binomial(10⁴, 0.2): σ = 40.
    assert!((n as f64 - 2000.0).abs() < 160.0, "{n}");
}

#[test]
fn timesteps_cover_the_range() {
    let s = schedule();
    let mut rng = init::rng(5);
    let ts: Vec<usize> = (0..20_000).map(|_| draw_training(&mut rng, &s, &GuidanceConfig::default(), (1, 1)).t).collect();
    assert_eq!(*ts.iter().min().unwrap(), 1);
    assert_eq!(*ts.iter().max().unwrap(), 1000);
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let mut m = tiny_denoiser(4);
    for id in m.gammas() {
        m.store.get_mut(id).fill(0.5);
    }
    let s = schedule();
    let x0 = mat(5, 3, 1);
    let b = bundle(0.7);
    for (i, unconditional) in [false, true].into_iter().enumerate() {
        let draw = TrainDraw { t: 321, eps: mat(5, 3, 2 + i as u64), unconditional };
        let picks = sample_entries(&m.store, 32, 7 + i as u64);
        check_param_grads(&m.store, &picks, |g| {
            training_loss(g, &m, &s, &x0, &b, &draw, &mut Ctx::eval()).unwrap()
        })
        .assert_within(GradCheck::DEFAULT_TOL);
    }
}

proptest! {
    #[test]
    fn noise_inversion(t in 1usize..=1000, seed in 0u64..10_000, scale in 0.01f64..100.0) {
        let s = schedule();
        let x0 = mat(4, 5, seed).mapv(|v| v * scale);
        let eps = mat(4, 5, seed + 1);
        let xt = s.forward_noise(&x0, t, &eps).unwrap();
        let back = s.recover_x0(&xt, t, &eps).unwrap();
        let err = (&back - &x0).iter().fold(0.0f64, |m, d| m.max(d.abs()));
        prop_assert!(err < 1e-9 * scale.max(1.0), "err {}", err);
    }

    #[test]
    fn schedule_invariants(t_max in 2usize..2000, lo in 1e-5f64..1e-3, span in 1e-3f64..0.05) {
        let cfg = ScheduleConfig { timesteps: t_max, beta_start: lo, beta_end: lo + span, inference_steps: 1 };
        let s = DiffusionSchedule::new(&cfg).unwrap();
        prop_assert!(s.betas.iter().all(|&b| b > 0.0 && b < 1.0));
        prop_assert!(s.alpha_bars.windows(2).all(|w| w[1] < w[0]));
        prop_assert!(s.alpha_bar(t_max) < s.alpha_bar(1) && s.alpha_bar(1) < 1.0);
        prop_assert!(s.alpha_bars.iter().all(|&a| a > 0.0));
    }

    #[test]
    fn inference_steps_spacing(t_max in 1usize..3000, frac in 0.0f64..1.0) {
        let n = 1 + ((t_max - 1) as f64 * frac) as usize;
        let steps = select_inference_steps(t_max, n).unwrap();
        prop_assert_eq!(steps.len(), n);
        prop_assert_eq!(steps[0], t_max);
        prop_assert!(steps.windows(2).all(|w| w[0] > w[1]));
        if n > 1 {
            prop_assert_eq!(*steps.last().unwrap(), 1);
        }
        // Evenly spaced with both ends included: gaps are (T − 1)/(n − 1) up to rounding.
        let bound = if n > 1 { (t_max - 1).div_ceil(n - 1) + 1 } else { 0 };
        prop_assert!(steps.windows(2).all(|w| w[0] - w[1] <= bound));
    }
}

#[test]
fn identity_and_ten_step_subsets() {
    let all = select_inference_steps(1000, 1000).unwrap();
    assert_eq!(all, (1..=1000).rev().collect::<Vec<_>>());
    let ten = select_inference_steps(1000, 10).unwrap();
    assert_eq!(ten, vec![1000, 889, 778, 667, 556, 445, 334, 223, 112, 1]);
    // Nine gaps must cover 999, so no 10-point subset containing 1 and 1000
    // can keep every gap within ceil(1000 / 10) + 1 = 101.
    let max_gap = ten.windows(2).map(|w| w[0] - w[1]).max().unwrap();
    assert_eq!(max_gap, 111);
    assert!(999usize.div_ceil(9) > 101);
}
