use std::collections::BTreeMap;

use evmotion::denoiser::{Denoiser, DenoiserConfig};
use evmotion::diffusion::{DiffusionSchedule, GuidanceConfig, ScheduleConfig};
use evmotion::evaluation::*;
use evmotion::nn::init;
use evmotion::segmentation::StratifiedBenchmark;
use evmotion::text::ConditioningBundle;
use ndarray::{array, Array1, Array2, ArrayView2, Axis};
use proptest::prelude::*;
use rand::Rng;

fn gaussian(n: usize, d: usize, mean: &[f64], sd: f64, seed: u64) -> Array2<f64> {
    let mut x = init::normal(&mut init::rng(seed), n, d, sd);
    for mut r in x.rows_mut() {
        for (v, m) in r.iter_mut().zip(mean) {
            *v += m;
        }
    }
    x
}

#[test]
fn fid_identical_sets_is_zero() {
    let x = gaussian(200, 4, &[0.0; 4], 1.0, 1);
    assert!(fid(&x, &x).unwrap().abs() < 1e-8);
}

#[test]
fn fid_mean_shift_matches_squared_norm() {
    let mu = [1.0, -2.0, 0.5];
    let a = gaussian(10_000, 3, &[0.0; 3], 1.0, 2);
    let b = gaussian(10_000, 3, &mu, 1.0, 3);
    let expect: f64 = mu.iter().map(|m| m * m).sum();
    let got = fid(&a, &b).unwrap();
    assert!((got - expect).abs() < 0.05 * expect, "{got} vs {expect}");
}

#[test]
fn fid_one_dimensional_variance_gap() {
    // N(0,1) vs N(0,4): (1 - 2)^2 = 1.
    let a = gaussian(20_000, 1, &[0.0], 1.0, 4);
    let b = gaussian(20_000, 1, &[0.0], 2.0, 5);
    let got = fid(&a, &b).unwrap();
    assert!((got - 1.0).abs() < 0.05, "{got}");
}

#[test]
fn fid_closed_form_for_diagonal_covariances() {
    // Diagonal sample covariances, so the trace term reduces to per-axis standard deviations.
    let a = array![[1.0, 0.0], [-1.0, 0.0], [0.0, 2.0], [0.0, -2.0]];
    let b = array![[3.0, 1.0], [1.0, 1.0], [2.0, 2.0], [2.0, 0.0]];
    let var_a = [2.0 / 3.0, 8.0 / 3.0];
    let var_b = [2.0 / 3.0, 2.0 / 3.0];
    let mean_gap: f64 = 2.0f64.powi(2) + 1.0f64.powi(2);
    let expect = mean_gap + var_a.iter().zip(&var_b).map(|(x, y): (&f64, &f64)| (x.sqrt() - y.sqrt()).powi(2)).sum::<f64>();
    assert!((fid(&a, &b).unwrap() - expect).abs() < 1e-9);
}

#[test]
fn fid_rejects_bad_input() {
    let a = Array2::zeros((1, 3));
    assert!(fid(&a, &a).is_err());
    assert!(fid(&Array2::zeros((4, 3)), &Array2::zeros((4, 2))).is_err());
}

#[test]
fn r_precision_chance_level() {
    // Independent embeddings: top-k ≈ k/32.
    let n = 4000;
    let g = gaussian(n, 8, &[0.0; 8], 1.0, 6);
    let t = gaussian(n, 8, &[0.0; 8], 1.0, 7);
    let r = r_precision(&g, &t, 32, 8).unwrap();
    for (k, v) in r.iter().enumerate() {
        let p = (k + 1) as f64 / 32.0;
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        assert!((v - p).abs() < 3.0 * sigma, "top{} = {v}, expected {p}", k + 1);
    }
}

#[test]
fn r_precision_perfect_retrieval() {
    let t = gaussian(64, 5, &[0.0; 5], 1.0, 9);
    assert_eq!(r_precision(&t, &t, 32, 0).unwrap(), [1.0, 1.0, 1.0]);
}

#[test]
fn r_precision_brute_force_and_monotone() {
    let g = gaussian(50, 3, &[0.0; 3], 1.0, 10);
    let t = &g + &gaussian(50, 3, &[0.0; 3], 0.7, 11);
    let pools = draw_pools(50, 32, 12).unwrap();
    let r = r_precision_pools(&g, &t, &pools).unwrap();
    let mut brute = [0.0; 3];
    for (i, pool) in pools.iter().enumerate() {
        let mut d: Vec<(f64, bool)> = pool
            .iter()
            .map(|&j| ((&g.row(i) - &t.row(j)).mapv(|v| v * v).sum().sqrt(), j == i))
            .collect();
        d.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let pos = d.iter().position(|x| x.1).unwrap();
        for (k, b) in brute.iter_mut().enumerate() {
            if pos <= k {
                *b += 1.0 / 50.0;
            }
        }
    }
    for k in 0..3 {
        assert!((r[k] - brute[k]).abs() < 1e-12);
    }
    assert!(r[0] <= r[1] && r[1] <= r[2]);
}

#[test]
fn mm_dist_unit_offset() {
    let t = gaussian(30, 4, &[0.0; 4], 1.0, 13);
    let mut g = t.clone();
    g.column_mut(2).mapv_inplace(|v| v + 1.0);
    assert!((mm_dist(&g, &t).unwrap() - 1.0).abs() < 1e-12);
    assert!(mm_dist(&g, &t.slice(ndarray::s![..29, ..]).to_owned()).is_err());
}

#[test]
fn mmodality_constant_pair_distance() {
    // Every pair sits 2 apart.
    let g = array![[0.0, 0.0], [2.0, 0.0]];
    assert!((mmodality(&[g.clone(), g], PairSelection::All, 0).unwrap() - 2.0).abs() < 1e-12);
}

#[test]
fn mmodality_exhaustive_oracle() {
    let groups: Vec<Array2<f64>> = (0..3).map(|s| gaussian(5, 3, &[0.0; 3], 1.0, 20 + s)).collect();
    let mut expect = 0.0;
    for g in &groups {
        let mut tot = 0.0;
        let mut cnt = 0.0;
        for i in 0..5 {
            for j in 0..5 {
                if i != j {
                    tot += (&g.row(i) - &g.row(j)).mapv(|v| v * v).sum().sqrt();
                    cnt += 1.0;
                }
            }
        }
        expect += tot / cnt / 3.0;
    }
    let got = mmodality(&groups, PairSelection::All, 0).unwrap();
    assert!((got - expect).abs() < 1e-12);
    assert!(matches!(
        mmodality(&[Array2::zeros((1, 3))], PairSelection::All, 0),
        Err(EvalError::TooFewGenerations { index: 0, got: 1 })
    ));
}

#[test]
fn mm_dist_brute_force_five_pairs() {
    let g = gaussian(5, 6, &[0.0; 6], 1.0, 30);
    let t = gaussian(5, 6, &[0.3; 6], 2.0, 31);
    let mut expect = 0.0;
    for i in 0..5 {
        let mut s = 0.0;
        for j in 0..6 {
            s += (g[[i, j]] - t[[i, j]]).powi(2);
        }
        expect += s.sqrt() / 5.0;
    }
    assert!((mm_dist(&g, &t).unwrap() - expect).abs() < 1e-9);
    assert_eq!(mm_dist(&t, &t).unwrap(), 0.0);
}

#[test]
fn mmodality_identical_generations_is_zero() {
    let row = gaussian(1, 3, &[0.0; 3], 1.0, 32);
    let g = ndarray::concatenate(Axis(0), &[row.view(); 4]).unwrap();
    assert_eq!(mmodality(&[g.clone(), g], PairSelection::Random(2), 1).unwrap(), 0.0);
}

proptest! {
    #[test]
    fn mmodality_zero_only_when_coincident(seed in 0u64..500, eps in 1e-6f64..1.0) {
        let row = gaussian(1, 3, &[0.0; 3], 1.0, seed);
        let mut g = ndarray::concatenate(Axis(0), &[row.view(); 4]).unwrap();
        prop_assert_eq!(mmodality(&[g.clone()], PairSelection::All, seed).unwrap(), 0.0);
        g[[3, 1]] += eps;
        prop_assert!(mmodality(&[g], PairSelection::All, seed).unwrap() > 0.0);
    }

    #[test]
    fn fid_is_symmetric_and_nonnegative(seed in 0u64..500, shift in -2.0f64..2.0) {
        let a = gaussian(40, 3, &[0.0; 3], 1.0, seed);
        let b = gaussian(30, 3, &[shift, 0.0, 0.0], 1.5, seed + 1);
        let (ab, ba) = (fid(&a, &b).unwrap(), fid(&b, &a).unwrap());
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() < 1e-8 * (1.0 + ab));
    }

    #[test]
    fn metrics_invariant_to_rotation(seed in 0u64..500, angle in 0.0f64..6.28) {
        let g = gaussian(40, 2, &[0.0; 2], 1.0, seed);
        let t = gaussian(40, 2, &[0.5, 0.0], 1.0, seed + 7);
        let rot = array![[angle.cos(), -angle.sin()], [angle.sin(), angle.cos()]];
        let (gr, tr) = (g.dot(&rot), t.dot(&rot));
        prop_assert!((mm_dist(&g, &t).unwrap() - mm_dist(&gr, &tr).unwrap()).abs() < 1e-9);
        prop_assert!((fid(&g, &t).unwrap() - fid(&gr, &tr).unwrap()).abs() < 1e-7);
        let pools = draw_pools(40, 32, seed).unwrap();
        prop_assert_eq!(r_precision_pools(&g, &t, &pools).unwrap(), r_precision_pools(&gr, &tr, &pools).unwrap());
    }
}

/// Mean-pooled motion and a fixed random word table as a tiny evaluator.
struct PoolEvaluator;

impl EvaluatorPair for PoolEvaluator {
    fn embed_texts(&self, texts: &[&str]) -> Array2<f64> {
        let mut out = Array2::zeros((texts.len(), 4));
        for (i, t) in texts.iter().enumerate() {
            let h = t.bytes().fold(1469598103934665603u64, |h, b| (h ^ b as u64).wrapping_mul(1099511628211));
            let mut rng = init::rng(h);
            for v in out.row_mut(i).iter_mut() {
                *v = rng.random::<f64>() - 0.5;
            }
        }
        out
    }

    fn embed_motions(&self, motions: &[ArrayView2<f64>]) -> Array2<f64> {
        let rows: Vec<Array1<f64>> = motions.iter().map(|m| m.mean_axis(Axis(0)).unwrap()).collect();
        let views: Vec<_> = rows.iter().map(|r| r.view().insert_axis(Axis(0))).collect();
        ndarray::concatenate(Axis(0), &views).unwrap()
    }
}

fn tiny_setup() -> (Denoiser, DiffusionSchedule, Vec<EvalPrompt>, StratifiedBenchmark) {
    let cfg = DenoiserConfig {
        n_blocks: 1,
        hidden: 8,
        heads: 2,
        head_dim: 4,
        motion_dim: 4,
        text_dim: 4,
        downsample: 2,
        ..DenoiserConfig::default()
    };
    let model = Denoiser::new(cfg, 0).unwrap();
    let schedule = DiffusionSchedule::new(&ScheduleConfig { inference_steps: 3, ..ScheduleConfig::default() }).unwrap();
    let prompts: Vec<EvalPrompt> = (0..8)
        .map(|i| EvalPrompt {
            id: format!("p{i}"),
            caption: format!("caption {i}"),
            bundle: ConditioningBundle::new(
                init::normal(&mut init::rng(i), 1 + (i as usize % 4), 4, 0.5),
                Array1::from_elem(4, 0.1 * i as f64),
            ),
            reference: init::normal(&mut init::rng(50 + i), 4 + i as usize % 3, 4, 1.0),
        })
        .collect();
    let mut conditions = BTreeMap::new();
    conditions.insert(2, vec!["p1", "p2", "p3", "p5", "p6", "p7"].into_iter().map(String::from).collect());
    conditions.insert(3, vec!["p2", "p3", "p6", "p7"].into_iter().map(String::from).collect());
    conditions.insert(4, vec!["p3", "p7"].into_iter().map(String::from).collect());
    (model, schedule, prompts, StratifiedBenchmark { total: 8, conditions })
}

#[test]
fn dumped_embeddings_recompute_to_reported_metrics() {
    let (model, schedule, prompts, bench) = tiny_setup();
    let guidance = GuidanceConfig::default();
    let setup = SamplingSetup { model: &model, schedule: &schedule, guidance: &guidance };
    let cfg = EvalConfig { n_repeats: 3, pool_size: 2, n_candidates: 3, mm_pairs: 2, mm_prompts: 5, seed: 4 };
    let mut dumps = Vec::new();
    let report = evaluate(&setup, &prompts, &bench, &PoolEvaluator, &cfg, "tiny", Some(&mut dumps)).unwrap();
    assert_eq!(dumps.len(), 3 * 4);
    assert_eq!(report.sizes["all"], 8);
    assert_eq!(report.sizes[">=4"], 2);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("dump.jsonl");
    write_dumps(&path, &dumps).unwrap();
    let back = read_dumps(&path).unwrap();
    assert_eq!(back, dumps);

    let mut per: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for d in &back {
        let r = r_precision_pools(&d.generated, &d.text, &d.pools).unwrap();
        let mut m = BTreeMap::new();
        m.insert("fid", fid(&d.real, &d.generated).unwrap());
        m.insert("top1", r[0]);
        m.insert("top2", r[1]);
        m.insert("top3", r[2]);
        m.insert("mm_dist", mm_dist(&d.generated, &d.text).unwrap());
        m.insert(
            "mmodality",
            if d.mm_groups.is_empty() { f64::NAN } else { mmodality_with_pairs(&d.mm_groups, &d.mm_pairs).unwrap() },
        );
        for (k, v) in m {
            assert!(v.is_nan() && d.metrics[k].is_nan() || (v - d.metrics[k]).abs() < 1e-12, "{k}");
            per.entry((d.condition.clone(), k.to_string())).or_default().push(v);
        }
    }
    for ((c, k), vals) in per {
        let r = report.metric(&c, &k).unwrap();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        assert!(mean.is_nan() && r.value.is_nan() || (mean - r.value).abs() < 1e-12, "{c} {k}");
        assert_eq!(r.n_repeats, 3);
    }
    // Of the >=4 prompts only p3 is among the first five MModality prompts.
    assert_eq!(dumps.iter().find(|d| d.condition == ">=4").unwrap().mm_groups.len(), 1);

    report.write(dir.path(), "eval").unwrap();
    let json: EvaluationReport = serde_json::from_str(&std::fs::read_to_string(dir.path().join("eval.json")).unwrap()).unwrap();
    assert_eq!(json.conditions.len(), report.conditions.len());
    let table = std::fs::read_to_string(dir.path().join("eval.txt")).unwrap();
    assert!(table.contains(">=3") && table.contains("mmodality"));
}

#[test]
fn evaluation_is_deterministic_and_leaves_model_untouched() {
    let (model, schedule, prompts, bench) = tiny_setup();
    let before = model.store.fingerprint();
    let guidance = GuidanceConfig::default();
    let setup = SamplingSetup { model: &model, schedule: &schedule, guidance: &guidance };
    let cfg = EvalConfig { n_repeats: 2, pool_size: 4, n_candidates: 2, mm_pairs: 0, mm_prompts: 0, seed: 9 };
    let a = evaluate(&setup, &prompts, &bench, &PoolEvaluator, &cfg, "", None).unwrap();
    let b = evaluate(&setup, &prompts, &bench, &PoolEvaluator, &cfg, "", None).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    assert_eq!(model.store.fingerprint(), before);
    assert!(a.condition_order() == vec!["all", ">=2", ">=3", ">=4"]);
    assert_eq!((a.pools["all"], a.pools[">=4"]), (4, 2));
}

#[test]
fn evaluation_rejects_unknown_ids_and_big_pools() {
    let (model, schedule, prompts, mut bench) = tiny_setup();
    let guidance = GuidanceConfig::default();
    let setup = SamplingSetup { model: &model, schedule: &schedule, guidance: &guidance };
    let cfg = EvalConfig { n_repeats: 1, pool_size: 32, n_candidates: 2, ..EvalConfig::default() };
    assert!(matches!(
        evaluate(&setup, &prompts, &bench, &PoolEvaluator, &cfg, "", None),
        Err(EvalError::InsufficientPool { .. })
    ));
    bench.conditions.get_mut(&2).unwrap().push("zz".into());
    let cfg = EvalConfig { pool_size: 2, ..cfg };
    assert!(matches!(evaluate(&setup, &prompts, &bench, &PoolEvaluator, &cfg, "", None), Err(EvalError::UnknownId(_))));
}
