//! Distribution, retrieval and diversity metrics over evaluator embeddings,
//! repeated over sampling seeds and reported per event-count condition.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::index::sample as sample_indices;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::{DdpmSampler, DiffusionError, DiffusionSchedule, GuidanceConfig, Sampler, X0Model};
use crate::nn::init;
use crate::segmentation::StratifiedBenchmark;
use crate::text::StubEncoder;
use crate::text::ConditioningBundle;
use crate::training::derive_seed;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("pool of {pool} needs at least {pool} texts, have {available}")]
    InsufficientPool { pool: usize, available: usize },
    #[error("count mismatch: {0} vs {1}")]
    CountMismatch(usize, usize),
    #[error("prompt {index} has {got} generations, need at least 2")]
    TooFewGenerations { index: usize, got: usize },
    #[error("empty input: {0}")]
    Empty(String),
    #[error("invalid evaluation config: {0}")]
    Config(String),
    #[error("unknown benchmark id {0}")]
    UnknownId(String),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Text and motion towers mapping into one embedding space.
pub trait EvaluatorPair: Sync {
    fn embed_texts(&self, texts: &[&str]) -> Array2<f64>;
    /// Motions in normalised feature space.
    fn embed_motions(&self, motions: &[ArrayView2<f64>]) -> Array2<f64>;
}

impl EvaluatorPair for StubEncoder {
    fn embed_texts(&self, texts: &[&str]) -> Array2<f64> {
        StubEncoder::embed_texts(self, texts)
    }

    fn embed_motions(&self, motions: &[ArrayView2<f64>]) -> Array2<f64> {
        StubEncoder::embed_motions(self, motions)
    }
}

fn to_dmatrix(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

/// Sample mean and unbiased covariance of the rows.
pub fn mean_cov(x: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    let n = x.nrows();
    let mu = x.mean_axis(Axis(0)).expect("non-empty");
    let c = x - &mu;
    let cov = c.t().dot(&c) / (n.max(2) - 1) as f64;
    (mu, cov)
}

fn sym_sqrt(m: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(floor).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Eigenvalue floor used in the matrix square roots.
pub const FID_EIG_FLOOR: f64 = 1e-10;

/// Fréchet distance between Gaussian fits of two embedding sets.
pub fn fid(real: &Array2<f64>, gen: &Array2<f64>) -> Result<f64, EvalError> {
    if real.nrows() < 2 || gen.nrows() < 2 {
        return Err(EvalError::Empty("FID needs at least two embeddings per side".into()));
    }
    if real.ncols() != gen.ncols() {
        return Err(EvalError::CountMismatch(real.ncols(), gen.ncols()));
    }
    let d = real.ncols();
    if real.nrows() <= d || gen.nrows() <= d {
        log::warn!("degenerate covariance: {} / {} samples for dimension {d}", real.nrows(), gen.nrows());
    }
    let (mu_r, cov_r) = mean_cov(real);
    let (mu_g, cov_g) = mean_cov(gen);
    let diff = &mu_r - &mu_g;
    let (sr, sg) = (to_dmatrix(&cov_r), to_dmatrix(&cov_g));
    let root_r = sym_sqrt(&sr, FID_EIG_FLOOR);
    let inner = &root_r * &sg * &root_r;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|v| v.max(FID_EIG_FLOOR).sqrt()).sum();
    let value = diff.dot(&diff) + sr.trace() + sg.trace() - 2.0 * tr_sqrt;
    Ok(value.max(0.0))
}

fn dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Candidate pools: for each motion, its own caption index first, then
/// `pool_size - 1` distinct distractors drawn uniformly from the rest.
pub fn draw_pools(n: usize, pool_size: usize, seed: u64) -> Result<Vec<Vec<usize>>, EvalError> {
    if pool_size < 1 || pool_size > n {
        return Err(EvalError::InsufficientPool { pool: pool_size, available: n });
    }
    let mut rng = init::rng(seed);
    Ok((0..n)
        .map(|i| {
            let mut pool = vec![i];
            pool.extend(sample_indices(&mut rng, n - 1, pool_size - 1).into_iter().map(|j| if j >= i { j + 1 } else { j }));
            pool
        })
        .collect())
}

/// Top-1/2/3 retrieval accuracy over the given pools.
pub fn r_precision_pools(gen: &Array2<f64>, text: &Array2<f64>, pools: &[Vec<usize>]) -> Result<[f64; 3], EvalError> {
    if gen.nrows() != text.nrows() || pools.len() != gen.nrows() {
        return Err(EvalError::CountMismatch(gen.nrows(), text.nrows()));
    }
    let mut hits = [0usize; 3];
    for (i, pool) in pools.iter().enumerate() {
        let own = dist(gen.row(i), text.row(pool[0]));
        let rank = pool[1..].iter().filter(|&&j| dist(gen.row(i), text.row(j)) < own).count();
        for (k, h) in hits.iter_mut().enumerate() {
            if rank <= k {
                *h += 1;
            }
        }
    }
    let n = gen.nrows() as f64;
    Ok(hits.map(|h| h as f64 / n))
}

/// Top-k accuracy for k = 1, 2, 3 with seeded distractor pools.
pub fn r_precision(gen: &Array2<f64>, text: &Array2<f64>, pool_size: usize, seed: u64) -> Result<[f64; 3], EvalError> {
    let pools = draw_pools(gen.nrows(), pool_size, seed)?;
    r_precision_pools(gen, text, &pools)
}

/// Mean Euclidean distance between matched rows.
pub fn mm_dist(gen: &Array2<f64>, text: &Array2<f64>) -> Result<f64, EvalError> {
    if gen.nrows() != text.nrows() {
        return Err(EvalError::CountMismatch(gen.nrows(), text.nrows()));
    }
    if gen.nrows() == 0 {
        return Err(EvalError::Empty("no pairs".into()));
    }
    Ok(gen.rows().into_iter().zip(text.rows()).map(|(a, b)| dist(a, b)).sum::<f64>() / gen.nrows() as f64)
}

/// Which generation pairs enter MModality.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairSelection {
    All,
    Random(usize),
}

/// Generation pairs `(i, j)`, `i < j`, out of `m`: every pair for `All`, or
/// up to `n` disjoint pairs from a seeded shuffle for `Random(n)`.
pub fn mmodality_pairs(m: usize, selection: PairSelection, seed: u64) -> Vec<(usize, usize)> {
    match selection {
        PairSelection::All => (0..m).flat_map(|i| (i + 1..m).map(move |j| (i, j))).collect(),
        PairSelection::Random(n) => {
            let mut order: Vec<usize> = (0..m).collect();
            order.shuffle(&mut init::rng(seed));
            order.chunks_exact(2).take(n).map(|c| (c[0].min(c[1]), c[0].max(c[1]))).collect()
        }
    }
}

pub fn mmodality_with_pairs(groups: &[Array2<f64>], pairs: &[Vec<(usize, usize)>]) -> Result<f64, EvalError> {
    if groups.is_empty() {
        return Err(EvalError::Empty("no prompts".into()));
    }
    let mut total = 0.0;
    for (index, (g, ps)) in groups.iter().zip(pairs).enumerate() {
        if g.nrows() < 2 || ps.is_empty() {
            return Err(EvalError::TooFewGenerations { index, got: g.nrows() });
        }
        total += ps.iter().map(|&(i, j)| dist(g.row(i), g.row(j))).sum::<f64>() / ps.len() as f64;
    }
    Ok(total / groups.len() as f64)
}

/// Mean over prompts of the average distance between generation pairs.
pub fn mmodality(groups: &[Array2<f64>], selection: PairSelection, seed: u64) -> Result<f64, EvalError> {
    let pairs: Vec<_> =
        groups.iter().enumerate().map(|(i, g)| mmodality_pairs(g.nrows(), selection, derive_seed(seed, 0x3D, i as u64))).collect();
    mmodality_with_pairs(groups, &pairs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricResult {
    pub name: String,
    pub value: f64,
    /// Half-width of the normal-approximation 95% interval.
    pub ci95: f64,
    pub n_repeats: usize,
    /// Set when a single repeat makes the interval meaningless.
    #[serde(default)]
    pub degenerate_ci: bool,
}

impl MetricResult {
    pub fn from_repeats(name: &str, values: &[f64]) -> Self {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n.max(1) as f64;
        let ci95 = if n > 1 {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            1.96 * (var / n as f64).sqrt()
        } else {
            0.0
        };
        Self { name: name.to_string(), value: mean, ci95, n_repeats: n, degenerate_ci: n < 2 }
    }
}

pub const METRICS: [&str; 6] = ["fid", "top1", "top2", "top3", "mm_dist", "mmodality"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub n_repeats: usize,
    pub pool_size: usize,
    /// Generations per prompt for MModality.
    pub n_candidates: usize,
    /// Disjoint pairs per prompt for MModality; 0 means all pairs.
    pub mm_pairs: usize,
    /// Prompts used for MModality (first n of the benchmark order); 0 means all.
    pub mm_prompts: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { n_repeats: 20, pool_size: 32, n_candidates: 20, mm_pairs: 10, mm_prompts: 100, seed: 0 }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.n_repeats < 1 || self.pool_size < 1 {
            return Err(EvalError::Config("n_repeats and pool_size must be at least 1".into()));
        }
        if self.n_candidates < 2 {
            return Err(EvalError::Config("n_candidates must be at least 2".into()));
        }
        Ok(())
    }

    fn selection(&self) -> PairSelection {
        if self.mm_pairs == 0 {
            PairSelection::All
        } else {
            PairSelection::Random(self.mm_pairs)
        }
    }
}

/// One benchmark prompt with its reference motion (normalised).
#[derive(Clone, Debug)]
pub struct EvalPrompt {
    pub id: String,
    pub caption: String,
    pub bundle: ConditioningBundle,
    pub reference: Array2<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub steps: usize,
    pub guidance_scale: f64,
    pub n_repeats: usize,
    pub pool_size: usize,
    pub seed: u64,
    pub n_prompts: usize,
    #[serde(default)]
    pub label: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub meta: ReportMeta,
    /// Condition label ("all", ">=2", ...) to metric name to result.
    pub conditions: BTreeMap<String, BTreeMap<String, MetricResult>>,
    /// Condition label to number of prompts.
    pub sizes: BTreeMap<String, usize>,
    /// Condition label to retrieval pool size actually used.
    #[serde(default)]
    pub pools: BTreeMap<String, usize>,
}

pub fn condition_label(min_events: usize) -> String {
    format!(">={min_events}")
}

impl EvaluationReport {
    pub fn metric(&self, condition: &str, name: &str) -> Option<&MetricResult> {
        self.conditions.get(condition)?.get(name)
    }

    /// Condition labels in display order: "all" first, then ascending event counts.
    pub fn condition_order(&self) -> Vec<String> {
        let labels: BTreeSet<&String> = self.conditions.keys().chain(self.sizes.keys()).collect();
        let mut out: Vec<String> = labels.iter().filter(|k| k.as_str() == "all").map(|k| k.to_string()).collect();
        let mut rest: Vec<(usize, String)> = labels
            .iter()
            .filter_map(|k| k.strip_prefix(">=").and_then(|n| n.parse().ok()).map(|n| (n, k.to_string())))
            .collect();
        rest.sort();
        out.extend(rest.into_iter().map(|(_, k)| k));
        out
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "steps={} scale={} repeats={} pool={} seed={}{}",
            self.meta.steps,
            self.meta.guidance_scale,
            self.meta.n_repeats,
            self.meta.pool_size,
            self.meta.seed,
            if self.meta.label.is_empty() { String::new() } else { format!(" [{}]", self.meta.label) }
        );
        let _ = write!(s, "{:<10}{:>6}", "condition", "n");
        for m in METRICS {
            let _ = write!(s, "{:>20}", m);
        }
        s.push('\n');
        for c in self.condition_order() {
            let _ = write!(s, "{:<10}{:>6}", c, self.sizes.get(&c).copied().unwrap_or(0));
            for m in METRICS {
                let cell = match self.metric(&c, m) {
                    Some(r) if r.value.is_finite() => format!("{:.3} ±{:.3}", r.value, r.ci95),
                    _ => "-".to_string(),
                };
                let _ = write!(s, "{:>20}", cell);
            }
            s.push('\n');
        }
        s
    }

    pub fn write(&self, dir: &Path, stem: &str) -> Result<(), EvalError> {
        std::fs::create_dir_all(dir)?;
        let json = serde_json::to_string_pretty(self).map_err(|e| EvalError::Config(e.to_string()))?;
        std::fs::write(dir.join(format!("{stem}.json")), json)?;
        std::fs::write(dir.join(format!("{stem}.txt")), self.to_table())?;
        Ok(())
    }
}

/// Everything needed to recompute one repeat's metrics offline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepeatDump {
    pub repeat: usize,
    pub condition: String,
    pub ids: Vec<String>,
    pub real: Array2<f64>,
    pub generated: Array2<f64>,
    pub text: Array2<f64>,
    pub pools: Vec<Vec<usize>>,
    /// Present when the condition had enough prompts for MModality.
    pub mm_groups: Vec<Array2<f64>>,
    pub mm_pairs: Vec<Vec<(usize, usize)>>,
    pub metrics: BTreeMap<String, f64>,
}

/// Sampling settings shared by every generation in an evaluation.
pub struct SamplingSetup<'a> {
    pub model: &'a (dyn X0Model + Sync),
    pub schedule: &'a DiffusionSchedule,
    pub guidance: &'a GuidanceConfig,
}

impl SamplingSetup<'_> {
    fn generate(&self, p: &EvalPrompt, seed: u64) -> Result<Array2<f64>, EvalError> {
        let (len, dim) = p.reference.dim();
        Ok(DdpmSampler.sample(self.model, &p.bundle, len, dim, self.schedule, self.guidance, seed)?)
    }
}

/// Sample, embed and score every condition for `cfg.n_repeats` seeds.
pub fn evaluate(
    setup: &SamplingSetup,
    prompts: &[EvalPrompt],
    benchmark: &StratifiedBenchmark,
    evaluator: &dyn EvaluatorPair,
    cfg: &EvalConfig,
    label: &str,
    mut dumps: Option<&mut Vec<RepeatDump>>,
) -> Result<EvaluationReport, EvalError> {
    cfg.validate()?;
    if prompts.is_empty() {
        return Err(EvalError::Empty("no prompts".into()));
    }
    if !benchmark.is_nested() {
        return Err(EvalError::Config("benchmark conditions are not nested".into()));
    }
    let index: BTreeMap<&str, usize> = prompts.iter().enumerate().map(|(i, p)| (p.id.as_str(), i)).collect();
    let mut conditions: Vec<(String, Vec<usize>)> = vec![("all".to_string(), (0..prompts.len()).collect())];
    for (&c, ids) in &benchmark.conditions {
        let idx = ids
            .iter()
            .map(|id| index.get(id.as_str()).copied().ok_or_else(|| EvalError::UnknownId(id.clone())))
            .collect::<Result<Vec<_>, _>>()?;
        conditions.push((condition_label(c), idx));
    }
    for w in conditions.windows(2).skip(1) {
        let outer: BTreeSet<usize> = w[0].1.iter().copied().collect();
        assert!(w[1].1.iter().all(|i| outer.contains(i)), "condition {} is not inside {}", w[1].0, w[0].0);
    }

    let captions: Vec<&str> = prompts.iter().map(|p| p.caption.as_str()).collect();
    let text_all = evaluator.embed_texts(&captions);
    let real_views: Vec<_> = prompts.iter().map(|p| p.reference.view()).collect();
    let real_all = evaluator.embed_motions(&real_views);
    if cfg.pool_size > prompts.len() {
        return Err(EvalError::InsufficientPool { pool: cfg.pool_size, available: prompts.len() });
    }
    let pool_sizes: Vec<usize> = conditions
        .iter()
        .map(|(name, idx)| {
            let p = cfg.pool_size.min(idx.len());
            if p < cfg.pool_size {
                log::warn!("condition {name} has {} prompts; retrieval pool shrinks to {p}", idx.len());
            }
            p
        })
        .collect();
    let mm_limit = if cfg.mm_prompts == 0 { prompts.len() } else { cfg.mm_prompts.min(prompts.len()) };

    let mut per_condition: BTreeMap<String, BTreeMap<&str, Vec<f64>>> = BTreeMap::new();
    for repeat in 0..cfg.n_repeats {
        let rseed = derive_seed(cfg.seed, 0xE7A1, repeat as u64);
        let generated: Vec<Array2<f64>> = prompts
            .par_iter()
            .enumerate()
            .map(|(i, p)| setup.generate(p, derive_seed(rseed, 1, i as u64)))
            .collect::<Result<_, _>>()?;
        let gen_views: Vec<_> = generated.iter().map(|g| g.view()).collect();
        let gen_all = evaluator.embed_motions(&gen_views);

        // Extra generations for the MModality prompts, embedded per prompt.
        let mm_embs: Vec<Array2<f64>> = (0..mm_limit)
            .into_par_iter()
            .map(|i| {
                let motions = (0..cfg.n_candidates)
                    .map(|c| setup.generate(&prompts[i], derive_seed(rseed, 2 + c as u64, i as u64)))
                    .collect::<Result<Vec<_>, _>>()?;
                let views: Vec<_> = motions.iter().map(|m| m.view()).collect();
                Ok(evaluator.embed_motions(&views))
            })
            .collect::<Result<_, EvalError>>()?;

        for (ci, (name, idx)) in conditions.iter().enumerate() {
            if idx.len() < 2 {
                // Too few prompts for covariance or retrieval; the condition is reported empty.
                continue;
            }
            let real = real_all.select(Axis(0), idx);
            let gen = gen_all.select(Axis(0), idx);
            let text = text_all.select(Axis(0), idx);
            let mut m = BTreeMap::new();
            m.insert("fid", fid(&real, &gen)?);
            let pools = draw_pools(idx.len(), pool_sizes[ci], derive_seed(rseed, 0x9001, ci as u64))?;
            let r = r_precision_pools(&gen, &text, &pools)?;
            m.insert("top1", r[0]);
            m.insert("top2", r[1]);
            m.insert("top3", r[2]);
            m.insert("mm_dist", mm_dist(&gen, &text)?);
            let mm_idx: Vec<usize> = idx.iter().copied().filter(|&i| i < mm_limit).collect();
            let mm_groups: Vec<Array2<f64>> = mm_idx.iter().map(|&i| mm_embs[i].clone()).collect();
            let mm_pairs: Vec<Vec<(usize, usize)>> = mm_idx
                .iter()
                .map(|&i| mmodality_pairs(cfg.n_candidates, cfg.selection(), derive_seed(rseed, 0x3D, i as u64)))
                .collect();
            let mmod = if mm_groups.is_empty() { f64::NAN } else { mmodality_with_pairs(&mm_groups, &mm_pairs)? };
            m.insert("mmodality", mmod);
            for (k, v) in &m {
                per_condition.entry(name.clone()).or_default().entry(k).or_default().push(*v);
            }
            if let Some(d) = dumps.as_mut() {
                d.push(RepeatDump {
                    repeat,
                    condition: name.clone(),
                    ids: idx.iter().map(|&i| prompts[i].id.clone()).collect(),
                    real,
                    generated: gen,
                    text,
                    pools,
                    mm_groups,
                    mm_pairs,
                    metrics: m.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
                });
            }
        }
    }

    let results = per_condition
        .into_iter()
        .map(|(c, ms)| {
            let rs = ms.into_iter().map(|(k, vals)| (k.to_string(), MetricResult::from_repeats(k, &vals))).collect();
            (c, rs)
        })
        .collect();
    let sizes = conditions.iter().map(|(n, idx)| (n.clone(), idx.len())).collect();
    let pools = conditions.iter().zip(&pool_sizes).map(|((n, _), &p)| (n.clone(), p)).collect();
    Ok(EvaluationReport {
        meta: ReportMeta {
            steps: setup.schedule.inference_steps.len(),
            guidance_scale: setup.guidance.scale,
            n_repeats: cfg.n_repeats,
            pool_size: cfg.pool_size,
            seed: cfg.seed,
            n_prompts: prompts.len(),
            label: label.to_string(),
        },
        conditions: results,
        sizes,
        pools,
    })
}

pub fn write_dumps(path: &Path, dumps: &[RepeatDump]) -> Result<(), EvalError> {
    let mut out = String::new();
    for d in dumps {
        out.push_str(&serde_json::to_string(d).map_err(|e| EvalError::Config(e.to_string()))?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_dumps(path: &Path) -> Result<Vec<RepeatDump>, EvalError> {
    std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| EvalError::Config(e.to_string())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ci_degenerate_for_one_repeat() {
        let r = MetricResult::from_repeats("fid", &[0.7]);
        assert_eq!((r.value, r.ci95, r.degenerate_ci), (0.7, 0.0, true));
        let r = MetricResult::from_repeats("fid", &[1.0, 3.0]);
        assert_eq!(r.value, 2.0);
        assert!((r.ci95 - 1.96 * (2.0f64 / 2.0).sqrt()).abs() < 1e-12);
        assert!(!r.degenerate_ci);
    }

    #[test]
    fn pools_exclude_self_and_repeat_nothing() {
        let pools = draw_pools(40, 32, 1).unwrap();
        for (i, p) in pools.iter().enumerate() {
            assert_eq!(p[0], i);
            let set: BTreeSet<_> = p.iter().collect();
            assert_eq!(set.len(), 32);
        }
        assert!(matches!(draw_pools(10, 32, 0), Err(EvalError::InsufficientPool { .. })));
    }

    #[test]
    fn pair_selection() {
        assert_eq!(mmodality_pairs(3, PairSelection::All, 0), vec![(0, 1), (0, 2), (1, 2)]);
        let r = mmodality_pairs(20, PairSelection::Random(10), 3);
        assert_eq!(r.len(), 10);
        let used: BTreeSet<usize> = r.iter().flat_map(|&(i, j)| [i, j]).collect();
        assert_eq!(used.len(), 20);
        assert!(r.iter().all(|(i, j)| i < j));
        assert_eq!(mmodality_pairs(5, PairSelection::Random(50), 0).len(), 2);
    }
}
