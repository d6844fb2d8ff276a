//! Run configuration and the staged experiment pipeline. Every stage writes
//! into a directory named by a hash of its settings and upstream stage keys,
//! so reruns skip stages whose inputs are unchanged.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{read_dataset, DatasetLayout};
use crate::data::toy::{self, Primitive, ToyConfig, TOY_DIM};
use crate::data::{CaptionRecord, DatasetSplit, NormStats, SplitName};
use crate::denoiser::{Backbone, Denoiser, DenoiserConfig};
use crate::diffusion::{sample_motion, DdpmSampler, DiffusionSchedule, GuidanceConfig, Sampler, ScheduleConfig};
use crate::evaluation::{evaluate, fid, EvalConfig, EvalPrompt, EvaluationReport, RepeatDump, SamplingSetup, METRICS};
use crate::segmentation::{decompose, stratify, stratify_counts, Decomposition, HttpLlm, LlmClient, ResponseCache, StratifiedBenchmark, Strategy};
use crate::text::{encode_with_mode, ConditioningBundle, ConditioningMode, HttpEncoder, ProjectedEncoder, StubConfig, StubEncoder, TextEncoder};
use crate::training::{derive_seed, Checkpoint, TrainConfig, TrainError, TrainItem, Trainer};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Validation(String),
    #[error("stage {stage} failed: {msg}")]
    Stage { stage: String, msg: String },
}

impl PipelineError {
    /// 1 for configuration problems, 2 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Validation(_) => 1,
            PipelineError::Stage { .. } => 2,
        }
    }

    fn stage(stage: &str, e: impl std::fmt::Display) -> Self {
        PipelineError::Stage { stage: stage.to_string(), msg: e.to_string() }
    }
}

type Result<T, E = PipelineError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    /// Synthetic trajectories from the toy generator.
    Toy,
    /// Dataset directory in the on-disk layout.
    Dir,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    /// Dataset root for `source = "dir"`.
    pub root: Option<PathBuf>,
    pub layout: DatasetLayout,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub max_events: usize,
    pub seed: u64,
    pub toy: ToyConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Dir,
            root: None,
            layout: DatasetLayout::default(),
            n_train: 640,
            n_val: 96,
            n_test: 160,
            max_events: 4,
            seed: 0,
            toy: ToyConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegBackend {
    Rule,
    /// Chat endpoint from the environment; falls back to rules when unset.
    Llm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmentationConfig {
    pub strategy: Strategy,
    pub backend: SegBackend,
    /// Response cache for the LLM backend; defaults to `<run>/llm_cache.jsonl`.
    pub cache: Option<PathBuf>,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        Self { strategy: Strategy::EventAware, backend: SegBackend::Llm, cache: None }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    /// Contrastive stub trained on the train split.
    Stub,
    /// Remote embedding endpoint followed by a fixed projection to `model.text_dim`.
    Http,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    /// Settings of the stub, which also serves as evaluator.
    pub stub: StubConfig,
    pub endpoint: String,
    pub version: String,
    pub http_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            kind: EncoderKind::Http,
            stub: StubConfig::default(),
            endpoint: String::new(),
            version: "clip-vit-l-14".into(),
            http_dim: 768,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    pub schedule: ScheduleConfig,
    pub guidance: GuidanceConfig,
}

/// Sampling used for validation FID during training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ValidationConfig {
    /// Number of validation samples scored; 0 means all.
    pub prompts: usize,
    pub steps: usize,
    pub guidance_scale: f64,
    pub seed: u64,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        Self { prompts: 0, steps: 10, guidance_scale: 4.0, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub segmentation: SegmentationConfig,
    pub encoder: EncoderConfig,
    pub model: DenoiserConfig,
    pub diffusion: DiffusionConfig,
    pub training: TrainConfig,
    pub validation: ValidationConfig,
    pub evaluation: EvalConfig,
    /// Threads for intra-stage parallelism; 0 uses all cores.
    pub workers: usize,
    /// Write per-repeat embeddings next to the evaluation report.
    pub dump_embeddings: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            segmentation: SegmentationConfig::default(),
            encoder: EncoderConfig::default(),
            model: DenoiserConfig { text_dim: 768, ..DenoiserConfig::default() },
            diffusion: DiffusionConfig::default(),
            training: TrainConfig::default(),
            validation: ValidationConfig::default(),
            evaluation: EvalConfig::default(),
            workers: 0,
            dump_embeddings: false,
        }
    }
}

impl RunConfig {
    /// Desk-scale settings on the synthetic data.
    pub fn toy() -> Self {
        let stub = StubConfig { dim: 32, hidden: 64, ..StubConfig::default() };
        Self {
            data: DataConfig { source: DataSource::Toy, ..DataConfig::default() },
            segmentation: SegmentationConfig { backend: SegBackend::Rule, ..SegmentationConfig::default() },
            encoder: EncoderConfig { kind: EncoderKind::Stub, stub: stub.clone(), ..EncoderConfig::default() },
            model: DenoiserConfig {
                n_blocks: 2,
                hidden: 64,
                heads: 4,
                head_dim: 16,
                motion_dim: TOY_DIM,
                text_dim: stub.dim,
                ..DenoiserConfig::default()
            },
            training: TrainConfig::toy(),
            evaluation: EvalConfig { n_repeats: 3, n_candidates: 10, mm_pairs: 5, mm_prompts: 32, ..EvalConfig::default() },
            ..Self::default()
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| PipelineError::Validation(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| PipelineError::Validation(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PipelineError::Validation(m));
        self.model.validate().map_err(|e| PipelineError::Validation(e.to_string()))?;
        self.training.validate().map_err(|e| PipelineError::Validation(e.to_string()))?;
        self.evaluation.validate().map_err(|e| PipelineError::Validation(e.to_string()))?;
        self.diffusion.guidance.validate().map_err(|e| PipelineError::Validation(e.to_string()))?;
        DiffusionSchedule::new(&self.diffusion.schedule).map_err(|e| PipelineError::Validation(e.to_string()))?;
        if self.model.timesteps != self.diffusion.schedule.timesteps {
            return bad(format!(
                "model.timesteps {} differs from diffusion.schedule.timesteps {}",
                self.model.timesteps, self.diffusion.schedule.timesteps
            ));
        }
        if self.validation.steps < 1 || self.validation.steps > self.diffusion.schedule.timesteps {
            return bad(format!("validation.steps {} outside 1..=timesteps", self.validation.steps));
        }
        match self.data.source {
            DataSource::Toy => {
                if self.model.motion_dim != TOY_DIM {
                    return bad(format!("toy data has {TOY_DIM} features, model.motion_dim is {}", self.model.motion_dim));
                }
                if !(1..=6).contains(&self.data.max_events) {
                    return bad(format!("data.max_events {} outside 1..=6", self.data.max_events));
                }
                if self.data.n_train < 2 || self.data.n_val < 2 || self.data.n_test < 2 {
                    return bad("toy splits need at least 2 samples each".into());
                }
                if self.evaluation.pool_size > self.data.n_test {
                    return bad(format!(
                        "evaluation.pool_size {} exceeds data.n_test {}",
                        self.evaluation.pool_size, self.data.n_test
                    ));
                }
            }
            DataSource::Dir => {
                if self.data.root.is_none() {
                    return bad("data.root is required when data.source = \"dir\"".into());
                }
            }
        }
        let d_y = match self.encoder.kind {
            EncoderKind::Stub => self.encoder.stub.dim,
            EncoderKind::Http => {
                if self.encoder.endpoint.is_empty() {
                    return bad("encoder.endpoint is required when encoder.kind = \"http\"".into());
                }
                self.model.text_dim
            }
        };
        if d_y != self.model.text_dim {
            return bad(format!("encoder.stub.dim {d_y} differs from model.text_dim {}", self.model.text_dim));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Ran,
    Cached,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub key: String,
    pub status: StageStatus,
    pub dir: PathBuf,
}

fn hash_key<T: Serialize + ?Sized>(name: &str, parts: &T) -> String {
    let mut h = Sha256::new();
    h.update(name.as_bytes());
    h.update(serde_json::to_vec(parts).expect("key parts serialise"));
    hex::encode(h.finalize())
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> std::io::Result<()> {
    fs::write(path, serde_json::to_vec(v).map_err(std::io::Error::other)?)
}

fn read_json<T: DeserializeOwned>(path: &Path) -> std::io::Result<T> {
    serde_json::from_slice(&fs::read(path)?).map_err(std::io::Error::other)
}

const DONE: &str = "DONE";

/// Splits in train, val, test order; val and test carry the train statistics.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Splits {
    pub train: DatasetSplit,
    pub val: DatasetSplit,
    pub test: DatasetSplit,
}

impl Splits {
    pub fn stats(&self) -> &NormStats {
        &self.train.normalization_stats
    }

    pub fn get(&self, name: SplitName) -> &DatasetSplit {
        match name {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }
}

/// Split name to sample id to one entry per caption.
pub type PerCaption<T> = BTreeMap<SplitName, BTreeMap<String, Vec<T>>>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrataArtifact {
    pub benchmark: StratifiedBenchmark,
    /// Strata from generator labels when the data carries them.
    pub ground_truth: Option<StratifiedBenchmark>,
}

impl StrataArtifact {
    pub fn matches_ground_truth(&self) -> Option<bool> {
        self.ground_truth.as_ref().map(|g| g == &self.benchmark)
    }
}

/// Index of the caption with the most events (first on ties).
pub fn richest_caption(decomps: &[Decomposition]) -> usize {
    let mut best = 0;
    for (i, d) in decomps.iter().enumerate() {
        if d.k() > decomps[best].k() {
            best = i;
        }
    }
    best
}

/// Artifacts of the stages up to training.
pub struct TrainedRun {
    pub splits: Splits,
    pub decompositions: PerCaption<Decomposition>,
    pub strata: StrataArtifact,
    pub evaluator: StubEncoder,
    pub bundles: PerCaption<ConditioningBundle>,
    pub best: Checkpoint,
    keys: Vec<String>,
}

impl TrainedRun {
    pub fn model(&self) -> Result<Denoiser> {
        self.best.model().map_err(|e| PipelineError::stage("train", e))
    }

    /// One prompt per test sample: its richest caption, bundle and normalised motion.
    pub fn eval_prompts(&self) -> Result<Vec<EvalPrompt>> {
        eval_prompts(&self.splits, &self.decompositions, &self.bundles)
    }
}

pub struct PipelineOutput {
    pub run: TrainedRun,
    pub report: EvaluationReport,
}

fn eval_prompts(
    splits: &Splits,
    decomps: &PerCaption<Decomposition>,
    bundles: &PerCaption<ConditioningBundle>,
) -> Result<Vec<EvalPrompt>> {
    let test = splits.test.normalized().map_err(|e| PipelineError::stage("eval", e))?;
    let missing = |id: &str| PipelineError::stage("eval", format!("no conditioning for test sample {id}"));
    test.pairs
        .iter()
        .map(|s| {
            let id = s.motion.id.as_str();
            let ds = decomps.get(&SplitName::Test).and_then(|m| m.get(id)).ok_or_else(|| missing(id))?;
            let bs = bundles.get(&SplitName::Test).and_then(|m| m.get(id)).ok_or_else(|| missing(id))?;
            let c = richest_caption(ds);
            Ok(EvalPrompt {
                id: id.to_string(),
                caption: s.captions[c].text.clone(),
                bundle: bs[c].clone(),
                reference: s.motion.frames.clone(),
            })
        })
        .collect()
}

pub struct Pipeline {
    pub cfg: RunConfig,
    pub run_dir: PathBuf,
    pub records: Vec<StageRecord>,
    /// Fail instead of running a stage that is not cached.
    pub cached_only: bool,
    llm: Option<Box<dyn LlmClient>>,
}

impl Pipeline {
    pub fn new(cfg: RunConfig, run_dir: impl Into<PathBuf>) -> Result<Self> {
        cfg.validate()?;
        let llm: Option<Box<dyn LlmClient>> = match cfg.segmentation.backend {
            SegBackend::Llm => HttpLlm::from_env().map(|c| Box::new(c) as Box<dyn LlmClient>),
            SegBackend::Rule => None,
        };
        Ok(Self { cfg, run_dir: run_dir.into(), records: Vec::new(), cached_only: false, llm })
    }

    /// Replace the LLM client used by the `llm` backend.
    pub fn with_llm(mut self, llm: Box<dyn LlmClient>) -> Self {
        self.llm = Some(llm);
        self
    }

    fn stage<T>(
        &mut self,
        name: &str,
        key: String,
        load: impl FnOnce(&Path) -> std::io::Result<T>,
        run: impl FnOnce(&Path) -> Result<T>,
    ) -> Result<(T, String)> {
        let dir = self.run_dir.join("stages").join(format!("{name}-{}", &key[..16]));
        if dir.join(DONE).exists() {
            match load(&dir) {
                Ok(v) => {
                    log::info!("stage {name}: cached");
                    self.records.push(StageRecord { name: name.into(), key: key.clone(), status: StageStatus::Cached, dir });
                    return Ok((v, key));
                }
                Err(e) => log::warn!("stage {name}: cache unreadable ({e}), rerunning"),
            }
        }
        if self.cached_only {
            return Err(PipelineError::stage(name, format!("no completed result under {}", self.run_dir.display())));
        }
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| PipelineError::stage(name, e))?;
        }
        fs::create_dir_all(&dir).map_err(|e| PipelineError::stage(name, e))?;
        log::info!("stage {name}: running");
        let v = run(&dir).map_err(|e| match e {
            PipelineError::Stage { stage, msg } if stage == name => PipelineError::Stage { stage, msg },
            other => PipelineError::stage(name, other),
        })?;
        fs::write(dir.join(DONE), &key).map_err(|e| PipelineError::stage(name, e))?;
        self.records.push(StageRecord { name: name.into(), key: key.clone(), status: StageStatus::Ran, dir });
        Ok((v, key))
    }

    pub fn data(&mut self) -> Result<(Splits, String)> {
        let cfg = self.cfg.data.clone();
        let key = hash_key("data", &cfg);
        self.stage("data", key, |d| read_json(&d.join("splits.json")), |dir| {
            let splits = load_splits(&cfg)?;
            write_json(&dir.join("splits.json"), &splits).map_err(|e| PipelineError::stage("data", e))?;
            Ok(splits)
        })
    }

    pub fn decompose(&mut self, splits: &Splits, data_key: &str) -> Result<(PerCaption<Decomposition>, String)> {
        let cfg = self.cfg.segmentation.clone();
        let llm_on = self.llm.is_some() && cfg.backend == SegBackend::Llm;
        let key = hash_key("decompose", &(&cfg.strategy, &cfg.backend, llm_on, data_key));
        let cache_path = cfg.cache.clone().unwrap_or_else(|| self.run_dir.join("llm_cache.jsonl"));
        let llm = self.llm.take();
        let out = self.stage("decompose", key, |d| read_json(&d.join("decompositions.json")), |dir| {
            let cache = if llm_on { Some(ResponseCache::open(&cache_path).map_err(|e| PipelineError::stage("decompose", e))?) } else { None };
            let client = if llm_on { llm.as_deref() } else { None };
            let mut out = PerCaption::new();
            for name in SplitName::ALL {
                let split = splits.get(name);
                let per: Vec<(String, Vec<Decomposition>)> = split
                    .pairs
                    .par_iter()
                    .map(|s| {
                        let ds = s.captions.iter().map(|c| decompose(c, cfg.strategy, client, cache.as_ref())).collect();
                        (s.motion.id.clone(), ds)
                    })
                    .collect();
                out.insert(name, per.into_iter().collect());
            }
            write_json(&dir.join("decompositions.json"), &out).map_err(|e| PipelineError::stage("decompose", e))?;
            Ok(out)
        });
        self.llm = llm;
        out
    }

    pub fn strata(&mut self, splits: &Splits, decomps: &PerCaption<Decomposition>, decomp_key: &str) -> Result<(StrataArtifact, String)> {
        let key = hash_key("strata", decomp_key);
        self.stage("strata", key, |d| read_json(&d.join("strata.json")), |dir| {
            let empty = BTreeMap::new();
            let test = decomps.get(&SplitName::Test).unwrap_or(&empty);
            let benchmark = stratify(&splits.test, test).map_err(|e| PipelineError::stage("strata", e))?;
            let labelled = splits.test.pairs.iter().all(|s| s.labels.is_some());
            let ground_truth = labelled.then(|| {
                stratify_counts(splits.test.pairs.iter().map(|s| {
                    let k = s.labels.as_ref().map(|l| l.primitives.len()).unwrap_or(0);
                    (s.motion.id.as_str(), vec![k; s.captions.len()])
                }))
            });
            let art = StrataArtifact { benchmark, ground_truth };
            write_json(&dir.join("strata.json"), &art).map_err(|e| PipelineError::stage("strata", e))?;
            Ok(art)
        })
    }

    /// Stub encoder trained on the normalised train split; it is the evaluator
    /// and, for `encoder.kind = "stub"`, also the text encoder.
    pub fn encoder(&mut self, splits: &Splits, data_key: &str) -> Result<(StubEncoder, String)> {
        let stub = self.cfg.encoder.stub.clone();
        let key = hash_key("encoder", &(&stub, data_key));
        self.stage("encoder", key, |d| StubEncoder::load(&d.join("encoder.json")), |dir| {
            let train = splits.train.normalized().map_err(|e| PipelineError::stage("encoder", e))?;
            let enc = StubEncoder::train(stub.clone(), &train);
            enc.save(&dir.join("encoder.json")).map_err(|e| PipelineError::stage("encoder", e))?;
            Ok(enc)
        })
    }

    pub fn encode(
        &mut self,
        decomps: &PerCaption<Decomposition>,
        stub: &StubEncoder,
        keys: (&str, &str),
    ) -> Result<(PerCaption<ConditioningBundle>, String)> {
        let cfg = self.cfg.clone();
        let mode = cfg.model.conditioning;
        let e = &cfg.encoder;
        let remote = (e.kind == EncoderKind::Http).then(|| (e.endpoint.clone(), e.version.clone(), e.http_dim));
        let key = hash_key("encode", &(mode, e.kind, remote, cfg.model.text_dim, keys.0, keys.1));
        let enc = text_encoder(&cfg, stub);
        self.stage("encode", key, |d| read_json(&d.join("bundles.json")), |dir| {
            let mut out = PerCaption::new();
            for (split, per) in decomps {
                let mut m = BTreeMap::new();
                for (id, ds) in per {
                    let bs = ds
                        .iter()
                        .map(|d| encode_with_mode(d, mode, enc.as_ref()))
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|e| PipelineError::stage("encode", e))?;
                    m.insert(id.clone(), bs);
                }
                out.insert(*split, m);
            }
            write_json(&dir.join("bundles.json"), &out).map_err(|e| PipelineError::stage("encode", e))?;
            Ok(out)
        })
    }

    /// Training key covers only settings that change the trained weights.
    fn train_key(&self, upstream: &[&str]) -> String {
        let s = &self.cfg.diffusion.schedule;
        hash_key(
            "train",
            &(
                &self.cfg.model,
                (s.timesteps, s.beta_start, s.beta_end),
                self.cfg.diffusion.guidance.dropout,
                &self.cfg.training,
                &self.cfg.validation,
                upstream,
            ),
        )
    }

    pub fn train(
        &mut self,
        splits: &Splits,
        bundles: &PerCaption<ConditioningBundle>,
        evaluator: &StubEncoder,
        upstream: &[&str],
    ) -> Result<(Checkpoint, String)> {
        let key = self.train_key(upstream);
        let cfg = self.cfg.clone();
        self.stage("train", key, |d| Checkpoint::load(&d.join("best.bin")).map_err(std::io::Error::other), |dir| {
            fs::write(dir.join("config.toml"), cfg.to_toml()).map_err(|e| PipelineError::stage("train", e))?;
            let items = train_items(&splits.train, bundles.get(&SplitName::Train))?;
            let val = validation_set(splits, bundles, &cfg.validation)?;
            let schedule = DiffusionSchedule::new(&cfg.diffusion.schedule).map_err(|e| PipelineError::stage("train", e))?;
            let val_schedule = schedule.clone().with_steps(cfg.validation.steps).map_err(|e| PipelineError::stage("train", e))?;
            let val_guidance = GuidanceConfig { scale: cfg.validation.guidance_scale, ..cfg.diffusion.guidance.clone() };
            let real = evaluator.embed_motions(&val.iter().map(|(_, m)| m.view()).collect::<Vec<_>>());
            let mut validate = |model: &Denoiser, epoch: usize| -> std::result::Result<f64, TrainError> {
                let seed = derive_seed(cfg.validation.seed, 0xFA11, epoch as u64);
                let gens = val
                    .par_iter()
                    .enumerate()
                    .map(|(i, (b, m))| DdpmSampler.sample(model, b, m.nrows(), m.ncols(), &val_schedule, &val_guidance, derive_seed(seed, 0, i as u64)))
                    .collect::<std::result::Result<Vec<_>, _>>()?;
                let gen = evaluator.embed_motions(&gens.iter().map(|g| g.view()).collect::<Vec<_>>());
                fid(&real, &gen).map_err(|e| TrainError::Validation(e.to_string()))
            };
            let model = Denoiser::new(cfg.model.clone(), cfg.training.seed).map_err(|e| PipelineError::stage("train", e))?;
            let trainer = Trainer::new(cfg.training.clone(), &schedule, &cfg.diffusion.guidance).with_run_dir(dir);
            let out = trainer.train(model, &items, &mut validate).map_err(|e| PipelineError::stage("train", e))?;
            Ok(out.best)
        })
    }

    pub fn evaluate(
        &mut self,
        best: &Checkpoint,
        prompts: &[EvalPrompt],
        strata: &StrataArtifact,
        evaluator: &StubEncoder,
        upstream: &[&str],
    ) -> Result<(EvaluationReport, String)> {
        let cfg = self.cfg.clone();
        let key = hash_key("eval", &(&cfg.evaluation, &cfg.diffusion, cfg.dump_embeddings, upstream));
        self.stage("eval", key, |d| read_json(&d.join("report.json")), |dir| {
            let model = best.model().map_err(|e| PipelineError::stage("eval", e))?;
            let schedule = DiffusionSchedule::new(&cfg.diffusion.schedule).map_err(|e| PipelineError::stage("eval", e))?;
            let setup = SamplingSetup { model: &model, schedule: &schedule, guidance: &cfg.diffusion.guidance };
            let mut dumps: Vec<RepeatDump> = Vec::new();
            let label = format!("{:?}/{:?}", cfg.model.backbone, cfg.model.conditioning).to_lowercase();
            let report = evaluate(
                &setup,
                prompts,
                &strata.benchmark,
                evaluator,
                &cfg.evaluation,
                &label,
                cfg.dump_embeddings.then_some(&mut dumps),
            )
            .map_err(|e| PipelineError::stage("eval", e))?;
            report.write(dir, "report").map_err(|e| PipelineError::stage("eval", e))?;
            if cfg.dump_embeddings {
                crate::evaluation::write_dumps(&dir.join("embeddings.jsonl"), &dumps).map_err(|e| PipelineError::stage("eval", e))?;
            }
            Ok(report)
        })
    }

    /// Stages up to and including training.
    pub fn run_to_training(&mut self) -> Result<TrainedRun> {
        fs::create_dir_all(&self.run_dir).map_err(|e| PipelineError::stage("setup", e))?;
        fs::write(self.run_dir.join("config.toml"), self.cfg.to_toml()).map_err(|e| PipelineError::stage("setup", e))?;
        let (splits, kd) = self.data()?;
        let (decompositions, kp) = self.decompose(&splits, &kd)?;
        let (strata, ks) = self.strata(&splits, &decompositions, &kp)?;
        let (evaluator, ke) = self.encoder(&splits, &kd)?;
        let (bundles, kb) = self.encode(&decompositions, &evaluator, (&kp, &ke))?;
        let (best, kt) = self.train(&splits, &bundles, &evaluator, &[&kd, &kb, &ke])?;
        let keys = vec![kt, ks, kb, ke];
        Ok(TrainedRun { splits, decompositions, strata, evaluator, bundles, best, keys })
    }

    fn run_stages(&mut self) -> Result<PipelineOutput> {
        let run = self.run_to_training()?;
        let prompts = run.eval_prompts()?;
        let keys: Vec<&str> = run.keys.iter().map(String::as_str).collect();
        let (report, _) = self.evaluate(&run.best, &prompts, &run.strata, &run.evaluator, &keys)?;
        fs::write(self.run_dir.join("report.txt"), report.to_table()).map_err(|e| PipelineError::stage("eval", e))?;
        write_json(&self.run_dir.join("report.json"), &report).map_err(|e| PipelineError::stage("eval", e))?;
        write_json(&self.run_dir.join("stages.json"), &self.records).map_err(|e| PipelineError::stage("eval", e))?;
        Ok(PipelineOutput { run, report })
    }

    /// Every stage from data generation to the evaluation report.
    pub fn run(&mut self) -> Result<PipelineOutput> {
        self.in_pool(Self::run_stages)
    }

    fn in_pool<T: Send>(&mut self, f: impl FnOnce(&mut Self) -> T + Send) -> T {
        if self.cfg.workers == 0 {
            return f(self);
        }
        match rayon::ThreadPoolBuilder::new().num_threads(self.cfg.workers).build() {
            Ok(pool) => pool.install(|| f(self)),
            Err(e) => {
                log::warn!("thread pool unavailable ({e}); using the global pool");
                f(self)
            }
        }
    }
}

/// Text encoder used for conditioning.
pub fn text_encoder<'a>(cfg: &RunConfig, stub: &'a StubEncoder) -> Box<dyn TextEncoder + 'a> {
    match cfg.encoder.kind {
        EncoderKind::Stub => Box::new(stub),
        EncoderKind::Http => {
            let e = &cfg.encoder;
            let http = HttpEncoder::new(e.endpoint.clone(), e.version.clone(), e.http_dim);
            Box::new(ProjectedEncoder::seeded(http, cfg.model.text_dim, e.stub.seed))
        }
    }
}

fn load_splits(cfg: &DataConfig) -> Result<Splits> {
    match cfg.source {
        DataSource::Toy => {
            let train = toy::generate_with(&cfg.toy, SplitName::Train, cfg.n_train, cfg.max_events, cfg.seed, "train");
            let stats = train.normalization_stats.clone();
            let val = toy::generate_with(&cfg.toy, SplitName::Val, cfg.n_val, cfg.max_events, derive_seed(cfg.seed, 1, 0), "val")
                .with_stats(stats.clone());
            let test = toy::generate_with(&cfg.toy, SplitName::Test, cfg.n_test, cfg.max_events, derive_seed(cfg.seed, 2, 0), "test")
                .with_stats(stats);
            Ok(Splits { train, val, test })
        }
        DataSource::Dir => {
            let root = cfg.root.as_ref().ok_or_else(|| PipelineError::Validation("data.root missing".into()))?;
            let mut splits = read_dataset(root, &cfg.layout).map_err(|e| PipelineError::stage("data", e))?;
            let mut take = |name: SplitName| {
                splits
                    .iter()
                    .position(|s| s.name == name)
                    .map(|i| splits.remove(i))
                    .ok_or_else(|| PipelineError::stage("data", format!("split {} missing under {}", name.as_str(), root.display())))
            };
            let (train, val, test) = (take(SplitName::Train)?, take(SplitName::Val)?, take(SplitName::Test)?);
            Ok(Splits { train, val, test })
        }
    }
}

fn train_items(split: &DatasetSplit, bundles: Option<&BTreeMap<String, Vec<ConditioningBundle>>>) -> Result<Vec<TrainItem>> {
    let norm = split.normalized().map_err(|e| PipelineError::stage("train", e))?;
    norm.pairs
        .iter()
        .map(|s| {
            let id = s.motion.id.clone();
            let bs = bundles
                .and_then(|m| m.get(&id))
                .cloned()
                .ok_or_else(|| PipelineError::stage("train", format!("no conditioning for {id}")))?;
            Ok(TrainItem { id, x0: s.motion.frames.clone(), bundles: bs })
        })
        .collect()
}

fn validation_set(
    splits: &Splits,
    bundles: &PerCaption<ConditioningBundle>,
    cfg: &ValidationConfig,
) -> Result<Vec<(ConditioningBundle, Array2<f64>)>> {
    let val = splits.val.normalized().map_err(|e| PipelineError::stage("train", e))?;
    let n = if cfg.prompts == 0 { val.len() } else { cfg.prompts.min(val.len()) };
    val.pairs[..n]
        .iter()
        .map(|s| {
            let b = bundles
                .get(&SplitName::Val)
                .and_then(|m| m.get(&s.motion.id))
                .and_then(|v| v.first())
                .cloned()
                .ok_or_else(|| PipelineError::stage("train", format!("no conditioning for {}", s.motion.id)))?;
            Ok((b, s.motion.frames.clone()))
        })
        .collect()
}

/// Encode a free-form prompt the way the pipeline encodes captions.
pub fn condition_prompt(
    prompt: &str,
    cfg: &RunConfig,
    encoder: &dyn TextEncoder,
    llm: Option<&dyn LlmClient>,
) -> Result<(Decomposition, ConditioningBundle)> {
    let caption = CaptionRecord::parse(prompt).unwrap_or_else(|_| CaptionRecord::plain(prompt));
    let d = decompose(&caption, cfg.segmentation.strategy, llm, None);
    let b = encode_with_mode(&d, cfg.model.conditioning, encoder).map_err(|e| PipelineError::stage("encode", e))?;
    Ok((d, b))
}

/// Fraction of generated trajectories whose classified segment order matches
/// the generator labels, over test samples with at least `min_events` events.
pub fn event_order_accuracy(
    model: &Denoiser,
    out_splits: &Splits,
    bundles: &PerCaption<ConditioningBundle>,
    decomps: &PerCaption<Decomposition>,
    schedule: &DiffusionSchedule,
    guidance: &GuidanceConfig,
    min_events: usize,
    seed: u64,
) -> Result<(f64, usize)> {
    let test = &out_splits.test;
    let prompts: Vec<(&str, &[Primitive], ConditioningBundle, usize)> = test
        .pairs
        .iter()
        .filter_map(|s| {
            let l = s.labels.as_ref()?;
            if l.primitives.len() < min_events {
                return None;
            }
            let id = s.motion.id.as_str();
            let c = richest_caption(decomps.get(&SplitName::Test)?.get(id)?);
            let b = bundles.get(&SplitName::Test)?.get(id)?.get(c)?.clone();
            Some((id, l.primitives.as_slice(), b, s.motion.len()))
        })
        .collect();
    if prompts.is_empty() {
        return Err(PipelineError::stage("order", format!("no labelled test prompts with at least {min_events} events")));
    }
    let hits = prompts
        .par_iter()
        .enumerate()
        .map(|(i, (id, prims, b, len))| {
            let m = sample_motion(model, b, *len, schedule, guidance, out_splits.stats(), toy::TOY_FPS, id, derive_seed(seed, 0x0DE7, i as u64))
                .map_err(|e| PipelineError::stage("order", e))?;
            Ok(toy::event_order_matches(m.frames.view(), prims) as usize)
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum::<usize>();
    Ok((hits as f64 / prompts.len() as f64, prompts.len()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    Steps,
    Scale,
    Backbone,
    EncoderMode,
}

impl std::str::FromStr for AblationAxis {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "steps" => Ok(Self::Steps),
            "scale" => Ok(Self::Scale),
            "backbone" => Ok(Self::Backbone),
            "encoder_mode" | "encoder-mode" => Ok(Self::EncoderMode),
            other => Err(format!("unknown axis {other:?} (expected steps, scale, backbone or encoder_mode)")),
        }
    }
}

impl AblationAxis {
    /// Copy of `base` with the axis set to `value`.
    pub fn apply(self, base: &RunConfig, value: &str) -> Result<RunConfig> {
        let mut cfg = base.clone();
        let bad = |m: String| PipelineError::Validation(m);
        match self {
            AblationAxis::Steps => {
                cfg.diffusion.schedule.inference_steps = value.parse().map_err(|_| bad(format!("steps value {value:?}")))?
            }
            AblationAxis::Scale => cfg.diffusion.guidance.scale = value.parse().map_err(|_| bad(format!("scale value {value:?}")))?,
            AblationAxis::Backbone => {
                cfg.model.backbone = match value {
                    "conformer" => Backbone::Conformer,
                    "transformer" => Backbone::Transformer,
                    other => return Err(bad(format!("backbone value {other:?}"))),
                }
            }
            AblationAxis::EncoderMode => cfg.model.conditioning = value.parse::<ConditioningMode>().map_err(bad)?,
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One report per axis value. All values share the cached upstream stages;
/// steps and scale reuse a single trained checkpoint.
pub fn ablate(base: &RunConfig, run_dir: &Path, axis: AblationAxis, values: &[String]) -> Result<Vec<(String, EvaluationReport, Vec<StageRecord>)>> {
    let mut out = Vec::new();
    for v in values {
        let cfg = axis.apply(base, v)?;
        let mut p = Pipeline::new(cfg, run_dir)?;
        let o = p.run()?;
        out.push((v.clone(), o.report, p.records));
    }
    let dir = run_dir.join(format!("ablate-{}", serde_json::to_value(axis).unwrap().as_str().unwrap()));
    fs::create_dir_all(&dir).map_err(|e| PipelineError::stage("ablate", e))?;
    for (v, r, _) in &out {
        r.write(&dir, &format!("report-{v}")).map_err(|e| PipelineError::stage("ablate", e))?;
    }
    let reports: Vec<(String, EvaluationReport)> = out.iter().map(|(v, r, _)| (v.clone(), r.clone())).collect();
    fs::write(dir.join("comparison.txt"), comparison_table(&reports)).map_err(|e| PipelineError::stage("ablate", e))?;
    Ok(out)
}

/// Rows of (value, condition) with every metric's mean and interval.
pub fn comparison_table(reports: &[(String, EvaluationReport)]) -> String {
    let mut s = String::new();
    let _ = write!(s, "{:<14}{:<10}", "value", "condition");
    for m in METRICS {
        let _ = write!(s, "{:>20}", m);
    }
    s.push('\n');
    for (v, r) in reports {
        for c in r.condition_order() {
            let _ = write!(s, "{:<14}{:<10}", v, c);
            for m in METRICS {
                let cell = match r.metric(&c, m) {
                    Some(x) if x.value.is_finite() => format!("{:.3} ±{:.3}", x.value, x.ci95),
                    _ => "-".into(),
                };
                let _ = write!(s, "{:>20}", cell);
            }
            s.push('\n');
        }
    }
    s
}
