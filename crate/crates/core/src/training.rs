//! Optimisation loop, checkpoints and validation-based model selection.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{Graph, ParamStore};
use crate::denoiser::{Ctx, Denoiser, DenoiserConfig, DenoiserError};
use crate::diffusion::{draw_training, training_loss, DiffusionError, DiffusionSchedule, GuidanceConfig};
use crate::nn::init;
use crate::optim::{accumulate, clip_global_norm, cosine_lr, AdamW, AdamWConfig};
use crate::text::ConditioningBundle;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at epoch {epoch}, step {step}; batch {batch:?}")]
    NonFiniteLoss { epoch: usize, step: u64, batch: Vec<String> },
    #[error("no checkpoints to select from")]
    EmptyCheckpointSet,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: String, msg: String },
    #[error("validation failed: {0}")]
    Validation(String),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Denoiser(#[from] DenoiserError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    /// Cosine annealing end value.
    pub lr_floor: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub checkpoint_interval: usize,
    pub seed: u64,
    pub clip_norm: f64,
    pub optimizer: AdamWConfig,
    /// Exponential moving average of weights; off unless set.
    pub ema_decay: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            lr_floor: 0.0,
            batch_size: 128,
            epochs: 600,
            checkpoint_interval: 10,
            seed: 0,
            clip_norm: 1.0,
            optimizer: AdamWConfig::default(),
            ema_decay: None,
        }
    }
}

impl TrainConfig {
    /// Scaled-down settings for the synthetic data.
    pub fn toy() -> Self {
        Self { lr: 1e-3, batch_size: 32, epochs: 50, checkpoint_interval: 10, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be positive", self.lr));
        }
        if !(self.lr_floor >= 0.0 && self.lr_floor <= self.lr) {
            return bad(format!("lr_floor {} must be in [0, lr]", self.lr_floor));
        }
        if self.batch_size < 1 || self.epochs < 1 || self.checkpoint_interval < 1 {
            return bad("batch_size, epochs and checkpoint_interval must be at least 1".into());
        }
        if !(self.clip_norm > 0.0) {
            return bad(format!("clip_norm {} must be positive", self.clip_norm));
        }
        if let Some(d) = self.ema_decay {
            if !(0.0..1.0).contains(&d) {
                return bad(format!("ema_decay {d} outside [0, 1)"));
            }
        }
        Ok(())
    }
}

/// One training motion (normalised) with a bundle per caption.
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub id: String,
    pub x0: Array2<f64>,
    pub bundles: Vec<ConditioningBundle>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogKind {
    Step,
    Epoch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub kind: LogKind,
    pub epoch: usize,
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_fid: Option<f64>,
}

/// Model snapshot with optimiser state. Randomness is derived from
/// `(seed, epoch, step)`, so those counters are the whole RNG state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: DenoiserConfig,
    pub params: ParamStore,
    pub optimizer: Option<AdamW>,
    pub ema: Option<ParamStore>,
    pub epoch: usize,
    pub step: u64,
    pub seed: u64,
    pub val_fid: f64,
}

const CKPT_MAGIC: &[u8; 8] = b"EVCKPT\x00\x01";
const CKPT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CkptHeader {
    version: u32,
    config: DenoiserConfig,
    epoch: usize,
    step: u64,
    seed: u64,
    val_fid: f64,
    names: Vec<String>,
    shapes: Vec<(usize, usize)>,
    optimizer: Option<(AdamWConfig, u64)>,
    ema: bool,
}

fn write_tensors(w: &mut impl Write, tensors: &[Array2<f64>]) -> std::io::Result<()> {
    for t in tensors {
        for v in t.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_tensors(r: &mut impl Read, shapes: &[(usize, usize)]) -> std::io::Result<Vec<Array2<f64>>> {
    shapes
        .iter()
        .map(|&(rows, cols)| {
            let mut buf = vec![0u8; rows * cols * 8];
            r.read_exact(&mut buf)?;
            let vals = buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            Ok(Array2::from_shape_vec((rows, cols), vals).expect("shape from header"))
        })
        .collect()
}

impl Checkpoint {
    pub fn model(&self) -> Result<Denoiser, DenoiserError> {
        let params = self.ema.clone().unwrap_or_else(|| self.params.clone());
        Denoiser::from_store(self.config.clone(), params)
    }

    /// Binary file plus a `.manifest.toml` sidecar echoing the configuration.
    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let err = |msg: String| TrainError::Checkpoint { path: path.display().to_string(), msg };
        let header = CkptHeader {
            version: CKPT_VERSION,
            config: self.config.clone(),
            epoch: self.epoch,
            step: self.step,
            seed: self.seed,
            val_fid: self.val_fid,
            names: self.params.names().to_vec(),
            shapes: self.params.values().iter().map(|v| v.dim()).collect(),
            optimizer: self.optimizer.as_ref().map(|o| (o.cfg, o.step)),
            ema: self.ema.is_some(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| err(e.to_string()))?;
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(CKPT_MAGIC)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        write_tensors(&mut w, self.params.values())?;
        if let Some(o) = &self.optimizer {
            write_tensors(&mut w, &o.m)?;
            write_tensors(&mut w, &o.v)?;
        }
        if let Some(e) = &self.ema {
            write_tensors(&mut w, e.values())?;
        }
        w.flush()?;
        std::fs::write(manifest_path(path), self.manifest())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let err = |msg: String| TrainError::Checkpoint { path: path.display().to_string(), msg };
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CKPT_MAGIC {
            return Err(err("not a checkpoint file".into()));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
        r.read_exact(&mut json)?;
        let h: CkptHeader = serde_json::from_slice(&json).map_err(|e| err(e.to_string()))?;
        if h.version != CKPT_VERSION {
            return Err(err(format!("unsupported version {}", h.version)));
        }
        let params = ParamStore::from_parts(h.names.clone(), read_tensors(&mut r, &h.shapes)?);
        let optimizer = match h.optimizer {
            Some((cfg, step)) => {
                let m = read_tensors(&mut r, &h.shapes)?;
                let v = read_tensors(&mut r, &h.shapes)?;
                Some(AdamW { cfg, step, m, v })
            }
            None => None,
        };
        let ema = if h.ema { Some(ParamStore::from_parts(h.names, read_tensors(&mut r, &h.shapes)?)) } else { None };
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(err(format!("{} trailing bytes", rest.len())));
        }
        Ok(Self { config: h.config, params, optimizer, ema, epoch: h.epoch, step: h.step, seed: h.seed, val_fid: h.val_fid })
    }

    pub fn manifest(&self) -> String {
        #[derive(Serialize)]
        struct Manifest<'a> {
            epoch: usize,
            step: u64,
            seed: u64,
            val_fid: f64,
            params: usize,
            fingerprint: String,
            model: &'a DenoiserConfig,
        }
        let m = Manifest {
            epoch: self.epoch,
            step: self.step,
            seed: self.seed,
            val_fid: self.val_fid,
            params: self.params.num_scalars(),
            fingerprint: self.params.fingerprint(),
            model: &self.config,
        };
        toml::to_string(&m).unwrap_or_default()
    }
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.toml");
    PathBuf::from(s)
}

/// Lowest validation FID; ties go to the later epoch.
pub fn select_best(checkpoints: &[Checkpoint]) -> Result<&Checkpoint, TrainError> {
    let mut best: Option<&Checkpoint> = None;
    for c in checkpoints {
        best = match best {
            Some(b) if c.val_fid > b.val_fid || (c.val_fid == b.val_fid && c.epoch < b.epoch) => Some(b),
            _ => Some(c),
        };
    }
    best.ok_or(TrainError::EmptyCheckpointSet)
}

/// Deterministic sub-seed for a `(seed, a, b)` stream.
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut x = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    x ^= x >> 30;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Validation score (lower is better) computed between epochs.
pub type Validator<'a> = dyn FnMut(&Denoiser, usize) -> Result<f64, TrainError> + 'a;

pub struct TrainOutcome {
    pub best: Checkpoint,
    pub checkpoints: Vec<Checkpoint>,
    pub log: Vec<LogEntry>,
    /// Model after the last epoch.
    pub last: Checkpoint,
}

pub struct Trainer<'a> {
    pub cfg: TrainConfig,
    pub schedule: &'a DiffusionSchedule,
    pub guidance: &'a GuidanceConfig,
    /// Checkpoints and `train_log.jsonl` are written here when set.
    pub run_dir: Option<PathBuf>,
}

struct State {
    model: Denoiser,
    opt: AdamW,
    ema: Option<ParamStore>,
    step: u64,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig, schedule: &'a DiffusionSchedule, guidance: &'a GuidanceConfig) -> Self {
        Self { cfg, schedule, guidance, run_dir: None }
    }

    pub fn with_run_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.run_dir = Some(dir.into());
        self
    }

    fn steps_per_epoch(&self, n: usize) -> u64 {
        n.div_ceil(self.cfg.batch_size) as u64
    }

    pub fn lr_at(&self, step: u64, n_items: usize) -> f64 {
        let total = self.steps_per_epoch(n_items) * self.cfg.epochs as u64;
        cosine_lr(self.cfg.lr, self.cfg.lr_floor, step, total.saturating_sub(1))
    }

    pub fn train(&self, model: Denoiser, data: &[TrainItem], validate: &mut Validator) -> Result<TrainOutcome, TrainError> {
        let opt = AdamW::new(self.cfg.optimizer, &model.store);
        let ema = self.cfg.ema_decay.map(|_| model.store.clone());
        self.run(State { model, opt, ema, step: 0 }, 0, data, validate)
    }

    /// Continue from a checkpoint written by a run with the same config.
    pub fn resume(&self, ckpt: &Checkpoint, data: &[TrainItem], validate: &mut Validator) -> Result<TrainOutcome, TrainError> {
        let model = Denoiser::from_store(ckpt.config.clone(), ckpt.params.clone())?;
        let opt = ckpt.optimizer.clone().ok_or_else(|| TrainError::Checkpoint {
            path: format!("epoch {}", ckpt.epoch),
            msg: "checkpoint has no optimizer state".into(),
        })?;
        if ckpt.seed != self.cfg.seed {
            return Err(TrainError::Config(format!("checkpoint seed {} != config seed {}", ckpt.seed, self.cfg.seed)));
        }
        self.run(State { model, opt, ema: ckpt.ema.clone(), step: ckpt.step }, ckpt.epoch, data, validate)
    }

    fn snapshot(&self, st: &State, epoch: usize, val_fid: f64) -> Checkpoint {
        Checkpoint {
            config: st.model.cfg.clone(),
            params: st.model.store.clone(),
            optimizer: Some(st.opt.clone()),
            ema: st.ema.clone(),
            epoch,
            step: st.step,
            seed: self.cfg.seed,
            val_fid,
        }
    }

    fn run(&self, mut st: State, start_epoch: usize, data: &[TrainItem], validate: &mut Validator) -> Result<TrainOutcome, TrainError> {
        self.cfg.validate()?;
        self.guidance.validate()?;
        if data.is_empty() {
            return Err(TrainError::Config("empty training set".into()));
        }
        if let Some(dir) = &self.run_dir {
            std::fs::create_dir_all(dir)?;
        }
        let mut log_file = match &self.run_dir {
            Some(dir) => {
                let f = std::fs::OpenOptions::new().create(true).append(true).open(dir.join("train_log.jsonl"))?;
                Some(std::io::BufWriter::new(f))
            }
            None => None,
        };
        let mut log = Vec::new();
        let mut checkpoints = Vec::new();
        let mut order: Vec<usize> = (0..data.len()).collect();
        for epoch in start_epoch + 1..=self.cfg.epochs {
            order.sort_unstable();
            order.shuffle(&mut init::rng(derive_seed(self.cfg.seed, 0xE90C, epoch as u64)));
            let mut epoch_loss = 0.0;
            let mut last = (0.0, 0.0);
            for batch in order.chunks(self.cfg.batch_size) {
                let lr = self.lr_at(st.step, data.len());
                let (loss, grad_norm) = self.step(&mut st, data, batch, epoch, lr)?;
                epoch_loss += loss * batch.len() as f64;
                last = (lr, grad_norm);
                let entry = LogEntry { kind: LogKind::Step, epoch, step: st.step, loss, lr, grad_norm, val_fid: None };
                if let Some(f) = log_file.as_mut() {
                    writeln!(f, "{}", serde_json::to_string(&entry).expect("log entry serialises"))?;
                }
                log.push(entry);
            }
            let checkpoint_due = epoch % self.cfg.checkpoint_interval == 0 || epoch == self.cfg.epochs;
            let val_fid = if checkpoint_due {
                let eval_model = match &st.ema {
                    Some(e) => Denoiser::from_store(st.model.cfg.clone(), e.clone())?,
                    None => st.model.clone(),
                };
                let v = validate(&eval_model, epoch)?;
                if !v.is_finite() {
                    return Err(TrainError::Validation(format!("non-finite validation score {v} at epoch {epoch}")));
                }
                Some(v)
            } else {
                None
            };
            let summary = LogEntry {
                kind: LogKind::Epoch,
                epoch,
                step: st.step, loss: epoch_loss / data.len() as f64, lr: last.0,
                grad_norm: last.1,
                val_fid,
            };
            log::info!("epoch {epoch}: loss {:.5} lr {:.2e}{}", summary.loss, summary.lr,
                val_fid.map(|v| format!(" val {v:.4}")).unwrap_or_default());
            if let Some(f) = log_file.as_mut() {
                writeln!(f, "{}", serde_json::to_string(&summary).expect("log entry serialises"))?;
                f.flush()?;
            }
            log.push(summary);
            if let Some(v) = val_fid {
                let ck = self.snapshot(&st, epoch, v);
                if let Some(dir) = &self.run_dir {
                    ck.save(&dir.join(format!("ckpt_{epoch:04}.bin")))?;
                }
                checkpoints.push(ck);
            }
        }
        let last = match checkpoints.last() {
            Some(c) if c.step == st.step => c.clone(),
            _ => self.snapshot(&st, self.cfg.epochs.max(start_epoch), f64::NAN),
        };
        let best = select_best(&checkpoints)?.clone();
        if let Some(dir) = &self.run_dir {
            best.save(&dir.join("best.bin"))?;
        }
        Ok(TrainOutcome { best, checkpoints, log, last })
    }

    /// One optimisation step over `batch`; returns (mean loss, pre-clip gradient norm).
    fn step(&self, st: &mut State, data: &[TrainItem], batch: &[usize], epoch: usize, lr: f64) -> Result<(f64, f64), TrainError> {
        let step = st.step;
        let model = &st.model;
        let scale = 1.0 / batch.len() as f64;
        let results: Vec<Result<(f64, Vec<Array2<f64>>), TrainError>> = batch
            .par_iter()
            .enumerate()
            .map(|(slot, &i)| {
                let item = &data[i];
                let mut rng = init::rng(derive_seed(self.cfg.seed, step + 1, slot as u64));
                let bundle = &item.bundles[rng.random_range(0..item.bundles.len())];
                let draw = draw_training(&mut rng, self.schedule, self.guidance, item.x0.dim());
                let mut ctx = Ctx::train(init::rng(rng.random()));
                let mut g = Graph::new(&model.store);
                let loss = training_loss(&mut g, model, self.schedule, &item.x0, bundle, &draw, &mut ctx)?;
                let value = g.value(loss)[[0, 0]];
                let scaled = g.scale(loss, scale);
                Ok((value, g.backward(scaled).into_param_grads(&model.store)))
            })
            .collect();
        let mut total = 0.0;
        let mut grads = Vec::new();
        for r in results {
            let (l, g) = r?;
            total += l;
            accumulate(&mut grads, g);
        }
        let loss = total * scale;
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                epoch,
                step,
                batch: batch.iter().map(|&i| data[i].id.clone()).collect(),
            });
        }
        let norm = clip_global_norm(&mut grads, self.cfg.clip_norm);
        st.opt.update(&mut st.model.store, &grads, lr);
        if let (Some(ema), Some(decay)) = (st.ema.as_mut(), self.cfg.ema_decay) {
            for id in st.model.store.ids() {
                let p = st.model.store.get(id);
                ema.get_mut(id).zip_mut_with(p, |e, &p| *e = decay * *e + (1.0 - decay) * p);
            }
        }
        st.step += 1;
        Ok((loss, norm))
    }
}
