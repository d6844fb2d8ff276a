//! Small contrastive text/motion embedding pair trained on toy data.

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{EncoderError, TextEncoder};
use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::data::DatasetSplit;
use crate::nn::{init, Linear};
use crate::optim::{clip_global_norm, AdamW, AdamWConfig};

pub(crate) fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()).map(str::to_lowercase).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StubConfig {
    pub dim: usize,
    pub hidden: usize,
    pub temperature: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for StubConfig {
    fn default() -> Self {
        Self { dim: 64, hidden: 64, temperature: 0.1, epochs: 30, batch_size: 32, lr: 2e-3, seed: 0 }
    }
}

/// Bag-of-words text tower and temporally pooled motion tower, both ending
/// in L2 normalisation. Motions are expected in normalised feature space.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StubEncoder {
    pub cfg: StubConfig,
    vocab: BTreeMap<String, usize>,
    motion_dim: usize,
    store: ParamStore,
    word_emb: ParamId,
    text_out: Linear,
    frame: Linear,
    motion_out: Linear,
    version: String,
}

const UNK: &str = "<unk>";

impl StubEncoder {
    /// Untrained encoder over the vocabulary of `corpus`.
    pub fn new(cfg: StubConfig, corpus: &DatasetSplit) -> Self {
        let mut words: Vec<String> = corpus
            .pairs
            .iter()
            .flat_map(|s| s.captions.iter().flat_map(|c| tokenize(&c.text)))
            .collect();
        words.sort();
        words.dedup();
        let mut vocab = BTreeMap::new();
        vocab.insert(UNK.to_string(), 0);
        for w in words {
            let n = vocab.len();
            vocab.entry(w).or_insert(n);
        }
        let motion_dim = corpus.pairs.first().map(|s| s.motion.dim()).unwrap_or(1);
        let mut rng = init::rng(cfg.seed);
        let mut store = ParamStore::new();
        let word_emb = store.add("text.emb", init::normal(&mut rng, vocab.len(), cfg.hidden, 1.0));
        let text_out = Linear::new(&mut store, &mut rng, "text.out", cfg.hidden, cfg.dim, true);
        let frame = Linear::new(&mut store, &mut rng, "motion.frame", motion_dim, cfg.hidden, true);
        let motion_out = Linear::new(&mut store, &mut rng, "motion.out", cfg.hidden, cfg.dim, true);
        let mut enc = Self { cfg, vocab, motion_dim, store, word_emb, text_out, frame, motion_out, version: String::new() };
        enc.refresh_version();
        enc
    }

    /// Train with a symmetric InfoNCE loss over in-batch negatives.
    pub fn train(cfg: StubConfig, corpus: &DatasetSplit) -> Self {
        let mut enc = Self::new(cfg.clone(), corpus);
        let mut opt = AdamW::new(AdamWConfig::default(), &enc.store);
        let mut rng = init::rng(cfg.seed ^ 0x5eed);
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(cfg.batch_size.max(2)) {
                if chunk.len() < 2 {
                    continue;
                }
                let texts: Vec<&str> = chunk
                    .iter()
                    .map(|&i| {
                        let caps = &corpus.pairs[i].captions;
                        caps[rng.random_range(0..caps.len())].text.as_str()
                    })
                    .collect();
                let motions: Vec<ArrayView2<f64>> = chunk.iter().map(|&i| corpus.pairs[i].motion.frames.view()).collect();
                let mut grads = {
                    let mut g = Graph::new(&enc.store);
                    let loss = enc.contrastive_loss(&mut g, &texts, &motions);
                    g.backward(loss).into_param_grads(&enc.store)
                };
                clip_global_norm(&mut grads, 1.0);
                opt.update(&mut enc.store, &grads, cfg.lr);
            }
        }
        enc.refresh_version();
        enc
    }

    fn refresh_version(&mut self) {
        self.version = format!("stub-bow-v1:{}", &self.store.fingerprint()[..16]);
    }

    pub fn motion_dim(&self) -> usize {
        self.motion_dim
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    fn bow(&self, texts: &[&str]) -> Array2<f64> {
        let mut m = Array2::zeros((texts.len(), self.vocab.len()));
        for (i, t) in texts.iter().enumerate() {
            let mut toks = tokenize(t);
            if toks.is_empty() {
                toks.push(UNK.to_string());
            }
            let w = 1.0 / toks.len() as f64;
            for tok in toks {
                let j = self.vocab.get(&tok).copied().unwrap_or(0);
                m[[i, j]] += w;
            }
        }
        m
    }

    fn text_tower(&self, g: &mut Graph, texts: &[&str]) -> Var {
        let bow = g.constant(self.bow(texts));
        let emb = g.param(self.word_emb);
        let h = g.matmul(bow, emb);
        let h = g.relu(h);
        let y = self.text_out.forward(g, h);
        g.l2_normalize_rows(y)
    }

    fn motion_tower(&self, g: &mut Graph, frames: ArrayView2<f64>) -> Var {
        let x = g.constant(frames.to_owned());
        let h = self.frame.forward(g, x);
        let h = g.relu(h);
        let pooled = g.mean_rows(h);
        let y = self.motion_out.forward(g, pooled);
        g.l2_normalize_rows(y)
    }

    fn contrastive_loss(&self, g: &mut Graph, texts: &[&str], motions: &[ArrayView2<f64>]) -> Var {
        let n = texts.len();
        let t = self.text_tower(g, texts);
        let rows: Vec<Var> = motions.iter().map(|m| self.motion_tower(g, *m)).collect();
        let m = g.concat_rows(&rows);
        let mt = g.transpose(m);
        let logits = g.matmul(t, mt);
        let logits = g.scale(logits, 1.0 / self.cfg.temperature);
        let eye = Arc::new(Array2::<f64>::eye(n));
        let lt = g.log_softmax_rows(logits);
        let logits_t = g.transpose(logits);
        let lm = g.log_softmax_rows(logits_t);
        let a = g.mul_const(lt, eye.clone());
        let b = g.mul_const(lm, eye);
        let a = g.sum(a);
        let b = g.sum(b);
        let s = g.add(a, b);
        g.scale(s, -0.5 / n as f64)
    }

    /// Unit-norm motion embeddings, one row per motion.
    pub fn embed_motions(&self, motions: &[ArrayView2<f64>]) -> Array2<f64> {
        let mut out = Array2::zeros((motions.len(), self.cfg.dim));
        for (i, m) in motions.iter().enumerate() {
            let mut g = Graph::inference(&self.store);
            let v = self.motion_tower(&mut g, *m);
            out.row_mut(i).assign(&g.value(v).row(0));
        }
        out
    }

    pub fn embed_texts(&self, texts: &[&str]) -> Array2<f64> {
        let mut g = Graph::inference(&self.store);
        let v = self.text_tower(&mut g, texts);
        g.value(v).clone()
    }

    pub fn save(&self, path: &std::path::Path) -> std::io::Result<()> {
        let json = serde_json::to_vec(self).map_err(std::io::Error::other)?;
        std::fs::write(path, json)
    }

    pub fn load(path: &std::path::Path) -> std::io::Result<Self> {
        let raw = std::fs::read(path)?;
        serde_json::from_slice(&raw).map_err(std::io::Error::other)
    }
}

impl TextEncoder for StubEncoder {
    fn version(&self) -> String {
        self.version.clone()
    }

    fn dim(&self) -> usize {
        self.cfg.dim
    }

    fn embed_text(&self, texts: &[&str]) -> Result<Array2<f64>, EncoderError> {
        Ok(self.embed_texts(texts))
    }
}
