//! Event tokens E and global token G from a decomposition.

mod http;
mod stub;

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{ParamId, ParamStore};
use crate::nn::init;
use crate::segmentation::Decomposition;

pub use http::{HttpEncoder, ProjectedEncoder};
pub use stub::{StubConfig, StubEncoder};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("encoder failure: {0}")]
    Failure(String),
    #[error("encoder returned {got} rows for {expected} texts")]
    RowCount { expected: usize, got: usize },
    #[error("non-finite embedding for {0:?}")]
    NonFinite(String),
    #[error("embedding file: {0}")]
    File(String),
}

/// Versioned text embedding protocol; rows follow the input order.
pub trait TextEncoder: Send + Sync {
    fn version(&self) -> String;
    fn dim(&self) -> usize;
    fn embed_text(&self, texts: &[&str]) -> Result<Array2<f64>, EncoderError>;
}

impl<T: TextEncoder + ?Sized> TextEncoder for &T {
    fn version(&self) -> String {
        (**self).version()
    }
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn embed_text(&self, texts: &[&str]) -> Result<Array2<f64>, EncoderError> {
        (**self).embed_text(texts)
    }
}

/// How the event path of the denoiser is fed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditioningMode {
    /// One token per event clause.
    Event,
    /// One token per word of the prompt.
    Token,
    /// Only G is used; the event cross-attention is skipped.
    GlobalOnly,
}

impl std::str::FromStr for ConditioningMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "event" => Ok(Self::Event),
            "token" => Ok(Self::Token),
            "global_only" | "global" => Ok(Self::GlobalOnly),
            other => Err(format!("unknown encoder mode {other:?} (expected event, token or global_only)")),
        }
    }
}

/// E (K × D_y) and G (D_y). `null` marks the learned unconditional bundle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditioningBundle {
    pub events: Array2<f64>,
    pub global: Array1<f64>,
    #[serde(default)]
    pub null: bool,
}

impl ConditioningBundle {
    pub fn new(events: Array2<f64>, global: Array1<f64>) -> Self {
        assert_eq!(events.ncols(), global.len(), "event and global widths differ");
        Self { events, global, null: false }
    }

    pub fn k(&self) -> usize {
        self.events.nrows()
    }

    pub fn dim(&self) -> usize {
        self.global.len()
    }
}

fn checked(texts: &[&str], m: Array2<f64>) -> Result<Array2<f64>, EncoderError> {
    if m.nrows() != texts.len() {
        return Err(EncoderError::RowCount { expected: texts.len(), got: m.nrows() });
    }
    for (row, t) in m.rows().into_iter().zip(texts) {
        if !row.iter().all(|x| x.is_finite()) {
            return Err(EncoderError::NonFinite(t.to_string()));
        }
    }
    Ok(m)
}

/// Row k of E is the embedding of clause k; G is the embedding of the prompt.
pub fn encode(d: &Decomposition, encoder: &dyn TextEncoder) -> Result<ConditioningBundle, EncoderError> {
    if d.events.is_empty() {
        return Err(EncoderError::Failure("decomposition has no events".into()));
    }
    let mut texts: Vec<&str> = d.events.iter().map(|e| e.text.as_str()).collect();
    texts.push(d.prompt.text.as_str());
    let m = checked(&texts, encoder.embed_text(&texts)?)?;
    let k = d.events.len();
    Ok(ConditioningBundle::new(m.slice(ndarray::s![..k, ..]).to_owned(), m.row(k).to_owned()))
}

/// Token-level conditioning: one row per prompt word, G from the whole prompt.
pub fn encode_tokens(prompt: &str, encoder: &dyn TextEncoder) -> Result<ConditioningBundle, EncoderError> {
    let mut texts: Vec<String> = stub::tokenize(prompt);
    if texts.is_empty() {
        texts.push(prompt.to_string());
    }
    texts.push(prompt.to_string());
    let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
    let m = checked(&refs, encoder.embed_text(&refs)?)?;
    let k = refs.len() - 1;
    Ok(ConditioningBundle::new(m.slice(ndarray::s![..k, ..]).to_owned(), m.row(k).to_owned()))
}

pub fn encode_with_mode(
    d: &Decomposition,
    mode: ConditioningMode,
    encoder: &dyn TextEncoder,
) -> Result<ConditioningBundle, EncoderError> {
    match mode {
        ConditioningMode::Token => encode_tokens(&d.prompt.text, encoder),
        ConditioningMode::Event | ConditioningMode::GlobalOnly => encode(d, encoder),
    }
}

/// Memoises embeddings per (encoder version, text). `calls` counts requests
/// that reached the wrapped encoder.
pub struct CachedEncoder<E> {
    inner: E,
    entries: Mutex<HashMap<(String, String), Array1<f64>>>,
    calls: AtomicUsize,
}

impl<E: TextEncoder> CachedEncoder<E> {
    pub fn new(inner: E) -> Self {
        Self { inner, entries: Mutex::new(HashMap::new()), calls: AtomicUsize::new(0) }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn inner(&self) -> &E {
        &self.inner
    }
}

impl<E: TextEncoder> TextEncoder for CachedEncoder<E> {
    fn version(&self) -> String {
        self.inner.version()
    }

    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn embed_text(&self, texts: &[&str]) -> Result<Array2<f64>, EncoderError> {
        let version = self.inner.version();
        let mut entries = self.entries.lock().map_err(|_| EncoderError::Failure("cache lock poisoned".into()))?;
        let mut missing: Vec<&str> = Vec::new();
        for t in texts {
            let key = (version.clone(), t.to_string());
            if !entries.contains_key(&key) && !missing.contains(t) {
                missing.push(t);
            }
        }
        if !missing.is_empty() {
            self.calls.fetch_add(1, Ordering::SeqCst);
            let m = checked(&missing, self.inner.embed_text(&missing)?)?;
            for (t, row) in missing.iter().zip(m.rows()) {
                entries.insert((version.clone(), t.to_string()), row.to_owned());
            }
        }
        let mut out = Array2::zeros((texts.len(), self.inner.dim()));
        for (i, t) in texts.iter().enumerate() {
            out.row_mut(i).assign(&entries[&(version.clone(), t.to_string())]);
        }
        Ok(out)
    }
}

/// Learned unconditional tokens for classifier-free guidance. They live in
/// the denoiser's parameter store so they train with it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NullTokens {
    pub global: ParamId,
    pub event: ParamId,
}

impl NullTokens {
    pub fn new(store: &mut ParamStore, rng: &mut init::Rng, d_y: usize) -> Self {
        let std = 1.0 / (d_y as f64).sqrt();
        let global = store.add("null.global", init::normal(rng, 1, d_y, std));
        let event = store.add("null.event", init::normal(rng, 1, d_y, std));
        Self { global, event }
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.global, self.event]
    }
}

/// K = 1 null bundle read from the store.
pub fn null_bundle(store: &ParamStore, tokens: &NullTokens) -> ConditioningBundle {
    ConditioningBundle {
        events: store.get(tokens.event).clone(),
        global: store.get(tokens.global).row(0).to_owned(),
        null: true,
    }
}

const EMB_MAGIC: &[u8; 8] = b"EVEMB\x00\x01\x00";

fn put_u32(w: &mut impl Write, v: usize) -> std::io::Result<()> {
    w.write_all(&(v as u32).to_le_bytes())
}

fn get_u32(r: &mut impl Read) -> std::io::Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn get_f64s(r: &mut impl Read, n: usize) -> std::io::Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

/// Binary records `id → (E, G)`, little-endian f64.
pub fn write_bundles(path: &Path, bundles: &BTreeMap<String, ConditioningBundle>) -> Result<(), EncoderError> {
    let io = |e: std::io::Error| EncoderError::File(format!("{}: {e}", path.display()));
    let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    w.write_all(EMB_MAGIC).map_err(io)?;
    put_u32(&mut w, bundles.len()).map_err(io)?;
    for (id, b) in bundles {
        put_u32(&mut w, id.len()).map_err(io)?;
        w.write_all(id.as_bytes()).map_err(io)?;
        put_u32(&mut w, b.k()).map_err(io)?;
        put_u32(&mut w, b.dim()).map_err(io)?;
        w.write_all(&[u8::from(b.null)]).map_err(io)?;
        for x in b.events.iter().chain(b.global.iter()) {
            w.write_all(&x.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn read_bundles(path: &Path) -> Result<BTreeMap<String, ConditioningBundle>, EncoderError> {
    let io = |e: std::io::Error| EncoderError::File(format!("{}: {e}", path.display()));
    let mut r = std::io::BufReader::new(std::fs::File::open(path).map_err(io)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != EMB_MAGIC {
        return Err(EncoderError::File(format!("{}: bad magic", path.display())));
    }
    let n = get_u32(&mut r).map_err(io)?;
    let mut out = BTreeMap::new();
    for _ in 0..n {
        let len = get_u32(&mut r).map_err(io)?;
        let mut id = vec![0u8; len];
        r.read_exact(&mut id).map_err(io)?;
        let id = String::from_utf8(id).map_err(|e| EncoderError::File(e.to_string()))?;
        let k = get_u32(&mut r).map_err(io)?;
        let d = get_u32(&mut r).map_err(io)?;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag).map_err(io)?;
        let events = Array2::from_shape_vec((k, d), get_f64s(&mut r, k * d).map_err(io)?)
            .map_err(|e| EncoderError::File(e.to_string()))?;
        let global = Array1::from(get_f64s(&mut r, d).map_err(io)?);
        out.insert(id, ConditioningBundle { events, global, null: flag[0] != 0 });
    }
    Ok(out)
}

/// Mean cosine similarity of matched rows and of all unmatched pairs.
pub fn matched_vs_unmatched(a: &Array2<f64>, b: &Array2<f64>) -> (f64, f64) {
    let sims = a.dot(&b.t());
    let n = sims.nrows();
    let diag = sims.diag().sum() / n as f64;
    let off = (sims.sum() - sims.diag().sum()) / (n * n - n).max(1) as f64;
    (diag, off)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::CaptionRecord;
    use crate::segmentation::{decompose_rule, Decomposition, Event, EventSource, Strategy};

    /// Deterministic hashed bag of characters; enough to exercise the plumbing.
    struct CharEncoder;

    impl TextEncoder for CharEncoder {
        fn version(&self) -> String {
            "chars-v1".into()
        }
        fn dim(&self) -> usize {
            8
        }
        fn embed_text(&self, texts: &[&str]) -> Result<Array2<f64>, EncoderError> {
            let mut m = Array2::zeros((texts.len(), 8));
            for (i, t) in texts.iter().enumerate() {
                for (j, b) in t.bytes().enumerate() {
                    m[[i, (b as usize + j) % 8]] += 1.0;
                }
            }
            Ok(m)
        }
    }

    #[test]
    fn single_clause_event_equals_global() {
        let d = decompose_rule("a man kicks something with his left leg.");
        let b = encode(&d, &CharEncoder).unwrap();
        assert_eq!(b.k(), 1);
        assert_eq!(b.events.row(0), b.global.view());
    }

    #[test]
    fn four_clauses_give_four_rows_and_permute() {
        let d = decompose_rule("A person steps backward, jumps up, runs forward, then runs backward.");
        let b = encode(&d, &CharEncoder).unwrap();
        assert_eq!(b.events.dim(), (4, 8));
        let mut p = d.clone();
        p.events.swap(0, 3);
        let bp = encode(&p, &CharEncoder).unwrap();
        assert_eq!(bp.events.row(0), b.events.row(3));
        assert_eq!(bp.events.row(3), b.events.row(0));
        assert_eq!(bp.global, b.global);
    }

    #[test]
    fn cache_hits_skip_encoder() {
        let enc = CachedEncoder::new(CharEncoder);
        let d = decompose_rule("a man walks forward, then jumps up.");
        let a = encode(&d, &enc).unwrap();
        let b = encode(&d, &enc).unwrap();
        assert_eq!(a, b);
        assert_eq!(enc.calls(), 1);
    }

    #[test]
    fn token_mode_has_one_row_per_word() {
        let b = encode_tokens("a man walks forward.", &CharEncoder).unwrap();
        assert_eq!(b.k(), 4);
    }

    #[test]
    fn null_bundle_is_stable() {
        let mut store = ParamStore::new();
        let t = NullTokens::new(&mut store, &mut init::rng(0), 8);
        let a = null_bundle(&store, &t);
        assert_eq!(a, null_bundle(&store, &t));
        assert_eq!(a.k(), 1);
        assert!(a.null);
    }

    #[test]
    fn bundle_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.bin");
        let ev = Event { text: "a man walks.".into(), pos_tokens: vec![], index: 1, source: EventSource::Human };
        let d = Decomposition { prompt: CaptionRecord::plain("a man walks."), events: vec![ev], strategy: Strategy::EventAware };
        let mut m = BTreeMap::new();
        m.insert("000001".to_string(), encode(&d, &CharEncoder).unwrap());
        write_bundles(&path, &m).unwrap();
        assert_eq!(read_bundles(&path).unwrap(), m);
    }
}
