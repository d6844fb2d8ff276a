//! Motion and caption records, normalisation statistics and dataset splits.

mod io;
pub mod toy;

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use io::{read_dataset, read_motion, write_dataset, write_motion, DatasetLayout};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("malformed caption line ({reason}): {line:?}")]
    MalformedLine { line: String, reason: String },
    #[error("dimension mismatch: expected {expected} channels, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid motion {id}: {reason}")]
    InvalidMotion { id: String, reason: String },
    #[error("caption file {0} references no motion")]
    MissingMotion(String),
    #[error("unknown split name {0:?}")]
    UnknownSplit(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// A length-L sequence of D_m-dimensional pose feature vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionSequence {
    pub id: String,
    pub fps: f64,
    pub frames: Array2<f64>,
}

impl MotionSequence {
    pub fn new(id: impl Into<String>, fps: f64, frames: Array2<f64>) -> Result<Self, DataError> {
        let id = id.into();
        if frames.nrows() == 0 || frames.ncols() == 0 {
            return Err(DataError::InvalidMotion { id, reason: "empty frame matrix".into() });
        }
        if !frames.iter().all(|v| v.is_finite()) {
            return Err(DataError::InvalidMotion { id, reason: "non-finite entries".into() });
        }
        if !(fps.is_finite() && fps > 0.0) {
            return Err(DataError::InvalidMotion { id, reason: format!("fps {fps}") });
        }
        Ok(Self { id, fps, frames })
    }

    pub fn len(&self) -> usize {
        self.frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }
}

/// One `word/TAG` entry of a caption's part-of-speech stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PosToken {
    pub word: String,
    pub tag: String,
}

impl PosToken {
    pub fn new(word: impl Into<String>, tag: impl Into<String>) -> Self {
        Self { word: word.into(), tag: tag.into() }
    }

    pub fn is_verb(&self) -> bool {
        self.tag == "VERB"
    }
}

impl fmt::Display for PosToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.word, self.tag)
    }
}

/// Parse a whitespace separated `word/TAG` stream. A dangling `word/`
/// followed by a bare tag (`and/ CCONJ`) is rejoined.
pub fn parse_pos_stream(stream: &str) -> Vec<PosToken> {
    let mut out: Vec<PosToken> = Vec::new();
    let mut pending: Option<String> = None;
    for raw in stream.split_whitespace() {
        if let Some(word) = pending.take() {
            if !raw.contains('/') {
                out.push(PosToken::new(word, raw));
                continue;
            }
            out.push(PosToken::new(word, ""));
        }
        match raw.rsplit_once('/') {
            Some((word, "")) => pending = Some(word.to_string()),
            Some((word, tag)) => out.push(PosToken::new(word, tag)),
            None => out.push(PosToken::new(raw, "")),
        }
    }
    if let Some(word) = pending {
        out.push(PosToken::new(word, ""));
    }
    out
}

/// One caption line: `text#word/TAG ...#start#end`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub text: String,
    pub pos_tokens: Vec<PosToken>,
    pub start_s: f64,
    pub end_s: f64,
}

impl CaptionRecord {
    /// Whole-clip caption without a POS stream.
    pub fn plain(text: impl Into<String>) -> Self {
        Self { text: text.into(), pos_tokens: Vec::new(), start_s: 0.0, end_s: 0.0 }
    }

    pub fn parse(line: &str) -> Result<Self, DataError> {
        let line = line.trim_end_matches(['\r', '\n']);
        let malformed = |reason: &str| DataError::MalformedLine { line: line.to_string(), reason: reason.into() };
        let parts: Vec<&str> = line.split('#').collect();
        if parts.len() != 4 {
            return Err(malformed(&format!("expected 3 '#' separators, found {}", parts.len() - 1)));
        }
        if parts[0].trim().is_empty() {
            return Err(malformed("empty caption text"));
        }
        let start_s: f64 = parts[2].trim().parse().map_err(|_| malformed("start time is not a number"))?;
        let end_s: f64 = parts[3].trim().parse().map_err(|_| malformed("end time is not a number"))?;
        if !(start_s.is_finite() && end_s.is_finite()) || start_s > end_s {
            return Err(malformed("segment bounds out of order"));
        }
        Ok(Self { text: parts[0].to_string(), pos_tokens: parse_pos_stream(parts[1]), start_s, end_s })
    }

    pub fn to_line(&self) -> String {
        let pos: Vec<String> = self.pos_tokens.iter().map(|t| t.to_string()).collect();
        format!("{}#{}#{:?}#{:?}", self.text, pos.join(" "), self.start_s, self.end_s)
    }

    pub fn is_whole_clip(&self) -> bool {
        self.start_s == 0.0 && self.end_s == 0.0
    }

    pub fn verb_count(&self) -> usize {
        self.pos_tokens.iter().filter(|t| t.is_verb()).count()
    }
}

impl FromStr for CaptionRecord {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse(s)
    }
}

/// Per-channel mean and standard deviation over training frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
}

impl NormStats {
    /// Standard deviations below this are clamped before dividing.
    pub const MIN_STD: f64 = 1e-8;

    pub fn identity(dim: usize) -> Self {
        Self { mean: Array1::zeros(dim), std: Array1::ones(dim) }
    }

    /// Population statistics over every frame of every motion.
    pub fn from_motions<'a>(motions: impl IntoIterator<Item = &'a MotionSequence>) -> Option<Self> {
        let mut sum: Option<Array1<f64>> = None;
        let mut sq: Option<Array1<f64>> = None;
        let mut n = 0usize;
        let motions: Vec<&MotionSequence> = motions.into_iter().collect();
        for m in &motions {
            let s = m.frames.sum_axis(Axis(0));
            match &mut sum {
                Some(acc) => *acc += &s,
                None => sum = Some(s),
            }
            n += m.len();
        }
        let mean = sum? / n as f64;
        for m in &motions {
            let centered = &m.frames - &mean;
            let s = (&centered * &centered).sum_axis(Axis(0));
            match &mut sq {
                Some(acc) => *acc += &s,
                None => sq = Some(s),
            }
        }
        let std = (sq? / n as f64).mapv(|v| v.sqrt().max(Self::MIN_STD));
        Some(Self { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, m: &MotionSequence) -> Result<(), DataError> {
        if m.dim() != self.dim() {
            return Err(DataError::DimensionMismatch { expected: self.dim(), got: m.dim() });
        }
        Ok(())
    }

    pub fn normalize(&self, m: &MotionSequence) -> Result<MotionSequence, DataError> {
        self.check(m)?;
        let std = self.std.mapv(|s| s.max(Self::MIN_STD));
        Ok(MotionSequence { frames: (&m.frames - &self.mean) / &std, ..m.clone() })
    }

    pub fn denormalize(&self, m: &MotionSequence) -> Result<MotionSequence, DataError> {
        self.check(m)?;
        let std = self.std.mapv(|s| s.max(Self::MIN_STD));
        Ok(MotionSequence { frames: &m.frames * &std + &self.mean, ..m.clone() })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    pub const ALL: [SplitName; 3] = [SplitName::Train, SplitName::Val, SplitName::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        }
    }
}

impl FromStr for SplitName {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(SplitName::Train),
            "val" => Ok(SplitName::Val),
            "test" => Ok(SplitName::Test),
            other => Err(DataError::UnknownSplit(other.to_string())),
        }
    }
}

/// Ground truth emitted by the toy generator: primitive order and the frame
/// index at which each segment starts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentLabels {
    pub primitives: Vec<toy::Primitive>,
    pub boundaries: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub motion: MotionSequence,
    pub captions: Vec<CaptionRecord>,
    pub labels: Option<SegmentLabels>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub name: SplitName,
    pub pairs: Vec<Sample>,
    pub normalization_stats: NormStats,
}

impl DatasetSplit {
    /// Split whose statistics are computed from its own frames (use for train).
    pub fn with_own_stats(name: SplitName, pairs: Vec<Sample>) -> Self {
        let dim = pairs.first().map(|s| s.motion.dim()).unwrap_or(0);
        let normalization_stats =
            NormStats::from_motions(pairs.iter().map(|p| &p.motion)).unwrap_or_else(|| NormStats::identity(dim));
        Self { name, pairs, normalization_stats }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.pairs.iter().map(|p| p.motion.id.as_str())
    }

    pub fn get(&self, id: &str) -> Option<&Sample> {
        self.pairs.iter().find(|p| p.motion.id == id)
    }

    /// Replace statistics (val/test splits reuse the train statistics).
    pub fn with_stats(mut self, stats: NormStats) -> Self {
        self.normalization_stats = stats;
        self
    }

    /// Copy with every motion normalised by this split's statistics.
    pub fn normalized(&self) -> Result<DatasetSplit, DataError> {
        let pairs = self
            .pairs
            .iter()
            .map(|p| Ok(Sample { motion: self.normalization_stats.normalize(&p.motion)?, ..p.clone() }))
            .collect::<Result<Vec<_>, DataError>>()?;
        Ok(DatasetSplit { name: self.name, pairs, normalization_stats: self.normalization_stats.clone() })
    }

    /// Partition into (a, b) with the first `n` samples in `a`.
    pub fn split_at(&self, n: usize, first: SplitName, second: SplitName) -> (DatasetSplit, DatasetSplit) {
        let n = n.min(self.pairs.len());
        let a = DatasetSplit::with_own_stats(first, self.pairs[..n].to_vec());
        let b = DatasetSplit { name: second, pairs: self.pairs[n..].to_vec(), normalization_stats: a.normalization_stats.clone() };
        (a, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    const GOOD_2: &str = "a man kicks something with his left leg.#a/DET man/NOUN kick/VERB something/PRON with/ADP his/DET left/ADJ leg/NOUN#0.0#0.0";

    #[test]
    fn parses_annotated_caption_line() {
        let c = CaptionRecord::parse(GOOD_2).unwrap();
        assert_eq!(c.text, "a man kicks something with his left leg.");
        assert_eq!(c.start_s, 0.0);
        assert_eq!(c.end_s, 0.0);
        assert!(c.is_whole_clip());
        assert_eq!(c.pos_tokens.len(), 8);
        assert_eq!(c.pos_tokens[2], PosToken::new("kick", "VERB"));
        assert_eq!(c.verb_count(), 1);
        assert_eq!(c.to_line(), GOOD_2);
    }

    #[test]
    fn parses_minimal_line() {
        let c = CaptionRecord::parse("x#y/NOUN#0.0#0.0").unwrap();
        assert_eq!(c.text, "x");
        assert_eq!(c.pos_tokens, vec![PosToken::new("y", "NOUN")]);
    }

    #[test]
    fn rejects_malformed_lines() {
        for bad in ["no separators here", "a#b#c", "a#b#c#d#e", "a#b/NOUN#zero#0.0", "a#b/NOUN#1.0#0.5", "#b/NOUN#0.0#0.0"] {
            assert!(matches!(CaptionRecord::parse(bad), Err(DataError::MalformedLine { .. })), "{bad}");
        }
    }

    #[test]
    fn rejoins_split_pos_token() {
        let toks = parse_pos_stream("land/VERB and/ CCONJ bow/VERB");
        assert_eq!(toks, vec![PosToken::new("land", "VERB"), PosToken::new("and", "CCONJ"), PosToken::new("bow", "VERB")]);
    }

    #[test]
    fn identity_stats_leave_motion_unchanged() {
        let m = MotionSequence::new("z", 20.0, Array2::zeros((4, 3))).unwrap();
        let out = NormStats::identity(3).normalize(&m).unwrap();
        assert_eq!(out.frames, m.frames);
    }

    #[test]
    fn frames_equal_to_mean_normalise_to_zero() {
        let stats = NormStats { mean: array![1.0, -2.0, 3.5], std: array![2.0, 0.5, 1.0] };
        let frames = Array2::from_shape_fn((5, 3), |(_, c)| stats.mean[c]);
        let m = MotionSequence::new("m", 20.0, frames).unwrap();
        assert!(stats.normalize(&m).unwrap().frames.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn random_round_trip_is_tight() {
        let frames = crate::nn::init::normal(&mut crate::nn::init::rng(5), 5, 7, 3.0);
        let m = MotionSequence::new("r", 20.0, frames).unwrap();
        let stats = NormStats::from_motions([&m]).unwrap();
        let back = stats.denormalize(&stats.normalize(&m).unwrap()).unwrap();
        let err = (&back.frames - &m.frames).mapv(f64::abs).fold(0.0f64, |a, b| a.max(*b));
        assert!(err < 1e-6, "max abs error {err}");
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let m = MotionSequence::new("m", 20.0, Array2::zeros((2, 4))).unwrap();
        let err = NormStats::identity(3).normalize(&m).unwrap_err();
        assert!(matches!(err, DataError::DimensionMismatch { expected: 3, got: 4 }));
    }

    #[test]
    fn zero_variance_channel_is_clamped() {
        let frames = array![[1.0, 0.0], [1.0, 2.0]];
        let m = MotionSequence::new("m", 20.0, frames).unwrap();
        let stats = NormStats::from_motions([&m]).unwrap();
        assert_eq!(stats.std[0], NormStats::MIN_STD);
        let n = stats.normalize(&m).unwrap();
        assert!(n.frames.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn motion_rejects_non_finite() {
        assert!(MotionSequence::new("m", 20.0, array![[f64::NAN]]).is_err());
        assert!(MotionSequence::new("m", 20.0, Array2::zeros((0, 3))).is_err());
    }
}
