//! Synthetic multi-event trajectories with templated captions.
//!
//! Each sample concatenates 1..=K primitive segments of equal length. Pose
//! features are 7 channels: planar position `x, y`, height `z`, heading,
//! and the per-second velocities of `x, y, z`.

use std::fmt;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{CaptionRecord, DatasetSplit, MotionSequence, PosToken, Sample, SegmentLabels, SplitName};
use crate::nn::init;

pub const TOY_DIM: usize = 7;
pub const TOY_FPS: f64 = 20.0;
const BASE_HEIGHT: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Primitive {
    Walk,
    Jump,
    Turn,
    Pause,
}

impl Primitive {
    pub const ALL: [Primitive; 4] = [Primitive::Walk, Primitive::Jump, Primitive::Turn, Primitive::Pause];

    fn phrase(self) -> (&'static str, [(&'static str, &'static str); 2]) {
        match self {
            Primitive::Walk => ("walks forward", [("walk", "VERB"), ("forward", "ADV")]),
            Primitive::Jump => ("jumps up", [("jump", "VERB"), ("up", "ADV")]),
            Primitive::Turn => ("turns left", [("turn", "VERB"), ("left", "ADV")]),
            Primitive::Pause => ("stands still", [("stand", "VERB"), ("still", "ADV")]),
        }
    }
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.phrase().0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyConfig {
    /// Frames per primitive segment.
    pub segment_frames: usize,
    /// Relative sampling weight of event counts 1, 2, ... (truncated to
    /// `max_events`).
    pub event_weights: Vec<f64>,
    pub captions_per_sample: usize,
    /// Std of additive position noise.
    pub noise: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self { segment_frames: 24, event_weights: vec![1.0; 6], captions_per_sample: 2, noise: 0.002 }
    }
}

impl ToyConfig {
    /// Normalised probabilities of 1..=max_events events.
    pub fn event_probs(&self, max_events: usize) -> Vec<f64> {
        let w: Vec<f64> = (0..max_events).map(|i| self.event_weights.get(i).copied().unwrap_or(1.0)).collect();
        let total: f64 = w.iter().sum();
        w.into_iter().map(|v| v / total).collect()
    }
}

const SUBJECTS: [(&str, &[(&str, &str)]); 3] = [
    ("a person", &[("a", "DET"), ("person", "NOUN")]),
    ("a man", &[("a", "DET"), ("man", "NOUN")]),
    ("someone", &[("someone", "PRON")]),
];

/// Templated caption joining the primitives with "then".
pub fn caption_for(primitives: &[Primitive], variant: usize) -> CaptionRecord {
    let (subj, subj_pos) = SUBJECTS[variant % SUBJECTS.len()];
    let mut text = subj.to_string();
    let mut pos: Vec<PosToken> = subj_pos.iter().map(|(w, t)| PosToken::new(*w, *t)).collect();
    let n = primitives.len();
    for (i, p) in primitives.iter().enumerate() {
        if i > 0 {
            let last = i == n - 1;
            let connective: &[(&str, &str)] = match (last && n >= 3, variant % 3) {
                (true, 1) => &[("and", "CCONJ"), ("finally", "ADV")],
                (_, 2) => &[("and", "CCONJ"), ("then", "ADV")],
                _ => &[("then", "ADV")],
            };
            text.push(',');
            for (w, t) in connective {
                text.push(' ');
                text.push_str(w);
                pos.push(PosToken::new(*w, *t));
            }
        }
        let (phrase, words) = p.phrase();
        text.push(' ');
        text.push_str(phrase);
        pos.extend(words.iter().map(|(w, t)| PosToken::new(*w, *t)));
    }
    text.push('.');
    CaptionRecord { text, pos_tokens: pos, start_s: 0.0, end_s: 0.0 }
}

fn smoothstep(u: f64) -> f64 {
    u * u * (3.0 - 2.0 * u)
}

/// Render a primitive sequence into pose features.
pub fn render(primitives: &[Primitive], segment_frames: usize, rng: &mut init::Rng, noise: f64) -> Array2<f64> {
    let total = primitives.len() * segment_frames;
    let mut pos = Array2::<f64>::zeros((total, 4));
    let (mut x, mut y, mut heading) = (0.0f64, 0.0f64, 0.0f64);
    for (k, p) in primitives.iter().enumerate() {
        let speed = rng.random_range(0.9..1.3);
        let jump = rng.random_range(0.4..0.6);
        let turn = rng.random_range(0.8..1.2) * std::f64::consts::FRAC_PI_2;
        let h0 = heading;
        for f in 0..segment_frames {
            let u = (f + 1) as f64 / segment_frames as f64;
            let mut z = BASE_HEIGHT;
            match p {
                Primitive::Walk => {
                    x += speed / TOY_FPS * heading.cos();
                    y += speed / TOY_FPS * heading.sin();
                    z += 0.02 * (4.0 * std::f64::consts::PI * u).sin();
                }
                Primitive::Jump => z += jump * (std::f64::consts::PI * u).sin(),
                Primitive::Turn => heading = h0 + turn * smoothstep(u),
                Primitive::Pause => {}
            }
            let row = k * segment_frames + f;
            pos[[row, 0]] = x;
            pos[[row, 1]] = y;
            pos[[row, 2]] = z;
            pos[[row, 3]] = heading;
        }
    }
    if noise > 0.0 {
        let n = Normal::new(0.0, noise).unwrap();
        pos.mapv_inplace(|v| v + n.sample(rng));
    }
    let mut out = Array2::zeros((total, TOY_DIM));
    for i in 0..total {
        for c in 0..4 {
            out[[i, c]] = pos[[i, c]];
        }
        let prev = if i == 0 { [0.0, 0.0, BASE_HEIGHT] } else { [pos[[i - 1, 0]], pos[[i - 1, 1]], pos[[i - 1, 2]]] };
        for c in 0..3 {
            out[[i, 4 + c]] = (pos[[i, c]] - prev[c]) * TOY_FPS;
        }
    }
    out
}

fn sample_rng(seed: u64, index: usize) -> init::Rng {
    init::rng(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64 + 1))
}

fn sample_primitives(rng: &mut init::Rng, k: usize) -> Vec<Primitive> {
    let mut out: Vec<Primitive> = Vec::with_capacity(k);
    while out.len() < k {
        let p = Primitive::ALL[rng.random_range(0..Primitive::ALL.len())];
        if out.last() != Some(&p) {
            out.push(p);
        }
    }
    out
}

fn sample_event_count(rng: &mut init::Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i + 1;
        }
    }
    probs.len()
}

/// One toy sample with explicit primitive order.
pub fn make_sample(id: String, primitives: &[Primitive], cfg: &ToyConfig, rng: &mut init::Rng) -> Sample {
    let frames = render(primitives, cfg.segment_frames, rng, cfg.noise);
    let captions = (0..cfg.captions_per_sample.max(1))
        .map(|_| caption_for(primitives, rng.random_range(0..9)))
        .collect();
    let boundaries = (0..primitives.len()).map(|k| k * cfg.segment_frames).collect();
    Sample {
        motion: MotionSequence::new(id, TOY_FPS, frames).expect("toy motion is finite"),
        captions,
        labels: Some(SegmentLabels { primitives: primitives.to_vec(), boundaries }),
    }
}

/// Deterministic toy split. Sample `i` depends only on `(seed, i)`.
pub fn generate_with(
    cfg: &ToyConfig,
    name: SplitName,
    n_samples: usize,
    max_events: usize,
    seed: u64,
    id_prefix: &str,
) -> DatasetSplit {
    assert!((1..=6).contains(&max_events), "max_events must be in 1..=6");
    let probs = cfg.event_probs(max_events);
    let pairs = (0..n_samples)
        .map(|i| {
            let mut rng = sample_rng(seed, i);
            let k = sample_event_count(&mut rng, &probs);
            let prims = sample_primitives(&mut rng, k);
            make_sample(format!("{id_prefix}{i:06}"), &prims, cfg, &mut rng)
        })
        .collect();
    DatasetSplit::with_own_stats(name, pairs)
}

pub fn generate_toy_dataset(n_samples: usize, max_events: usize, seed: u64) -> DatasetSplit {
    generate_with(&ToyConfig::default(), SplitName::Train, n_samples, max_events, seed, "toy")
}

/// Rule-based classifier for one segment of raw (denormalised) pose features.
pub fn classify_segment(frames: ArrayView2<f64>) -> Primitive {
    let n = frames.nrows();
    if n == 0 {
        return Primitive::Pause;
    }
    let w = (n / 6).max(1);
    let avg = |c: usize, from: usize, to: usize| frames.column(c).slice(ndarray::s![from..to]).mean().unwrap_or(0.0);
    let (head_start, head_end) = (avg(3, 0, w), avg(3, n - w, n));
    if (head_end - head_start).abs() > 0.6 {
        return Primitive::Turn;
    }
    let z_edges = 0.5 * (avg(2, 0, w) + avg(2, n - w, n));
    let z_peak = frames.column(2).iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if z_peak - z_edges > 0.2 {
        return Primitive::Jump;
    }
    let dx = avg(0, n - w, n) - avg(0, 0, w);
    let dy = avg(1, n - w, n) - avg(1, 0, w);
    let seconds = n as f64 / TOY_FPS;
    if (dx * dx + dy * dy).sqrt() > 0.3 * seconds {
        return Primitive::Walk;
    }
    Primitive::Pause
}

/// Classify `k` equal-length segments of a trajectory.
pub fn classify_sequence(frames: ArrayView2<f64>, k: usize) -> Vec<Primitive> {
    let n = frames.nrows();
    (0..k)
        .map(|i| {
            let (a, b) = (i * n / k, (i + 1) * n / k);
            classify_segment(frames.slice(ndarray::s![a..b, ..]))
        })
        .collect()
}

/// True when the classified segment order equals `expected` exactly.
pub fn event_order_matches(frames: ArrayView2<f64>, expected: &[Primitive]) -> bool {
    classify_sequence(frames, expected.len()) == expected
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_event_sample_has_one_clause() {
        let d = generate_toy_dataset(1, 1, 0);
        assert_eq!(d.len(), 1);
        let s = &d.pairs[0];
        assert_eq!(s.labels.as_ref().unwrap().primitives.len(), 1);
        for c in &s.captions {
            assert!(!c.text.contains("then") && !c.text.contains("finally"), "{}", c.text);
            assert_eq!(c.verb_count(), 1);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_toy_dataset(20, 4, 7);
        let b = generate_toy_dataset(20, 4, 7);
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let c = generate_toy_dataset(20, 4, 8);
        assert_ne!(a, c);
    }

    #[test]
    fn event_histogram_matches_weights() {
        let n = 100;
        let d = generate_toy_dataset(n, 4, 3);
        let mut counts = [0usize; 4];
        for s in &d.pairs {
            counts[s.labels.as_ref().unwrap().primitives.len() - 1] += 1;
        }
        let p = 0.25;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 * p).abs() <= 3.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn boundaries_align_with_caption_clauses() {
        let d = generate_toy_dataset(30, 4, 11);
        for s in &d.pairs {
            let l = s.labels.as_ref().unwrap();
            assert_eq!(l.boundaries.len(), l.primitives.len());
            assert_eq!(s.motion.len(), l.primitives.len() * ToyConfig::default().segment_frames);
            for c in &s.captions {
                assert_eq!(c.verb_count(), l.primitives.len());
            }
        }
    }

    #[test]
    fn classifier_recovers_generator_labels() {
        let d = generate_toy_dataset(200, 6, 21);
        for s in &d.pairs {
            let l = s.labels.as_ref().unwrap();
            assert!(event_order_matches(s.motion.frames.view(), &l.primitives), "{:?}", l.primitives);
        }
    }

    #[test]
    fn no_consecutive_repeats() {
        let d = generate_toy_dataset(100, 6, 2);
        for s in &d.pairs {
            let p = &s.labels.as_ref().unwrap().primitives;
            assert!(p.windows(2).all(|w| w[0] != w[1]));
        }
    }
}
