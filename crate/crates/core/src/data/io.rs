//! Dataset directory layout:
//!
//! ```text
//! texts/<id>.txt      one caption line per row (`text#pos#start#end`)
//! motions/<id>.bin    row-major little-endian f32, frames x dims
//! motions/<id>.meta   `frames = L`, `dims = D`, `fps = F`
//! labels/<id>.json    optional toy-generator ground truth
//! splits/<name>.txt   one id per row
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{CaptionRecord, DataError, DatasetSplit, MotionSequence, Sample, SegmentLabels, SplitName};

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.display().to_string(), source }
}

/// Sub-directory names, overridable from the run configuration.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetLayout {
    pub texts: String,
    pub motions: String,
    pub labels: String,
    pub splits: String,
}

impl Default for DatasetLayout {
    fn default() -> Self {
        Self { texts: "texts".into(), motions: "motions".into(), labels: "labels".into(), splits: "splits".into() }
    }
}

impl DatasetLayout {
    fn dir(&self, root: &Path, sub: &str) -> PathBuf {
        root.join(sub)
    }
}

pub fn write_motion(dir: &Path, motion: &MotionSequence) -> Result<(), DataError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let bin = dir.join(format!("{}.bin", motion.id));
    let mut bytes = Vec::with_capacity(motion.frames.len() * 4);
    for v in motion.frames.iter() {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    fs::write(&bin, bytes).map_err(io_err(&bin))?;
    let meta = dir.join(format!("{}.meta", motion.id));
    let text = format!("frames = {}\ndims = {}\nfps = {:?}\n", motion.len(), motion.dim(), motion.fps);
    fs::write(&meta, text).map_err(io_err(&meta))
}

pub fn read_motion(dir: &Path, id: &str) -> Result<MotionSequence, DataError> {
    let meta_path = dir.join(format!("{id}.meta"));
    let meta = fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
    let bad = |reason: String| DataError::InvalidMotion { id: id.to_string(), reason };
    let (mut frames, mut dims, mut fps) = (None, None, None);
    for line in meta.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("bad meta line {line:?}")))?;
        let v = v.trim();
        match k.trim() {
            "frames" => frames = v.parse::<usize>().ok(),
            "dims" => dims = v.parse::<usize>().ok(),
            "fps" => fps = v.parse::<f64>().ok(),
            other => return Err(bad(format!("unknown meta key {other:?}"))),
        }
    }
    let (l, d, fps) = match (frames, dims, fps) {
        (Some(l), Some(d), Some(f)) => (l, d, f),
        _ => return Err(bad("meta needs frames, dims and fps".into())),
    };
    let bin_path = dir.join(format!("{id}.bin"));
    let bytes = fs::read(&bin_path).map_err(io_err(&bin_path))?;
    if bytes.len() != l * d * 4 {
        return Err(bad(format!("expected {} bytes, found {}", l * d * 4, bytes.len())));
    }
    let data: Vec<f64> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
    let arr = Array2::from_shape_vec((l, d), data).map_err(|e| bad(e.to_string()))?;
    MotionSequence::new(id, fps, arr)
}

/// Write splits (statistics are not stored; they are recomputed from train).
pub fn write_dataset(root: &Path, layout: &DatasetLayout, splits: &[&DatasetSplit]) -> Result<(), DataError> {
    let texts = layout.dir(root, &layout.texts);
    let motions = layout.dir(root, &layout.motions);
    let labels = layout.dir(root, &layout.labels);
    let split_dir = layout.dir(root, &layout.splits);
    for d in [&texts, &motions, &split_dir] {
        fs::create_dir_all(d).map_err(io_err(d))?;
    }
    for split in splits {
        let mut ids = String::new();
        for s in &split.pairs {
            let id = &s.motion.id;
            write_motion(&motions, &s.motion)?;
            let lines: Vec<String> = s.captions.iter().map(|c| c.to_line()).collect();
            let tp = texts.join(format!("{id}.txt"));
            fs::write(&tp, lines.join("\n") + "\n").map_err(io_err(&tp))?;
            if let Some(l) = &s.labels {
                fs::create_dir_all(&labels).map_err(io_err(&labels))?;
                let lp = labels.join(format!("{id}.json"));
                fs::write(&lp, serde_json::to_string(l).expect("labels serialise")).map_err(io_err(&lp))?;
            }
            ids.push_str(id);
            ids.push('\n');
        }
        let sp = split_dir.join(format!("{}.txt", split.name.as_str()));
        fs::write(&sp, ids).map_err(io_err(&sp))?;
    }
    Ok(())
}

fn read_split(root: &Path, layout: &DatasetLayout, name: SplitName) -> Result<Option<Vec<Sample>>, DataError> {
    let sp = layout.dir(root, &layout.splits).join(format!("{}.txt", name.as_str()));
    if !sp.exists() {
        return Ok(None);
    }
    let ids = fs::read_to_string(&sp).map_err(io_err(&sp))?;
    let motions = layout.dir(root, &layout.motions);
    let mut out = Vec::new();
    for id in ids.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let motion = read_motion(&motions, id).map_err(|e| match e {
            DataError::Io { .. } => DataError::MissingMotion(id.to_string()),
            other => other,
        })?;
        let tp = layout.dir(root, &layout.texts).join(format!("{id}.txt"));
        let text = fs::read_to_string(&tp).map_err(io_err(&tp))?;
        let captions = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(CaptionRecord::parse)
            .collect::<Result<Vec<_>, _>>()?;
        let lp = layout.dir(root, &layout.labels).join(format!("{id}.json"));
        let labels = match fs::read_to_string(&lp) {
            Ok(s) => serde_json::from_str::<SegmentLabels>(&s).ok(),
            Err(_) => None,
        };
        out.push(Sample { motion, captions, labels });
    }
    Ok(Some(out))
}

/// Read every split present under `root`. Statistics come from the train
/// split and are shared by the others.
pub fn read_dataset(root: &Path, layout: &DatasetLayout) -> Result<Vec<DatasetSplit>, DataError> {
    let mut raw = Vec::new();
    for name in SplitName::ALL {
        if let Some(pairs) = read_split(root, layout, name)? {
            raw.push((name, pairs));
        }
    }
    let train = raw.iter().find(|(n, _)| *n == SplitName::Train).map(|(_, p)| p);
    let dim = raw.iter().flat_map(|(_, p)| p.first()).map(|s| s.motion.dim()).next().unwrap_or(0);
    for (_, pairs) in &raw {
        for s in pairs {
            if s.motion.dim() != dim {
                return Err(DataError::DimensionMismatch { expected: dim, got: s.motion.dim() });
            }
        }
    }
    let stats = train
        .and_then(|p| super::NormStats::from_motions(p.iter().map(|s| &s.motion)))
        .unwrap_or_else(|| super::NormStats::identity(dim));
    Ok(raw
        .into_iter()
        .map(|(name, pairs)| DatasetSplit { name, pairs, normalization_stats: stats.clone() })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn motion_file_round_trip_is_f32_exact() {
        let dir = tempfile::tempdir().unwrap();
        let frames = crate::nn::init::normal(&mut crate::nn::init::rng(1), 6, 7, 1.0).mapv(|v| v as f32 as f64);
        let m = MotionSequence::new("000001", 20.0, frames).unwrap();
        write_motion(dir.path(), &m).unwrap();
        assert_eq!(read_motion(dir.path(), "000001").unwrap(), m);
    }

    #[test]
    fn truncated_motion_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let m = MotionSequence::new("a", 20.0, Array2::ones((3, 2))).unwrap();
        write_motion(dir.path(), &m).unwrap();
        fs::write(dir.path().join("a.bin"), [0u8; 8]).unwrap();
        assert!(matches!(read_motion(dir.path(), "a"), Err(DataError::InvalidMotion { .. })));
    }
}
