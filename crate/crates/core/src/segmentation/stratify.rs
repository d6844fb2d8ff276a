//! Event-count strata of a test split.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{Decomposition, SegmentationError};
use crate::data::DatasetSplit;

/// Minimum event counts of the reported conditions.
pub const CONDITIONS: [usize; 3] = [2, 3, 4];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StratifiedBenchmark {
    pub total: usize,
    /// Minimum event count to sorted sample ids.
    pub conditions: BTreeMap<usize, Vec<String>>,
}

impl StratifiedBenchmark {
    pub fn ids(&self, min_events: usize) -> &[String] {
        self.conditions.get(&min_events).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn count(&self, min_events: usize) -> usize {
        self.ids(min_events).len()
    }

    /// ids(c+1) ⊆ ids(c) for consecutive conditions.
    pub fn is_nested(&self) -> bool {
        let keys: Vec<usize> = self.conditions.keys().copied().collect();
        keys.windows(2).all(|w| {
            let outer: BTreeSet<&String> = self.ids(w[0]).iter().collect();
            self.ids(w[1]).iter().all(|id| outer.contains(id))
        })
    }
}

/// A sample enters condition c iff its largest per-caption event count is >= c.
pub fn stratify_counts<'a, I, C>(samples: I) -> StratifiedBenchmark
where
    I: IntoIterator<Item = (&'a str, C)>,
    C: IntoIterator<Item = usize>,
{
    let mut conditions: BTreeMap<usize, Vec<String>> = CONDITIONS.iter().map(|&c| (c, Vec::new())).collect();
    let mut total = 0;
    for (id, counts) in samples {
        total += 1;
        let k = counts.into_iter().max().unwrap_or(0);
        for (&c, ids) in conditions.iter_mut() {
            if k >= c {
                ids.push(id.to_string());
            }
        }
    }
    for ids in conditions.values_mut() {
        ids.sort();
    }
    StratifiedBenchmark { total, conditions }
}

/// `decompositions` maps sample id to one decomposition per caption.
pub fn stratify(
    test_split: &DatasetSplit,
    decompositions: &BTreeMap<String, Vec<Decomposition>>,
) -> Result<StratifiedBenchmark, SegmentationError> {
    let mut rows = Vec::with_capacity(test_split.len());
    for s in &test_split.pairs {
        let id = s.motion.id.as_str();
        let ds = decompositions.get(id).map(Vec::as_slice).unwrap_or(&[]);
        if ds.len() < s.captions.len() {
            return Err(SegmentationError::MissingDecomposition { id: id.to_string(), caption: ds.len() });
        }
        rows.push((id, ds.iter().map(Decomposition::k).collect::<Vec<_>>()));
    }
    Ok(stratify_counts(rows))
}

/// One line of a decomposition file: per-caption event counts, or the
/// per-caption clause lists they are counted from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountRecord {
    pub id: String,
    #[serde(default)]
    pub event_counts: Vec<usize>,
    #[serde(default)]
    pub decompositions: Vec<Vec<String>>,
}

impl CountRecord {
    pub fn counts(&self) -> Vec<usize> {
        if self.event_counts.is_empty() {
            self.decompositions.iter().map(Vec::len).collect()
        } else {
            self.event_counts.clone()
        }
    }
}

/// Parse a JSON-lines decomposition file; blank lines are skipped.
pub fn read_count_records(text: &str) -> Result<Vec<CountRecord>, String> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| format!("line {}: {e}", i + 1)))
        .collect()
}

/// Strata of parsed records; each id is counted once.
pub fn stratify_records(records: &[CountRecord]) -> Result<StratifiedBenchmark, String> {
    let mut seen = BTreeSet::new();
    for r in records {
        if !seen.insert(r.id.as_str()) {
            return Err(format!("duplicate id {}", r.id));
        }
    }
    Ok(stratify_counts(records.iter().map(|r| (r.id.as_str(), r.counts()))))
}
