#![allow(dead_code)]

use std::path::PathBuf;

use evmotion::data::CaptionRecord;
use evmotion::segmentation::{Decomposition, EventSource, Strategy};
use serde::Deserialize;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests").join("fixtures").join(name)
}

#[derive(Debug, Deserialize)]
pub struct SegExample {
    pub name: String,
    pub strategy: String,
    pub kind: String,
    pub input: String,
    pub output: Vec<String>,
    pub events: Option<usize>,
}

impl SegExample {
    pub fn strategy(&self) -> Strategy {
        self.strategy.parse().unwrap()
    }

    pub fn prompt(&self) -> CaptionRecord {
        CaptionRecord::parse(&self.input).unwrap_or_else(|_| CaptionRecord::plain(self.input.clone()))
    }

    pub fn decomposition(&self) -> Decomposition {
        Decomposition::from_lines_lossy(self.prompt(), &self.output.join("\n"), self.strategy(), EventSource::Human)
    }
}

pub fn seg_examples() -> Vec<SegExample> {
    let raw = std::fs::read_to_string(fixture("segmentation_examples.json")).unwrap();
    serde_json::from_str(&raw).unwrap()
}
