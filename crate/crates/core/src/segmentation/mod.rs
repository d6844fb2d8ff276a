//! Event decomposition of prompts: rule and LLM segmenters, validation and
//! event-count stratification.

mod lexicon;
pub mod llm;
mod rule;
mod stratify;
mod validate;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{CaptionRecord, DataError, PosToken};

pub use llm::{decompose, decompose_llm, HttpLlm, LlmClient, LlmError, ResponseCache, Template};
pub use rule::{decompose_rule, decompose_rule_with, subject_of};
pub use stratify::{read_count_records, stratify, stratify_counts, stratify_records, CountRecord, StratifiedBenchmark, CONDITIONS};
pub use validate::{validate_decomposition, Rule, ValidationReport, Violation};

#[derive(Debug, Error)]
pub enum SegmentationError {
    #[error("llm transport failure: {0}")]
    LlmTransport(String),
    #[error("unparseable llm response: {0}")]
    UnparseableResponse(String),
    #[error("no decomposition for caption {caption} of sample {id}")]
    MissingDecomposition { id: String, caption: usize },
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventSource {
    Llm,
    Rule,
    Human,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    EventAware,
    VerbAware,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::EventAware => "event",
            Strategy::VerbAware => "verb",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "event" | "event_aware" => Ok(Strategy::EventAware),
            "verb" | "verb_aware" => Ok(Strategy::VerbAware),
            other => Err(format!("unknown strategy {other:?} (expected event or verb)")),
        }
    }
}

/// One clause C_k of a decomposition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub text: String,
    #[serde(default)]
    pub pos_tokens: Vec<PosToken>,
    pub index: usize,
    pub source: EventSource,
}

impl Event {
    pub fn from_caption(c: CaptionRecord, index: usize, source: EventSource) -> Self {
        Self { text: c.text, pos_tokens: c.pos_tokens, index, source }
    }

    pub fn to_caption(&self, start_s: f64, end_s: f64) -> CaptionRecord {
        CaptionRecord { text: self.text.clone(), pos_tokens: self.pos_tokens.clone(), start_s, end_s }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    pub prompt: CaptionRecord,
    pub events: Vec<Event>,
    pub strategy: Strategy,
}

impl Decomposition {
    pub fn k(&self) -> usize {
        self.events.len()
    }

    pub fn texts(&self) -> Vec<&str> {
        self.events.iter().map(|e| e.text.as_str()).collect()
    }

    /// Build from output lines in the caption-line format; lines that do not
    /// parse are kept as plain text so validation can still inspect them.
    pub fn from_lines_lossy(prompt: CaptionRecord, lines: &str, strategy: Strategy, source: EventSource) -> Self {
        let events = lines
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .enumerate()
            .map(|(i, l)| {
                let c = CaptionRecord::parse(l).unwrap_or_else(|_| CaptionRecord::plain(l));
                Event::from_caption(c, i + 1, source)
            })
            .collect();
        Self { prompt, events, strategy }
    }

    /// One caption line per event, inheriting the prompt's segment bounds.
    pub fn to_lines(&self) -> String {
        let mut s = String::new();
        for e in &self.events {
            s.push_str(&e.to_caption(self.prompt.start_s, self.prompt.end_s).to_line());
            s.push('\n');
        }
        s
    }
}
