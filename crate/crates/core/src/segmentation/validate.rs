//! Rule-level checks of a decomposition against its source prompt.

use serde::{Deserialize, Serialize};

use super::lexicon::{self, Word};
use super::rule::{self, simultaneity_span};
use super::{Decomposition, Strategy};
use crate::data::CaptionRecord;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum Rule {
    EmptyDecomposition,
    EmptyEvent,
    NonConsecutiveIndex { expected: usize, got: usize },
    SubjectMissing { subject: String },
    VerbCountChanged { input: usize, output: usize },
    /// Actions joined by "while" or marked simultaneous ended up in different events.
    SimultaneousSplit { verbs: Vec<String> },
    /// Verb-aware output with more than one action in an event.
    MultipleActions { verbs: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    /// 1-based event index, `None` for decomposition-level rules.
    pub event: Option<usize>,
    #[serde(flatten)]
    pub rule: Rule,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn has(&self, pred: impl Fn(&Rule) -> bool) -> bool {
        self.violations.iter().any(|v| pred(&v.rule))
    }

    fn push(&mut self, event: Option<usize>, rule: Rule) {
        self.violations.push(Violation { event, rule });
    }
}

/// Never fails; every violated rule is listed.
pub fn validate_decomposition(d: &Decomposition, original: &CaptionRecord) -> ValidationReport {
    let mut report = ValidationReport::default();
    if d.events.is_empty() {
        report.push(None, Rule::EmptyDecomposition);
        return report;
    }

    let words = lexicon::words(original);
    let n_subj = rule::subject_of(original);
    let subject: Vec<&str> = words[..n_subj].iter().map(|w| w.lower.as_str()).collect();
    let captions: Vec<CaptionRecord> = d.events.iter().map(|e| e.to_caption(0.0, 0.0)).collect();

    for (i, (e, c)) in d.events.iter().zip(&captions).enumerate() {
        let idx = i + 1;
        if e.index != idx {
            report.push(Some(idx), Rule::NonConsecutiveIndex { expected: idx, got: e.index });
        }
        if e.text.trim().trim_matches('.').trim().is_empty() {
            report.push(Some(idx), Rule::EmptyEvent);
            continue;
        }
        let ew = lexicon::words(c);
        let starts = ew.len() >= subject.len() && ew.iter().zip(&subject).all(|(a, b)| a.lower == *b);
        if !starts {
            report.push(Some(idx), Rule::SubjectMissing { subject: subject.join(" ") });
        }
        if d.strategy == Strategy::VerbAware {
            let verbs = lexicon::verb_lemmas(c).len();
            if verbs > 1 {
                report.push(Some(idx), Rule::MultipleActions { verbs });
            }
        }
    }

    let input = lexicon::verb_lemmas(original).len();
    let output: usize = captions.iter().map(|c| lexicon::verb_lemmas(c).len()).sum();
    if input != output {
        report.push(None, Rule::VerbCountChanged { input, output });
    }

    if d.strategy == Strategy::EventAware {
        for group in simultaneous_groups(&words, original) {
            let homes: Vec<Option<usize>> =
                group.iter().map(|v| captions.iter().position(|c| lexicon::mentions_lemma(c, v))).collect();
            let mut found: Vec<usize> = homes.iter().flatten().copied().collect();
            found.sort_unstable();
            found.dedup();
            if found.len() > 1 {
                report.push(None, Rule::SimultaneousSplit { verbs: group });
            }
        }
    }
    report
}

fn lemma(w: &Word, original: &CaptionRecord) -> String {
    match w.pos_index {
        Some(p) => original.pos_tokens[p].word.to_lowercase(),
        None => lexicon::stem(&w.lower),
    }
}

/// Verb groups that must share one event: the verbs on either side of each
/// "while", and every verb in a clause marked simultaneous.
fn simultaneous_groups(words: &[Word], original: &CaptionRecord) -> Vec<Vec<String>> {
    let mut groups = Vec::new();
    for (i, w) in words.iter().enumerate() {
        if w.lower != "while" {
            continue;
        }
        let before = words[..i].iter().rev().find(|w| w.is_verb());
        let after = words[i + 1..].iter().find(|w| w.is_verb());
        if let (Some(a), Some(b)) = (before, after) {
            groups.push(vec![lemma(a, original), lemma(b, original)]);
        }
    }
    if let Some((at, _)) = simultaneity_span(words) {
        let mut bounds = vec![0];
        bounds.extend(rule::strong_splits(words));
        bounds.push(words.len());
        if let Some(win) = bounds.windows(2).find(|w| w[0] <= at && at < w[1]) {
            let verbs: Vec<String> =
                words[win[0]..win[1]].iter().filter(|w| w.is_verb()).map(|w| lemma(w, original)).collect();
            if verbs.len() > 1 {
                groups.push(verbs);
            }
        }
    }
    groups
}
