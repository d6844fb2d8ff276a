//! Offline segmenter splitting on temporal connectives.

use super::lexicon::{self, Word};
use super::{Decomposition, Event, EventSource, Strategy};
use crate::data::{CaptionRecord, PosToken};

const TEMPORAL: &[&str] = &["then", "finally", "afterwards", "afterward"];
const LEADING: &[&str] = &["and", "then", "finally", "afterwards", "afterward", "next"];
const SIMULTANEOUS: &[&[&str]] = &[&["at", "the", "same", "time"], &["simultaneously"], &["meanwhile"]];

/// Subject phrase of a caption: DET* ADJ* NOUN+ or a single pronoun from the
/// POS stream when aligned, else a subject pronoun or the first two words.
/// Returns the number of leading words that form the subject.
pub fn subject_of(c: &CaptionRecord) -> usize {
    subject_len(&lexicon::words(c))
}

fn subject_len(words: &[Word]) -> usize {
    if words.is_empty() {
        return 0;
    }
    if words[0].tag.is_some() {
        let tag = |i: usize| words.get(i).and_then(|w| w.tag.as_deref());
        if tag(0) == Some("PRON") {
            return 1;
        }
        let mut i = 0;
        while tag(i) == Some("DET") {
            i += 1;
        }
        while tag(i) == Some("ADJ") {
            i += 1;
        }
        let nouns = i;
        while matches!(tag(i), Some("NOUN") | Some("PROPN")) {
            i += 1;
        }
        if i > nouns {
            return i;
        }
    }
    if lexicon::is_pronoun_subject(&words[0].lower) {
        1
    } else {
        words.len().min(2)
    }
}

pub(crate) fn has_phrase(words: &[Word], phrase: &[&str]) -> Option<usize> {
    (0..words.len()).find(|&i| phrase.iter().enumerate().all(|(j, p)| words.get(i + j).is_some_and(|w| w.lower == *p)))
}

pub(crate) fn simultaneity_span(words: &[Word]) -> Option<(usize, usize)> {
    SIMULTANEOUS.iter().find_map(|p| has_phrase(words, p).map(|i| (i, p.len())))
}

/// Clause start indices from sentence boundaries and temporal connectives.
pub(crate) fn strong_splits(words: &[Word]) -> Vec<usize> {
    let lower = |i: usize| words.get(i).map(|w| w.lower.as_str()).unwrap_or("");
    let mut out = Vec::new();
    for i in 1..words.len() {
        let prev = &words[i - 1];
        let here = lower(i);
        let split = prev.ends_sentence()
            || TEMPORAL.contains(&here) && lower(i - 1) != "and"
            || here == "and" && TEMPORAL.contains(&lower(i + 1))
            || here == "next" && prev.has_comma()
            || here == "after" && (prev.has_comma() || lower(i + 1) == "that")
            || prev.has_comma() && words[i].is_verb()
            || prev.has_comma() && here == "and" && words.get(i + 1).is_some_and(Word::is_verb);
        if split {
            out.push(i);
        }
    }
    out
}

fn weak_splits(words: &[Word], strategy: Strategy) -> Vec<usize> {
    (1..words.len())
        .filter(|&i| {
            let next_is_verb = words.get(i + 1).is_some_and(Word::is_verb);
            match words[i].lower.as_str() {
                "and" => next_is_verb,
                "while" => strategy == Strategy::VerbAware && next_is_verb,
                _ => false,
            }
        })
        .collect()
}

pub fn decompose_rule(prompt: &str) -> Decomposition {
    decompose_rule_with(&CaptionRecord::plain(prompt), Strategy::EventAware)
}

/// Event-aware: "and"/"while"-joined verbs stay together whenever other
/// boundaries exist or the sentence marks simultaneity. Verb-aware: every
/// coordinated verb starts a new clause.
pub fn decompose_rule_with(prompt: &CaptionRecord, strategy: Strategy) -> Decomposition {
    let words = lexicon::words(prompt);
    let n_subj = subject_len(&words);
    let mut cuts = strong_splits(&words);
    let allow_weak = match strategy {
        Strategy::VerbAware => true,
        Strategy::EventAware => cuts.is_empty() && simultaneity_span(&words).is_none(),
    };
    if allow_weak {
        cuts.extend(weak_splits(&words, strategy));
    }
    cuts.retain(|&c| c >= n_subj.max(1));
    cuts.sort_unstable();
    cuts.dedup();

    // A clause without a verb (a bare pronoun, a dangling phrase) joins the next one.
    let mut bounds = vec![0];
    for &c in &cuts {
        let start = *bounds.last().unwrap_or(&0);
        if words[start..c].iter().any(Word::is_verb) {
            bounds.push(c);
        }
    }
    bounds.push(words.len());
    let clauses: Vec<&[Word]> = bounds
        .windows(2)
        .map(|w| strip_leading(&words[w[0]..w[1]]))
        .filter(|c| !c.is_empty())
        .collect();

    if clauses.len() <= 1 {
        let events = vec![Event::from_caption(prompt.clone(), 1, EventSource::Rule)];
        return Decomposition { prompt: prompt.clone(), events, strategy };
    }
    let subject = &words[..n_subj];
    let events = clauses
        .into_iter()
        .enumerate()
        .map(|(i, clause)| render_clause(prompt, subject, clause, i + 1))
        .collect();
    Decomposition { prompt: prompt.clone(), events, strategy }
}

fn strip_leading(mut clause: &[Word]) -> &[Word] {
    loop {
        match clause.first().map(|w| w.lower.as_str()) {
            Some(w) if LEADING.contains(&w) => clause = &clause[1..],
            Some("after") if clause.get(1).is_some_and(|w| w.lower == "that") => clause = &clause[2..],
            Some("while") if clause.get(1).is_some_and(Word::is_verb) => clause = &clause[1..],
            _ => return clause,
        }
    }
}

fn render_clause(prompt: &CaptionRecord, subject: &[Word], clause: &[Word], index: usize) -> Event {
    let starts_with_subject = !subject.is_empty()
        && clause.len() >= subject.len()
        && clause.iter().zip(subject).all(|(a, b)| a.lower == b.lower);
    let (prefix, body): (&[Word], &[Word]) = if starts_with_subject || subject.is_empty() {
        (&[], clause)
    } else if lexicon::is_personal_pronoun(&clause[0].lower) {
        (subject, &clause[1..])
    } else {
        (subject, clause)
    };

    let mut text = String::new();
    let mut pos: Vec<PosToken> = Vec::new();
    let all: Vec<&Word> = prefix.iter().chain(body).collect();
    for (j, w) in all.iter().enumerate() {
        if j > 0 {
            text.push(' ');
        }
        text.push_str(&w.raw);
        let is_last = j + 1 == all.len();
        let in_subject = j < prefix.len();
        if !is_last && !in_subject {
            text.push_str(&w.trail);
        }
        if let Some(p) = w.pos_index {
            pos.push(prompt.pos_tokens[p].clone());
        }
    }
    text.push('.');
    Event { text, pos_tokens: pos, index, source: EventSource::Rule }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counts(s: &str) -> usize {
        decompose_rule(s).k()
    }

    #[test]
    fn four_event_prompt() {
        let d = decompose_rule("A person steps backward, jumps up, runs forward, then runs backward.");
        assert_eq!(
            d.texts(),
            vec!["A person steps backward.", "A person jumps up.", "A person runs forward.", "A person runs backward."]
        );
    }

    #[test]
    fn single_event_is_left_as_is() {
        let p = "a man kicks something with his left leg.";
        let d = decompose_rule(p);
        assert_eq!(d.texts(), vec![p]);
    }

    #[test]
    fn while_never_splits_event_aware() {
        assert_eq!(counts("A person waves their hand while stepping sideways."), 1);
        assert_eq!(counts("A person bends their knees and raises both arms at the same time."), 1);
    }

    #[test]
    fn connective_variants() {
        assert_eq!(counts("a man walks forward, and then jumps up."), 2);
        assert_eq!(counts("someone walks. then he turns left."), 2);
        assert_eq!(counts("a person walks forward and turns left"), 2);
        assert_eq!(counts("a person walks forward, after that sits down."), 2);
    }

    #[test]
    fn pronoun_clause_takes_subject() {
        let d = decompose_rule("a man walks forward. he then sits down.");
        assert_eq!(d.texts(), vec!["a man walks forward.", "a man then sits down."]);
    }

    #[test]
    fn verb_aware_splits_coordination() {
        let c = CaptionRecord::plain("A person jumps up and spins, then lands.");
        assert_eq!(decompose_rule_with(&c, Strategy::EventAware).k(), 2);
        assert_eq!(decompose_rule_with(&c, Strategy::VerbAware).k(), 3);
    }
}
