//! Word-level helpers shared by the rule segmenter and the validator.

use crate::data::CaptionRecord;

/// Motion verbs used when no POS stream is available.
const VERBS: &[&str] = &[
    "walk", "run", "jog", "sprint", "jump", "hop", "skip", "leap", "turn", "spin", "rotate", "twist", "step", "kick",
    "punch", "wave", "raise", "lift", "lower", "place", "put", "pick", "carry", "throw", "catch", "toss", "sit", "stand",
    "bend", "squat", "crouch", "kneel", "lean", "stretch", "reach", "push", "pull", "swing", "climb", "crawl", "fall",
    "lie", "rise", "move", "go", "stop", "pause", "shake", "nod", "grab", "hold", "drop", "march", "shuffle", "slide",
    "stomp", "bounce", "dance", "clap", "bow", "land", "wipe", "wash", "drink", "eat", "point", "look", "stumble",
    "trip", "balance", "roll", "flap", "swim", "dodge", "duck", "fold", "cross", "rub", "touch", "tap", "scratch",
    "swipe", "shift", "stagger", "limp", "tiptoe", "backpedal", "pivot", "rock", "sway", "lunge", "flex", "open",
    "close", "hit", "strike", "block", "salute", "stir", "pour", "sweep", "brush", "bring", "take", "get", "keep",
    "begin", "start", "continue", "return", "come", "pace", "wander", "proceed", "perform", "do", "make",
    "use", "extend", "spread", "circle", "wiggle", "waddle", "skate", "ski", "hurdle", "vault", "sneak", "creep",
];

const PRONOUN_SUBJECTS: &[&str] =
    &["someone", "somebody", "he", "she", "they", "it", "i", "we", "you", "everyone", "anyone"];

const PERSONAL_PRONOUNS: &[&str] = &["he", "she", "they"];

#[derive(Clone, Debug)]
pub(crate) struct Word {
    pub raw: String,
    pub lower: String,
    /// Punctuation following the word, e.g. "," or ".".
    pub trail: String,
    pub tag: Option<String>,
    /// Index into the caption's POS stream when aligned.
    pub pos_index: Option<usize>,
}

impl Word {
    pub fn is_verb(&self) -> bool {
        match &self.tag {
            Some(t) => t == "VERB",
            None => is_lexicon_verb(&self.lower),
        }
    }

    pub fn ends_sentence(&self) -> bool {
        self.trail.contains(['.', '!', '?', ';'])
    }

    pub fn has_comma(&self) -> bool {
        self.trail.contains(',')
    }
}

fn is_punct(c: char) -> bool {
    matches!(c, '.' | ',' | ';' | ':' | '!' | '?' | '"' | '\'' | '(' | ')')
}

/// Split caption text into words, aligning POS tags when the counts agree.
pub(crate) fn words(c: &CaptionRecord) -> Vec<Word> {
    let mut out: Vec<Word> = Vec::new();
    for piece in c.text.split_whitespace() {
        let core = piece.trim_matches(is_punct);
        let trail: String = piece[piece.trim_end_matches(is_punct).len()..].to_string();
        if core.is_empty() {
            if let Some(last) = out.last_mut() {
                last.trail.push_str(piece);
            }
            continue;
        }
        out.push(Word { raw: core.to_string(), lower: core.to_lowercase(), trail, tag: None, pos_index: None });
    }
    if !c.pos_tokens.is_empty() && c.pos_tokens.len() == out.len() {
        for (i, (w, t)) in out.iter_mut().zip(&c.pos_tokens).enumerate() {
            w.tag = Some(t.tag.clone());
            w.pos_index = Some(i);
        }
    }
    out
}

pub(crate) fn stem(word: &str) -> String {
    let w = word.to_lowercase();
    let undouble = |s: &str| -> String {
        let b = s.as_bytes();
        let n = b.len();
        if n >= 3 && b[n - 1] == b[n - 2] && !matches!(b[n - 1], b'l' | b's' | b'z') {
            s[..n - 1].to_string()
        } else {
            s.to_string()
        }
    };
    if let Some(s) = w.strip_suffix("ies") {
        if s.len() >= 2 {
            return format!("{s}y");
        }
    }
    if let Some(s) = w.strip_suffix("ing") {
        if s.len() >= 2 {
            return undouble(s);
        }
    }
    if let Some(s) = w.strip_suffix("ed") {
        if s.len() >= 2 {
            return undouble(s);
        }
    }
    for suf in ["ches", "shes", "sses", "xes", "zes"] {
        if w.ends_with(suf) {
            return w[..w.len() - 2].to_string();
        }
    }
    if w.ends_with('s') && !w.ends_with("ss") && w.len() > 3 {
        return w[..w.len() - 1].to_string();
    }
    w
}

/// Same lemma up to stemming, or one stem a prefix (of length >= 3) of the other.
pub(crate) fn lemma_match(a: &str, b: &str) -> bool {
    let (sa, sb) = (stem(a), stem(b));
    if sa == sb {
        return true;
    }
    let (short, long) = if sa.len() <= sb.len() { (&sa, &sb) } else { (&sb, &sa) };
    short.len() >= 3 && long.starts_with(short.as_str())
}

pub(crate) fn is_lexicon_verb(lower: &str) -> bool {
    if VERBS.contains(&lower) {
        return true;
    }
    let s = stem(lower);
    VERBS.iter().any(|v| *v == s || (s.len() >= 3 && v.starts_with(s.as_str()) && v.len() <= s.len() + 1))
}

pub(crate) fn is_pronoun_subject(lower: &str) -> bool {
    PRONOUN_SUBJECTS.contains(&lower)
}

pub(crate) fn is_personal_pronoun(lower: &str) -> bool {
    PERSONAL_PRONOUNS.contains(&lower)
}

/// Verb lemmas of a caption: POS stream entries tagged VERB when present,
/// else lexicon matches over the text.
pub(crate) fn verb_lemmas(c: &CaptionRecord) -> Vec<String> {
    if !c.pos_tokens.is_empty() {
        return c.pos_tokens.iter().filter(|t| t.is_verb()).map(|t| t.word.to_lowercase()).collect();
    }
    words(c).into_iter().filter(|w| w.is_verb()).map(|w| stem(&w.lower)).collect()
}

/// Whether any word of the caption (text or POS stream) carries the lemma.
pub(crate) fn mentions_lemma(c: &CaptionRecord, lemma: &str) -> bool {
    c.pos_tokens.iter().any(|t| t.is_verb() && lemma_match(&t.word, lemma))
        || words(c).iter().any(|w| lemma_match(&w.lower, lemma))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stems() {
        assert_eq!(stem("stepping"), "step");
        assert_eq!(stem("places"), "place");
        assert_eq!(stem("crouches"), "crouch");
        assert_eq!(stem("carries"), "carry");
        assert_eq!(stem("jumped"), "jump");
        assert!(lemma_match("waving", "wave"));
        assert!(lemma_match("sits", "sit"));
        assert!(!lemma_match("run", "turn"));
    }

    #[test]
    fn lexicon_verbs() {
        for w in ["jumps", "runs", "steps", "turns", "stands", "walks"] {
            assert!(is_lexicon_verb(w), "{w}");
        }
        for w in ["backward", "forward", "up", "the", "left", "his"] {
            assert!(!is_lexicon_verb(w), "{w}");
        }
    }

    #[test]
    fn alignment_requires_equal_counts() {
        let c = CaptionRecord::parse("a man jumps.#a/DET man/NOUN jump/VERB#0.0#0.0").unwrap();
        let w = words(&c);
        assert_eq!(w.len(), 3);
        assert_eq!(w[2].tag.as_deref(), Some("VERB"));
        assert_eq!(w[2].trail, ".");
        let c = CaptionRecord::parse("a man jumps.#a/DET man/NOUN#0.0#0.0").unwrap();
        assert!(words(&c).iter().all(|w| w.tag.is_none()));
    }
}
