mod common;

use std::collections::BTreeMap;

use evmotion::data::toy::generate_toy_dataset;
use evmotion::data::CaptionRecord;
use evmotion::segmentation::{
    decompose_rule_with, stratify, stratify_counts, validate_decomposition, Decomposition, Rule, Strategy, Template,
    CONDITIONS,
};
use proptest::prelude::{prop_assert, prop_assert_eq, proptest};
use proptest::strategy::Strategy as _;
use sha2::{Digest, Sha256};

#[test]
fn rule_segmenter_matches_good_example_counts() {
    for ex in common::seg_examples().iter().filter(|e| e.kind == "good") {
        let d = decompose_rule_with(&ex.prompt(), ex.strategy());
        assert_eq!(Some(d.k()), ex.events, "{}: {:?}", ex.name, d.texts());
    }
}

#[test]
fn rule_segmenter_reproduces_good_example_text() {
    for ex in common::seg_examples().iter().filter(|e| e.kind == "good") {
        let d = decompose_rule_with(&ex.prompt(), ex.strategy());
        let expected: Vec<String> =
            ex.decomposition().events.iter().map(|e| e.text.trim().to_string()).collect();
        let got: Vec<String> = d.texts().iter().map(|t| t.trim().to_string()).collect();
        assert_eq!(got, expected, "{}", ex.name);
    }
}

#[test]
fn validator_accepts_good_and_flags_bad_examples() {
    for ex in common::seg_examples() {
        let report = validate_decomposition(&ex.decomposition(), &ex.prompt());
        match ex.kind.as_str() {
            "good" => assert!(report.passed(), "{}: {:?}", ex.name, report.violations),
            _ => assert!(!report.passed(), "{} not flagged", ex.name),
        }
    }
}

#[test]
fn validator_flags_specific_rules() {
    let by_name: BTreeMap<String, common::SegExample> =
        common::seg_examples().into_iter().map(|e| (e.name.clone(), e)).collect();
    let check = |name: &str| validate_decomposition(&by_name[name].decomposition(), &by_name[name].prompt());
    assert!(check("event_bad_1").has(|r| matches!(r, Rule::SubjectMissing { .. })));
    assert!(check("event_bad_2").has(|r| matches!(r, Rule::SimultaneousSplit { .. })));
    assert!(check("event_bad_3").has(|r| matches!(r, Rule::SimultaneousSplit { .. })));
    assert!(check("verb_bad_2").has(|r| matches!(r, Rule::MultipleActions { verbs: 2 })));
    assert!(check("verb_bad_3").has(|r| matches!(r, Rule::VerbCountChanged { input: 2, output: 1 })));
}

#[test]
fn empty_decomposition_is_structural_violation() {
    let prompt = CaptionRecord::plain("a man walks.");
    let d = Decomposition { prompt: prompt.clone(), events: vec![], strategy: Strategy::EventAware };
    assert!(validate_decomposition(&d, &prompt).has(|r| matches!(r, Rule::EmptyDecomposition)));
}

#[test]
fn shipped_templates_match_fixture_copies() {
    for (strategy, file) in [(Strategy::EventAware, "event_aware.txt"), (Strategy::VerbAware, "verb_aware.txt")] {
        let fixture = std::fs::read(common::fixture("templates").join(file)).unwrap();
        assert_eq!(Template::for_strategy(strategy).hash(), hex::encode(Sha256::digest(&fixture)), "{file}");
    }
}

#[test]
fn rule_segmenter_recovers_toy_event_counts() {
    let ds = generate_toy_dataset(300, 6, 11);
    let (mut hit, mut total) = (0, 0);
    for s in &ds.pairs {
        let truth = s.labels.as_ref().unwrap().primitives.len();
        for c in &s.captions {
            total += 1;
            hit += usize::from(decompose_rule_with(c, Strategy::EventAware).k() == truth);
        }
    }
    let rate = hit as f64 / total as f64;
    assert!(rate >= 0.95, "recovered {hit}/{total}");
}

#[test]
fn toy_strata_equal_generator_ground_truth() {
    let ds = generate_toy_dataset(100, 5, 3);
    let decomps: BTreeMap<String, Vec<Decomposition>> = ds
        .pairs
        .iter()
        .map(|s| (s.motion.id.clone(), s.captions.iter().map(|c| decompose_rule_with(c, Strategy::EventAware)).collect()))
        .collect();
    let got = stratify(&ds, &decomps).unwrap();
    for c in CONDITIONS {
        let mut want: Vec<String> = ds
            .pairs
            .iter()
            .filter(|s| s.labels.as_ref().unwrap().primitives.len() >= c)
            .map(|s| s.motion.id.clone())
            .collect();
        want.sort();
        assert_eq!(got.ids(c), want.as_slice(), "condition {c}");
    }
    assert_eq!(got.total, 100);
}

#[test]
fn stratify_requires_every_caption() {
    let ds = generate_toy_dataset(3, 2, 0);
    let mut decomps: BTreeMap<String, Vec<Decomposition>> = BTreeMap::new();
    for s in ds.pairs.iter().skip(1) {
        decomps.insert(s.motion.id.clone(), s.captions.iter().map(|c| decompose_rule_with(c, Strategy::EventAware)).collect());
    }
    assert!(stratify(&ds, &decomps).is_err());
}

fn word() -> impl proptest::strategy::Strategy<Value = String> {
    proptest::sample::select(vec![
        "a", "man", "person", "walks", "forward", "then", "and", "jumps", "up", "while", "turns", "left", "finally",
        "after", "sits", "down", "slowly", ",", ".", "he",
    ])
    .prop_map(str::to_string)
}

proptest! {
    #[test]
    fn rule_segmenter_is_deterministic(words in proptest::collection::vec(word(), 1..20)) {
        let text = words.join(" ");
        let c = CaptionRecord::plain(text);
        let a = decompose_rule_with(&c, Strategy::EventAware);
        let b = decompose_rule_with(&c, Strategy::EventAware);
        prop_assert_eq!(&a, &b);
        prop_assert!(a.k() >= 1);
        for (i, e) in a.events.iter().enumerate() {
            prop_assert_eq!(e.index, i + 1);
        }
    }

    #[test]
    fn strata_are_nested(counts in proptest::collection::vec(proptest::collection::vec(0usize..7, 1..4), 0..60)) {
        let ids: Vec<String> = (0..counts.len()).map(|i| format!("s{i}")).collect();
        let b = stratify_counts(ids.iter().map(String::as_str).zip(counts.iter().cloned()));
        prop_assert!(b.is_nested());
        for (id, cs) in ids.iter().zip(&counts) {
            let k = *cs.iter().max().unwrap();
            for c in CONDITIONS {
                prop_assert_eq!(b.ids(c).contains(id), k >= c);
            }
        }
    }
}
