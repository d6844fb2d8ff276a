use evmotion::data::toy::generate_toy_dataset;
use evmotion::segmentation::decompose_rule;
use evmotion::text::{encode, matched_vs_unmatched, CachedEncoder, StubConfig, StubEncoder, TextEncoder};
use proptest::prelude::*;

fn trained() -> (StubEncoder, evmotion::data::DatasetSplit) {
    let train = generate_toy_dataset(240, 4, 1);
    let stats = train.normalization_stats.clone();
    let train = train.normalized().unwrap();
    let test = generate_toy_dataset(80, 4, 2).with_stats(stats).normalized().unwrap();
    (StubEncoder::train(StubConfig { epochs: 20, ..StubConfig::default() }, &train), test)
}

#[test]
fn trained_stub_separates_matched_pairs() {
    let (enc, test) = trained();
    let texts: Vec<&str> = test.pairs.iter().map(|s| s.captions[0].text.as_str()).collect();
    let motions: Vec<_> = test.pairs.iter().map(|s| s.motion.frames.view()).collect();
    let (matched, unmatched) = matched_vs_unmatched(&enc.embed_texts(&texts), &enc.embed_motions(&motions));
    assert!(matched > unmatched, "matched {matched} vs unmatched {unmatched}");
}

#[test]
fn changing_one_clause_changes_one_row() {
    let ds = generate_toy_dataset(20, 3, 0);
    let enc = StubEncoder::new(StubConfig::default(), &ds);
    let d = decompose_rule("a person walks forward, then jumps up, and finally turns left.");
    let b = encode(&d, &enc).unwrap();
    let mut e = d.clone();
    e.events[1].text = "a person stands still.".into();
    let be = encode(&e, &enc).unwrap();
    assert_eq!(be.events.row(0), b.events.row(0));
    assert_eq!(be.events.row(2), b.events.row(2));
    assert_ne!(be.events.row(1), b.events.row(1));
    assert_eq!(be.global, b.global);
}

#[test]
fn cached_encoder_counts_one_call_per_new_decomposition() {
    let ds = generate_toy_dataset(20, 3, 0);
    let enc = CachedEncoder::new(StubEncoder::new(StubConfig::default(), &ds));
    let d = decompose_rule("a man walks forward, then turns left.");
    encode(&d, &enc).unwrap();
    encode(&d, &enc).unwrap();
    assert_eq!(enc.calls(), 1);
    encode(&decompose_rule("a man jumps up."), &enc).unwrap();
    assert_eq!(enc.calls(), 2);
}

proptest! {
    #[test]
    fn stub_text_embeddings_are_unit_norm(text in "[a-z ]{0,40}") {
        let ds = generate_toy_dataset(5, 2, 0);
        let enc = StubEncoder::new(StubConfig::default(), &ds);
        let e = enc.embed_text(&[text.as_str()]).unwrap();
        let n = e.row(0).dot(&e.row(0)).sqrt();
        prop_assert!((n - 1.0).abs() < 1e-6);
    }
}
