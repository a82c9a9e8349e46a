use super::*;
use proptest::prelude::*;

fn lp() -> LanguagePair {
    LanguagePair::new("et", "en").unwrap()
}

fn corpus(lines: &[(&str, &str)]) -> ParallelCorpus {
    ParallelCorpus::from_pairs("c", lp(), lines).unwrap()
}

fn spec(seed: u64) -> SynthSpec {
    SynthSpec {
        seed,
        n_pairs: 200,
        lexicon_size: 50,
        zipf_exponent: 1.0,
        min_len: 2,
        max_len: 6,
        lexicon_overlap: 0.0,
        swap_prob: 0.0,
        source_prefix: "s".into(),
        target_prefix: "t".into(),
        pair: LanguagePair::new("aa", "bb").unwrap(),
    }
}

#[test]
fn language_codes_are_upper_cased() {
    assert_eq!(lp().source(), "ET");
    assert!(LanguagePair::new("", "en").is_err());
    assert_eq!(lp().reversed().source(), "EN");
}

#[test]
fn load_keeps_order() {
    let dir = tempfile::tempdir().unwrap();
    let (s, t) = (dir.path().join("a.src"), dir.path().join("a.tgt"));
    std::fs::write(&s, "one\ntwo\nthree\n").unwrap();
    std::fs::write(&t, "uno\ndos\ntres").unwrap();
    let c = load_parallel(&s, &t, lp()).unwrap();
    assert_eq!(c.len(), 3);
    assert_eq!(c.pairs()[2].source, "three");
    assert_eq!(c.pairs()[2].target, "tres");
    assert_eq!(c.pairs()[2].index, 2);
}

#[test]
fn load_reports_both_counts_on_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let (s, t) = (dir.path().join("a"), dir.path().join("b"));
    std::fs::write(&s, "1\n2\n3\n4\n5\n").unwrap();
    std::fs::write(&t, "1\n2\n3\n4\n").unwrap();
    match load_parallel(&s, &t, lp()) {
        Err(Error::Alignment { left: 5, right: 4, .. }) => {}
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn load_empty_and_invalid_utf8() {
    let dir = tempfile::tempdir().unwrap();
    let (s, t) = (dir.path().join("a"), dir.path().join("b"));
    std::fs::write(&s, "").unwrap();
    std::fs::write(&t, "").unwrap();
    assert!(load_parallel(&s, &t, lp()).unwrap().is_empty());
    std::fs::write(&s, b"ok\n\xff\xfe\n").unwrap();
    std::fs::write(&t, "a\nb\n").unwrap();
    assert!(matches!(
        load_parallel(&s, &t, lp()),
        Err(Error::Decode { line: 2, .. })
    ));
}

#[test]
fn save_then_load_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(&[("a b", "c"), ("d", "e f")]);
    let (s, t) = (dir.path().join("x.src"), dir.path().join("x.tgt"));
    c.save(&s, &t).unwrap();
    assert_eq!(load_parallel(&s, &t, lp()).unwrap().pairs(), c.pairs());
}

#[test]
fn length_filter_boundaries() {
    let long = vec!["w"; 75].join(" ");
    let too_long = vec!["w"; 76].join(" ");
    let ten = ["w"; 10].join(" ");
    let c = corpus(&[
        ("a b c", ten.as_str()),
        ("a b c d", long.as_str()),
        ("a b c d", too_long.as_str()),
    ]);
    let f = filter_by_length(&c, 4, 75);
    assert_eq!(f.len(), 1);
    assert_eq!(f.pairs()[0].target, long);
    assert!(filter_by_length(&corpus(&[]), 4, 75).is_empty());
}

#[test]
fn subsample_edges() {
    let c = corpus(&[("a", "b"), ("c", "d"), ("e", "f")]);
    assert_eq!(subsample(&c, 3, 9).unwrap(), c);
    assert!(subsample(&c, 0, 9).unwrap().is_empty());
    assert!(matches!(
        subsample(&c, 4, 9),
        Err(Error::Size {
            requested: 4,
            available: 3
        })
    ));
    assert_eq!(subsample(&c, 2, 5).unwrap(), subsample(&c, 2, 5).unwrap());
}

#[test]
fn stats_examples() {
    let s = stats(&corpus(&[("a b", "c")]));
    assert_eq!(
        (
            s.sentence_pairs,
            s.words_source,
            s.words_target,
            s.vocab_source,
            s.vocab_target
        ),
        (1, 2, 1, 2, 1)
    );
    let s = stats(&corpus(&[("A a", "x x")]));
    assert_eq!((s.vocab_source, s.vocab_target), (2, 1));
    assert_eq!(stats(&corpus(&[])), CorpusStats::default());
}

#[test]
fn synthesis_is_deterministic() {
    let a = synthesize_pair(&spec(3), None).unwrap();
    let b = synthesize_pair(&spec(3), None).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.0, synthesize_pair(&spec(4), None).unwrap().0);
}

#[test]
fn synthetic_targets_are_word_images() {
    let (c, lex) = synthesize_pair(&spec(1), None).unwrap();
    for p in c.pairs() {
        let image: Vec<String> = p.source.split(' ').map(|w| lex.translate(w).unwrap()).collect();
        assert_eq!(image.join(" "), p.target);
        let n = p.source.split(' ').count();
        assert!((2..=6).contains(&n));
    }
    assert!(c.pairs()[0].source.starts_with('s'));
    assert_eq!(lex.source_word(17), "s0017");
}

#[test]
fn lexicon_inheritance() {
    let (_, base) = synthesize_pair(&spec(1), None).unwrap();
    let mut s = spec(2);
    s.lexicon_overlap = 1.0;
    assert_eq!(synthesize_pair(&s, Some(&base)).unwrap().1, base);
    s.lexicon_overlap = 0.0;
    assert_eq!(synthesize_pair(&s, Some(&base)).unwrap().1.shared_entries(&base), 0);
    s.lexicon_overlap = 0.5;
    assert_eq!(synthesize_pair(&s, Some(&base)).unwrap().1.shared_entries(&base), 25);
    assert!(matches!(synthesize_pair(&s, None), Err(Error::Config(_))));
}

#[test]
fn swaps_reorder_only_within_sentence() {
    let mut s = spec(5);
    s.swap_prob = 0.5;
    let (c, lex) = synthesize_pair(&s, None).unwrap();
    let mut swapped = 0;
    for p in c.pairs() {
        let mut image: Vec<String> = p.source.split(' ').map(|w| lex.translate(w).unwrap()).collect();
        let mut tgt: Vec<&str> = p.target.split(' ').collect();
        if image.iter().map(String::as_str).ne(tgt.iter().copied()) {
            swapped += 1;
        }
        image.sort();
        tgt.sort();
        assert_eq!(image, tgt);
    }
    assert!(swapped > 50);
}

#[test]
fn lexicon_text_round_trip() {
    let (_, lex) = synthesize_pair(&spec(8), None).unwrap();
    let text = lex.to_text();
    assert!(text.starts_with("source_prefix=s\ntarget_prefix=t\nsize=50\n"));
    assert_eq!(Lexicon::from_text(&text).unwrap(), lex);
    assert!(Lexicon::from_text("size=3\n").is_err());
}

#[test]
fn reversal_swaps_sides() {
    let c = corpus(&[("a", "b")]).reversed();
    assert_eq!(c.pair().source(), "EN");
    assert_eq!(c.pairs()[0].source, "b");
}

proptest! {
    #[test]
    fn filter_is_idempotent(lines in proptest::collection::vec(("[a-c ]{0,20}", "[a-c ]{0,20}"), 0..30),
                            lo in 1usize..4, span in 0usize..4) {
        let c = ParallelCorpus::from_pairs("p", lp(), &lines).unwrap();
        let once = filter_by_length(&c, lo, lo + span);
        prop_assert_eq!(filter_by_length(&once, lo, lo + span), once);
    }

    #[test]
    fn subsample_has_requested_size(n_total in 0usize..40, frac in 0.0f64..=1.0, seed in any::<u64>()) {
        let lines: Vec<(String, String)> = (0..n_total).map(|i| (i.to_string(), i.to_string())).collect();
        let c = ParallelCorpus::from_pairs("p", lp(), &lines).unwrap();
        let n = (n_total as f64 * frac) as usize;
        let s = subsample(&c, n, seed).unwrap();
        prop_assert_eq!(s.len(), n);
        // order preserved
        let ids: Vec<usize> = s.sources().map(|x| x.parse().unwrap()).collect();
        prop_assert!(ids.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn stats_match_recount(lines in proptest::collection::vec(("[ab ]{0,12}", "[xyz ]{0,12}"), 0..20)) {
        let c = ParallelCorpus::from_pairs("p", lp(), &lines).unwrap();
        let st = stats(&c);
        let ws: usize = lines.iter().map(|(s, _)| s.split_whitespace().count()).sum();
        let wt: usize = lines.iter().map(|(_, t)| t.split_whitespace().count()).sum();
        prop_assert_eq!((st.words_source, st.words_target), (ws, wt));
    }
}
