//! Generates a parent corpus and a child corpus whose lexicon partly
//! reuses the parent's, then prints a few pairs and corpus statistics.
//!
//!     cargo run --release --example synthetic_corpus

use desknmt::corpus::{stats, synthesize_pair, LanguagePair, SynthSpec};

fn main() -> desknmt::Result<()> {
    let parent_spec = SynthSpec {
        seed: 1,
        n_pairs: 2000,
        lexicon_size: 300,
        zipf_exponent: 1.0,
        min_len: 3,
        max_len: 10,
        lexicon_overlap: 0.0,
        swap_prob: 0.1,
        source_prefix: "e".into(),
        target_prefix: "c".into(),
        pair: LanguagePair::new("en", "cs")?,
    };
    let (parent, parent_lex) = synthesize_pair(&parent_spec, None)?;

    // same source language, new target language sharing half the mapping
    let child_spec = SynthSpec {
        seed: 2,
        n_pairs: 300,
        lexicon_overlap: 0.5,
        target_prefix: "t".into(),
        pair: LanguagePair::new("en", "et")?,
        ..parent_spec
    };
    let (child, child_lex) = synthesize_pair(&child_spec, Some(&parent_lex))?;

    for (name, c) in [("parent", &parent), ("child", &child)] {
        let s = stats(c);
        println!(
            "{name} {}: {} pairs, {} / {} words, {} / {} types",
            c.pair(),
            s.sentence_pairs,
            s.words_source,
            s.words_target,
            s.vocab_source,
            s.vocab_target
        );
        for p in c.pairs().iter().take(2) {
            println!("  {}  =>  {}", p.source, p.target);
        }
    }
    println!(
        "lexicon entries shared by parent and child: {} of {}",
        child_lex.shared_entries(&parent_lex),
        child_lex.size()
    );
    Ok(())
}
