//! Learns one subword vocabulary from a balanced parent/child sample and
//! shows how both corpora segment under it.
//!
//!     cargo run --release --example shared_vocab

use desknmt::analysis::{merge_coverage, vocab_overlap};
use desknmt::corpus::{synthesize_pair, LanguagePair, SynthSpec};
use desknmt::subword::{coverage, learn_vocab};

fn main() -> desknmt::Result<()> {
    let spec = SynthSpec {
        seed: 5,
        n_pairs: 3000,
        lexicon_size: 400,
        zipf_exponent: 1.0,
        min_len: 3,
        max_len: 10,
        lexicon_overlap: 0.0,
        swap_prob: 0.0,
        source_prefix: "e".into(),
        target_prefix: "c".into(),
        pair: LanguagePair::new("en", "cs")?,
    };
    let (parent, lex) = synthesize_pair(&spec, None)?;
    let child_spec = SynthSpec {
        seed: 6,
        n_pairs: 400,
        lexicon_overlap: 0.5,
        target_prefix: "t".into(),
        pair: LanguagePair::new("en", "et")?,
        ..spec
    };
    let (child, _) = synthesize_pair(&child_spec, Some(&lex))?;

    let vocab = learn_vocab(&parent, &child, 300, 9)?;
    println!(
        "{} symbols, {} merges, digest {}",
        vocab.len(),
        vocab.merges().len(),
        &vocab.digest()[..16]
    );
    for line in [parent.pairs()[0].target.as_str(), child.pairs()[0].target.as_str()] {
        let seg = vocab.encode(line);
        println!("{line}\n  -> {}", seg.pieces.join(" "));
    }

    let counts = merge_coverage([&coverage(&vocab, &parent), &coverage(&vocab, &child)])?;
    let overlap = vocab_overlap(vocab.len(), &counts, 10, &["en", "cs"], &["en", "et"])?;
    println!("\n{}", overlap.render(desknmt::evaluation::ReportFormat::Tsv));
    Ok(())
}
