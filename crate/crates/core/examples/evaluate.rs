//! Corpus BLEU with its components, and chrF3, on hand-made sentences.
//!
//!     cargo run --release --example evaluate

use desknmt::evaluation::{bleu, chrf, render_bleu, ReportFormat};

fn main() -> desknmt::Result<()> {
    let refs = ["the cat sat down", "a dog ran into the garden"];
    let systems = [
        ("exact", ["the cat sat down", "a dog ran into the garden"]),
        ("stutter", ["the cat the cat sat down", "a dog ran into the garden"]),
        ("short", ["the cat", "a dog ran"]),
    ];
    for (name, hyp) in systems {
        let r = bleu(&hyp, &refs, false)?;
        print!("{}", render_bleu(name, &r, ReportFormat::Tsv));
        println!("chrF3 {:.2}\n", chrf(&hyp, &refs, 3.0, 6)?);
    }
    Ok(())
}
