//! Which fraction of the shared vocabulary the child inherits from the
//! parent: first from published class percentages, then from an actual
//! synthetic experiment.
//!
//!     cargo run --release --example vocab_overlap

use std::path::PathBuf;

use desknmt::analysis::{merge_coverage, vocab_overlap, OverlapBreakdown};
use desknmt::evaluation::ReportFormat;
use desknmt::experiment::{Experiment, ExperimentConfig};
use desknmt::subword::coverage;

fn main() -> desknmt::Result<()> {
    // EN-RU parent, ET-EN child
    let published = OverlapBreakdown::from_published(
        &["ET", "EN", "RU"],
        &[
            (&["ET"], 29.93),
            (&["EN"], 20.69),
            (&["RU"], 29.03),
            (&["ET", "EN"], 10.06),
            (&["EN", "RU"], 1.39),
            (&["ET", "RU"], 0.00),
            (&["ET", "EN", "RU"], 8.89),
        ],
        &["EN", "RU"],
        &["ET", "EN"],
    )?;
    print!("{}", published.render(ReportFormat::Tsv));

    let cfg = ExperimentConfig::load(&PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs/tiny.toml"))?;
    let exp = Experiment::prepare(&cfg, cfg.seeds)?;
    let (p, c) = (&exp.data.parent_train, &exp.data.child_train);
    let counts = merge_coverage([&coverage(exp.vocab(), p), &coverage(exp.vocab(), c)])?;
    let o = vocab_overlap(
        exp.vocab().len(),
        &counts,
        2,
        &[p.pair().source(), p.pair().target()],
        &[c.pair().source(), c.pair().target()],
    )?;
    println!();
    print!("{}", o.render(ReportFormat::Tsv));
    Ok(())
}
