//! Trains a parent, switches the same training run to the child corpus,
//! and compares the result with a child-only baseline.
//!
//!     cargo run --release --example train_and_transfer [config.toml]
//!
//! Defaults to the bundled tiny configuration, which finishes in seconds;
//! `configs/related.toml` is the full desk-scale setting.

use std::path::PathBuf;

use desknmt::experiment::{Experiment, ExperimentConfig};

fn main() -> desknmt::Result<()> {
    let path = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs/tiny.toml"));
    let cfg = ExperimentConfig::load(&path)?;
    let exp = Experiment::prepare(&cfg, cfg.seeds)?;
    println!("shared vocabulary: {} symbols", exp.vocab().len());

    let parent = exp.train_parent(&[])?;
    println!(
        "parent: best dev BLEU {:.2} at step {}",
        parent.best_record.dev_bleu, parent.best_record.step
    );
    println!(
        "parent only, child test BLEU: {:.2}",
        exp.test_bleu(&parent.best_model)?
    );

    // nothing is reset: weights, Adam moments, step counter and schedule carry over
    let child = exp.transfer(&parent.state, None, false)?;
    let baseline = exp.baseline(None)?;
    println!(
        "transfer: best dev BLEU {:.2} (global step {})",
        child.best_record.dev_bleu, child.best_record.step
    );
    println!("baseline: best dev BLEU {:.2}", baseline.best_record.dev_bleu);
    println!(
        "test BLEU  transfer {:.2}  baseline {:.2}",
        exp.test_bleu(&child.best_model)?,
        exp.test_bleu(&baseline.best_model)?
    );
    Ok(())
}
