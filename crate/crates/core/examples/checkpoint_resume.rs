//! Saves a training state mid-run, reloads it, and checks that resuming
//! gives the same parameters as one uninterrupted run.
//!
//!     cargo run --release --example checkpoint_resume

use std::path::PathBuf;

use desknmt::experiment::{Experiment, ExperimentConfig};
use desknmt::training::{load_checkpoint, save_checkpoint, train, TrainOptions};

fn main() -> desknmt::Result<()> {
    let cfg = ExperimentConfig::load(&PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs/tiny.toml"))?;
    let exp = Experiment::prepare(&cfg, cfg.seeds)?;
    let data = exp.parent_corpus();

    let mut straight = exp.fresh_state(data)?;
    train(&mut straight, data, None, &TrainOptions::new(20, 0))?;

    let mut first = exp.fresh_state(data)?;
    train(&mut first, data, None, &TrainOptions::new(10, 0))?;
    let dir = std::env::temp_dir().join(format!("desknmt-resume-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| desknmt::Error::Input(e.to_string()))?;
    let path = dir.join("half.ckpt");
    save_checkpoint(&first, &path)?;
    let mut resumed = load_checkpoint(&path)?;
    train(&mut resumed, data, None, &TrainOptions::new(10, 0))?;

    println!(
        "checkpoint: {} bytes",
        std::fs::metadata(&path).map(|m| m.len()).unwrap_or(0)
    );
    println!("resumed == straight: {}", resumed == straight);
    let _ = std::fs::remove_dir_all(&dir);
    Ok(())
}
