//! Runs every variant and replicate of a configuration and prints the
//! per-run rows and the median summary.
//!
//!     cargo run --release --example run_matrix [config.toml]

use std::path::PathBuf;
use std::time::Instant;

use desknmt::experiment::{run_matrix, ExperimentConfig};

fn main() -> desknmt::Result<()> {
    let path = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs/tiny.toml"));
    let cfg = ExperimentConfig::load(&path)?;
    let t = Instant::now();
    let report = run_matrix(&cfg, &|m| eprintln!("[{:.0}s] {m}", t.elapsed().as_secs_f64()))?;
    print!("{}\n{}", report.rows_tsv(), report.summary_tsv());
    for r in &report.replicates {
        for (job, s) in &r.seconds {
            eprintln!("r{} {job}: {s:.1}s", r.replicate);
        }
    }
    Ok(())
}
