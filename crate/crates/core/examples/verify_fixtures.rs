//! Recomputes every golden fixture and reports mismatches.
//!
//!     cargo run --release --example verify_fixtures [dir]

use std::path::PathBuf;

use desknmt::fixtures::{bundled_fixture_dir, verify_fixtures};

fn main() -> desknmt::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(bundled_fixture_dir);
    let report = verify_fixtures(&dir)?;
    print!("{}", report.render());
    if !report.all_passed() {
        std::process::exit(2);
    }
    Ok(())
}
