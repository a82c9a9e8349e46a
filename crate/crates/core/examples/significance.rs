//! Paired bootstrap resampling between two systems over the same test set.
//!
//!     cargo run --release --example significance

use desknmt::evaluation::{paired_bootstrap, render_significance, BootstrapOptions, Metric, ReportFormat};

fn main() -> desknmt::Result<()> {
    let refs: Vec<String> = (0..60)
        .map(|i| format!("w{} w{} w{} w{} w{}", i, i + 1, i + 2, i + 3, i + 4))
        .collect();
    // A gets most sentences right; B drops a word from every third one
    let a: Vec<String> = refs
        .iter()
        .enumerate()
        .map(|(i, r)| if i % 10 == 0 { "x y".into() } else { r.clone() })
        .collect();
    let b: Vec<String> = refs
        .iter()
        .enumerate()
        .map(|(i, r)| {
            if i % 3 == 0 {
                r.rsplit_once(' ').unwrap().0.to_string()
            } else {
                a[i].clone()
            }
        })
        .collect();
    for metric in [Metric::Bleu, Metric::Chrf] {
        let opts = BootstrapOptions {
            metric,
            samples: 1000,
            level: 0.05,
            seed: 1,
            case_sensitive: false,
        };
        print!(
            "{}",
            render_significance(&paired_bootstrap(&a, &b, &refs, &opts)?, ReportFormat::Tsv)
        );
        println!();
    }
    Ok(())
}
