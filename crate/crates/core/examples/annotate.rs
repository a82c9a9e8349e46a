//! Labels each output token of an improved system by whether it also
//! appears in the baseline output (b), the reference (r), both, or neither.
//!
//!     cargo run --release --example annotate

use desknmt::analysis::annotate_tokens;
use desknmt::evaluation::ReportFormat;

fn main() -> desknmt::Result<()> {
    let improved = ["the cat sat on the mat", "she reads a long book"];
    let baseline = ["a cat sat on mat", "she read the book"];
    let reference = ["the cat is on the mat", "she reads a book"];
    let (counts, labels) = annotate_tokens(&improved, &baseline, &reference, false)?;
    for (line, row) in improved.iter().zip(&labels) {
        let marked: Vec<String> = line
            .split_whitespace()
            .zip(row)
            .map(|(t, l)| format!("{t}/{}", l.as_str()))
            .collect();
        println!("{}", marked.join(" "));
    }
    println!();
    print!("{}", counts.render(ReportFormat::Tsv));
    Ok(())
}
