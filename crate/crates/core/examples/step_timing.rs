//! Forward+backward wall time per step for a few batch shapes at the
//! desk model size.
//!
//!     cargo run --release --example step_timing

use std::time::Instant;

use desknmt::model::{forward, Batch, ForwardMode, TransformerConfig, TransformerModel};
use desknmt::numerics::Graph;

fn main() {
    let v = 400;
    let model = TransformerModel::init(TransformerConfig::desk(v), 1).unwrap();
    for &(rows, len) in &[(64usize, 8usize), (32, 16), (16, 8)] {
        let pairs: Vec<(Vec<u32>, Vec<u32>)> = (0..rows)
            .map(|r| {
                let s: Vec<u32> = (0..len).map(|i| 3 + ((r * 7 + i * 13) % (v - 3)) as u32).collect();
                (s.clone(), s)
            })
            .collect();
        let batch = Batch::from_pairs(&pairs).unwrap();
        let n = 20;
        let t = Instant::now();
        for i in 0..n {
            let mut g = Graph::new();
            let out = forward(&model, &mut g, &batch, ForwardMode::Train { seed: i }).unwrap();
            let _grads = g.backward(out.loss).unwrap();
        }
        println!(
            "{rows}x{len}: {:.1} ms/step",
            t.elapsed().as_secs_f64() * 1e3 / n as f64
        );
    }
}
