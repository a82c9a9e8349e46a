//! Beam search against greedy decoding on a briefly trained model,
//! including the n-best list for one sentence.
//!
//!     cargo run --release --example decode

use std::path::PathBuf;

use desknmt::decoding::{beam_search, encode_source, greedy_translate, translate_lines, BeamConfig};
use desknmt::evaluation::bleu;
use desknmt::experiment::{Experiment, ExperimentConfig};

fn main() -> desknmt::Result<()> {
    let mut cfg = ExperimentConfig::load(&PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs/tiny.toml"))?;
    cfg.training.parent_steps = 300;
    let exp = Experiment::prepare(&cfg, cfg.seeds)?;
    let model = exp.train_parent(&[])?.best_model;
    let vocab = exp.vocab();

    let sources: Vec<&str> = exp.data.parent_dev.sources().collect();
    let refs: Vec<&str> = exp.data.parent_dev.targets().collect();
    let greedy = greedy_translate(&model, vocab, &sources, 20, 16)?;
    let beam = translate_lines(
        &model,
        vocab,
        &sources,
        &BeamConfig {
            beam_size: 4,
            alpha: 1.0,
            max_output_len: 20,
        },
    )?;
    println!("greedy dev BLEU {:.2}", bleu(&greedy, &refs, false)?.bleu);
    println!("beam-4 dev BLEU {:.2}", bleu(&beam, &refs, false)?.bleu);

    let src = encode_source(vocab, sources[0]);
    let result = beam_search(
        &model,
        &src,
        &BeamConfig {
            beam_size: 3,
            alpha: 1.0,
            max_output_len: 20,
        },
    )?;
    println!("\nsource    {}\nreference {}", sources[0], refs[0]);
    for h in &result.nbest {
        println!("{:8.3}  {}", h.normalized_score, vocab.decode_pieces(h.content())?);
    }
    Ok(())
}
