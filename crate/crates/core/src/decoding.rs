//! Beam search with length normalisation `lp(n) = ((5 + n) / 6)^alpha`, and a
//! batched greedy decoder used for cheap dev-set evaluation.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DecoderState, SourceMemory, TransformerModel};
use crate::subword::{SubwordVocabulary, EOS_ID, PAD_ID};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BeamConfig {
    pub beam_size: usize,
    pub alpha: f64,
    pub max_output_len: usize,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            beam_size: 4,
            alpha: 1.0,
            max_output_len: 64,
        }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 || self.max_output_len == 0 || self.alpha.is_nan() || self.alpha < 0.0 {
            return Err(Error::Config(
                "beam_size and max_output_len must be positive, alpha non-negative".into(),
            ));
        }
        Ok(())
    }
}

pub fn length_penalty(len: usize, alpha: f64) -> f64 {
    ((5.0 + len as f64) / 6.0).powf(alpha)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Output ids; ends in EOS unless the length limit was hit.
    pub ids: Vec<u32>,
    pub raw_logprob: f64,
    pub normalized_score: f64,
}

impl Hypothesis {
    fn new(ids: Vec<u32>, raw_logprob: f64, alpha: f64) -> Self {
        let normalized_score = raw_logprob / length_penalty(ids.len(), alpha);
        Self {
            ids,
            raw_logprob,
            normalized_score,
        }
    }

    pub fn finished(&self) -> bool {
        self.ids.last() == Some(&EOS_ID)
    }

    /// Ids without the trailing EOS.
    pub fn content(&self) -> &[u32] {
        match self.ids.split_last() {
            Some((&EOS_ID, rest)) => rest,
            _ => &self.ids,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BeamResult {
    pub best: Hypothesis,
    /// Every completed hypothesis, best first.
    pub nbest: Vec<Hypothesis>,
}

fn output_limit(model: &TransformerModel, cfg: &BeamConfig) -> usize {
    cfg.max_output_len.min(model.config().max_positions)
}

/// Beam search for one source (ids, normally ending in EOS).
///
/// Each step ranks all expansions of the live beam and keeps the top
/// `beam_size`; those ending in EOS, or reaching the length limit, move to
/// the finished pool. The search stops once no live hypothesis can still
/// beat the best finished one.
pub fn beam_search(model: &TransformerModel, source: &[u32], cfg: &BeamConfig) -> Result<BeamResult> {
    cfg.validate()?;
    if source.is_empty() {
        return Err(Error::Input("empty source".into()));
    }
    let max_len = output_limit(model, cfg);
    let vocab = model.config().vocab_size;
    let memory = SourceMemory::encode(model, source)?;
    let mut state = DecoderState::new(model, vec![memory]);
    let mut live: Vec<(Vec<u32>, f64)> = vec![(Vec::new(), 0.0)];
    let mut finished: Vec<Hypothesis> = Vec::new();

    for t in 0..max_len {
        let last: Vec<u32> = live.iter().map(|(ids, _)| *ids.last().unwrap_or(&EOS_ID)).collect();
        let lp = state.step(&last)?;
        let mut cands: Vec<(f64, usize, u32)> = Vec::with_capacity(live.len() * vocab);
        for (r, (_, raw)) in live.iter().enumerate() {
            for w in 0..vocab as u32 {
                if w != PAD_ID {
                    cands.push((raw + lp[r * vocab + w as usize], r, w));
                }
            }
        }
        cands.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(Ordering::Equal)
                .then((a.1, a.2).cmp(&(b.1, b.2)))
        });
        cands.truncate(cfg.beam_size);
        let last_step = t + 1 == max_len;
        let mut next = Vec::new();
        let mut parents = Vec::new();
        for (score, r, w) in cands {
            let mut ids = live[r].0.clone();
            ids.push(w);
            if w == EOS_ID || last_step {
                finished.push(Hypothesis::new(ids, score, cfg.alpha));
            } else {
                next.push((ids, score));
                parents.push(r);
            }
        }
        if next.is_empty() {
            break;
        }
        let best_done = finished
            .iter()
            .map(|h| h.normalized_score)
            .fold(f64::NEG_INFINITY, f64::max);
        let bound = next
            .iter()
            .map(|(_, raw)| raw / length_penalty(max_len, cfg.alpha))
            .fold(f64::NEG_INFINITY, f64::max);
        if bound <= best_done {
            break;
        }
        state.reorder(&parents);
        live = next;
    }

    // stable sort keeps discovery order among equal scores
    finished.sort_by(|a, b| {
        b.normalized_score
            .partial_cmp(&a.normalized_score)
            .unwrap_or(Ordering::Equal)
    });
    let best = finished
        .first()
        .cloned()
        .ok_or_else(|| Error::Contract("beam search produced no hypothesis".into()))?;
    Ok(BeamResult { best, nbest: finished })
}

/// Argmax decoding of several sources in lock step.
pub fn greedy_batch<S: AsRef<[u32]>>(
    model: &TransformerModel,
    sources: &[S],
    max_output_len: usize,
) -> Result<Vec<Hypothesis>> {
    if sources.is_empty() {
        return Ok(Vec::new());
    }
    let max_len = max_output_len.min(model.config().max_positions);
    let vocab = model.config().vocab_size;
    let memories = SourceMemory::encode_batch(model, sources)?;
    let n = sources.len();
    let mut state = DecoderState::new(model, memories);
    let mut active: Vec<usize> = (0..n).collect();
    let mut out: Vec<(Vec<u32>, f64)> = vec![(Vec::new(), 0.0); n];
    for _ in 0..max_len {
        let last: Vec<u32> = active.iter().map(|&i| *out[i].0.last().unwrap_or(&EOS_ID)).collect();
        let lp = state.step(&last)?;
        let mut keep = Vec::new();
        let mut still = Vec::new();
        for (r, &i) in active.iter().enumerate() {
            let row = &lp[r * vocab..(r + 1) * vocab];
            let (w, s) = row.iter().enumerate().filter(|&(w, _)| w != PAD_ID as usize).fold(
                (0usize, f64::NEG_INFINITY),
                |best, (w, &s)| if s > best.1 { (w, s) } else { best },
            );
            out[i].0.push(w as u32);
            out[i].1 += s;
            if w as u32 != EOS_ID {
                keep.push(r);
                still.push(i);
            }
        }
        if still.is_empty() {
            break;
        }
        if still.len() != active.len() {
            state.reorder(&keep);
        }
        active = still;
    }
    Ok(out
        .into_iter()
        .map(|(ids, raw)| Hypothesis::new(ids, raw, 0.0))
        .collect())
}

/// Segments a source line and appends EOS.
pub fn encode_source(vocab: &SubwordVocabulary, line: &str) -> Vec<u32> {
    let mut ids = vocab.encode_ids(line);
    ids.push(EOS_ID);
    ids
}

fn check_vocab(model: &TransformerModel, vocab: &SubwordVocabulary) -> Result<()> {
    if model.config().vocab_size != vocab.len() {
        return Err(Error::Contract(format!(
            "model expects {} symbols, vocabulary has {}",
            model.config().vocab_size,
            vocab.len()
        )));
    }
    Ok(())
}

fn sentence_error(i: usize, e: Error) -> Error {
    Error::Input(format!("sentence {i}: {e}"))
}

/// Beam-decodes every line; output order matches input order. Runs on the
/// current rayon pool.
pub fn translate_lines(
    model: &TransformerModel,
    vocab: &SubwordVocabulary,
    lines: &[&str],
    cfg: &BeamConfig,
) -> Result<Vec<String>> {
    check_vocab(model, vocab)?;
    lines
        .par_iter()
        .enumerate()
        .map(|(i, line)| {
            let src = encode_source(vocab, line);
            let hyp = beam_search(model, &src, cfg).map_err(|e| sentence_error(i, e))?;
            vocab.decode_pieces(hyp.best.content())
        })
        .collect()
}

pub fn translate_corpus(
    model: &TransformerModel,
    vocab: &SubwordVocabulary,
    corpus: &crate::corpus::ParallelCorpus,
    cfg: &BeamConfig,
) -> Result<Vec<String>> {
    let lines: Vec<&str> = corpus.sources().collect();
    translate_lines(model, vocab, &lines, cfg)
}

/// Greedy counterpart of [`translate_lines`], batched `batch_rows` at a time.
pub fn greedy_translate(
    model: &TransformerModel,
    vocab: &SubwordVocabulary,
    lines: &[&str],
    max_output_len: usize,
    batch_rows: usize,
) -> Result<Vec<String>> {
    check_vocab(model, vocab)?;
    let sources: Vec<Vec<u32>> = lines.iter().map(|l| encode_source(vocab, l)).collect();
    let chunks: Vec<&[Vec<u32>]> = sources.chunks(batch_rows.max(1)).collect();
    let decoded: Vec<Vec<Hypothesis>> = chunks
        .par_iter()
        .enumerate()
        .map(|(c, chunk)| {
            greedy_batch(model, chunk, max_output_len).map_err(|e| sentence_error(c * batch_rows.max(1), e))
        })
        .collect::<Result<_>>()?;
    decoded
        .into_iter()
        .flatten()
        .map(|h| vocab.decode_pieces(h.content()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{score_sequence, TransformerConfig};

    fn toy(vocab: usize, seed: u64) -> TransformerModel {
        let cfg = TransformerConfig {
            vocab_size: vocab,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            dropout: 0.0,
            label_smoothing: 0.0,
            max_positions: 16,
            tie_softmax: true,
        };
        let mut m = TransformerModel::init(cfg, seed).unwrap();
        // sharpen the distributions so that search choices matter
        for p in m.params_mut() {
            for x in p.data_mut() {
                *x *= 3.0;
            }
        }
        m
    }

    fn exhaustive(model: &TransformerModel, src: &[u32], max_len: usize, alpha: f64) -> (Vec<u32>, f64) {
        let v = model.config().vocab_size as u32;
        let tokens: Vec<u32> = (0..v).filter(|&w| w != PAD_ID).collect();
        let mut best = (Vec::new(), f64::NEG_INFINITY);
        let mut frontier: Vec<Vec<u32>> = vec![Vec::new()];
        for _ in 0..max_len {
            let mut next = Vec::new();
            for prefix in &frontier {
                for &w in &tokens {
                    let mut seq = prefix.clone();
                    seq.push(w);
                    if w == EOS_ID || seq.len() == max_len {
                        let s = score_sequence(model, src, &seq).unwrap() / length_penalty(seq.len(), alpha);
                        if s > best.1 {
                            best = (seq, s);
                        }
                    } else {
                        next.push(seq);
                    }
                }
            }
            frontier = next;
        }
        best
    }

    #[test]
    fn penalty_values() {
        assert_eq!(length_penalty(1, 1.0), 1.0);
        assert_eq!(length_penalty(7, 0.0), 1.0);
        assert!((length_penalty(7, 1.0) - 2.0).abs() < 1e-15);
        assert!(length_penalty(8, 0.5) > length_penalty(7, 0.5));
    }

    #[test]
    fn wide_beam_matches_enumeration() {
        let m = toy(5, 11);
        let cfg = BeamConfig {
            beam_size: 625,
            alpha: 1.0,
            max_output_len: 4,
        };
        for src in [vec![3u32, 4, EOS_ID], vec![2, EOS_ID], vec![4, 4, 3, 2, EOS_ID]] {
            let got = beam_search(&m, &src, &cfg).unwrap().best;
            let (ids, score) = exhaustive(&m, &src, 4, 1.0);
            assert_eq!(got.ids, ids);
            assert!((got.normalized_score - score).abs() < 1e-9);
        }
    }

    #[test]
    fn beam_one_is_greedy() {
        for seed in 0..6 {
            let m = toy(9, seed);
            let srcs = [vec![3u32, 5, EOS_ID], vec![7, 8, 6, EOS_ID]];
            let g = greedy_batch(&m, &srcs, 10).unwrap();
            for (s, gh) in srcs.iter().zip(&g) {
                let b = beam_search(
                    &m,
                    s,
                    &BeamConfig {
                        beam_size: 1,
                        alpha: 1.0,
                        max_output_len: 10,
                    },
                )
                .unwrap();
                assert_eq!(b.best.ids, gh.ids);
                assert!((b.best.raw_logprob - gh.raw_logprob).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn alpha_zero_ranks_by_raw_score() {
        let m = toy(6, 3);
        let r = beam_search(
            &m,
            &[3, 4, EOS_ID],
            &BeamConfig {
                beam_size: 8,
                alpha: 0.0,
                max_output_len: 6,
            },
        )
        .unwrap();
        for h in &r.nbest {
            assert_eq!(h.normalized_score, h.raw_logprob);
            assert!(r.best.normalized_score >= h.normalized_score);
        }
    }

    #[test]
    fn hypothesis_scores_agree_with_model() {
        let m = toy(7, 4);
        let src = [3u32, 6, EOS_ID];
        let r = beam_search(&m, &src, &BeamConfig::default()).unwrap();
        for h in &r.nbest {
            let s = score_sequence(&m, &src, &h.ids).unwrap();
            assert!((s - h.raw_logprob).abs() < 1e-9);
            assert!((h.normalized_score - s / length_penalty(h.ids.len(), 1.0)).abs() < 1e-9);
        }
    }

    #[test]
    fn empty_source_is_rejected() {
        let m = toy(5, 0);
        assert!(matches!(
            beam_search(&m, &[], &BeamConfig::default()),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn greedy_batch_equals_single_rows() {
        let m = toy(9, 5);
        let srcs = [vec![3u32, EOS_ID], vec![4, 5, 6, 7, EOS_ID], vec![8, 8, EOS_ID]];
        let batched = greedy_batch(&m, &srcs, 12).unwrap();
        for (s, b) in srcs.iter().zip(&batched) {
            let single = greedy_batch(&m, std::slice::from_ref(s), 12).unwrap();
            assert_eq!(single[0].ids, b.ids);
            assert!((single[0].raw_logprob - b.raw_logprob).abs() < 1e-9);
        }
    }

    #[test]
    fn wider_beams_rarely_lose() {
        let mut worse = 0;
        let mut total = 0;
        for seed in 0..8 {
            let m = toy(8, 100 + seed);
            for s in 0..5u32 {
                let src = vec![3 + s % 5, 2 + (s * 3) % 6, EOS_ID];
                let score = |b| {
                    beam_search(
                        &m,
                        &src,
                        &BeamConfig {
                            beam_size: b,
                            alpha: 1.0,
                            max_output_len: 6,
                        },
                    )
                    .unwrap()
                    .best
                    .normalized_score
                };
                let (narrow, wide) = (score(2), score(8));
                total += 1;
                if wide < narrow - 1e-12 {
                    worse += 1;
                }
            }
        }
        assert!(worse * 10 <= total, "{worse} of {total}");
    }
}
