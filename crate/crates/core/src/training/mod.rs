//! Token-budget batching, Adam with a warmup schedule, the training loop,
//! the parent→child corpus swap, and checkpoints.

mod checkpoint;
mod optim;
mod state;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::ParallelCorpus;
use crate::error::{Error, Result};
use crate::model::Batch;
use crate::subword::{SubwordVocabulary, EOS_ID};
use crate::util::{derive_seed, sha256_hex};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use optim::{OptimizerState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use state::{
    train, transfer, BatchCursor, BestSnapshot, DevRecord, DevSet, TrainOptions, TrainOutcome, TrainState,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    #[default]
    WarmupExponential,
    WarmupRsqrt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub lr0: f64,
    pub warmup_steps: u64,
    pub decay_half_life: u64,
    #[serde(default)]
    pub kind: ScheduleKind,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            lr0: 3e-3,
            warmup_steps: 500,
            decay_half_life: 20_000,
            kind: ScheduleKind::WarmupExponential,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) || self.warmup_steps == 0 || self.decay_half_life == 0 {
            return Err(Error::Config(
                "schedule needs lr0 > 0, warmup_steps >= 1 and decay_half_life >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Learning rate at `step` (the first update uses step 1).
pub fn lr_at(schedule: &Schedule, step: u64) -> f64 {
    let s = step as f64;
    let w = schedule.warmup_steps as f64;
    match schedule.kind {
        ScheduleKind::WarmupExponential => {
            if step <= schedule.warmup_steps {
                schedule.lr0 * s / w
            } else {
                schedule.lr0 * (-(s - w) / schedule.decay_half_life as f64).exp2()
            }
        }
        ScheduleKind::WarmupRsqrt => {
            if step == 0 {
                0.0
            } else {
                schedule.lr0 * (s / w).min((w / s).sqrt())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchPlan {
    /// Upper bound on `rows × longest row`, checked for each side.
    pub token_budget: usize,
    /// Pairs with a longer segmented side (EOS included) are dropped.
    pub max_len: usize,
    /// Length bucket upper edges; lengths above the last edge share a bucket.
    #[serde(default = "default_buckets")]
    pub buckets: Vec<usize>,
}

fn default_buckets() -> Vec<usize> {
    vec![8, 12, 16, 24, 32, 48, 64]
}

impl Default for BatchPlan {
    fn default() -> Self {
        Self {
            token_budget: 512,
            max_len: 64,
            buckets: default_buckets(),
        }
    }
}

impl BatchPlan {
    pub fn validate(&self) -> Result<()> {
        if self.max_len == 0 || self.token_budget < self.max_len {
            return Err(Error::Config(format!(
                "token_budget {} must be at least max_len {} (and max_len positive)",
                self.token_budget, self.max_len
            )));
        }
        if self.buckets.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("bucket edges must be strictly increasing".into()));
        }
        Ok(())
    }

    fn bucket(&self, len: usize) -> usize {
        self.buckets
            .iter()
            .position(|&e| len <= e)
            .unwrap_or(self.buckets.len())
    }
}

/// A corpus segmented with one vocabulary, EOS appended to both sides.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedCorpus {
    name: String,
    pairs: Vec<(Vec<u32>, Vec<u32>)>,
    vocab_digest: String,
    digest: String,
}

impl EncodedCorpus {
    pub fn new(corpus: &ParallelCorpus, vocab: &SubwordVocabulary) -> Self {
        let src = vocab.encode_lines(corpus.sources());
        let tgt = vocab.encode_lines(corpus.targets());
        let pairs: Vec<(Vec<u32>, Vec<u32>)> = src
            .into_iter()
            .zip(tgt)
            .map(|(mut s, mut t)| {
                s.push(EOS_ID);
                t.push(EOS_ID);
                (s, t)
            })
            .collect();
        let vocab_digest = vocab.digest();
        let mut bytes = vocab_digest.clone().into_bytes();
        for (s, t) in &pairs {
            for side in [s, t] {
                bytes.extend((side.len() as u32).to_le_bytes());
                for id in side {
                    bytes.extend(id.to_le_bytes());
                }
            }
        }
        Self {
            name: corpus.name().to_string(),
            digest: sha256_hex(&bytes),
            pairs,
            vocab_digest,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn pairs(&self) -> &[(Vec<u32>, Vec<u32>)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn vocab_digest(&self) -> &str {
        &self.vocab_digest
    }

    /// Hash of the vocabulary digest and every segmented pair.
    pub fn digest(&self) -> &str {
        &self.digest
    }

    /// Segmented tokens (EOS included) of the pairs that fit `max_len`.
    pub fn token_count(&self, max_len: usize) -> (usize, usize) {
        self.pairs
            .iter()
            .filter(|(s, t)| s.len() <= max_len && t.len() <= max_len)
            .fold((0, 0), |(a, b), (s, t)| (a + s.len(), b + t.len()))
    }
}

/// One epoch of batches: drop over-long pairs, shuffle, sort into length
/// buckets (stable, so the shuffle survives within a bucket), pack greedily
/// under the token budget, then shuffle the batch order.
pub fn make_batches(corpus: &EncodedCorpus, plan: &BatchPlan, seed: u64, epoch: u64) -> Result<Vec<Batch>> {
    plan.validate()?;
    let pairs = corpus.pairs();
    let mut idx: Vec<usize> = (0..pairs.len())
        .filter(|&i| pairs[i].0.len() <= plan.max_len && pairs[i].1.len() <= plan.max_len)
        .collect();
    if idx.is_empty() {
        return Err(Error::Data(format!(
            "corpus {} has no pairs within max_len {}",
            corpus.name(),
            plan.max_len
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, epoch));
    idx.shuffle(&mut rng);
    idx.sort_by_key(|&i| plan.bucket(pairs[i].0.len().max(pairs[i].1.len())));

    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut cur: Vec<usize> = Vec::new();
    let (mut ms, mut mt) = (0, 0);
    for i in idx {
        let (s, t) = (pairs[i].0.len(), pairs[i].1.len());
        let rows = cur.len() + 1;
        if !cur.is_empty() && (rows * ms.max(s) > plan.token_budget || rows * mt.max(t) > plan.token_budget) {
            groups.push(std::mem::take(&mut cur));
            (ms, mt) = (0, 0);
        }
        cur.push(i);
        ms = ms.max(s);
        mt = mt.max(t);
    }
    groups.push(cur);
    groups.shuffle(&mut rng);
    groups
        .into_iter()
        .map(|g| {
            let rows: Vec<(&[u32], &[u32])> = g.iter().map(|&i| (&pairs[i].0[..], &pairs[i].1[..])).collect();
            Batch::from_pairs(&rows)
        })
        .collect()
}

#[cfg(test)]
mod tests;
