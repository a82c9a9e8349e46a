use serde::{Deserialize, Serialize};

use super::{lr_at, make_batches, BatchPlan, EncodedCorpus, OptimizerState, Schedule};
use crate::corpus::ParallelCorpus;
use crate::decoding::greedy_batch;
use crate::error::{Error, Result};
use crate::evaluation::bleu;
use crate::model::{forward, Batch, ForwardMode, TransformerModel};
use crate::numerics::Graph;
use crate::subword::SubwordVocabulary;
use crate::util::derive_seed;

const DROPOUT_STREAM: u64 = 0xD50;

/// Position in the batch stream: which epoch's shuffle, and how far into it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BatchCursor {
    pub epoch: u64,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DevRecord {
    /// Global step at which the evaluation ran.
    pub step: u64,
    /// Mean training loss over the steps since the previous record.
    pub train_loss: f64,
    pub dev_loss: f64,
    pub dev_bleu: f64,
}

/// Everything that evolves during training. A transfer swaps only the
/// corpus the batches come from.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: TransformerModel,
    pub optimizer: OptimizerState,
    pub schedule: Schedule,
    /// Subtracted from the global step when evaluating the schedule; only
    /// non-zero after a transfer that resets the schedule.
    pub schedule_offset: u64,
    pub plan: BatchPlan,
    pub vocab_digest: String,
    pub corpus_digest: String,
    pub batch_seed: u64,
    pub cursor: BatchCursor,
    pub grad_clip: Option<f64>,
    pub history: Vec<DevRecord>,
}

impl TrainState {
    pub fn new(
        model: TransformerModel,
        schedule: Schedule,
        plan: BatchPlan,
        corpus: &EncodedCorpus,
        batch_seed: u64,
    ) -> Result<Self> {
        schedule.validate()?;
        plan.validate()?;
        if plan.max_len > model.config().max_positions {
            return Err(Error::Config(format!(
                "batch max_len {} exceeds the model's {} positions",
                plan.max_len,
                model.config().max_positions
            )));
        }
        let optimizer = OptimizerState::new(model.params());
        Ok(Self {
            model,
            optimizer,
            schedule,
            schedule_offset: 0,
            plan,
            vocab_digest: corpus.vocab_digest().to_string(),
            corpus_digest: corpus.digest().to_string(),
            batch_seed,
            cursor: BatchCursor::default(),
            grad_clip: None,
            history: Vec::new(),
        })
    }

    pub fn global_step(&self) -> u64 {
        self.optimizer.step
    }

    /// Learning rate the next update will use.
    pub fn next_lr(&self) -> f64 {
        lr_at(&self.schedule, self.optimizer.step + 1 - self.schedule_offset)
    }
}

/// Development data: segmented pairs for the loss, raw references for BLEU.
#[derive(Debug, Clone)]
pub struct DevSet {
    encoded: EncodedCorpus,
    references: Vec<String>,
    vocab: SubwordVocabulary,
}

impl DevSet {
    pub fn new(corpus: &ParallelCorpus, vocab: &SubwordVocabulary) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Data("empty development set".into()));
        }
        Ok(Self {
            encoded: EncodedCorpus::new(corpus, vocab),
            references: corpus.targets().map(str::to_string).collect(),
            vocab: vocab.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.references.len()
    }

    pub fn is_empty(&self) -> bool {
        self.references.is_empty()
    }

    /// Token-weighted teacher-forced loss (label smoothing included).
    pub fn loss(&self, model: &TransformerModel, plan: &BatchPlan) -> Result<f64> {
        let mut plan = plan.clone();
        plan.max_len = model.config().max_positions;
        plan.token_budget = plan.token_budget.max(plan.max_len);
        let batches = make_batches(&self.encoded, &plan, 0, 0)?;
        let (mut total, mut tokens) = (0.0, 0usize);
        for b in &batches {
            let mut g = Graph::new();
            let out = forward(model, &mut g, b, ForwardMode::Eval)?;
            total += g.value(out.loss).data()[0] * b.target_tokens() as f64;
            tokens += b.target_tokens();
        }
        Ok(total / tokens as f64)
    }

    /// Greedy-decoded outputs, in order.
    pub fn greedy_outputs(&self, model: &TransformerModel, max_output_len: usize) -> Result<Vec<String>> {
        use rayon::prelude::*;
        let limit = model.config().max_positions;
        let sources: Vec<&[u32]> = self
            .encoded
            .pairs()
            .iter()
            .map(|(s, _)| &s[..s.len().min(limit)])
            .collect();
        let hyps: Vec<Vec<_>> = sources
            .par_chunks(64)
            .map(|c| greedy_batch(model, c, max_output_len))
            .collect::<Result<_>>()?;
        hyps.into_iter()
            .flatten()
            .map(|h| self.vocab.decode_pieces(h.content()))
            .collect()
    }

    /// Uncased corpus BLEU of greedy output; an all-empty output scores 0.
    pub fn bleu(&self, model: &TransformerModel, max_output_len: usize) -> Result<f64> {
        let out = self.greedy_outputs(model, max_output_len)?;
        match bleu(&out, &self.references, false) {
            Ok(r) => Ok(r.bleu),
            Err(Error::UndefinedMetric(_)) => Ok(0.0),
            Err(e) => Err(e),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub steps: u64,
    /// Evaluate every this many steps of the current call; 0 disables.
    pub eval_every: u64,
    /// Stop after this many evaluations without a new best.
    #[serde(default)]
    pub patience: Option<usize>,
    #[serde(default = "default_decode_len")]
    pub dev_max_output_len: usize,
}

fn default_decode_len() -> usize {
    64
}

impl TrainOptions {
    pub fn new(steps: u64, eval_every: u64) -> Self {
        Self {
            steps,
            eval_every,
            patience: None,
            dev_max_output_len: default_decode_len(),
        }
    }
}

/// The model at the best development evaluation of one `train` call.
#[derive(Debug, Clone)]
pub struct BestSnapshot {
    pub record: DevRecord,
    pub model: TransformerModel,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Development records of this call only.
    pub curve: Vec<DevRecord>,
    pub best: Option<BestSnapshot>,
    pub steps_run: u64,
    pub stopped_early: bool,
}

impl TrainOutcome {
    pub fn empty() -> Self {
        Self {
            curve: Vec::new(),
            best: None,
            steps_run: 0,
            stopped_early: false,
        }
    }

    pub fn best_bleu(&self) -> Option<f64> {
        self.best.as_ref().map(|b| b.record.dev_bleu)
    }
}

impl DevRecord {
    /// Higher BLEU wins; equal BLEU falls back to lower dev loss.
    pub fn improves_on(&self, other: &DevRecord) -> bool {
        self.dev_bleu > other.dev_bleu || (self.dev_bleu == other.dev_bleu && self.dev_loss < other.dev_loss)
    }
}

fn improves(new: &DevRecord, old: Option<&DevRecord>) -> bool {
    old.is_none_or(|o| new.improves_on(o))
}

/// Runs `opts.steps` updates on `data`, evaluating on `dev` as configured.
pub fn train(
    state: &mut TrainState,
    data: &EncodedCorpus,
    dev: Option<&DevSet>,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    if data.vocab_digest() != state.vocab_digest {
        return Err(Error::Contract(
            "training corpus was segmented with another vocabulary".into(),
        ));
    }
    if data.digest() != state.corpus_digest {
        return Err(Error::Contract(
            "training corpus differs from the state's stream; switch corpora with transfer".into(),
        ));
    }
    let mut outcome = TrainOutcome::empty();
    if opts.steps == 0 {
        return Ok(outcome);
    }
    let names = state.model.names().to_vec();
    let mut batches: Vec<Batch> = make_batches(data, &state.plan, state.batch_seed, state.cursor.epoch)?;
    if state.cursor.index >= batches.len() {
        return Err(Error::Contract(format!(
            "batch cursor {} is past the {} batches of epoch {}",
            state.cursor.index,
            batches.len(),
            state.cursor.epoch
        )));
    }
    let (mut loss_sum, mut loss_n) = (0.0, 0u64);
    let mut since_best = 0usize;

    for local in 1..=opts.steps {
        let step = state.optimizer.step;
        let batch = &batches[state.cursor.index];
        let grads = {
            let mut g = Graph::new();
            let mode = ForwardMode::Train {
                seed: derive_seed(derive_seed(state.batch_seed, DROPOUT_STREAM), step),
            };
            let out = forward(&state.model, &mut g, batch, mode)?;
            let loss = g.value(out.loss).data()[0];
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    step: step + 1,
                    detail: format!("training loss is {loss}"),
                });
            }
            loss_sum += loss;
            loss_n += 1;
            g.backward(out.loss)?.into_tensors()
        };
        let lr = state.next_lr();
        let clip = state.grad_clip;
        state
            .optimizer
            .update(state.model.params_mut(), &names, &grads, lr, clip)?;
        outcome.steps_run = local;

        state.cursor.index += 1;
        if state.cursor.index == batches.len() {
            state.cursor = BatchCursor {
                epoch: state.cursor.epoch + 1,
                index: 0,
            };
            batches = make_batches(data, &state.plan, state.batch_seed, state.cursor.epoch)?;
        }

        if let Some(dev) = dev.filter(|_| opts.eval_every > 0 && local % opts.eval_every == 0) {
            let record = DevRecord {
                step: state.optimizer.step,
                train_loss: loss_sum / loss_n as f64,
                dev_loss: dev.loss(&state.model, &state.plan)?,
                dev_bleu: dev.bleu(&state.model, opts.dev_max_output_len)?,
            };
            (loss_sum, loss_n) = (0.0, 0);
            if improves(&record, outcome.best.as_ref().map(|b| &b.record)) {
                outcome.best = Some(BestSnapshot {
                    record: record.clone(),
                    model: state.model.clone(),
                });
                since_best = 0;
            } else {
                since_best += 1;
            }
            state.history.push(record.clone());
            outcome.curve.push(record);
            if opts.patience.is_some_and(|p| since_best >= p) {
                outcome.stopped_early = true;
                break;
            }
        }
    }
    Ok(outcome)
}

/// Switches the batch stream to `child`, keeping weights, Adam moments, the
/// step counter and the schedule position. With `reset_schedule` the
/// learning-rate schedule restarts from step 0 (an ablation).
pub fn transfer(parent: &TrainState, child: &EncodedCorpus, reset_schedule: bool) -> Result<TrainState> {
    if child.vocab_digest() != parent.vocab_digest {
        return Err(Error::Transfer(format!(
            "child corpus vocabulary {} differs from the parent's {}",
            &child.vocab_digest()[..12],
            &parent.vocab_digest[..12.min(parent.vocab_digest.len())]
        )));
    }
    let mut state = parent.clone();
    if child.digest() != parent.corpus_digest {
        state.corpus_digest = child.digest().to_string();
        state.cursor = BatchCursor::default();
    }
    if reset_schedule {
        state.schedule_offset = state.optimizer.step;
    }
    Ok(state)
}
