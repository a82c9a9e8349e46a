//! End-to-end experiments: data preparation, the parent run, transfer and
//! baseline children, parent-only decoding, and the variant matrix.

mod config;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{filter_by_length, load_parallel, synthesize_pair, Lexicon, ParallelCorpus};
use crate::decoding::translate_corpus;
use crate::error::{Error, Result};
use crate::evaluation::bleu;
use crate::model::TransformerModel;
use crate::subword::{learn_vocab_with, SubwordVocabulary};
use crate::training::{train, transfer, DevRecord, DevSet, EncodedCorpus, TrainOptions, TrainOutcome, TrainState};
use crate::util::derive_seed;

pub use config::{
    CorpusConfig, ExperimentConfig, LengthFilter, MatrixConfig, ModelConfig, Seeds, SplitConfig, TrainingConfig,
    Variant, VocabConfig,
};

/// Corpora after filtering and splitting, plus the shared vocabulary.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub parent_train: ParallelCorpus,
    pub parent_dev: ParallelCorpus,
    /// Child training pairs; variants that downscale take a prefix.
    pub child_train: ParallelCorpus,
    pub child_dev: ParallelCorpus,
    pub child_test: ParallelCorpus,
    pub parent_lexicon: Option<Lexicon>,
    pub child_lexicon: Option<Lexicon>,
    pub vocab: SubwordVocabulary,
}

fn load_corpus(c: &CorpusConfig, seed: u64, base: Option<&Lexicon>) -> Result<(ParallelCorpus, Option<Lexicon>)> {
    match c {
        CorpusConfig::Files { pair, source, target } => Ok((load_parallel(source, target, pair.clone())?, None)),
        CorpusConfig::Synthetic { lexicon_overlap, .. } => {
            let spec = c.synth_spec(seed).expect("synthetic");
            let base = if *lexicon_overlap > 0.0 { base } else { None };
            let (corpus, lex) = synthesize_pair(&spec, base)?;
            Ok((corpus, Some(lex)))
        }
    }
}

/// Splits `held` pairs off the end of `corpus`.
fn split_tail(corpus: &ParallelCorpus, held: usize, what: &str) -> Result<(ParallelCorpus, ParallelCorpus)> {
    if corpus.len() <= held {
        return Err(Error::Data(format!(
            "{what} corpus has {} pairs after filtering, need more than the {held} held out",
            corpus.len()
        )));
    }
    let cut = corpus.len() - held;
    Ok((corpus.slice(0, cut)?, corpus.slice(cut, corpus.len())?))
}

impl PreparedData {
    pub fn new(cfg: &ExperimentConfig, seeds: &Seeds) -> Result<Self> {
        let (parent, parent_lexicon) = load_corpus(&cfg.parent, derive_seed(seeds.data, 1), None)?;
        let (child, child_lexicon) = load_corpus(&cfg.child, derive_seed(seeds.data, 2), parent_lexicon.as_ref())?;
        let (parent, child) = match cfg.length_filter {
            Some(f) => (
                filter_by_length(&parent, f.min_words, f.max_words),
                filter_by_length(&child, f.min_words, f.max_words),
            ),
            None => (parent, child),
        };
        let (parent_train, parent_dev) = split_tail(&parent, cfg.split.dev, "parent")?;
        let (rest, child_test) = split_tail(&child, cfg.split.test, "child")?;
        let (child_train, child_dev) = split_tail(&rest, cfg.split.dev, "child")?;
        let vocab = learn_vocab_with(
            &parent_train,
            &child_train,
            cfg.vocab.size,
            derive_seed(seeds.data, 3),
            cfg.vocab.source,
        )?;
        Ok(Self {
            parent_train: parent_train.with_name("parent-train"),
            parent_dev: parent_dev.with_name("parent-dev"),
            child_train: child_train.with_name("child-train"),
            child_dev: child_dev.with_name("child-dev"),
            child_test: child_test.with_name("child-test"),
            parent_lexicon,
            child_lexicon,
            vocab,
        })
    }
}

/// The parent run: its final state, the best dev snapshot, and the states
/// at requested branch steps.
#[derive(Debug, Clone)]
pub struct ParentRun {
    pub state: TrainState,
    pub best_record: DevRecord,
    pub best_model: TransformerModel,
    pub curve: Vec<DevRecord>,
    pub branches: BTreeMap<u64, TrainState>,
    pub seconds: f64,
}

/// A child (transfer) or baseline run.
#[derive(Debug, Clone)]
pub struct ChildRun {
    pub state: TrainState,
    pub best_record: DevRecord,
    pub best_model: TransformerModel,
    pub curve: Vec<DevRecord>,
    pub stopped_early: bool,
    pub seconds: f64,
}

/// One replicate's prepared data with encoded corpora and dev sets.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub seeds: Seeds,
    pub data: PreparedData,
    parent_enc: EncodedCorpus,
    parent_dev: DevSet,
    child_dev: DevSet,
}

fn best_of(
    outcome: &TrainOutcome,
    state: &TrainState,
    dev: &DevSet,
    cfg: &ExperimentConfig,
) -> Result<(DevRecord, TransformerModel)> {
    match &outcome.best {
        Some(b) => Ok((b.record.clone(), b.model.clone())),
        None => {
            let record = DevRecord {
                step: state.global_step(),
                train_loss: f64::NAN,
                dev_loss: dev.loss(&state.model, &state.plan)?,
                dev_bleu: dev.bleu(&state.model, cfg.training.dev_max_output_len)?,
            };
            Ok((record, state.model.clone()))
        }
    }
}

impl Experiment {
    pub fn prepare(config: &ExperimentConfig, seeds: Seeds) -> Result<Self> {
        let data = PreparedData::new(config, &seeds)?;
        Self::from_data(config, seeds, data)
    }

    pub fn from_data(config: &ExperimentConfig, seeds: Seeds, data: PreparedData) -> Result<Self> {
        Ok(Self {
            parent_enc: EncodedCorpus::new(&data.parent_train, &data.vocab),
            parent_dev: DevSet::new(&data.parent_dev, &data.vocab)?,
            child_dev: DevSet::new(&data.child_dev, &data.vocab)?,
            config: config.clone(),
            seeds,
            data,
        })
    }

    pub fn vocab(&self) -> &SubwordVocabulary {
        &self.data.vocab
    }

    fn options(&self, steps: u64, patience: Option<usize>) -> TrainOptions {
        TrainOptions {
            steps,
            eval_every: self.config.training.eval_every,
            patience,
            dev_max_output_len: self.config.training.dev_max_output_len,
        }
    }

    /// A freshly initialised training state on `corpus`.
    pub fn fresh_state(&self, corpus: &EncodedCorpus) -> Result<TrainState> {
        let model = TransformerModel::init(self.config.model.with_vocab(self.data.vocab.len()), self.seeds.init)?;
        let mut state = TrainState::new(
            model,
            self.config.schedule.clone(),
            self.config.batching.clone(),
            corpus,
            self.seeds.train,
        )?;
        state.grad_clip = self.config.training.grad_clip;
        Ok(state)
    }

    /// The first `pairs` child training pairs (all of them for `None`).
    pub fn child_corpus(&self, pairs: Option<usize>) -> Result<EncodedCorpus> {
        let c = &self.data.child_train;
        let n = pairs.unwrap_or(c.len());
        if n > c.len() {
            return Err(Error::Size {
                requested: n,
                available: c.len(),
            });
        }
        Ok(EncodedCorpus::new(&c.head(n), &self.data.vocab))
    }

    pub fn parent_corpus(&self) -> &EncodedCorpus {
        &self.parent_enc
    }

    /// Trains the parent for the configured budget, keeping a copy of the
    /// full state at every step in `branch_steps`.
    pub fn train_parent(&self, branch_steps: &[u64]) -> Result<ParentRun> {
        let start = Instant::now();
        let total = self.config.training.parent_steps;
        let mut stops: BTreeSet<u64> = branch_steps.iter().copied().filter(|&s| s > 0 && s < total).collect();
        stops.insert(total);
        let mut state = self.fresh_state(&self.parent_enc)?;
        let mut best: Option<(DevRecord, TransformerModel)> = None;
        let mut curve = Vec::new();
        let mut branches = BTreeMap::new();
        let mut done = 0;
        for stop in stops {
            let out = train(
                &mut state,
                &self.parent_enc,
                Some(&self.parent_dev),
                &self.options(stop - done, None),
            )?;
            if let Some(b) = out.best {
                if best.as_ref().is_none_or(|(r, _)| b.record.improves_on(r)) {
                    best = Some((b.record, b.model));
                }
            }
            curve.extend(out.curve);
            branches.insert(stop, state.clone());
            done = stop;
        }
        let (best_record, best_model) = match best {
            Some(b) => b,
            None => best_of(&TrainOutcome::empty(), &state, &self.parent_dev, &self.config)?,
        };
        Ok(ParentRun {
            state,
            best_record,
            best_model,
            curve,
            branches,
            seconds: start.elapsed().as_secs_f64(),
        })
    }

    fn run_child(&self, mut state: TrainState, data: &EncodedCorpus) -> Result<ChildRun> {
        let start = Instant::now();
        let t = &self.config.training;
        let out = train(
            &mut state,
            data,
            Some(&self.child_dev),
            &self.options(t.child_steps, t.patience),
        )?;
        let (best_record, best_model) = best_of(&out, &state, &self.child_dev, &self.config)?;
        Ok(ChildRun {
            state,
            best_record,
            best_model,
            curve: out.curve,
            stopped_early: out.stopped_early,
            seconds: start.elapsed().as_secs_f64(),
        })
    }

    /// Continues `parent` on the child corpus: same weights, moments and
    /// schedule position, only the data changes.
    pub fn transfer(&self, parent: &TrainState, child_pairs: Option<usize>, reset_schedule: bool) -> Result<ChildRun> {
        let data = self.child_corpus(child_pairs)?;
        self.run_child(transfer(parent, &data, reset_schedule)?, &data)
    }

    /// Cold start on the child corpus alone.
    pub fn baseline(&self, child_pairs: Option<usize>) -> Result<ChildRun> {
        let data = self.child_corpus(child_pairs)?;
        self.run_child(self.fresh_state(&data)?, &data)
    }

    /// Beam-decoded child test set.
    pub fn test_outputs(&self, model: &TransformerModel) -> Result<Vec<String>> {
        translate_corpus(model, &self.data.vocab, &self.data.child_test, &self.config.beam)
    }

    /// Uncased corpus BLEU on the child test set; empty output scores 0.
    pub fn test_bleu(&self, model: &TransformerModel) -> Result<f64> {
        let out = self.test_outputs(model)?;
        let refs: Vec<&str> = self.data.child_test.targets().collect();
        match bleu(&out, &refs, false) {
            Ok(r) => Ok(r.bleu),
            Err(Error::UndefinedMetric(_)) => Ok(0.0),
            Err(e) => Err(e),
        }
    }
}

/// Scores of one variant in one replicate. `*_dev` are best development
/// BLEU (greedy); `*_test` are beam-decoded test BLEU of the best-dev model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub variant: String,
    pub replicate: usize,
    pub child_pairs: usize,
    pub branch_step: u64,
    pub reset_schedule: bool,
    pub transfer_dev: f64,
    pub baseline_dev: f64,
    pub transfer_test: f64,
    pub baseline_test: f64,
    pub parent_only_test: f64,
}

#[derive(Debug, Clone)]
pub struct ReplicateRun {
    pub replicate: usize,
    pub seeds: Seeds,
    pub vocab_size: usize,
    pub parent_best_dev: f64,
    pub rows: Vec<VariantResult>,
    /// Dev BLEU series keyed by run name, steps counted from each run's start.
    pub curves: BTreeMap<String, Vec<(u64, f64)>>,
    /// Wall-clock seconds per run name (not part of any artifact digest).
    pub seconds: BTreeMap<String, f64>,
}

fn series(curve: &[DevRecord], offset: u64) -> Vec<(u64, f64)> {
    curve.iter().map(|r| (r.step - offset, r.dev_bleu)).collect()
}

/// Runs the parent once and every variant of `cfg` for replicate `r`.
/// Children and baselines run in parallel on the current rayon pool.
pub fn run_replicate(cfg: &ExperimentConfig, r: usize, progress: &(dyn Fn(&str) + Sync)) -> Result<ReplicateRun> {
    let seeds = cfg.seeds.replicate(r);
    let exp = Experiment::prepare(cfg, seeds)?;
    let variants = cfg.variants();
    let pool = exp.data.child_train.len();
    let pairs_of = |v: &Variant| v.child_pairs.unwrap_or(pool);
    let branch_steps: Vec<u64> = variants.iter().map(|v| cfg.branch_step(v.parent_fraction)).collect();
    progress(&format!("replicate {r}: parent, {} steps", cfg.training.parent_steps));
    let parent = exp.train_parent(&branch_steps)?;
    progress(&format!(
        "replicate {r}: parent best dev BLEU {:.2}",
        parent.best_record.dev_bleu
    ));

    enum Job {
        Baseline(usize),
        Transfer(usize),
        ParentOnly,
    }
    let sizes: BTreeSet<usize> = variants.iter().map(pairs_of).collect();
    let mut jobs: Vec<Job> = sizes.iter().map(|&n| Job::Baseline(n)).collect();
    jobs.extend((0..variants.len()).map(Job::Transfer));
    jobs.push(Job::ParentOnly);
    enum Done {
        Baseline(usize, ChildRun, f64),
        Transfer(usize, ChildRun, f64),
        ParentOnly(f64, f64),
    }
    let done: Vec<Done> = jobs
        .par_iter()
        .map(|job| -> Result<Done> {
            Ok(match job {
                Job::Baseline(n) => {
                    let run = exp.baseline(Some(*n))?;
                    let test = exp.test_bleu(&run.best_model)?;
                    progress(&format!(
                        "replicate {r}: baseline {n} pairs, dev {:.2}",
                        run.best_record.dev_bleu
                    ));
                    Done::Baseline(*n, run, test)
                }
                Job::Transfer(k) => {
                    let v = &variants[*k];
                    let reset = v.reset_schedule.unwrap_or(cfg.training.reset_schedule);
                    let from = &parent.branches[&branch_steps[*k]];
                    let run = exp.transfer(from, Some(pairs_of(v)), reset)?;
                    let test = exp.test_bleu(&run.best_model)?;
                    progress(&format!(
                        "replicate {r}: transfer {}, dev {:.2}",
                        v.name, run.best_record.dev_bleu
                    ));
                    Done::Transfer(*k, run, test)
                }
                Job::ParentOnly => {
                    let start = Instant::now();
                    let test = exp.test_bleu(&parent.best_model)?;
                    Done::ParentOnly(test, start.elapsed().as_secs_f64())
                }
            })
        })
        .collect::<Result<_>>()?;

    let mut curves = BTreeMap::new();
    let mut seconds = BTreeMap::new();
    curves.insert(format!("r{r}/parent"), series(&parent.curve, 0));
    seconds.insert("parent".to_string(), parent.seconds);
    let mut baselines = BTreeMap::new();
    let mut transfers = BTreeMap::new();
    let mut parent_only = 0.0;
    for d in done {
        match d {
            Done::Baseline(n, run, test) => {
                curves.insert(format!("r{r}/baseline-{n}"), series(&run.curve, 0));
                seconds.insert(format!("baseline-{n}"), run.seconds);
                baselines.insert(n, (run.best_record.dev_bleu, test));
            }
            Done::Transfer(k, run, test) => {
                let name = &variants[k].name;
                curves.insert(format!("r{r}/transfer-{name}"), series(&run.curve, branch_steps[k]));
                seconds.insert(format!("transfer-{name}"), run.seconds);
                transfers.insert(k, (run.best_record.dev_bleu, test));
            }
            Done::ParentOnly(test, s) => {
                parent_only = test;
                seconds.insert("parent-only".into(), s);
            }
        }
    }
    let rows = variants
        .iter()
        .enumerate()
        .map(|(k, v)| {
            let n = pairs_of(v);
            let (transfer_dev, transfer_test) = transfers[&k];
            let (baseline_dev, baseline_test) = baselines[&n];
            VariantResult {
                variant: v.name.clone(),
                replicate: r,
                child_pairs: n,
                branch_step: branch_steps[k],
                reset_schedule: v.reset_schedule.unwrap_or(cfg.training.reset_schedule),
                transfer_dev,
                baseline_dev,
                transfer_test,
                baseline_test,
                parent_only_test: parent_only,
            }
        })
        .collect();
    Ok(ReplicateRun {
        replicate: r,
        seeds,
        vocab_size: exp.data.vocab.len(),
        parent_best_dev: parent.best_record.dev_bleu,
        rows,
        curves,
        seconds,
    })
}

/// Median; for an even count, the mean of the middle two.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => (v[n / 2 - 1] + v[n / 2]) / 2.0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MedianRow {
    pub variant: String,
    pub child_pairs: usize,
    pub branch_step: u64,
    pub reset_schedule: bool,
    pub transfer_dev: f64,
    pub baseline_dev: f64,
    pub gain_dev: f64,
    pub transfer_test: f64,
    pub baseline_test: f64,
    pub parent_only_test: f64,
}

#[derive(Debug, Clone)]
pub struct MatrixReport {
    pub replicates: Vec<ReplicateRun>,
}

pub const ROWS_TSV_HEADER: &str = "variant\treplicate\tchild_pairs\tbranch_step\treset_schedule\ttransfer_dev\tbaseline_dev\ttransfer_test\tbaseline_test\tparent_only_test";
pub const SUMMARY_TSV_HEADER: &str =
    "variant\tchild_pairs\tbranch_step\treset_schedule\ttransfer\tbaseline\tparent_only\tgain\ttransfer_dev\tbaseline_dev";

impl MatrixReport {
    pub fn rows(&self) -> impl Iterator<Item = &VariantResult> {
        self.replicates.iter().flat_map(|r| r.rows.iter())
    }

    /// Per-variant medians over replicates, in variant order. The gain is
    /// the median of per-replicate differences.
    pub fn medians(&self) -> Vec<MedianRow> {
        let Some(first) = self.replicates.first() else {
            return Vec::new();
        };
        first
            .rows
            .iter()
            .map(|proto| {
                let rows: Vec<&VariantResult> = self.rows().filter(|r| r.variant == proto.variant).collect();
                let m = |f: &dyn Fn(&VariantResult) -> f64| median(&rows.iter().map(|r| f(r)).collect::<Vec<_>>());
                MedianRow {
                    variant: proto.variant.clone(),
                    child_pairs: proto.child_pairs,
                    branch_step: proto.branch_step,
                    reset_schedule: proto.reset_schedule,
                    transfer_dev: m(&|r| r.transfer_dev),
                    baseline_dev: m(&|r| r.baseline_dev),
                    gain_dev: m(&|r| r.transfer_dev - r.baseline_dev),
                    transfer_test: m(&|r| r.transfer_test),
                    baseline_test: m(&|r| r.baseline_test),
                    parent_only_test: m(&|r| r.parent_only_test),
                }
            })
            .collect()
    }

    pub fn median_of(&self, variant: &str) -> Option<MedianRow> {
        self.medians().into_iter().find(|m| m.variant == variant)
    }

    pub fn rows_tsv(&self) -> String {
        let mut out = format!("{ROWS_TSV_HEADER}\n");
        for r in self.rows() {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{:.2}\t{:.2}\t{:.2}\t{:.2}\t{:.2}",
                r.variant,
                r.replicate,
                r.child_pairs,
                r.branch_step,
                r.reset_schedule,
                r.transfer_dev,
                r.baseline_dev,
                r.transfer_test,
                r.baseline_test,
                r.parent_only_test
            );
        }
        out
    }

    /// Transfer / Baseline / Parent-only test BLEU per variant, medians over
    /// replicates, with the dev-set scores alongside.
    pub fn summary_tsv(&self) -> String {
        let mut out = format!("{SUMMARY_TSV_HEADER}\n");
        for m in self.medians() {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{:.2}\t{:.2}\t{:.2}\t{:+.2}\t{:.2}\t{:.2}",
                m.variant,
                m.child_pairs,
                m.branch_step,
                m.reset_schedule,
                m.transfer_test,
                m.baseline_test,
                m.parent_only_test,
                m.gain_dev,
                m.transfer_dev,
                m.baseline_dev
            );
        }
        out
    }

    pub fn curves(&self) -> BTreeMap<String, Vec<(u64, f64)>> {
        self.replicates.iter().flat_map(|r| r.curves.clone()).collect()
    }
}

/// Every replicate of the matrix, one after another.
pub fn run_matrix(cfg: &ExperimentConfig, progress: &(dyn Fn(&str) + Sync)) -> Result<MatrixReport> {
    let replicates = (0..cfg.matrix.replicates)
        .map(|r| run_replicate(cfg, r, progress))
        .collect::<Result<_>>()?;
    Ok(MatrixReport { replicates })
}
