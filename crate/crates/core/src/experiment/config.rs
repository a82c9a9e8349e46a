use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{LanguagePair, SynthSpec};
use crate::decoding::BeamConfig;
use crate::error::{Error, Result};
use crate::model::TransformerConfig;
use crate::subword::VocabSource;
use crate::training::{BatchPlan, Schedule};
use crate::util::{derive_seed, sha256_hex};

/// Where a corpus comes from. Synthetic corpora take their seed from the
/// experiment's data seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CorpusConfig {
    Synthetic {
        pair: LanguagePair,
        n_pairs: usize,
        lexicon_size: usize,
        zipf_exponent: f64,
        min_len: usize,
        max_len: usize,
        /// Inherited from the parent's lexicon (child only).
        #[serde(default)]
        lexicon_overlap: f64,
        #[serde(default)]
        swap_prob: f64,
        source_prefix: String,
        target_prefix: String,
    },
    Files {
        pair: LanguagePair,
        source: PathBuf,
        target: PathBuf,
    },
}

impl CorpusConfig {
    pub fn pair(&self) -> &LanguagePair {
        match self {
            CorpusConfig::Synthetic { pair, .. } | CorpusConfig::Files { pair, .. } => pair,
        }
    }

    pub fn synth_spec(&self, seed: u64) -> Option<SynthSpec> {
        match self {
            CorpusConfig::Synthetic {
                pair,
                n_pairs,
                lexicon_size,
                zipf_exponent,
                min_len,
                max_len,
                lexicon_overlap,
                swap_prob,
                source_prefix,
                target_prefix,
            } => Some(SynthSpec {
                seed,
                n_pairs: *n_pairs,
                lexicon_size: *lexicon_size,
                zipf_exponent: *zipf_exponent,
                min_len: *min_len,
                max_len: *max_len,
                lexicon_overlap: *lexicon_overlap,
                swap_prob: *swap_prob,
                source_prefix: source_prefix.clone(),
                target_prefix: target_prefix.clone(),
                pair: pair.clone(),
            }),
            CorpusConfig::Files { .. } => None,
        }
    }
}

/// Held-out pairs, taken from the end of each corpus: the parent keeps a dev
/// set, the child a dev and a test set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub dev: usize,
    pub test: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { dev: 200, test: 200 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LengthFilter {
    pub min_words: usize,
    pub max_words: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabConfig {
    pub size: usize,
    #[serde(default)]
    pub source: VocabSource,
}

/// Architecture without the vocabulary size, which comes from the learned
/// vocabulary. Missing keys take the desk defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub label_smoothing: f64,
    pub max_positions: usize,
    pub tie_softmax: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let d = TransformerConfig::desk(0);
        Self {
            d_model: d.d_model,
            n_layers: d.n_layers,
            n_heads: d.n_heads,
            d_ff: d.d_ff,
            dropout: d.dropout,
            label_smoothing: d.label_smoothing,
            max_positions: d.max_positions,
            tie_softmax: d.tie_softmax,
        }
    }
}

impl ModelConfig {
    pub fn with_vocab(&self, vocab_size: usize) -> TransformerConfig {
        TransformerConfig {
            vocab_size,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            dropout: self.dropout,
            label_smoothing: self.label_smoothing,
            max_positions: self.max_positions,
            tie_softmax: self.tie_softmax,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub parent_steps: u64,
    pub child_steps: u64,
    pub eval_every: u64,
    /// Early stopping for child and baseline runs, in evaluations.
    #[serde(default)]
    pub patience: Option<usize>,
    #[serde(default)]
    pub grad_clip: Option<f64>,
    #[serde(default)]
    pub reset_schedule: bool,
    #[serde(default = "default_dev_len")]
    pub dev_max_output_len: usize,
}

fn default_dev_len() -> usize {
    64
}

/// The four seeds every random choice derives from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub data: u64,
    pub init: u64,
    pub train: u64,
    pub bootstrap: u64,
}

impl Seeds {
    /// All four seeds derived from one value (the `--seed-override` flag).
    pub fn from_single(seed: u64) -> Self {
        Self {
            data: derive_seed(seed, 1),
            init: derive_seed(seed, 2),
            train: derive_seed(seed, 3),
            bootstrap: derive_seed(seed, 4),
        }
    }

    /// Seeds of replicate `r`; replicate 0 uses the configured seeds.
    pub fn replicate(&self, r: usize) -> Self {
        if r == 0 {
            return *self;
        }
        let d = |s: u64| derive_seed(s, 0x5EED_0000 + r as u64);
        Self {
            data: d(self.data),
            init: d(self.init),
            train: d(self.train),
            bootstrap: d(self.bootstrap),
        }
    }
}

/// One cell of the experiment matrix. All variants of an experiment share
/// the parent run and the vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub name: String,
    /// Use only the first this-many child training pairs.
    #[serde(default)]
    pub child_pairs: Option<usize>,
    /// Branch the child off the parent after this fraction of its steps.
    #[serde(default = "one")]
    pub parent_fraction: f64,
    #[serde(default)]
    pub reset_schedule: Option<bool>,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixConfig {
    #[serde(default = "one_usize")]
    pub replicates: usize,
    #[serde(default)]
    pub variants: Vec<Variant>,
}

fn one_usize() -> usize {
    1
}

impl Default for MatrixConfig {
    fn default() -> Self {
        Self {
            replicates: 1,
            variants: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub parent: CorpusConfig,
    pub child: CorpusConfig,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub length_filter: Option<LengthFilter>,
    pub vocab: VocabConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default)]
    pub batching: BatchPlan,
    #[serde(default)]
    pub beam: BeamConfig,
    pub training: TrainingConfig,
    pub seeds: Seeds,
    #[serde(default)]
    pub matrix: MatrixConfig,
}

impl ExperimentConfig {
    /// Parses TOML; relative corpus paths are resolved against `base_dir`.
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for c in [&mut cfg.parent, &mut cfg.child] {
            if let CorpusConfig::Files { source, target, .. } = c {
                for p in [source, target] {
                    if p.is_relative() {
                        *p = base_dir.join(&*p);
                    }
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.name.is_empty()
            || !self
                .name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
        {
            return fail(format!(
                "experiment name {:?} must be non-empty [A-Za-z0-9._-]",
                self.name
            ));
        }
        for (what, c) in [("parent", &self.parent), ("child", &self.child)] {
            match c {
                CorpusConfig::Files { source, target, .. } => {
                    for p in [source, target] {
                        if !p.is_file() {
                            return fail(format!("{what} corpus file {} does not exist", p.display()));
                        }
                    }
                }
                CorpusConfig::Synthetic { .. } => c.synth_spec(0).expect("synthetic").validate()?,
            }
        }
        if let CorpusConfig::Synthetic { lexicon_overlap, .. } = &self.parent {
            if *lexicon_overlap > 0.0 {
                return fail("the parent corpus cannot inherit a lexicon".into());
            }
        }
        if let CorpusConfig::Synthetic {
            lexicon_overlap,
            lexicon_size,
            ..
        } = &self.child
        {
            if *lexicon_overlap > 0.0 {
                match &self.parent {
                    CorpusConfig::Synthetic { lexicon_size: p, .. } if p == lexicon_size => {}
                    _ => {
                        return fail("child lexicon_overlap needs a synthetic parent with the same lexicon_size".into())
                    }
                }
            }
        }
        if let Some(f) = self.length_filter {
            if f.min_words > f.max_words {
                return fail("length_filter needs min_words <= max_words".into());
            }
        }
        if self.split.dev == 0 || self.split.test == 0 {
            return fail("split.dev and split.test must be positive".into());
        }
        self.model.with_vocab(self.vocab.size).validate()?;
        self.schedule.validate()?;
        self.batching.validate()?;
        self.beam.validate()?;
        if self.batching.max_len > self.model.max_positions {
            return fail(format!(
                "batching.max_len {} exceeds model.max_positions {}",
                self.batching.max_len, self.model.max_positions
            ));
        }
        let t = &self.training;
        if t.eval_every == 0 || t.parent_steps == 0 || t.child_steps == 0 {
            return fail("training step budgets and eval_every must be positive".into());
        }
        if self.matrix.replicates == 0 {
            return fail("matrix.replicates must be at least 1".into());
        }
        let mut names = std::collections::HashSet::new();
        for v in &self.matrix.variants {
            if !names.insert(&v.name) || v.name.is_empty() || v.name.contains(['\t', '\n', '/']) {
                return fail(format!("variant name {:?} is empty, reserved or repeated", v.name));
            }
            if !(v.parent_fraction > 0.0 && v.parent_fraction <= 1.0) {
                return fail(format!("variant {}: parent_fraction must lie in (0, 1]", v.name));
            }
            if v.child_pairs == Some(0) {
                return fail(format!("variant {}: child_pairs must be positive", v.name));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form of the configuration.
    pub fn digest(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serialises"))
    }

    /// Variants to run; an empty list means one full-size default variant.
    pub fn variants(&self) -> Vec<Variant> {
        if self.matrix.variants.is_empty() {
            vec![Variant {
                name: "main".into(),
                child_pairs: None,
                parent_fraction: 1.0,
                reset_schedule: None,
            }]
        } else {
            self.matrix.variants.clone()
        }
    }

    /// Parent step at which a child branches off for `fraction`, rounded to
    /// the evaluation grid so the parent's curve is unaffected.
    pub fn branch_step(&self, fraction: f64) -> u64 {
        let e = self.training.eval_every;
        let grid = (fraction * self.training.parent_steps as f64 / e as f64).round() as u64 * e;
        grid.clamp(e.min(self.training.parent_steps), self.training.parent_steps)
    }
}
