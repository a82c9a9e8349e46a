//! Toy translation task: Zipf-distributed word identifiers translated word
//! for word through a bijective lexicon, with optional local reordering.

use std::fmt::Write as _;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{LanguagePair, ParallelCorpus};
use crate::error::{Error, Result};
use crate::util::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    pub n_pairs: usize,
    pub lexicon_size: usize,
    pub zipf_exponent: f64,
    pub min_len: usize,
    pub max_len: usize,
    /// Fraction of mapping entries copied from the base lexicon.
    #[serde(default)]
    pub lexicon_overlap: f64,
    #[serde(default)]
    pub swap_prob: f64,
    pub source_prefix: String,
    pub target_prefix: String,
    pub pair: LanguagePair,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("synthetic spec: {m}")));
        if self.min_len < 1 || self.max_len < self.min_len {
            return fail("need 1 <= min_len <= max_len");
        }
        if self.lexicon_size == 0 {
            return fail("lexicon_size must be positive");
        }
        if !(self.zipf_exponent > 0.0 && self.zipf_exponent.is_finite()) {
            return fail("zipf_exponent must be positive");
        }
        if !(0.0..=1.0).contains(&self.lexicon_overlap) || !(0.0..=1.0).contains(&self.swap_prob) {
            return fail("lexicon_overlap and swap_prob must lie in [0, 1]");
        }
        for p in [&self.source_prefix, &self.target_prefix] {
            if p.is_empty() || !p.chars().all(|c| c.is_ascii_alphabetic()) {
                return fail("word prefixes must be non-empty ASCII letters");
            }
        }
        Ok(())
    }
}

/// Bijection from source word index to target word index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lexicon {
    pub source_prefix: String,
    pub target_prefix: String,
    mapping: Vec<usize>,
}

fn word(prefix: &str, i: usize) -> String {
    format!("{prefix}{i:04}")
}

impl Lexicon {
    pub fn new(source_prefix: &str, target_prefix: &str, mapping: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; mapping.len()];
        for &m in &mapping {
            if m >= mapping.len() || std::mem::replace(&mut seen[m], true) {
                return Err(Error::Data("lexicon mapping is not a permutation".into()));
            }
        }
        Ok(Self {
            source_prefix: source_prefix.into(),
            target_prefix: target_prefix.into(),
            mapping,
        })
    }

    pub fn size(&self) -> usize {
        self.mapping.len()
    }

    pub fn mapping(&self) -> &[usize] {
        &self.mapping
    }

    /// Number of source indices mapped identically in both lexica.
    pub fn shared_entries(&self, other: &Lexicon) -> usize {
        self.mapping.iter().zip(&other.mapping).filter(|(a, b)| a == b).count()
    }

    pub fn source_word(&self, i: usize) -> String {
        word(&self.source_prefix, i)
    }

    pub fn target_word(&self, i: usize) -> String {
        word(&self.target_prefix, self.mapping[i])
    }

    /// Translates one source word; `None` for words outside the lexicon.
    pub fn translate(&self, w: &str) -> Option<String> {
        let digits = w.strip_prefix(self.source_prefix.as_str())?;
        if !digits.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
        let i: usize = digits.parse().ok()?;
        (i < self.size() && word(&self.source_prefix, i) == w).then(|| self.target_word(i))
    }

    /// `key=value` text: a three-line header, then one `source=target` line
    /// per entry.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "source_prefix={}", self.source_prefix).unwrap();
        writeln!(s, "target_prefix={}", self.target_prefix).unwrap();
        writeln!(s, "size={}", self.size()).unwrap();
        for i in 0..self.size() {
            writeln!(s, "{}={}", self.source_word(i), self.target_word(i)).unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut kv = text.lines().map(|l| {
            l.split_once('=')
                .ok_or_else(|| Error::Data(format!("bad lexicon line {l:?}")))
        });
        let mut header = |key: &str| -> Result<String> {
            match kv.next() {
                Some(Ok((k, v))) if k == key => Ok(v.to_string()),
                _ => Err(Error::Data(format!("lexicon header is missing {key}"))),
            }
        };
        let sp = header("source_prefix")?;
        let tp = header("target_prefix")?;
        let size: usize = header("size")?
            .parse()
            .map_err(|_| Error::Data("bad lexicon size".into()))?;
        let mut mapping = Vec::with_capacity(size);
        for (i, entry) in kv.enumerate() {
            let (s, t) = entry?;
            let idx = |w: &str, p: &str| w.strip_prefix(p).and_then(|d| d.parse::<usize>().ok());
            if idx(s, &sp) != Some(i) {
                return Err(Error::Data(format!("lexicon entry {i} has source {s}")));
            }
            mapping.push(idx(t, &tp).ok_or_else(|| Error::Data(format!("bad target word {t}")))?);
        }
        if mapping.len() != size {
            return Err(Error::Data(format!(
                "lexicon declares {size} entries, has {}",
                mapping.len()
            )));
        }
        Self::new(&sp, &tp, mapping)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

fn build_lexicon(spec: &SynthSpec, base: Option<&Lexicon>, rng: &mut ChaCha8Rng) -> Result<Lexicon> {
    let n = spec.lexicon_size;
    let mapping = match base {
        None => {
            let mut m: Vec<usize> = (0..n).collect();
            m.shuffle(rng);
            m
        }
        Some(b) => {
            if b.size() != n {
                return Err(Error::Config(format!(
                    "base lexicon has {} entries, spec asks for {n}",
                    b.size()
                )));
            }
            let inherit = (spec.lexicon_overlap * n as f64).round() as usize;
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(rng);
            let (_, rest) = order.split_at(inherit);
            let mut m = b.mapping.clone();
            // cyclic shift over the non-inherited entries: every one of them
            // receives another entry's base target, so none survives
            // (a single leftover entry cannot be moved)
            for (j, &i) in rest.iter().enumerate() {
                m[i] = b.mapping[rest[(j + 1) % rest.len()]];
            }
            m
        }
    };
    Lexicon::new(&spec.source_prefix, &spec.target_prefix, mapping)
}

/// Generates a corpus and the lexicon that produced it.
pub fn synthesize_pair(spec: &SynthSpec, base_lexicon: Option<&Lexicon>) -> Result<(ParallelCorpus, Lexicon)> {
    spec.validate()?;
    if spec.lexicon_overlap > 0.0 && base_lexicon.is_none() {
        return Err(Error::Config("lexicon_overlap > 0 needs a base lexicon".into()));
    }
    let mut lex_rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 1));
    let lexicon = build_lexicon(spec, base_lexicon, &mut lex_rng)?;

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 2));
    let weights = (1..=spec.lexicon_size).map(|r| (r as f64).powf(-spec.zipf_exponent));
    let zipf = WeightedIndex::new(weights).map_err(|e| Error::Config(format!("zipf weights: {e}")))?;
    let mut lines = Vec::with_capacity(spec.n_pairs);
    for _ in 0..spec.n_pairs {
        let len = rng.gen_range(spec.min_len..=spec.max_len);
        let src: Vec<usize> = (0..len).map(|_| zipf.sample(&mut rng)).collect();
        let mut tgt: Vec<String> = src.iter().map(|&i| lexicon.target_word(i)).collect();
        for i in 0..tgt.len().saturating_sub(1) {
            if rng.gen::<f64>() < spec.swap_prob {
                tgt.swap(i, i + 1);
            }
        }
        let src: Vec<String> = src.iter().map(|&i| lexicon.source_word(i)).collect();
        lines.push((src.join(" "), tgt.join(" ")));
    }
    let name = format!("synth-{}-{}", spec.source_prefix, spec.target_prefix);
    Ok((ParallelCorpus::from_pairs(&name, spec.pair.clone(), &lines)?, lexicon))
}
