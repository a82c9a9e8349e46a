//! Parallel corpora: loading, length filtering, subsampling, statistics, and
//! a synthetic generator standing in for real language pairs.

mod synth;

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::word_count;

pub use synth::{synthesize_pair, Lexicon, SynthSpec};

/// Source and target language codes, stored upper case.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "(String, String)", into = "(String, String)")]
pub struct LanguagePair {
    source: String,
    target: String,
}

impl LanguagePair {
    pub fn new(source: &str, target: &str) -> Result<Self> {
        let norm = |s: &str| {
            let s = s.trim();
            if s.is_empty() || s.contains(char::is_whitespace) {
                Err(Error::Config(format!("invalid language code {s:?}")))
            } else {
                Ok(s.to_uppercase())
            }
        };
        Ok(Self {
            source: norm(source)?,
            target: norm(target)?,
        })
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn target(&self) -> &str {
        &self.target
    }

    /// The opposite translation direction.
    pub fn reversed(&self) -> Self {
        Self {
            source: self.target.clone(),
            target: self.source.clone(),
        }
    }
}

impl fmt::Display for LanguagePair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}→{}", self.source, self.target)
    }
}

impl TryFrom<(String, String)> for LanguagePair {
    type Error = Error;
    fn try_from((s, t): (String, String)) -> Result<Self> {
        Self::new(&s, &t)
    }
}

impl From<LanguagePair> for (String, String) {
    fn from(p: LanguagePair) -> Self {
        (p.source, p.target)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentencePair {
    pub source: String,
    pub target: String,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParallelCorpus {
    name: String,
    pair: LanguagePair,
    pairs: Vec<SentencePair>,
}

impl ParallelCorpus {
    pub fn from_pairs<S: AsRef<str>, T: AsRef<str>>(name: &str, pair: LanguagePair, lines: &[(S, T)]) -> Result<Self> {
        let pairs = lines
            .iter()
            .enumerate()
            .map(|(index, (s, t))| {
                let (s, t) = (s.as_ref(), t.as_ref());
                if s.contains(['\n', '\r']) || t.contains(['\n', '\r']) {
                    return Err(Error::Input(format!("sentence pair {index} contains a line break")));
                }
                Ok(SentencePair {
                    source: s.to_string(),
                    target: t.to_string(),
                    index,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            name: name.to_string(),
            pair,
            pairs,
        })
    }

    fn reindexed(name: &str, pair: LanguagePair, pairs: impl IntoIterator<Item = SentencePair>) -> Self {
        let pairs = pairs
            .into_iter()
            .enumerate()
            .map(|(index, p)| SentencePair { index, ..p })
            .collect();
        Self {
            name: name.to_string(),
            pair,
            pairs,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn pair(&self) -> &LanguagePair {
        &self.pair
    }

    pub fn pairs(&self) -> &[SentencePair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn sources(&self) -> impl Iterator<Item = &str> {
        self.pairs.iter().map(|p| p.source.as_str())
    }

    pub fn targets(&self) -> impl Iterator<Item = &str> {
        self.pairs.iter().map(|p| p.target.as_str())
    }

    pub fn with_name(mut self, name: &str) -> Self {
        self.name = name.to_string();
        self
    }

    /// Same sentences, opposite direction.
    pub fn reversed(&self) -> Self {
        let pairs = self.pairs.iter().map(|p| SentencePair {
            source: p.target.clone(),
            target: p.source.clone(),
            index: p.index,
        });
        Self::reindexed(&self.name, self.pair.reversed(), pairs)
    }

    /// First `n` pairs (or all of them).
    pub fn head(&self, n: usize) -> Self {
        Self::reindexed(&self.name, self.pair.clone(), self.pairs.iter().take(n).cloned())
    }

    /// Pairs `[start, end)`, reindexed from zero.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start > end || end > self.len() {
            return Err(Error::Size {
                requested: end,
                available: self.len(),
            });
        }
        Ok(Self::reindexed(
            &self.name,
            self.pair.clone(),
            self.pairs[start..end].iter().cloned(),
        ))
    }

    /// Writes the two sides as aligned line files.
    pub fn save(&self, source_path: &Path, target_path: &Path) -> Result<()> {
        let join = |it: &mut dyn Iterator<Item = &str>| {
            let mut s = String::new();
            for line in it {
                s.push_str(line);
                s.push('\n');
            }
            s
        };
        std::fs::write(source_path, join(&mut self.sources())).map_err(|e| Error::io(source_path, e))?;
        std::fs::write(target_path, join(&mut self.targets())).map_err(|e| Error::io(target_path, e))
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    if bytes.is_empty() {
        return Ok(out);
    }
    let body = bytes.strip_suffix(b"\n").unwrap_or(&bytes);
    for (i, raw) in body.split(|&b| b == b'\n').enumerate() {
        let raw = raw.strip_suffix(b"\r").unwrap_or(raw);
        let line = std::str::from_utf8(raw).map_err(|_| Error::Decode {
            path: path.to_path_buf(),
            line: i + 1,
        })?;
        out.push(line.to_string());
    }
    Ok(out)
}

/// Reads two line-aligned UTF-8 files.
pub fn load_parallel(source_path: &Path, target_path: &Path, pair: LanguagePair) -> Result<ParallelCorpus> {
    let src = read_lines(source_path)?;
    let tgt = read_lines(target_path)?;
    if src.len() != tgt.len() {
        return Err(Error::Alignment {
            what: format!("{} / {}", source_path.display(), target_path.display()),
            left: src.len(),
            right: tgt.len(),
        });
    }
    let name = source_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let lines: Vec<(String, String)> = src.into_iter().zip(tgt).collect();
    ParallelCorpus::from_pairs(&name, pair, &lines)
}

/// Keeps pairs whose sides both have between `min_words` and `max_words`
/// whitespace words, inclusive.
pub fn filter_by_length(corpus: &ParallelCorpus, min_words: usize, max_words: usize) -> ParallelCorpus {
    let ok = |s: &str| (min_words..=max_words).contains(&word_count(s));
    ParallelCorpus::reindexed(
        &corpus.name,
        corpus.pair.clone(),
        corpus.pairs.iter().filter(|p| ok(&p.source) && ok(&p.target)).cloned(),
    )
}

/// Uniform sample of `n` pairs without replacement, in corpus order.
pub fn subsample(corpus: &ParallelCorpus, n: usize, seed: u64) -> Result<ParallelCorpus> {
    if n > corpus.len() {
        return Err(Error::Size {
            requested: n,
            available: corpus.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = index::sample(&mut rng, corpus.len(), n).into_vec();
    keep.sort_unstable();
    Ok(ParallelCorpus::reindexed(
        &corpus.name,
        corpus.pair.clone(),
        keep.into_iter().map(|i| corpus.pairs[i].clone()),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CorpusStats {
    pub sentence_pairs: usize,
    pub words_source: usize,
    pub words_target: usize,
    pub vocab_source: usize,
    pub vocab_target: usize,
}

pub fn stats(corpus: &ParallelCorpus) -> CorpusStats {
    let mut vs = HashSet::new();
    let mut vt = HashSet::new();
    let mut st = CorpusStats {
        sentence_pairs: corpus.len(),
        ..Default::default()
    };
    for p in &corpus.pairs {
        for w in p.source.split_whitespace() {
            st.words_source += 1;
            vs.insert(w);
        }
        for w in p.target.split_whitespace() {
            st.words_target += 1;
            vt.insert(w);
        }
    }
    st.vocab_source = vs.len();
    st.vocab_target = vt.len();
    st
}

#[cfg(test)]
mod tests;
