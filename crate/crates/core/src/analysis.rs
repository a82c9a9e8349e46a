//! Vocabulary-overlap breakdown, rb/b/r/– token annotation, and
//! learning-curve tables.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{tokens, ReportFormat};

/// Default frequency threshold below which a symbol counts as unseen in a
/// language.
pub const DEFAULT_THRESHOLD: u64 = 10;

/// Languages in which a symbol was observed at least `threshold` times.
pub type Signature = BTreeSet<String>;

/// Partition of a vocabulary by the set of languages each symbol is seen in.
///
/// Symbols seen in no language form their own (empty-signature) class, so
/// the classes always partition the whole vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapBreakdown {
    pub languages: Vec<String>,
    pub threshold: u64,
    pub parent_langs: BTreeSet<String>,
    pub child_langs: BTreeSet<String>,
    pub total_vocab: u64,
    /// Symbol count per signature, the empty signature included.
    pub class_counts: BTreeMap<Signature, u64>,
}

fn lang_set(what: &str, langs: &[&str], known: &[String]) -> Result<BTreeSet<String>> {
    if langs.is_empty() {
        return Err(Error::Config(format!("{what} language set is empty")));
    }
    langs
        .iter()
        .map(|l| {
            let l = l.to_ascii_uppercase();
            if known.contains(&l) {
                Ok(l)
            } else {
                Err(Error::Config(format!(
                    "{what} language {l} has no symbol counts (known: {})",
                    known.join(",")
                )))
            }
        })
        .collect()
}

/// Sums per-language symbol counts from several coverage maps (e.g. the
/// parent and child corpora, which share a language).
pub fn merge_coverage<'a>(
    maps: impl IntoIterator<Item = &'a BTreeMap<String, Vec<u64>>>,
) -> Result<BTreeMap<String, Vec<u64>>> {
    let mut out: BTreeMap<String, Vec<u64>> = BTreeMap::new();
    for m in maps {
        for (lang, counts) in m {
            let slot = out.entry(lang.clone()).or_insert_with(|| vec![0; counts.len()]);
            if slot.len() != counts.len() {
                return Err(Error::Shape(format!(
                    "coverage for {lang} has {} symbols, expected {}",
                    counts.len(),
                    slot.len()
                )));
            }
            for (a, b) in slot.iter_mut().zip(counts) {
                *a += b;
            }
        }
    }
    Ok(out)
}

/// Classifies every vocabulary symbol by the languages where its count
/// reaches `threshold`.
pub fn vocab_overlap(
    vocab_size: usize,
    per_language_counts: &BTreeMap<String, Vec<u64>>,
    threshold: u64,
    parent_langs: &[&str],
    child_langs: &[&str],
) -> Result<OverlapBreakdown> {
    let languages: Vec<String> = per_language_counts.keys().map(|l| l.to_ascii_uppercase()).collect();
    if languages.len() > 32 {
        return Err(Error::Config("at most 32 languages".into()));
    }
    let parent = lang_set("parent", parent_langs, &languages)?;
    let child = lang_set("child", child_langs, &languages)?;
    for (lang, counts) in per_language_counts {
        if counts.len() != vocab_size {
            return Err(Error::Shape(format!(
                "counts for {lang} cover {} symbols, vocabulary has {vocab_size}",
                counts.len()
            )));
        }
    }
    let columns: Vec<&Vec<u64>> = per_language_counts.values().collect();
    let mut masks: HashMap<u32, u64> = HashMap::new();
    for id in 0..vocab_size {
        let mask = columns
            .iter()
            .enumerate()
            .filter(|(_, c)| c[id] >= threshold)
            .fold(0u32, |m, (k, _)| m | (1 << k));
        *masks.entry(mask).or_default() += 1;
    }
    let class_counts = masks
        .into_iter()
        .map(|(mask, n)| {
            let sig = languages
                .iter()
                .enumerate()
                .filter(|(k, _)| mask & (1 << k) != 0)
                .map(|(_, l)| l.clone())
                .collect();
            (sig, n)
        })
        .collect();
    Ok(OverlapBreakdown {
        languages,
        threshold,
        parent_langs: parent,
        child_langs: child,
        total_vocab: vocab_size as u64,
        class_counts,
    })
}

impl OverlapBreakdown {
    /// Rebuilds a breakdown from published class percentages with two
    /// decimals. Each hundredth of a percent becomes one unit out of 10000;
    /// whatever the listed classes leave over is the unobserved class.
    pub fn from_published(
        languages: &[&str],
        classes: &[(&[&str], f64)],
        parent_langs: &[&str],
        child_langs: &[&str],
    ) -> Result<Self> {
        const UNITS: u64 = 10_000;
        let languages: Vec<String> = languages.iter().map(|l| l.to_ascii_uppercase()).collect();
        let parent = lang_set("parent", parent_langs, &languages)?;
        let child = lang_set("child", child_langs, &languages)?;
        let mut class_counts = BTreeMap::new();
        let mut used = 0;
        for (sig, pct) in classes {
            let units = (pct * 100.0).round();
            if !(0.0..=UNITS as f64).contains(&units) || ((pct * 100.0) - units).abs() > 1e-6 {
                return Err(Error::Input(format!("{pct} is not a percentage with two decimals")));
            }
            let sig: Signature = lang_set("class", sig, &languages)?;
            if class_counts.insert(sig.clone(), units as u64).is_some() {
                return Err(Error::Input(format!("class {sig:?} listed twice")));
            }
            used += units as u64;
        }
        if used > UNITS {
            return Err(Error::Input(format!(
                "classes sum to {:.2}% > 100%",
                used as f64 / 100.0
            )));
        }
        *class_counts.entry(Signature::new()).or_default() += UNITS - used;
        Ok(Self {
            languages,
            threshold: DEFAULT_THRESHOLD,
            parent_langs: parent,
            child_langs: child,
            total_vocab: UNITS,
            class_counts,
        })
    }

    pub fn percentage(&self, count: u64) -> f64 {
        count as f64 * 100.0 / self.total_vocab as f64
    }

    pub fn class_count(&self, signature: &[&str]) -> u64 {
        let sig: Signature = signature.iter().map(|l| l.to_ascii_uppercase()).collect();
        self.class_counts.get(&sig).copied().unwrap_or(0)
    }

    /// Percentage per observed signature (the unobserved class excluded).
    pub fn class_percentages(&self) -> BTreeMap<Signature, f64> {
        self.class_counts
            .iter()
            .filter(|(s, _)| !s.is_empty())
            .map(|(s, &n)| (s.clone(), self.percentage(n)))
            .collect()
    }

    pub fn unobserved_percentage(&self) -> f64 {
        self.percentage(self.class_count(&[]))
    }

    fn is_from_parent(&self, sig: &Signature) -> bool {
        !sig.is_disjoint(&self.parent_langs) && !sig.is_disjoint(&self.child_langs)
    }

    /// Symbols seen in some parent language and in some child language.
    pub fn from_parent_count(&self) -> u64 {
        self.class_counts
            .iter()
            .filter(|(s, _)| self.is_from_parent(s))
            .map(|(_, &n)| n)
            .sum()
    }

    pub fn from_parent(&self) -> f64 {
        self.percentage(self.from_parent_count())
    }

    /// Signatures in display order: by size, then by language order.
    fn display_order(&self) -> Vec<Signature> {
        let pos = |l: &String| self.languages.iter().position(|x| x == l).unwrap_or(usize::MAX);
        let mut all: Vec<Signature> = (1u32..(1 << self.languages.len()))
            .map(|mask| {
                self.languages
                    .iter()
                    .enumerate()
                    .filter(|(k, _)| mask & (1 << k) != 0)
                    .map(|(_, l)| l.clone())
                    .collect()
            })
            .collect();
        all.sort_by_key(|s: &Signature| (s.len(), s.iter().map(pos).collect::<Vec<_>>()));
        all
    }

    /// One row per signature with a mark column per language, then the
    /// unobserved class, the total, and the from-parent summary.
    pub fn render(&self, format: ReportFormat) -> String {
        if format == ReportFormat::JsonText {
            let classes: Vec<_> = self
                .display_order()
                .into_iter()
                .chain(std::iter::once(Signature::new()))
                .map(|s| {
                    let n = self.class_counts.get(&s).copied().unwrap_or(0);
                    serde_json::json!({"languages": s, "count": n, "percent": self.percentage(n)})
                })
                .collect();
            let v = serde_json::json!({
                "languages": self.languages,
                "threshold": self.threshold,
                "parent_langs": self.parent_langs,
                "child_langs": self.child_langs,
                "total_vocab": self.total_vocab,
                "classes": classes,
                "from_parent": self.from_parent(),
            });
            return format!("{}\n", serde_json::to_string_pretty(&v).expect("json"));
        }
        let blanks = "\t".repeat(self.languages.len() - 1);
        let mut out = format!("{}\tcount\tpercent\n", self.languages.join("\t"));
        for sig in self.display_order() {
            let n = self.class_counts.get(&sig).copied().unwrap_or(0);
            let marks: Vec<&str> = self
                .languages
                .iter()
                .map(|l| if sig.contains(l) { "x" } else { "-" })
                .collect();
            let _ = writeln!(out, "{}\t{n}\t{:.2}", marks.join("\t"), self.percentage(n));
        }
        let unobserved = self.class_count(&[]);
        let _ = writeln!(
            out,
            "unobserved{blanks}\t{unobserved}\t{:.2}",
            self.percentage(unobserved)
        );
        let _ = writeln!(out, "total{blanks}\t{}\t100.00", self.total_vocab);
        let _ = writeln!(
            out,
            "from_parent{blanks}\t{}\t{:.2}",
            self.from_parent_count(),
            self.from_parent()
        );
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TokenLabel {
    /// In the baseline output and confirmed by the reference.
    #[serde(rename = "rb")]
    Rb,
    /// In the baseline output only.
    #[serde(rename = "b")]
    B,
    /// Confirmed by the reference only.
    #[serde(rename = "r")]
    R,
    /// In neither.
    #[serde(rename = "-")]
    Dash,
}

impl TokenLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            TokenLabel::Rb => "rb",
            TokenLabel::B => "b",
            TokenLabel::R => "r",
            TokenLabel::Dash => "-",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenAnnotation {
    pub rb: u64,
    pub b: u64,
    pub r: u64,
    pub dash: u64,
    pub total: u64,
}

impl TokenAnnotation {
    fn add(&mut self, label: TokenLabel) {
        match label {
            TokenLabel::Rb => self.rb += 1,
            TokenLabel::B => self.b += 1,
            TokenLabel::R => self.r += 1,
            TokenLabel::Dash => self.dash += 1,
        }
        self.total += 1;
    }

    pub fn count(&self, label: TokenLabel) -> u64 {
        match label {
            TokenLabel::Rb => self.rb,
            TokenLabel::B => self.b,
            TokenLabel::R => self.r,
            TokenLabel::Dash => self.dash,
        }
    }

    /// Label, count, percentage rows, then the total.
    pub fn render(&self, format: ReportFormat) -> String {
        if format == ReportFormat::JsonText {
            return format!("{}\n", serde_json::to_string_pretty(self).expect("json"));
        }
        let pct = |n: u64| {
            if self.total == 0 {
                0.0
            } else {
                n as f64 * 100.0 / self.total as f64
            }
        };
        let mut out = String::from("label\tcount\tpercent\n");
        for l in [TokenLabel::Rb, TokenLabel::Dash, TokenLabel::B, TokenLabel::R] {
            let _ = writeln!(out, "{}\t{}\t{:.1}", l.as_str(), self.count(l), pct(self.count(l)));
        }
        let _ = writeln!(
            out,
            "total\t{}\t{:.1}",
            self.total,
            if self.total == 0 { 0.0 } else { 100.0 }
        );
        out
    }
}

/// Clipped multiset matching: each occurrence in `pool` is consumed at most once.
fn consume(pool: &mut HashMap<String, usize>, tok: &str) -> bool {
    match pool.get_mut(tok) {
        Some(n) if *n > 0 => {
            *n -= 1;
            true
        }
        _ => false,
    }
}

fn multiset(toks: Vec<String>) -> HashMap<String, usize> {
    let mut m = HashMap::new();
    for t in toks {
        *m.entry(t).or_default() += 1;
    }
    m
}

/// Labels every token of `improved` by whether it also occurs in the aligned
/// baseline output (b) and/or reference (r), consuming matches left to right.
pub fn annotate_tokens<S: AsRef<str>>(
    improved: &[S],
    baseline: &[S],
    reference: &[S],
    case_sensitive: bool,
) -> Result<(TokenAnnotation, Vec<Vec<TokenLabel>>)> {
    for (what, n) in [("baseline", baseline.len()), ("reference", reference.len())] {
        if n != improved.len() {
            return Err(Error::Alignment {
                what: format!("improved vs {what} lines"),
                left: improved.len(),
                right: n,
            });
        }
    }
    let mut counts = TokenAnnotation::default();
    let mut labels = Vec::with_capacity(improved.len());
    for ((imp, base), refr) in improved.iter().zip(baseline).zip(reference) {
        let mut b_pool = multiset(tokens(base.as_ref(), case_sensitive));
        let mut r_pool = multiset(tokens(refr.as_ref(), case_sensitive));
        let row: Vec<TokenLabel> = tokens(imp.as_ref(), case_sensitive)
            .iter()
            .map(|t| match (consume(&mut r_pool, t), consume(&mut b_pool, t)) {
                (true, true) => TokenLabel::Rb,
                (false, true) => TokenLabel::B,
                (true, false) => TokenLabel::R,
                (false, false) => TokenLabel::Dash,
            })
            .collect();
        for &l in &row {
            counts.add(l);
        }
        labels.push(row);
    }
    Ok((counts, labels))
}

pub const CURVE_TSV_HEADER: &str = "run\tstep\tbleu";

/// Long-format (run, step, BLEU) table, runs in name order, values at four
/// decimals. Each series must be non-empty with strictly increasing steps.
pub fn learning_curve_report(histories: &BTreeMap<String, Vec<(u64, f64)>>) -> Result<String> {
    let mut out = format!("{CURVE_TSV_HEADER}\n");
    for (run, series) in histories {
        if run.is_empty() || run.contains(['\t', '\n']) {
            return Err(Error::Input(format!("bad run name {run:?}")));
        }
        if series.is_empty() {
            return Err(Error::Input(format!("run {run} has no points")));
        }
        if let Some(w) = series.windows(2).find(|w| w[1].0 <= w[0].0) {
            return Err(Error::Input(format!(
                "run {run}: step {} follows step {}; series must be step-sorted",
                w[1].0, w[0].0
            )));
        }
        for (step, v) in series {
            let _ = writeln!(out, "{run}\t{step}\t{v:.4}");
        }
    }
    Ok(out)
}

/// Parses a table written by [`learning_curve_report`].
pub fn parse_learning_curve(text: &str) -> Result<BTreeMap<String, Vec<(u64, f64)>>> {
    let mut lines = text.lines();
    if lines.next() != Some(CURVE_TSV_HEADER) {
        return Err(Error::Input(format!(
            "learning curve must start with {CURVE_TSV_HEADER:?}"
        )));
    }
    let mut out: BTreeMap<String, Vec<(u64, f64)>> = BTreeMap::new();
    for (k, line) in lines.enumerate() {
        let bad = || Error::Input(format!("learning curve line {}: {line:?}", k + 2));
        let mut f = line.split('\t');
        let (Some(run), Some(step), Some(v), None) = (f.next(), f.next(), f.next(), f.next()) else {
            return Err(bad());
        };
        let step = step.parse().map_err(|_| bad())?;
        let v = v.parse().map_err(|_| bad())?;
        out.entry(run.to_string()).or_default().push((step, v));
    }
    Ok(out)
}
