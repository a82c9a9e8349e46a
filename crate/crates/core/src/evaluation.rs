//! Corpus BLEU with its n-gram decomposition, chrF, and paired bootstrap
//! resampling.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::derive_seed;

const MAX_ORDER: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuReport {
    pub bleu: f64,
    /// Clipped precisions for n = 1..4, as percentages.
    pub precisions: [f64; MAX_ORDER],
    pub brevity_penalty: f64,
    pub candidate_len: usize,
    pub reference_len: usize,
    pub case_sensitive: bool,
}

pub(crate) fn tokens(line: &str, case_sensitive: bool) -> Vec<String> {
    line.split_whitespace()
        .map(|w| {
            if case_sensitive {
                w.to_string()
            } else {
                w.to_lowercase()
            }
        })
        .collect()
}

fn ngram_counts<T: Eq + std::hash::Hash + Clone>(toks: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if toks.len() >= n {
        for g in toks.windows(n) {
            *m.entry(g).or_default() += 1;
        }
    }
    m
}

/// Clipped matches and candidate n-gram totals for one sentence.
fn sentence_stats(cand: &[String], reference: &[String]) -> [(usize, usize); MAX_ORDER] {
    let mut out = [(0, 0); MAX_ORDER];
    for (k, slot) in out.iter_mut().enumerate() {
        let n = k + 1;
        let c = ngram_counts(cand, n);
        let r = ngram_counts(reference, n);
        let matched = c.iter().map(|(g, &cnt)| cnt.min(*r.get(g).unwrap_or(&0))).sum();
        *slot = (matched, cand.len().saturating_sub(n - 1));
    }
    out
}

fn check_aligned(what: &str, cands: usize, refs: usize) -> Result<()> {
    if cands != refs {
        return Err(Error::Alignment {
            what: what.into(),
            left: cands,
            right: refs,
        });
    }
    if cands == 0 {
        return Err(Error::UndefinedMetric(format!("{what} on an empty candidate set")));
    }
    Ok(())
}

fn brevity_penalty(c: usize, r: usize) -> f64 {
    if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    }
}

/// Corpus-level BLEU, unsmoothed.
pub fn bleu<C: AsRef<str>, R: AsRef<str>>(
    candidates: &[C],
    references: &[R],
    case_sensitive: bool,
) -> Result<BleuReport> {
    check_aligned("BLEU", candidates.len(), references.len())?;
    let mut totals = [(0usize, 0usize); MAX_ORDER];
    let (mut c, mut r) = (0, 0);
    for (cand, reference) in candidates.iter().zip(references) {
        let ct = tokens(cand.as_ref(), case_sensitive);
        let rt = tokens(reference.as_ref(), case_sensitive);
        c += ct.len();
        r += rt.len();
        for (t, s) in totals.iter_mut().zip(sentence_stats(&ct, &rt)) {
            t.0 += s.0;
            t.1 += s.1;
        }
    }
    if c == 0 {
        return Err(Error::UndefinedMetric("BLEU of an empty candidate corpus".into()));
    }
    let precisions = totals.map(|(m, t)| if t == 0 { 0.0 } else { 100.0 * m as f64 / t as f64 });
    let brevity_penalty = brevity_penalty(c, r);
    let bleu = if precisions.iter().all(|&p| p > 0.0) {
        let log_mean = precisions.iter().map(|p| (p / 100.0).ln()).sum::<f64>() / MAX_ORDER as f64;
        100.0 * brevity_penalty * log_mean.exp()
    } else {
        0.0
    };
    Ok(BleuReport {
        bleu,
        precisions,
        brevity_penalty,
        candidate_len: c,
        reference_len: r,
        case_sensitive,
    })
}

/// Sentence BLEU with add-one smoothing on orders 2..4; 0 for an empty
/// candidate or no unigram match.
pub fn sentence_bleu(candidate: &str, reference: &str, case_sensitive: bool) -> f64 {
    let ct = tokens(candidate, case_sensitive);
    let rt = tokens(reference, case_sensitive);
    if ct.is_empty() {
        return 0.0;
    }
    let stats = sentence_stats(&ct, &rt);
    if stats[0].0 == 0 {
        return 0.0;
    }
    let log_mean = stats
        .iter()
        .enumerate()
        .map(|(k, &(m, t))| {
            if k == 0 {
                (m as f64 / t as f64).ln()
            } else {
                ((m + 1) as f64 / (t + 1) as f64).ln()
            }
        })
        .sum::<f64>()
        / MAX_ORDER as f64;
    100.0 * brevity_penalty(ct.len(), rt.len()) * log_mean.exp()
}

/// chrF of a single segment, as a percentage.
pub fn sentence_chrf(candidate: &str, reference: &str, beta: f64, max_n: usize) -> f64 {
    let c: Vec<char> = candidate.chars().filter(|ch| !ch.is_whitespace()).collect();
    let r: Vec<char> = reference.chars().filter(|ch| !ch.is_whitespace()).collect();
    let (mut p_sum, mut r_sum, mut orders) = (0.0, 0.0, 0);
    for n in 1..=max_n {
        let cc = ngram_counts(&c, n);
        let rc = ngram_counts(&r, n);
        let (ct, rt) = (c.len().saturating_sub(n - 1), r.len().saturating_sub(n - 1));
        if ct == 0 && rt == 0 {
            continue;
        }
        orders += 1;
        if ct == 0 || rt == 0 {
            continue;
        }
        let m: usize = cc.iter().map(|(g, &k)| k.min(*rc.get(g).unwrap_or(&0))).sum();
        p_sum += m as f64 / ct as f64;
        r_sum += m as f64 / rt as f64;
    }
    if orders == 0 {
        return 100.0;
    }
    let (p, rec) = (p_sum / orders as f64, r_sum / orders as f64);
    let b2 = beta * beta;
    if p + rec == 0.0 {
        0.0
    } else {
        100.0 * (1.0 + b2) * p * rec / (b2 * p + rec)
    }
}

/// Segment-averaged chrF.
pub fn chrf<C: AsRef<str>, R: AsRef<str>>(candidates: &[C], references: &[R], beta: f64, max_n: usize) -> Result<f64> {
    check_aligned("chrF", candidates.len(), references.len())?;
    if max_n == 0 || beta.is_nan() || beta <= 0.0 {
        return Err(Error::Config("chrF needs max_n >= 1 and beta > 0".into()));
    }
    let total: f64 = candidates
        .iter()
        .zip(references)
        .map(|(c, r)| sentence_chrf(c.as_ref(), r.as_ref(), beta, max_n))
        .sum();
    Ok(total / candidates.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Bleu,
    Chrf,
}

impl std::str::FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bleu" => Ok(Metric::Bleu),
            "chrf" => Ok(Metric::Chrf),
            _ => Err(Error::Config(format!("unknown metric {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificanceReport {
    pub metric: Metric,
    pub samples: usize,
    pub wins_a: usize,
    pub wins_b: usize,
    pub ties: usize,
    /// Mean per-sentence score of each system on the full set.
    pub score_a: f64,
    pub score_b: f64,
    pub p_value: f64,
    pub level: f64,
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapOptions {
    pub metric: Metric,
    pub samples: usize,
    pub level: f64,
    pub seed: u64,
    pub case_sensitive: bool,
}

impl Default for BootstrapOptions {
    fn default() -> Self {
        Self {
            metric: Metric::Bleu,
            samples: 1000,
            level: 0.05,
            seed: 0,
            case_sensitive: false,
        }
    }
}

/// Paired bootstrap over sentences. Each resample compares the mean
/// per-sentence score of both systems; the p-value is the fraction of
/// resamples in which the system that wins on the full set does not win.
pub fn paired_bootstrap<S: AsRef<str> + Sync>(
    candidates_a: &[S],
    candidates_b: &[S],
    references: &[S],
    opts: &BootstrapOptions,
) -> Result<SignificanceReport> {
    check_aligned("bootstrap system A", candidates_a.len(), references.len())?;
    check_aligned("bootstrap system B", candidates_b.len(), references.len())?;
    if opts.samples == 0 {
        return Err(Error::Config("bootstrap needs at least one sample".into()));
    }
    let score = |c: &S, r: &S| match opts.metric {
        Metric::Bleu => sentence_bleu(c.as_ref(), r.as_ref(), opts.case_sensitive),
        Metric::Chrf => sentence_chrf(c.as_ref(), r.as_ref(), 3.0, 6),
    };
    let sa: Vec<f64> = candidates_a.iter().zip(references).map(|(c, r)| score(c, r)).collect();
    let sb: Vec<f64> = candidates_b.iter().zip(references).map(|(c, r)| score(c, r)).collect();
    let n = references.len();
    let outcomes: Vec<std::cmp::Ordering> = (0..opts.samples)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, k as u64));
            let (mut a, mut b) = (0.0, 0.0);
            for _ in 0..n {
                let i = rng.gen_range(0..n);
                a += sa[i];
                b += sb[i];
            }
            a.partial_cmp(&b).unwrap_or(std::cmp::Ordering::Equal)
        })
        .collect();
    use std::cmp::Ordering::*;
    let wins_a = outcomes.iter().filter(|&&o| o == Greater).count();
    let wins_b = outcomes.iter().filter(|&&o| o == Less).count();
    let ties = opts.samples - wins_a - wins_b;
    let score_a = sa.iter().sum::<f64>() / n as f64;
    let score_b = sb.iter().sum::<f64>() / n as f64;
    let winner_wins = match score_a.partial_cmp(&score_b) {
        Some(Greater) => Some(wins_a),
        Some(Less) => Some(wins_b),
        _ => None,
    };
    let p_value = match winner_wins {
        Some(w) => (opts.samples - w) as f64 / opts.samples as f64,
        None => 1.0,
    };
    Ok(SignificanceReport {
        metric: opts.metric,
        samples: opts.samples,
        wins_a,
        wins_b,
        ties,
        score_a,
        score_b,
        p_value,
        level: opts.level,
        significant: p_value < opts.level,
    })
}

/// Report rendering formats shared by the command-line front end.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReportFormat {
    #[default]
    Tsv,
    JsonText,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tsv" => Ok(ReportFormat::Tsv),
            "json-text" => Ok(ReportFormat::JsonText),
            _ => Err(Error::Config(format!(
                "unknown format {s:?}; expected tsv or json-text"
            ))),
        }
    }
}

pub const BLEU_TSV_HEADER: &str = "system\tlength\tp1\tp2\tp3\tp4\tbp\tbleu\treference_length";

/// One TSV row in the layout of a BLEU-components table.
pub fn bleu_tsv_row(system: &str, r: &BleuReport) -> String {
    let p = r.precisions;
    format!(
        "{system}\t{}\t{:.1}\t{:.1}\t{:.1}\t{:.1}\t{:.3}\t{:.2}\t{}",
        r.candidate_len, p[0], p[1], p[2], p[3], r.brevity_penalty, r.bleu, r.reference_len
    )
}

pub fn render_bleu(system: &str, r: &BleuReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Tsv => format!("{BLEU_TSV_HEADER}\n{}\n", bleu_tsv_row(system, r)),
        ReportFormat::JsonText => {
            let mut v = serde_json::to_value(r).expect("report serialises");
            v["system"] = system.into();
            format!("{}\n", serde_json::to_string_pretty(&v).expect("report serialises"))
        }
    }
}

pub fn render_significance(r: &SignificanceReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Tsv => format!(
            "metric\tsamples\twins_a\twins_b\tties\tscore_a\tscore_b\tp_value\tlevel\tsignificant\n\
             {:?}\t{}\t{}\t{}\t{}\t{:.4}\t{:.4}\t{:.4}\t{}\t{}\n",
            r.metric, r.samples, r.wins_a, r.wins_b, r.ties, r.score_a, r.score_b, r.p_value, r.level, r.significant
        )
        .to_lowercase(),
        ReportFormat::JsonText => format!("{}\n", serde_json::to_string_pretty(r).expect("report serialises")),
    }
}
