//! Golden fixtures: one directory per case holding `inputs/`, `expected/`
//! and a `provenance.txt` sidecar.
//!
//! The sidecar is `key: value` lines with at least `kind`, `tolerance` and
//! `source` (`published`, `derived` or `trivial`). `expected/values.tsv`
//! lists `key<TAB>number`; every listed key must match the recomputed value
//! within the tolerance. Optional `inputs/params.txt` holds `key = value`
//! settings for the kind.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::analysis::{annotate_tokens, vocab_overlap, OverlapBreakdown};
use crate::error::{Error, Result};
use crate::evaluation::{bleu, chrf, paired_bootstrap, BootstrapOptions, Metric};

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub key: String,
    pub expected: f64,
    pub observed: Option<f64>,
    pub tolerance: f64,
}

impl Comparison {
    pub fn passed(&self) -> bool {
        self.observed
            .is_some_and(|o| (o - self.expected).abs() <= self.tolerance)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureResult {
    pub name: String,
    pub kind: String,
    pub source: String,
    pub comparisons: Vec<Comparison>,
    /// Set when the fixture could not be evaluated at all.
    pub error: Option<String>,
}

impl FixtureResult {
    pub fn passed(&self) -> bool {
        self.error.is_none() && !self.comparisons.is_empty() && self.comparisons.iter().all(Comparison::passed)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FixtureReport {
    pub fixtures: Vec<FixtureResult>,
}

impl FixtureReport {
    /// Vacuously true for an empty fixture set.
    pub fn all_passed(&self) -> bool {
        self.fixtures.iter().all(FixtureResult::passed)
    }

    pub fn render(&self) -> String {
        let mut out = String::from("fixture\tkind\tsource\tkey\texpected\tobserved\ttolerance\tstatus\n");
        for f in &self.fixtures {
            if let Some(e) = &f.error {
                let _ = writeln!(out, "{}\t{}\t{}\t-\t-\t-\t-\tFAIL: {e}", f.name, f.kind, f.source);
                continue;
            }
            for c in &f.comparisons {
                let obs = c.observed.map(|o| format!("{o}")).unwrap_or_else(|| "missing".into());
                let status = if c.passed() { "PASS" } else { "FAIL" };
                let _ = writeln!(
                    out,
                    "{}\t{}\t{}\t{}\t{}\t{obs}\t{:e}\t{status}",
                    f.name, f.kind, f.source, c.key, c.expected, c.tolerance
                );
            }
        }
        let passed = self.fixtures.iter().filter(|f| f.passed()).count();
        let _ = writeln!(out, "# {passed}/{} fixtures passed", self.fixtures.len());
        out
    }
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn key_values(text: &str, sep: char) -> BTreeMap<String, String> {
    text.lines()
        .filter(|l| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .filter_map(|l| l.split_once(sep))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}

fn lines(dir: &Path, name: &str) -> Result<Vec<String>> {
    Ok(read(&dir.join(name))?.lines().map(str::to_string).collect())
}

fn param<T: std::str::FromStr>(params: &BTreeMap<String, String>, key: &str, default: Option<T>) -> Result<T> {
    match params.get(key) {
        Some(v) => v
            .parse()
            .map_err(|_| Error::Input(format!("params.txt: bad value {v:?} for {key}"))),
        None => default.ok_or_else(|| Error::Input(format!("params.txt: missing {key}"))),
    }
}

fn list(params: &BTreeMap<String, String>, key: &str) -> Result<Vec<String>> {
    let v: String = param(params, key, None)?;
    Ok(v.split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect())
}

fn strs(v: &[String]) -> Vec<&str> {
    v.iter().map(String::as_str).collect()
}

/// Recomputes the observable values of one fixture kind.
fn observe(kind: &str, inputs: &Path, params: &BTreeMap<String, String>) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    match kind {
        "bleu" => {
            let cased: bool = param(params, "case_sensitive", Some(false))?;
            let r = bleu(
                &lines(inputs, "candidate.txt")?,
                &lines(inputs, "reference.txt")?,
                cased,
            )?;
            out.insert("bleu".into(), r.bleu);
            for (k, p) in r.precisions.iter().enumerate() {
                out.insert(format!("p{}", k + 1), *p);
            }
            out.insert("brevity_penalty".into(), r.brevity_penalty);
            out.insert("candidate_len".into(), r.candidate_len as f64);
            out.insert("reference_len".into(), r.reference_len as f64);
        }
        "chrf" => {
            let v = chrf(
                &lines(inputs, "candidate.txt")?,
                &lines(inputs, "reference.txt")?,
                3.0,
                6,
            )?;
            out.insert("chrf3".into(), v);
        }
        "annotation" => {
            let cased: bool = param(params, "case_sensitive", Some(false))?;
            let (c, _) = annotate_tokens(
                &lines(inputs, "improved.txt")?,
                &lines(inputs, "baseline.txt")?,
                &lines(inputs, "reference.txt")?,
                cased,
            )?;
            for (k, v) in [
                ("rb", c.rb),
                ("b", c.b),
                ("r", c.r),
                ("dash", c.dash),
                ("total", c.total),
            ] {
                out.insert(k.into(), v as f64);
            }
            let candidate_tokens: usize = lines(inputs, "improved.txt")?
                .iter()
                .map(|l| l.split_whitespace().count())
                .sum();
            out.insert("candidate_tokens".into(), candidate_tokens as f64);
        }
        "overlap-published" => {
            // classes.tsv: comma-separated signature <TAB> percentage
            let langs = list(params, "languages")?;
            let mut classes: Vec<(Vec<String>, f64)> = Vec::new();
            for l in read(&inputs.join("classes.tsv"))?
                .lines()
                .filter(|l| !l.trim().is_empty())
            {
                let (sig, pct) = l
                    .split_once('\t')
                    .ok_or_else(|| Error::Input(format!("classes.tsv: {l:?}")))?;
                let pct: f64 = pct
                    .trim()
                    .parse()
                    .map_err(|_| Error::Input(format!("classes.tsv: {l:?}")))?;
                classes.push((sig.split(',').map(|s| s.trim().to_string()).collect(), pct));
            }
            let sigs: Vec<Vec<&str>> = classes.iter().map(|(s, _)| strs(s)).collect();
            let pairs: Vec<(&[&str], f64)> = sigs.iter().zip(&classes).map(|(s, (_, p))| (&s[..], *p)).collect();
            let o = OverlapBreakdown::from_published(
                &strs(&langs),
                &pairs,
                &strs(&list(params, "parent")?),
                &strs(&list(params, "child")?),
            )?;
            out.insert("from_parent".into(), o.from_parent());
            out.insert("unobserved".into(), o.unobserved_percentage());
        }
        "overlap-counts" => {
            // counts.tsv: header of language codes, then one row per symbol
            let text = read(&inputs.join("counts.tsv"))?;
            let mut rows = text.lines().filter(|l| !l.trim().is_empty());
            let header: Vec<String> = rows.next().unwrap_or("").split('\t').map(str::to_string).collect();
            let mut cols: BTreeMap<String, Vec<u64>> = header.iter().map(|h| (h.clone(), Vec::new())).collect();
            let mut n = 0;
            for row in rows {
                let vals: Vec<&str> = row.split('\t').collect();
                if vals.len() != header.len() {
                    return Err(Error::Input(format!("counts.tsv row {row:?}")));
                }
                for (h, v) in header.iter().zip(vals) {
                    let v = v
                        .trim()
                        .parse()
                        .map_err(|_| Error::Input(format!("counts.tsv value {v:?}")))?;
                    cols.get_mut(h).expect("header").push(v);
                }
                n += 1;
            }
            let o = vocab_overlap(
                n,
                &cols,
                param(params, "threshold", None)?,
                &strs(&list(params, "parent")?),
                &strs(&list(params, "child")?),
            )?;
            out.insert("from_parent".into(), o.from_parent());
            out.insert("unobserved_count".into(), o.class_count(&[]) as f64);
            for (sig, c) in &o.class_counts {
                if !sig.is_empty() {
                    out.insert(
                        format!("class:{}", sig.iter().cloned().collect::<Vec<_>>().join(",")),
                        *c as f64,
                    );
                }
            }
        }
        "bootstrap" => {
            let opts = BootstrapOptions {
                metric: param(params, "metric", Some(Metric::Bleu))?,
                samples: param(params, "samples", Some(1000))?,
                level: param(params, "level", Some(0.05))?,
                seed: param(params, "seed", Some(0))?,
                case_sensitive: false,
            };
            let r = paired_bootstrap(
                &lines(inputs, "a.txt")?,
                &lines(inputs, "b.txt")?,
                &lines(inputs, "reference.txt")?,
                &opts,
            )?;
            out.insert("p_value".into(), r.p_value);
            out.insert("significant".into(), if r.significant { 1.0 } else { 0.0 });
            out.insert("samples".into(), r.samples as f64);
        }
        other => return Err(Error::Input(format!("unknown fixture kind {other:?}"))),
    }
    Ok(out)
}

fn verify_one(dir: &Path) -> FixtureResult {
    let name = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut res = FixtureResult {
        name,
        kind: "?".into(),
        source: "?".into(),
        comparisons: Vec::new(),
        error: None,
    };
    let run = |res: &mut FixtureResult| -> Result<()> {
        let prov_path = dir.join("provenance.txt");
        if !prov_path.is_file() {
            return Err(Error::Fixture("missing provenance.txt".into()));
        }
        let prov = key_values(&read(&prov_path)?, ':');
        let field = |k: &str| {
            prov.get(k)
                .cloned()
                .ok_or_else(|| Error::Fixture(format!("provenance.txt lacks {k}")))
        };
        res.kind = field("kind")?;
        res.source = field("source")?;
        if !["published", "derived", "trivial"].contains(&res.source.as_str()) {
            return Err(Error::Fixture(format!("unknown source {:?}", res.source)));
        }
        let tolerance: f64 = field("tolerance")?
            .parse()
            .map_err(|_| Error::Fixture("tolerance is not a number".into()))?;
        let inputs = dir.join("inputs");
        let params = match std::fs::read_to_string(inputs.join("params.txt")) {
            Ok(t) => key_values(&t, '='),
            Err(_) => BTreeMap::new(),
        };
        let expected = key_values(&read(&dir.join("expected").join("values.tsv"))?, '\t');
        if expected.is_empty() {
            return Err(Error::Fixture("expected/values.tsv is empty".into()));
        }
        let observed = observe(&res.kind, &inputs, &params)?;
        for (key, v) in expected {
            let expected = v
                .parse()
                .map_err(|_| Error::Fixture(format!("expected value {v:?} for {key}")))?;
            res.comparisons.push(Comparison {
                observed: observed.get(&key).copied(),
                key,
                expected,
                tolerance,
            });
        }
        Ok(())
    };
    if let Err(e) = run(&mut res) {
        res.error = Some(e.to_string());
    }
    res
}

/// Verifies every fixture directory directly under `root`, in name order.
pub fn verify_fixtures(root: &Path) -> Result<FixtureReport> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    Ok(FixtureReport {
        fixtures: dirs.iter().map(|d| verify_one(d)).collect(),
    })
}

/// The fixtures shipped with this crate.
pub fn bundled_fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}
