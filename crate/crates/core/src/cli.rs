//! Command-line front end. Each verb works inside one experiment directory,
//! `<out>/<name>-<first 12 hex of the config digest>/`, and records what it
//! wrote in that directory's `manifest.json`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::analysis::{annotate_tokens, learning_curve_report, merge_coverage, vocab_overlap, DEFAULT_THRESHOLD};
use crate::decoding::{translate_lines, BeamConfig};
use crate::error::{Error, Result};
use crate::evaluation::{
    bleu, chrf, paired_bootstrap, render_bleu, render_significance, BootstrapOptions, Metric, ReportFormat,
};
use crate::experiment::{run_matrix, ChildRun, Experiment, ExperimentConfig, Seeds};
use crate::subword::{coverage, SubwordVocabulary};
use crate::training::{load_checkpoint, save_checkpoint, DevRecord, TrainState};
use crate::util::sha256_hex;

/// Environment variable holding the worker-thread count.
pub const WORKERS_ENV: &str = "DESKNMT_WORKERS";

#[derive(Debug, Parser)]
#[command(name = "desknmt", version, about = "Parent/child transfer for desk-scale NMT")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Root under which experiment directories are created.
    #[arg(long, global = true, default_value = "runs")]
    pub out: PathBuf,
    /// Replace the four configured seeds with ones derived from this value.
    #[arg(long, global = true)]
    pub seed_override: Option<u64>,
    /// Report format for stdout.
    #[arg(long, global = true, default_value = "tsv")]
    pub format: ReportFormat,
}

#[derive(Debug, Args)]
pub struct ConfigArg {
    #[arg(long)]
    pub config: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Learn the shared subword vocabulary.
    Vocab(ConfigArg),
    /// Train the parent model.
    TrainParent(ConfigArg),
    /// Continue the parent on the child corpus.
    Transfer {
        #[command(flatten)]
        cfg: ConfigArg,
        /// Parent checkpoint; defaults to the experiment's parent.ckpt.
        #[arg(long)]
        parent: Option<PathBuf>,
        /// Restart the learning-rate schedule at the switch (ablation).
        #[arg(long)]
        reset_schedule: bool,
    },
    /// Train on the child corpus alone.
    Baseline(ConfigArg),
    /// Beam-decode a file of source sentences.
    Decode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, default_value_t = BeamConfig::default().beam_size)]
        beam_size: usize,
        #[arg(long, default_value_t = BeamConfig::default().alpha)]
        alpha: f64,
        #[arg(long, default_value_t = BeamConfig::default().max_output_len)]
        max_output_len: usize,
    },
    /// Score a candidate file against a reference file.
    Evaluate {
        #[arg(long)]
        candidate: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long, default_value = "bleu")]
        metric: Metric,
        #[arg(long)]
        case_sensitive: bool,
    },
    /// Paired bootstrap resampling between two systems.
    Significance {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long, default_value = "bleu")]
        metric: Metric,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[arg(long, default_value_t = 0.05)]
        level: f64,
        /// Resampling seed; defaults to the config's bootstrap seed, else 0.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Vocabulary-overlap breakdown (with --config) or rb/b/r/- token
    /// annotation (with --improved, --baseline, --reference).
    Analyze {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: u64,
        #[arg(long)]
        improved: Option<PathBuf>,
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        case_sensitive: bool,
    },
    /// Run every variant and replicate; write the summary table.
    RunMatrix(ConfigArg),
    /// Check the golden fixtures under a directory.
    VerifyFixtures {
        #[arg(long)]
        dir: PathBuf,
    },
}

/// Sizes the global rayon pool from [`WORKERS_ENV`] when set.
pub fn configure_workers() -> Result<()> {
    let Ok(v) = std::env::var(WORKERS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("{WORKERS_ENV} must be a positive integer, got {v:?}")))?;
    // a second call in the same process keeps the first pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

#[derive(Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub experiment: String,
    pub config_digest: String,
    pub seeds: Option<Seeds>,
    /// Artifact name → SHA-256, per command.
    pub commands: BTreeMap<String, BTreeMap<String, String>>,
}

/// An experiment directory bound to one configuration.
pub struct Workspace {
    pub dir: PathBuf,
    pub config: ExperimentConfig,
    written: BTreeMap<String, String>,
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(|l| l.trim_end_matches('\r').to_string()).collect())
}

impl Workspace {
    pub fn open(out: &Path, config_path: &Path, seed_override: Option<u64>) -> Result<Self> {
        let mut config = ExperimentConfig::load(config_path)?;
        if let Some(s) = seed_override {
            config.seeds = Seeds::from_single(s);
        }
        let dir = out.join(format!("{}-{}", config.name, &config.digest()[..12]));
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let ws = Self {
            dir,
            config,
            written: BTreeMap::new(),
        };
        write(&ws.path("config.toml"), ws.config.to_toml().as_bytes())?;
        Ok(ws)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn put(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        write(&self.path(name), bytes)?;
        self.written.insert(name.to_string(), sha256_hex(bytes));
        Ok(())
    }

    pub fn put_checkpoint(&mut self, name: &str, state: &TrainState) -> Result<()> {
        let path = self.path(name);
        save_checkpoint(state, &path)?;
        self.written.insert(name.to_string(), sha256_hex(&state.to_bytes()));
        Ok(())
    }

    /// Records this command's artifacts in `manifest.json`.
    pub fn finish(self, command: &str) -> Result<PathBuf> {
        let path = self.path("manifest.json");
        let mut m: Manifest = match std::fs::read(&path) {
            Ok(b) => serde_json::from_slice(&b).unwrap_or_default(),
            Err(_) => Manifest::default(),
        };
        m.experiment = self.config.name.clone();
        m.config_digest = self.config.digest();
        m.seeds = Some(self.config.seeds);
        m.commands.insert(command.to_string(), self.written);
        write(
            &path,
            format!("{}\n", serde_json::to_string_pretty(&m).expect("manifest")).as_bytes(),
        )?;
        Ok(self.dir)
    }
}

fn curve_tsv(name: &str, curve: &[DevRecord], offset: u64) -> Result<String> {
    if curve.is_empty() {
        return Ok(format!("{}\n", crate::analysis::CURVE_TSV_HEADER));
    }
    let mut m = BTreeMap::new();
    m.insert(
        name.to_string(),
        curve.iter().map(|r| (r.step - offset, r.dev_bleu)).collect(),
    );
    learning_curve_report(&m)
}

fn with_best(state: &TrainState, model: &crate::model::TransformerModel) -> TrainState {
    let mut s = state.clone();
    s.model = model.clone();
    s
}

fn progress(msg: &str) {
    eprintln!("{msg}");
}

fn save_child(ws: &mut Workspace, exp: &Experiment, prefix: &str, run: &ChildRun, offset: u64) -> Result<String> {
    ws.put_checkpoint(&format!("{prefix}.ckpt"), &run.state)?;
    ws.put_checkpoint(&format!("{prefix}-best.ckpt"), &with_best(&run.state, &run.best_model))?;
    ws.put(
        &format!("{prefix}-curve.tsv"),
        curve_tsv(prefix, &run.curve, offset)?.as_bytes(),
    )?;
    let out = exp.test_outputs(&run.best_model)?;
    ws.put(&format!("{prefix}-test.out"), (out.join("\n") + "\n").as_bytes())?;
    let refs: Vec<&str> = exp.data.child_test.targets().collect();
    let report = bleu(&out, &refs, false)?;
    Ok(format!(
        "{prefix}\tbest_dev_bleu\t{:.2}\tbest_step\t{}\n{}",
        run.best_record.dev_bleu,
        run.best_record.step - offset,
        render_bleu(&format!("{prefix}-test"), &report, ReportFormat::Tsv)
    ))
}

fn check_vocab(state: &TrainState, vocab: &SubwordVocabulary) -> Result<()> {
    if state.vocab_digest != vocab.digest() {
        return Err(Error::Transfer(format!(
            "checkpoint vocabulary {} differs from the configured vocabulary {}",
            &state.vocab_digest[..12.min(state.vocab_digest.len())],
            &vocab.digest()[..12]
        )));
    }
    Ok(())
}

fn write_data(ws: &mut Workspace, exp: &Experiment) -> Result<()> {
    ws.put("vocab.txt", exp.vocab().to_text().as_bytes())?;
    for (name, c) in [("child-test", &exp.data.child_test), ("child-dev", &exp.data.child_dev)] {
        let src: Vec<&str> = c.sources().collect();
        let tgt: Vec<&str> = c.targets().collect();
        ws.put(&format!("{name}.src"), (src.join("\n") + "\n").as_bytes())?;
        ws.put(&format!("{name}.ref"), (tgt.join("\n") + "\n").as_bytes())?;
    }
    Ok(())
}

/// Runs one command; returns what it prints on stdout.
pub fn run(cli: &Cli) -> Result<String> {
    let fmt = cli.format;
    let open = |c: &ConfigArg| Workspace::open(&cli.out, &c.config, cli.seed_override);
    match &cli.command {
        Command::Vocab(c) => {
            let mut ws = open(c)?;
            let exp = Experiment::prepare(&ws.config, ws.config.seeds)?;
            write_data(&mut ws, &exp)?;
            let v = exp.vocab();
            let line = format!("vocab\t{}\t{}\n", v.len(), v.digest());
            let dir = ws.finish("vocab")?;
            Ok(format!("{line}dir\t{}\n", dir.display()))
        }
        Command::TrainParent(c) => {
            let mut ws = open(c)?;
            let exp = Experiment::prepare(&ws.config, ws.config.seeds)?;
            write_data(&mut ws, &exp)?;
            progress(&format!(
                "training parent for {} steps",
                ws.config.training.parent_steps
            ));
            let run = exp.train_parent(&[])?;
            ws.put_checkpoint("parent.ckpt", &run.state)?;
            ws.put_checkpoint("parent-best.ckpt", &with_best(&run.state, &run.best_model))?;
            ws.put("parent-curve.tsv", curve_tsv("parent", &run.curve, 0)?.as_bytes())?;
            let only = exp.test_bleu(&run.best_model)?;
            let out = format!(
                "parent\tbest_dev_bleu\t{:.2}\tbest_step\t{}\nparent_only\tchild_test_bleu\t{only:.2}\n",
                run.best_record.dev_bleu, run.best_record.step
            );
            let dir = ws.finish("train-parent")?;
            Ok(format!("{out}dir\t{}\n", dir.display()))
        }
        Command::Transfer {
            cfg,
            parent,
            reset_schedule,
        } => {
            let mut ws = open(cfg)?;
            let path = parent.clone().unwrap_or_else(|| ws.path("parent.ckpt"));
            let state = load_checkpoint(&path)?;
            let exp = Experiment::prepare(&ws.config, ws.config.seeds)?;
            check_vocab(&state, exp.vocab())?;
            let reset = *reset_schedule || ws.config.training.reset_schedule;
            progress(&format!(
                "transfer from step {} (reset schedule: {reset})",
                state.global_step()
            ));
            let offset = state.global_step();
            let run = exp.transfer(&state, None, reset)?;
            let name = if reset { "child-reset" } else { "child" };
            let out = save_child(&mut ws, &exp, name, &run, offset)?;
            let dir = ws.finish(if reset { "transfer-reset" } else { "transfer" })?;
            Ok(format!("{out}dir\t{}\n", dir.display()))
        }
        Command::Baseline(c) => {
            let mut ws = open(c)?;
            let exp = Experiment::prepare(&ws.config, ws.config.seeds)?;
            write_data(&mut ws, &exp)?;
            let run = exp.baseline(None)?;
            let out = save_child(&mut ws, &exp, "baseline", &run, 0)?;
            let dir = ws.finish("baseline")?;
            Ok(format!("{out}dir\t{}\n", dir.display()))
        }
        Command::Decode {
            checkpoint,
            vocab,
            input,
            output,
            beam_size,
            alpha,
            max_output_len,
        } => {
            let state = load_checkpoint(checkpoint)?;
            let vocab = SubwordVocabulary::load(vocab)?;
            check_vocab(&state, &vocab)?;
            let beam = BeamConfig {
                beam_size: *beam_size,
                alpha: *alpha,
                max_output_len: *max_output_len,
            };
            beam.validate()?;
            let lines = read_lines(input)?;
            let refs: Vec<&str> = lines.iter().map(String::as_str).collect();
            let out = translate_lines(&state.model, &vocab, &refs, &beam)?;
            let text = if out.is_empty() {
                String::new()
            } else {
                out.join("\n") + "\n"
            };
            match output {
                Some(p) => {
                    write(p, text.as_bytes())?;
                    Ok(String::new())
                }
                None => Ok(text),
            }
        }
        Command::Evaluate {
            candidate,
            reference,
            metric,
            case_sensitive,
        } => {
            let c = read_lines(candidate)?;
            let r = read_lines(reference)?;
            let name = candidate
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            match metric {
                Metric::Bleu => Ok(render_bleu(&name, &bleu(&c, &r, *case_sensitive)?, fmt)),
                Metric::Chrf => {
                    let score = chrf(&c, &r, 3.0, 6)?;
                    Ok(match fmt {
                        ReportFormat::Tsv => format!("system\tchrf3\n{name}\t{score:.2}\n"),
                        ReportFormat::JsonText => format!(
                            "{}\n",
                            serde_json::to_string_pretty(&serde_json::json!({"system": name, "chrf3": score}))
                                .expect("json")
                        ),
                    })
                }
            }
        }
        Command::Significance {
            a,
            b,
            reference,
            metric,
            samples,
            level,
            seed,
            config,
        } => {
            let seed = match (seed, config) {
                (Some(s), _) => *s,
                (None, Some(c)) => {
                    let cfg = ExperimentConfig::load(c)?;
                    cli.seed_override.map(Seeds::from_single).unwrap_or(cfg.seeds).bootstrap
                }
                (None, None) => 0,
            };
            let opts = BootstrapOptions {
                metric: *metric,
                samples: *samples,
                level: *level,
                seed,
                case_sensitive: false,
            };
            let report = paired_bootstrap(&read_lines(a)?, &read_lines(b)?, &read_lines(reference)?, &opts)?;
            Ok(render_significance(&report, fmt))
        }
        Command::Analyze {
            config,
            threshold,
            improved,
            baseline,
            reference,
            case_sensitive,
        } => match (config, improved, baseline, reference) {
            (Some(c), None, None, None) => {
                let mut ws = open(&ConfigArg { config: c.clone() })?;
                let exp = Experiment::prepare(&ws.config, ws.config.seeds)?;
                let (p, ch) = (&exp.data.parent_train, &exp.data.child_train);
                let counts = merge_coverage([&coverage(exp.vocab(), p), &coverage(exp.vocab(), ch)])?;
                let pl = [p.pair().source(), p.pair().target()];
                let cl = [ch.pair().source(), ch.pair().target()];
                let o = vocab_overlap(exp.vocab().len(), &counts, *threshold, &pl, &cl)?;
                let text = o.render(fmt);
                ws.put("overlap.tsv", o.render(ReportFormat::Tsv).as_bytes())?;
                ws.finish("analyze")?;
                Ok(text)
            }
            (None, Some(i), Some(b), Some(r)) => {
                let (counts, _) = annotate_tokens(&read_lines(i)?, &read_lines(b)?, &read_lines(r)?, *case_sensitive)?;
                Ok(counts.render(fmt))
            }
            _ => Err(Error::Config(
                "analyze takes either --config, or all of --improved, --baseline and --reference".into(),
            )),
        },
        Command::RunMatrix(c) => {
            let mut ws = open(c)?;
            let report = run_matrix(&ws.config, &progress)?;
            ws.put("rows.tsv", report.rows_tsv().as_bytes())?;
            ws.put("summary.tsv", report.summary_tsv().as_bytes())?;
            ws.put("curves.tsv", learning_curve_report(&report.curves())?.as_bytes())?;
            let text = match fmt {
                ReportFormat::Tsv => report.summary_tsv(),
                ReportFormat::JsonText => {
                    format!("{}\n", serde_json::to_string_pretty(&report.medians()).expect("json"))
                }
            };
            let dir = ws.finish("run-matrix")?;
            Ok(format!("{text}dir\t{}\n", dir.display()))
        }
        Command::VerifyFixtures { dir } => {
            let report = crate::fixtures::verify_fixtures(dir)?;
            let text = report.render();
            if report.all_passed() {
                Ok(text)
            } else {
                Err(Error::Fixture(text))
            }
        }
    }
}
