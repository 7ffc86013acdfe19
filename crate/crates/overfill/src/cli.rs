//! The `overfill` command line. Each subcommand reads and writes a fixed set
//! of files under the run directory:
//!
//! ```text
//! runs/<name>/
//!   config.json          resolved configuration (gen-data)
//!   data/train.jsonl     training examples (gen-data)
//!   data/eval.jsonl      held-out examples (gen-data)
//!   checkpoints/*.ovfl   base, pruned, overfill, standalone
//!   scores.json          channel importance (calibrate)
//!   selection.json       kept channels (prune)
//!   logs.csv             training losses, one phase per fit
//!   eval.csv             exact-match accuracy (eval)
//!   bench.csv            wall-clock means (bench)
//!   roofline.csv         analytic estimates (roofline)
//! ```

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use overfill_core::corpus::{answer_text, format_prompt, ChatExample, TaskKind, Tokenizer};
use overfill_core::engine::{generate, Mode};
use overfill_core::model::{ModelConfig, Weights};
use overfill_core::perfmodel::{param_count, roofline_estimate};
use overfill_core::pruner::{compute_pruned_dims, slice_model, ChannelSelection, ImportanceScores, PruneConfig};
use serde::Serialize;

use crate::config::{parse_json, read_json, write_json, RunConfig};
use crate::dataset::{self, DatasetHeader};
use crate::error::{Error, Result};
use crate::pipeline::{self, derive_seed, stream};
use crate::{bench, checkpoint, csvlog};

#[derive(Parser, Debug)]
#[command(name = "overfill", version, about = "Full-model prefill, pruned-model decode")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Run directory; defaults to runs/<name>.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate training and held-out datasets.
    GenData(Common),
    /// Fit the full model on the training set.
    TrainBase(Common),
    /// Score channels on calibration windows.
    Calibrate(Common),
    /// Keep the top channels and slice the full model.
    Prune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        p_hidden: Option<f64>,
        #[arg(long)]
        p_inter: Option<f64>,
    },
    /// Train the pruned decoder behind the frozen full-model prefill.
    TrainOverfill {
        #[command(flatten)]
        common: Common,
        /// Train the pruned model on its own instead.
        #[arg(long)]
        standalone: bool,
    },
    /// Answer one prompt.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value = "")]
        system: String,
        #[arg(long, default_value = "overfill")]
        mode: Mode,
        /// Decoder checkpoint name; defaults to overfill, else pruned.
        #[arg(long)]
        decoder: Option<String>,
    },
    /// Exact-match accuracy of every trained system on the held-out set.
    Eval(Common),
    /// Parameter count of a model or run configuration.
    ParamCount {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        p_hidden: Option<f64>,
        #[arg(long)]
        p_inter: Option<f64>,
        #[arg(long)]
        round_to: Option<usize>,
    },
    /// Wall-clock prefill and decode timings.
    Bench(Common),
    /// Analytic latency estimates over the bench sweep.
    Roofline(Common),
}

/// Parses `args` and runs the subcommand, writing human output to `out`.
/// Returns the process exit status.
pub fn main_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            // --help and --version are not mistakes
            if e.use_stderr() {
                let _ = write!(err, "{}", e.render());
                return 1;
            }
            let _ = write!(out, "{}", e.render());
            return 0;
        }
    };
    match run(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

pub struct Run {
    pub cfg: RunConfig,
    pub dir: PathBuf,
}

impl Run {
    pub fn open(c: &Common) -> Result<Self> {
        let mut cfg = RunConfig::load(&c.config)?;
        if let Some(s) = c.seed {
            cfg.seed = s;
        }
        let dir = c.out.clone().unwrap_or_else(|| Path::new("runs").join(&cfg.name));
        Ok(Self { cfg, dir })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.dir.join("checkpoints").join(format!("{name}.ovfl"))
    }

    pub fn load(&self, name: &str) -> Result<Weights> {
        checkpoint::load(&self.checkpoint(name), &self.cfg.model)
    }

    fn examples(&self, split: &str) -> Result<Vec<ChatExample>> {
        Ok(dataset::read(&self.path(&format!("data/{split}.jsonl")))?.1)
    }
}

fn override_ratios(prune: &mut PruneConfig, p_hidden: Option<f64>, p_inter: Option<f64>) -> Result<()> {
    if let Some(p) = p_hidden {
        prune.p_hidden = p;
    }
    if let Some(p) = p_inter {
        prune.p_intermediate = p;
    }
    prune.validate().map_err(|e| Error::Usage(e.to_string()))
}

#[derive(Serialize)]
struct EvalCsvRow<'a> {
    system: &'a str,
    mode: &'a str,
    task: TaskKind,
    correct: usize,
    total: usize,
    accuracy: f64,
}

pub fn run(cmd: Command, out: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::GenData(c) => {
            let run = Run::open(&c)?;
            run.cfg.save(&run.path("config.json"))?;
            let (train, eval) = pipeline::gen_data(&run.cfg)?;
            let kinds = run.cfg.data.kinds.clone();
            for (split, stream, ex) in [("train", stream::TRAIN_DATA, &train), ("eval", stream::EVAL_DATA, &eval)] {
                let header = DatasetHeader {
                    kind: kinds.clone(),
                    seed: derive_seed(run.cfg.seed, stream),
                    count: ex.len(),
                };
                dataset::write(&run.path(&format!("data/{split}.jsonl")), &header, ex)?;
            }
            say(out, format_args!("{} training and {} held-out examples", train.len(), eval.len()))
        }
        Command::TrainBase(c) => {
            let run = Run::open(&c)?;
            let (w, log) = pipeline::train_base(&run.cfg, &run.examples("train")?)?;
            checkpoint::save(&w, &run.checkpoint("base"))?;
            csvlog::write_training_log(&run.path("logs.csv"), "base", &log)?;
            final_loss(out, "base", &log)
        }
        Command::Calibrate(c) => {
            let run = Run::open(&c)?;
            let scores = pipeline::calibrate(&run.cfg, &run.load("base")?, &run.examples("train")?)?;
            write_json(&run.path("scores.json"), &scores)?;
            say(out, format_args!("scored {} hidden channels", scores.hidden.len()))
        }
        Command::Prune {
            common,
            p_hidden,
            p_inter,
        } => {
            let mut run = Run::open(&common)?;
            override_ratios(&mut run.cfg.prune, p_hidden, p_inter)?;
            let base = run.load("base")?;
            let scores: ImportanceScores = read_json(&run.path("scores.json"))?;
            let (pruned, sel) = pipeline::prune_from_scores(&run.cfg, &base, &scores)?;
            write_json(&run.path("selection.json"), &sel)?;
            checkpoint::save(&pruned, &run.checkpoint("pruned"))?;
            say(
                out,
                format_args!(
                    "kept hidden {}/{}, intermediate {}/{}; {} parameters",
                    pruned.config.hidden_dim,
                    base.config.hidden_dim,
                    pruned.config.intermediate_dim,
                    base.config.intermediate_dim,
                    pruned.param_count()
                ),
            )
        }
        Command::TrainOverfill { common, standalone } => {
            let run = Run::open(&common)?;
            let base = run.load("base")?;
            let pruned = load_pruned(&run, &base)?;
            let (w, log) = pipeline::train_decoder(&run.cfg, &base, &pruned, &run.examples("train")?, !standalone)?;
            let name = if standalone { "standalone" } else { "overfill" };
            checkpoint::save(&w, &run.checkpoint(name))?;
            csvlog::write_training_log(&run.path("logs.csv"), name, &log)?;
            final_loss(out, name, &log)
        }
        Command::Generate {
            common,
            prompt,
            system,
            mode,
            decoder,
        } => {
            let run = Run::open(&common)?;
            let full = run.load("base")?;
            let dec = match decoder {
                Some(name) => run.load(&name)?,
                None if run.checkpoint("overfill").exists() => run.load("overfill")?,
                None => load_pruned(&run, &full)?,
            };
            let tok = Tokenizer;
            let ids = generate(mode, &full, &dec, &format_prompt(&system, &prompt, &tok), &run.cfg.gen)?;
            say(out, format_args!("{}", answer_text(&ids, &tok)))
        }
        Command::Eval(c) => {
            let run = Run::open(&c)?;
            let eval = run.examples("eval")?;
            let full = run.load("base")?;
            let pool = pipeline::thread_pool()?;
            let mut systems: Vec<(&str, Mode, Weights)> = vec![("full", Mode::Full, full.clone())];
            for (name, mode) in [("overfill", Mode::Overfill), ("standalone", Mode::Pruned), ("pruned", Mode::Pruned)] {
                if run.checkpoint(name).exists() {
                    systems.push((name, mode, run.load(name)?));
                }
            }
            let mut rows = Vec::new();
            for (name, mode, w) in &systems {
                for r in pipeline::evaluate(*mode, &full, w, &eval, &run.cfg.gen, &pool)? {
                    say(
                        out,
                        format_args!("{name:<10} {:<9} {:<8} {}/{} = {:.3}", r.mode.name(), r.task, r.correct, r.total, r.accuracy),
                    )?;
                    rows.push(EvalCsvRow {
                        system: name,
                        mode: r.mode.name(),
                        task: r.task,
                        correct: r.correct,
                        total: r.total,
                        accuracy: r.accuracy,
                    });
                }
            }
            csvlog::write_rows(&run.path("eval.csv"), rows)
        }
        Command::ParamCount {
            common,
            p_hidden,
            p_inter,
            round_to,
        } => {
            let text = std::fs::read_to_string(&common.config).map_err(|e| Error::io(&common.config, e))?;
            // a bare model geometry, or a full run configuration
            let (model, mut prune) = match parse_json::<ModelConfig>(&text, &common.config) {
                Ok(m) => (m, PruneConfig::default()),
                Err(_) => {
                    let cfg: RunConfig = parse_json(&text, &common.config)?;
                    cfg.validate()?;
                    (cfg.model, cfg.prune)
                }
            };
            model.validate()?;
            say(out, format_args!("{}", param_count(&model)))?;
            if p_hidden.is_some() || p_inter.is_some() || round_to.is_some() {
                override_ratios(&mut prune, p_hidden, p_inter)?;
                if round_to.is_some() {
                    prune.hardware_round_to = round_to;
                }
                let (d, i) = compute_pruned_dims(model.hidden_dim, model.intermediate_dim, &prune)?;
                let pruned = ModelConfig {
                    hidden_dim: d,
                    intermediate_dim: i,
                    ..model
                };
                say(out, format_args!("pruned {d} {i} {}", param_count(&pruned)))?;
            }
            Ok(())
        }
        Command::Bench(c) => {
            let run = Run::open(&c)?;
            let full = run.load("base")?;
            let pruned = load_pruned(&run, &full)?;
            let b = &run.cfg.bench;
            let mut reports = Vec::new();
            for &m in &b.prompt_lens {
                for &n in &b.gen_lens {
                    for &batch in &b.batches {
                        for w in bench::bench_wallclock(&full, &pruned, m, n, batch, &b.modes, b.repeats, b.warmups)? {
                            let r = &w.report;
                            say(
                                out,
                                format_args!(
                                    "{:<8} M={m} N={n} batch={batch} prefill {:.4e}±{:.1e} decode {:.4e}±{:.1e}",
                                    r.mode.name(),
                                    r.prefill_s,
                                    w.prefill_sd,
                                    r.decode_s,
                                    w.decode_sd
                                ),
                            )?;
                            reports.push(w.report);
                        }
                    }
                }
            }
            csvlog::write_costs(&run.path("bench.csv"), &reports)
        }
        Command::Roofline(c) => {
            let run = Run::open(&c)?;
            let full = &run.cfg.model;
            let (d, i) = compute_pruned_dims(full.hidden_dim, full.intermediate_dim, &run.cfg.prune)?;
            let pruned = ModelConfig {
                hidden_dim: d,
                intermediate_dim: i,
                ..full.clone()
            };
            let b = &run.cfg.bench;
            let mut reports = Vec::new();
            for &m in &b.prompt_lens {
                for &n in &b.gen_lens {
                    for &batch in &b.batches {
                        for &mode in &b.modes {
                            reports.push(roofline_estimate(&b.hardware, full, &pruned, m, n, batch, mode)?);
                        }
                    }
                }
            }
            for r in &reports {
                say(
                    out,
                    format_args!("{:<8} M={} N={} batch={} total {:.4e}s", r.mode.name(), r.m, r.n, r.batch, r.total_s),
                )?;
            }
            csvlog::write_costs(&run.path("roofline.csv"), &reports)
        }
    }
}

/// The sliced model saved by `prune`, checked against `selection.json`.
fn load_pruned(run: &Run, full: &Weights) -> Result<Weights> {
    let w = run.load("pruned")?;
    let sel: ChannelSelection = read_json(&run.path("selection.json"))?;
    sel.validate(&full.config)?;
    let (_, cfg) = slice_model(full, &sel, &full.config)?;
    if cfg != w.config {
        return Err(Error::format(
            &run.checkpoint("pruned"),
            "checkpoint dimensions disagree with selection.json",
        ));
    }
    Ok(w)
}

fn say(out: &mut dyn Write, args: std::fmt::Arguments) -> Result<()> {
    writeln!(out, "{args}").map_err(|e| Error::io(Path::new("<stdout>"), e))
}

fn final_loss(out: &mut dyn Write, phase: &str, log: &[overfill_core::trainer::LogRow]) -> Result<()> {
    match log.last() {
        Some(r) => say(out, format_args!("{phase}: {} steps, final loss {:.4}", r.step, r.loss)),
        None => say(out, format_args!("{phase}: no steps")),
    }
}
