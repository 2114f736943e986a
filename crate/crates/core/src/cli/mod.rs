//! Command-line entry point. Each subcommand resolves a [`RunConfig`] from
//! an optional JSON file plus flags, validates it in full before any
//! compute, writes `resolved_config.json` into its output directory and
//! delegates to the module of the same name.
//!
//! Exit codes: 0 on success, 1 for invalid configuration or inputs, 2 for
//! failures during compute. Failures print one JSON line on stderr.

mod config;
mod saturation;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use indexmap::IndexMap;
use serde::Serialize;

pub use config::{desk_encoder, desk_train, write_resolved, ModelSpec, ResolvedConfig, RunConfig, RESOLVED_CONFIG};
pub use saturation::{equal_step_budget, saturation, subsample_annotations, write_saturation_csv, SaturationRow};

use crate::data::synthetic::generate;
use crate::data::{
    plan_annotation, read_jsonl, stratified_split, write_jsonl, Dataset, Split, TaskRecord, TextRecord, Topic,
};
use crate::encoder::{Pooling, Vocabulary};
use crate::error::{Error, Result};
use crate::explain::explain;
use crate::metrics::ScoreMatrix;
use crate::models::{Model, MODEL_NAMES};
use crate::serve::{
    backfill, benchmark, cost_per_million, serve_stdio, serve_tcp, write_benchmark_csv, BatchOptions, BenchRow,
    Predictor,
};
use crate::training::{evaluate, train, write_log_csv};
use crate::zeroshot::{make_topic_folds, read_folds, write_folds, zero_shot_eval};

#[derive(Debug, Parser)]
#[command(name = "text2topic", version, about = "Multi-label topic classification toolkit")]
pub struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random choice of the run.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic keyword corpus.
    Synth(SynthArgs),
    /// Split a dataset, train a model, report test metrics.
    Train(TrainArgs),
    /// Evaluate a checkpoint on labeled texts.
    Eval(EvalArgs),
    /// Train with held-out topics and evaluate on them.
    Zeroshot(ZeroShotArgs),
    /// Score texts against topics.
    Predict(PredictArgs),
    /// Answer JSON-lines requests on stdin or TCP.
    Serve(ServeArgs),
    /// Score a historical JSONL corpus with resumable progress.
    Backfill(BackfillArgs),
    /// Measure throughput and cost per batch size and concurrency.
    Benchmark(BenchArgs),
    /// Word weights for one text and topic.
    Explain(ExplainArgs),
    /// Turn model scores into annotation tasks.
    Plan(PlanArgs),
    /// Test mAP against the number of positive annotations per topic.
    Saturation(SaturationArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub num_texts: Option<usize>,
    #[arg(long)]
    pub num_topics: Option<usize>,
    #[arg(long)]
    pub num_groups: Option<usize>,
}

#[derive(Debug, Args, Default)]
pub struct ModelFlags {
    /// One of cross, bi_cosine, bi_concat, bi_concat_sub, bi_concat_sub_mult.
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    /// Bi-encoder pooling: cls, mean or max.
    #[arg(long, value_parser = parse_pooling)]
    pub pooling: Option<Pooling>,
}

#[derive(Debug, Args, Default)]
pub struct TrainFlags {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub grad_accum: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory with texts.jsonl, topics.jsonl and annotations.jsonl.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub model: ModelFlags,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// `split.json` from a training run; its test texts are evaluated.
    /// Without it every text is.
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[arg(long)]
    pub beta: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ZeroShotArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub folds: Option<usize>,
    /// Reuse fold assignments written by an earlier run.
    #[arg(long)]
    pub folds_file: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelFlags,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// topics.jsonl
    #[arg(long)]
    pub topics: PathBuf,
    /// texts.jsonl
    #[arg(long)]
    pub texts: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub topics: PathBuf,
    /// Listen on this address instead of stdin/stdout.
    #[arg(long)]
    pub tcp: Option<String>,
    /// Stop after this many TCP connections.
    #[arg(long)]
    pub max_connections: Option<usize>,
    #[arg(long)]
    pub window_ms: Option<u64>,
    #[arg(long)]
    pub max_batch: Option<usize>,
    #[arg(long)]
    pub concurrency: Option<usize>,
    /// Directory for the resolved configuration snapshot.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BackfillArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub topics: PathBuf,
    /// JSONL of `{"text_id", "text"}` records.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub window_size: Option<usize>,
    #[arg(long)]
    pub stop_after: Option<usize>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub topics: Option<PathBuf>,
    /// texts.jsonl used as the request corpus.
    #[arg(long)]
    pub texts: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',')]
    pub batch_sizes: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub concurrency: Option<Vec<usize>>,
    #[arg(long)]
    pub duration_ms: Option<u64>,
    #[arg(long)]
    pub price_per_min: Option<f64>,
    /// Skip measurement and cost every configuration at this throughput.
    #[arg(long)]
    pub assume_throughput: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub topics: PathBuf,
    #[arg(long)]
    pub topic_id: String,
    #[arg(long)]
    pub text: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub samples: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub per_topic: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SaturationArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',')]
    pub counts: Option<Vec<usize>>,
    #[command(flatten)]
    pub model: ModelFlags,
    #[command(flatten)]
    pub train: TrainFlags,
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
pub enum Failure {
    Validation(String),
    Runtime(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }

    /// One-line JSON for stderr.
    pub fn to_json_line(&self) -> String {
        let (kind, message) = match self {
            Failure::Validation(m) => ("validation", m),
            Failure::Runtime(m) => ("runtime", m),
        };
        serde_json::json!({ "error": kind, "message": message }).to_string()
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_validation() {
            Failure::Validation(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

/// Parses `args` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            let f = Failure::Validation(e.to_string().lines().next().unwrap_or("bad arguments").to_string());
            eprintln!("{}", f.to_json_line());
            return f.exit_code();
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("{}", f.to_json_line());
            f.exit_code()
        }
    }
}

/// Runs a parsed command line.
pub fn execute(cli: Cli) -> std::result::Result<(), Failure> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let mut inputs: Vec<&Path> = Vec::new();
    let name = apply_flags(&cli.command, &mut cfg, &mut inputs);
    cfg.propagate_seed();

    let mut problems = cfg.problems();
    for p in inputs {
        if !p.exists() {
            problems.push(format!("{} does not exist", p.display()));
        }
    }
    if !problems.is_empty() {
        return Err(Failure::Validation(problems.join("; ")));
    }
    log::debug!("{name}: configuration resolved");
    dispatch(&cli.command, &cfg).map_err(Failure::from)
}

fn apply_model(flags: &ModelFlags, cfg: &mut RunConfig) {
    if let Some(m) = &flags.model {
        cfg.model.name = m.clone();
    }
    if let Some(d) = flags.d_model {
        cfg.model.encoder.d_model = d;
        cfg.model.encoder.ffn_hidden = 2 * d;
    }
    if let Some(l) = flags.layers {
        cfg.model.encoder.num_layers = l;
    }
    if let Some(h) = flags.heads {
        cfg.model.encoder.num_heads = h;
    }
    if flags.pooling.is_some() {
        cfg.model.pooling = flags.pooling;
    }
}

fn parse_pooling(s: &str) -> std::result::Result<Pooling, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown pooling {s}; expected cls, mean or max"))
}

fn apply_train(flags: &TrainFlags, cfg: &mut RunConfig) {
    let t = &mut cfg.train;
    if let Some(v) = flags.epochs {
        t.max_epochs = v;
    }
    if let Some(v) = flags.lr {
        t.learning_rate = v;
    }
    if let Some(v) = flags.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = flags.grad_accum {
        t.grad_accum_steps = v;
    }
    if let Some(v) = flags.patience {
        t.patience = v;
    }
}

/// Applies subcommand flags, collects input paths that must exist and
/// returns the subcommand name.
fn apply_flags<'a>(command: &'a Command, cfg: &mut RunConfig, inputs: &mut Vec<&'a Path>) -> &'static str {
    match command {
        Command::Synth(a) => {
            if let Some(n) = a.num_texts {
                cfg.synth.num_texts = n;
            }
            if let Some(n) = a.num_topics {
                cfg.synth.num_topics = n;
            }
            if let Some(n) = a.num_groups {
                cfg.synth.num_groups = n;
            }
            "synth"
        }
        Command::Train(a) => {
            apply_model(&a.model, cfg);
            apply_train(&a.train, cfg);
            inputs.push(&a.data);
            "train"
        }
        Command::Eval(a) => {
            if let Some(b) = a.beta {
                cfg.beta = b;
            }
            inputs.extend([a.data.as_path(), a.checkpoint.as_path()]);
            inputs.extend(a.split.as_deref());
            "eval"
        }
        Command::Zeroshot(a) => {
            apply_model(&a.model, cfg);
            apply_train(&a.train, cfg);
            if let Some(k) = a.folds {
                cfg.zeroshot_folds = k;
            }
            inputs.push(&a.data);
            inputs.extend(a.folds_file.as_deref());
            "zeroshot"
        }
        Command::Predict(a) => {
            inputs.extend([a.checkpoint.as_path(), a.topics.as_path(), a.texts.as_path()]);
            "predict"
        }
        Command::Serve(a) => {
            if let Some(w) = a.window_ms {
                cfg.server.window.max_window_us = w * 1_000;
            }
            if let Some(b) = a.max_batch {
                cfg.server.window.max_batch_size = b;
            }
            if let Some(c) = a.concurrency {
                cfg.server.concurrency = c;
            }
            inputs.extend([a.checkpoint.as_path(), a.topics.as_path()]);
            "serve"
        }
        Command::Backfill(a) => {
            if let Some(w) = a.window_size {
                cfg.backfill.window_size = w;
            }
            if a.stop_after.is_some() {
                cfg.backfill.stop_after = a.stop_after;
            }
            inputs.extend([a.checkpoint.as_path(), a.topics.as_path(), a.input.as_path()]);
            "backfill"
        }
        Command::Benchmark(a) => {
            if a.batch_sizes.is_some() || a.concurrency.is_some() {
                let bs = a.batch_sizes.clone().unwrap_or_else(|| vec![1, 64]);
                let cs = a.concurrency.clone().unwrap_or_else(|| vec![1]);
                cfg.bench.configs = crate::serve::BenchConfig::grid(&bs, &cs);
            }
            if let Some(d) = a.duration_ms {
                cfg.bench.duration_ms = d;
            }
            if let Some(p) = a.price_per_min {
                cfg.bench.price_per_min = p;
            }
            if a.assume_throughput.is_none() {
                inputs.extend(a.checkpoint.as_deref());
                inputs.extend(a.topics.as_deref());
                inputs.extend(a.texts.as_deref());
            }
            "benchmark"
        }
        Command::Explain(a) => {
            if let Some(s) = a.samples {
                cfg.explain.num_samples = s;
            }
            inputs.extend([a.checkpoint.as_path(), a.topics.as_path()]);
            "explain"
        }
        Command::Plan(a) => {
            if let Some(t) = a.threshold {
                cfg.plan.threshold = t;
            }
            if let Some(k) = a.per_topic {
                cfg.plan.per_topic_samples = k;
            }
            inputs.extend([a.checkpoint.as_path(), a.data.as_path()]);
            "plan"
        }
        Command::Saturation(a) => {
            apply_model(&a.model, cfg);
            apply_train(&a.train, cfg);
            if let Some(c) = &a.counts {
                cfg.saturation_counts = c.clone();
            }
            inputs.push(&a.data);
            "saturation"
        }
    }
}

fn snapshot(dir: &Path, subcommand: &str, paths: &[(&'static str, &Path)], cfg: &RunConfig) -> Result<()> {
    let paths: IndexMap<&str, PathBuf> = paths.iter().map(|(k, p)| (*k, p.to_path_buf())).collect();
    write_resolved(
        dir,
        &ResolvedConfig {
            subcommand,
            paths,
            config: cfg,
        },
    )
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

fn build_vocab(ds: &Dataset, min_freq: usize) -> Vocabulary {
    Vocabulary::build(
        ds.texts
            .iter()
            .map(|t| t.text.as_str())
            .chain(ds.topics.iter().flat_map(|t| [t.name.as_str(), t.description.as_str()])),
        min_freq,
    )
}

fn split_for(ds: &Dataset, cfg: &RunConfig) -> Result<Split> {
    stratified_split(&ds.texts, &ds.labels, cfg.split, cfg.seed)
}

fn load_topics(path: &Path) -> Result<Vec<Topic>> {
    let topics: Vec<Topic> = read_jsonl(path)?;
    if topics.is_empty() {
        return Err(Error::Empty(format!("{} has no topics", path.display())));
    }
    Ok(topics)
}

fn load_predictor(checkpoint: &Path, topics: &[Topic]) -> Result<Predictor> {
    let model = Model::load(checkpoint)?;
    if !model.config().is_bi_encoder() {
        return Err(Error::UnsupportedArchitecture(
            "serving needs a bi-encoder checkpoint".into(),
        ));
    }
    Predictor::warm(model, topics)
}

fn dispatch(command: &Command, cfg: &RunConfig) -> Result<()> {
    match command {
        Command::Synth(a) => {
            let ds = generate(&cfg.synth)?;
            ds.save(&a.out)?;
            snapshot(&a.out, "synth", &[("out", &a.out)], cfg)?;
            log::info!("wrote {} texts and {} topics to {}", ds.texts.len(), ds.topics.len(), a.out.display());
        }
        Command::Train(a) => cmd_train(a, cfg)?,
        Command::Eval(a) => cmd_eval(a, cfg)?,
        Command::Zeroshot(a) => cmd_zeroshot(a, cfg)?,
        Command::Predict(a) => cmd_predict(a, cfg)?,
        Command::Serve(a) => {
            if let Some(out) = &a.out {
                snapshot(out, "serve", &[("checkpoint", &a.checkpoint), ("topics", &a.topics)], cfg)?;
            }
            let predictor = Arc::new(load_predictor(&a.checkpoint, &load_topics(&a.topics)?)?);
            log::info!("serving {} topics, model {}", predictor.cache().len(), predictor.model_hash());
            match &a.tcp {
                Some(addr) => serve_tcp(addr.as_str(), predictor, cfg.server, a.max_connections, |bound| {
                    log::info!("listening on {bound}")
                })?,
                None => {
                    let stats = serve_stdio(predictor, cfg.server)?;
                    log::info!("{stats:?}");
                }
            }
        }
        Command::Backfill(a) => {
            snapshot(
                &a.out,
                "backfill",
                &[("checkpoint", &a.checkpoint), ("topics", &a.topics), ("input", &a.input), ("out", &a.out)],
                cfg,
            )?;
            let predictor = load_predictor(&a.checkpoint, &load_topics(&a.topics)?)?;
            let summary = backfill(
                &a.input,
                &a.out.join("scores.jsonl"),
                &a.out.join("progress.json"),
                &predictor,
                &cfg.backfill,
            )?;
            write_json(&a.out.join("summary.json"), &summary)?;
            log::info!("{summary:?}");
        }
        Command::Benchmark(a) => cmd_benchmark(a, cfg)?,
        Command::Explain(a) => {
            snapshot(&a.out, "explain", &[("checkpoint", &a.checkpoint), ("topics", &a.topics), ("out", &a.out)], cfg)?;
            let model = Model::load(&a.checkpoint)?;
            let topics = load_topics(&a.topics)?;
            let topic = topics
                .iter()
                .find(|t| t.topic_id == a.topic_id)
                .ok_or_else(|| Error::Config(format!("unknown topic {}", a.topic_id)))?;
            let rendered = model.render_topic(&topic.name, &topic.description);
            let e = explain(&model, &a.text, &rendered, &cfg.explain)?;
            write_json(&a.out.join("explanation.json"), &e)?;
            fs::write(a.out.join("explanation.html"), e.render_html() + "\n")?;
            println!("{}", e.render_ansi());
        }
        Command::Plan(a) => {
            snapshot(&a.out, "plan", &[("checkpoint", &a.checkpoint), ("data", &a.data), ("out", &a.out)], cfg)?;
            let model = Model::load(&a.checkpoint)?;
            let ds = Dataset::load(&a.data)?;
            let topics: Vec<String> = ds.topics.iter().map(|t| model.render_topic(&t.name, &t.description)).collect();
            let topic_refs: Vec<&str> = topics.iter().map(String::as_str).collect();
            let texts: Vec<&str> = ds.texts.iter().map(|t| t.text.as_str()).collect();
            let scores = model.score_matrix(&texts, &topic_refs)?;
            let tasks = plan_annotation(&ds.text_ids(), &ds.topics, &scores, &cfg.plan)?;
            let records: Vec<TaskRecord> = tasks.iter().map(TaskRecord::from).collect();
            write_jsonl(&a.out.join("tasks.jsonl"), &records)?;
            log::info!("{} annotation tasks", records.len());
        }
        Command::Saturation(a) => {
            snapshot(&a.out, "saturation", &[("data", &a.data), ("out", &a.out)], cfg)?;
            let ds = Dataset::load(&a.data)?;
            let split = split_for(&ds, cfg)?;
            let rows = saturation(
                &cfg.model.build()?,
                &build_vocab(&ds, cfg.min_freq),
                &cfg.train,
                &ds,
                &split,
                &cfg.saturation_counts,
                cfg.beta,
            )?;
            write_saturation_csv(&rows, File::create(a.out.join("saturation.csv"))?)?;
            write_json(&a.out.join("saturation.json"), &rows)?;
        }
    }
    Ok(())
}

fn cmd_train(a: &TrainArgs, cfg: &RunConfig) -> Result<()> {
    snapshot(&a.out, "train", &[("data", &a.data), ("out", &a.out)], cfg)?;
    let ds = Dataset::load(&a.data)?;
    let split = split_for(&ds, cfg)?;
    write_json(&a.out.join("split.json"), &split)?;
    let mut model = Model::new(cfg.model.build()?, build_vocab(&ds, cfg.min_freq), cfg.seed)?;
    let outcome = train(&mut model, &ds, &split.train, &split.val, &cfg.train, &mut |_| {})?;
    write_log_csv(&outcome.log, File::create(a.out.join("train_log.csv"))?)?;
    model.save(&a.out.join("checkpoint"))?;
    let report = evaluate(&model, &ds, &split.test, cfg.beta)?;
    report.write_json(&a.out.join("metrics.json"))?;
    report.write_topic_csv(File::create(a.out.join("per_topic.csv"))?)?;
    log::info!(
        "{}: best epoch {} val micro {:.4}, test micro {:.4} macro {:.4}",
        model.config().name(),
        outcome.best_epoch,
        outcome.best_val_micro_map,
        report.micro_ap,
        report.macro_map
    );
    Ok(())
}

fn cmd_eval(a: &EvalArgs, cfg: &RunConfig) -> Result<()> {
    let mut paths: Vec<(&'static str, &Path)> = vec![("data", &a.data), ("checkpoint", &a.checkpoint), ("out", &a.out)];
    if let Some(s) = &a.split {
        paths.push(("split", s));
    }
    snapshot(&a.out, "eval", &paths, cfg)?;
    let model = Model::load(&a.checkpoint)?;
    let ds = Dataset::load(&a.data)?;
    let ids = match &a.split {
        Some(p) => {
            let split: Split = serde_json::from_str(&fs::read_to_string(p)?)?;
            split.test
        }
        None => ds.text_ids(),
    };
    let report = evaluate(&model, &ds, &ids, cfg.beta)?;
    report.write_json(&a.out.join("metrics.json"))?;
    report.write_topic_csv(File::create(a.out.join("per_topic.csv"))?)?;
    log::info!("micro {:.4} macro {:.4} weighted {:.4}", report.micro_ap, report.macro_map, report.weighted_map);
    Ok(())
}

fn cmd_zeroshot(a: &ZeroShotArgs, cfg: &RunConfig) -> Result<()> {
    let mut paths: Vec<(&'static str, &Path)> = vec![("data", &a.data), ("out", &a.out)];
    if let Some(f) = &a.folds_file {
        paths.push(("folds_file", f));
    }
    snapshot(&a.out, "zeroshot", &paths, cfg)?;
    let ds = Dataset::load(&a.data)?;
    let split = split_for(&ds, cfg)?;
    let folds = match &a.folds_file {
        Some(p) => read_folds(p)?,
        None => make_topic_folds(&ds.topic_ids(), cfg.zeroshot_folds, cfg.seed)?,
    };
    write_folds(&folds, &a.out.join("folds.json"))?;
    let report = zero_shot_eval(
        &cfg.model.build()?,
        &build_vocab(&ds, cfg.min_freq),
        &cfg.train,
        &ds,
        &split,
        &folds,
        cfg.beta,
    )?;
    write_json(&a.out.join("zeroshot.json"), &report)?;
    report.pooled.write_json(&a.out.join("metrics.json"))?;
    log::info!(
        "zero-shot macro best F1 {:.4}, micro {:.4}",
        report.pooled.macro_best_f1,
        report.pooled.micro_ap
    );
    Ok(())
}

#[derive(Serialize)]
struct PredictionRow<'a> {
    text_id: &'a str,
    scores: IndexMap<&'a str, f64>,
}

fn cmd_predict(a: &PredictArgs, cfg: &RunConfig) -> Result<()> {
    snapshot(
        &a.out,
        "predict",
        &[("checkpoint", &a.checkpoint), ("topics", &a.topics), ("texts", &a.texts), ("out", &a.out)],
        cfg,
    )?;
    let model = Model::load(&a.checkpoint)?;
    let topics = load_topics(&a.topics)?;
    let records: Vec<TextRecord> = read_jsonl(&a.texts)?;
    let ids: Vec<String> = records.iter().map(|r| r.text_id.clone()).collect();
    let texts: Vec<&str> = records.iter().map(|r| r.text.as_str()).collect();
    let matrix = if model.config().is_bi_encoder() {
        model.reset_counters();
        let predictor = Predictor::warm(model, &topics)?;
        let topic_calls = predictor.model().encode_calls();
        let scores = predictor.predict(&ids, &texts, &BatchOptions::default())?;
        let text_calls = predictor.model().encode_calls() - topic_calls;
        log::info!("encode_calls: {text_calls}+{topic_calls}");
        scores
    } else {
        let rendered: Vec<String> = topics.iter().map(|t| model.render_topic(&t.name, &t.description)).collect();
        let refs: Vec<&str> = rendered.iter().map(String::as_str).collect();
        model.reset_counters();
        let scores = model.score_matrix(&texts, &refs)?;
        log::info!("encode_calls: {}", model.encode_calls());
        ScoreMatrix {
            text_ids: ids,
            topic_ids: topics.iter().map(|t| t.topic_id.clone()).collect(),
            scores,
        }
    };
    let mut w = BufWriter::new(File::create(a.out.join("predictions.jsonl"))?);
    for (id, row) in matrix.text_ids.iter().zip(&matrix.scores) {
        let row = PredictionRow {
            text_id: id,
            scores: matrix.topic_ids.iter().map(String::as_str).zip(row.iter().copied()).collect(),
        };
        serde_json::to_writer(&mut w, &row)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_benchmark(a: &BenchArgs, cfg: &RunConfig) -> Result<()> {
    let mut paths: Vec<(&'static str, &Path)> = vec![("out", &a.out)];
    for (k, p) in [("checkpoint", &a.checkpoint), ("topics", &a.topics), ("texts", &a.texts)] {
        if let Some(p) = p {
            paths.push((k, p));
        }
    }
    snapshot(&a.out, "benchmark", &paths, cfg)?;
    let rows = match a.assume_throughput {
        Some(tp) => {
            if !(tp > 0.0) {
                return Err(Error::Config("assumed throughput must be positive".into()));
            }
            cfg.bench
                .configs
                .iter()
                .map(|&(b, c)| BenchRow {
                    batch_size: b,
                    concurrency: c,
                    throughput_per_min: Some(tp),
                    usd_per_1m: Some(cost_per_million(tp, cfg.bench.price_per_min)),
                })
                .collect()
        }
        None => {
            let (Some(ckpt), Some(topics), Some(texts)) = (&a.checkpoint, &a.topics, &a.texts) else {
                return Err(Error::Config(
                    "benchmark needs --checkpoint, --topics and --texts unless --assume-throughput is given".into(),
                ));
            };
            let predictor = load_predictor(ckpt, &load_topics(topics)?)?;
            let records: Vec<TextRecord> = read_jsonl(texts)?;
            let corpus: Vec<&str> = records.iter().map(|r| r.text.as_str()).collect();
            benchmark(&predictor, &corpus, &cfg.bench)?
        }
    };
    write_benchmark_csv(&rows, File::create(a.out.join("benchmark.csv"))?)?;
    Ok(())
}

/// Names accepted by `--model`.
pub fn model_names() -> &'static [&'static str] {
    &MODEL_NAMES
}
