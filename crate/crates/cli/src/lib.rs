//! The `ddnet` command line: synthesise data, train, evaluate, check
//! gradients, count parameters and export graphs.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on runtime failures.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use ddnet_core::kv::Document;
use ddnet_core::{gradsuite, ArchSpec, EdgeKind, Graph, LabelSpace, SkipSet, UpsampleBlock, WeightStrategy};
use ddnet_data::{synth_dataset, Flip, SynthSpec};
use ddnet_train::{Dataset, RunStatus, TrainConfig, Trainer};

#[derive(Debug, Parser)]
#[command(name = "ddnet", version, about = "Dense decoder segmentation networks on the CPU")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic segmentation dataset.
    Synth(SynthArgs),
    /// Train a network on a dataset directory.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset directory.
    Eval(EvalArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Count trainable parameters.
    Params(ArchArgs),
    /// Write the network graph as DOT and JSON.
    ExportGraph(ExportArgs),
}

/// Architecture selection shared by several commands.
#[derive(Debug, Args)]
struct ArchArgs {
    /// Architecture file, or a preset name (tiny, paperlike).
    #[arg(long, default_value = "tiny")]
    arch: String,
    /// Number of decoder units.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
    depth: Option<u8>,
    /// Skip connections: f, fb, fr or fbr.
    #[arg(long)]
    skips: Option<SkipSet>,
    /// Feature block after each upsampling: none, conv or dense.
    #[arg(long = "decoder-block")]
    decoder_block: Option<UpsampleBlock>,
    /// Directory for machine-readable output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 250)]
    images: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    /// Class count; colors and equal ratios are generated unless `--ratios` is given.
    #[arg(long)]
    classes: Option<usize>,
    /// Relative pixel frequency per class, comma separated.
    #[arg(long, value_delimiter = ',')]
    ratios: Option<Vec<f64>>,
    /// Per-pixel noise standard deviation.
    #[arg(long)]
    noise: Option<f64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    arch: ArchArgs,
    #[arg(long)]
    data: PathBuf,
    /// Training config file; its `[train]` section is read.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iterations: Option<usize>,
    /// Class weighting: none, medfreq, dynamic, focal or focal-dynamic.
    #[arg(long)]
    weights: Option<WeightStrategy>,
    /// Lower bound of the dynamic weights.
    #[arg(long = "L")]
    l: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long = "aux-weight")]
    aux_weight: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long = "decay-interval")]
    decay_interval: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long = "eval-interval")]
    eval_interval: Option<usize>,
    /// Random crop as `HEIGHTxWIDTH` (or `HEIGHT,WIDTH`).
    #[arg(long, value_parser = parse_crop)]
    crop: Option<(usize, usize)>,
    /// Flip direction for augmentation: vertical, horizontal or none.
    #[arg(long)]
    flip: Option<Flip>,
    #[arg(long = "checkpoint-interval")]
    checkpoint_interval: Option<usize>,
    /// Continue from a checkpoint directory written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

fn parse_crop(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', ','])
        .ok_or_else(|| format!("expected HEIGHTxWIDTH, got {s:?}"))?;
    let dim = |v: &str| v.trim().parse::<usize>().ok().filter(|&d| d > 0).ok_or_else(|| format!("bad crop size {v:?}"));
    Ok((dim(h)?, dim(w)?))
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Checkpoint directory.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Which images to score: eval (held-out split), train or all.
    #[arg(long, default_value = "eval")]
    split: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// Only double precision is meaningful for finite differences.
    #[arg(long, default_value = "double")]
    precision: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ExportArgs {
    #[command(flatten)]
    arch: ArchArgs,
}

/// Runs the CLI and returns the process exit code.
pub fn run<I, T>(argv: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Params(a) => params(a),
        Command::ExportGraph(a) => export_graph(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            if e.is::<UsageError>() {
                1
            } else {
                2
            }
        }
    }
}

/// Error chain joined by `: `, skipping causes already spelled out by
/// their wrapper.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !out.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn write_out(dir: &Path, name: &str, text: &str) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let p = dir.join(name);
    fs::write(&p, text).with_context(|| format!("writing {}", p.display()))
}

/// Architecture and the document it came from (empty for presets).
fn load_arch(a: &ArchArgs) -> anyhow::Result<(ArchSpec, Document)> {
    let (mut spec, doc) = match ArchSpec::preset(&a.arch) {
        Some(spec) if !Path::new(&a.arch).is_file() => (spec, Document::default()),
        _ => {
            let text = fs::read_to_string(&a.arch).map_err(|e| usage(format!("--arch {}: {e}", a.arch)))?;
            let doc = Document::parse(&text).map_err(|e| usage(format!("{}: {e}", a.arch)))?;
            let spec = ArchSpec::from_document(&doc).map_err(|e| usage(format!("{}: {e}", a.arch)))?;
            (spec, doc)
        }
    };
    if let Some(d) = a.depth {
        spec = spec.with_depth(usize::from(d));
    }
    if let Some(s) = a.skips {
        spec = spec.with_skips(s);
    }
    if let Some(b) = a.decoder_block {
        spec = spec.with_upsample_block(b);
    }
    spec.validate().map_err(|e| usage(e.to_string()))?;
    Ok((spec, doc))
}

fn synth(a: SynthArgs) -> anyhow::Result<u8> {
    let mut spec = SynthSpec {
        images: a.images,
        height: a.height,
        width: a.width,
        ..SynthSpec::tiny()
    };
    if let Some(c) = a.classes {
        if c != spec.num_classes {
            spec = spec.with_classes(c);
        }
    }
    if let Some(r) = a.ratios {
        spec.class_ratios = r;
    }
    if let Some(n) = a.noise {
        spec.noise = n;
    }
    spec.validate().map_err(|e| usage(e.to_string()))?;
    let m = synth_dataset(&spec, a.seed, &a.out)?;
    println!("wrote {} images of {}x{} to {}", m.images.len(), m.height, m.width, a.out.display());
    let total: u64 = m.totals.iter().sum::<u64>().max(1);
    for (c, t) in m.totals.iter().enumerate() {
        println!("class {c:>3}  pixels {t:>10}  share {:.4}", *t as f64 / total as f64);
    }
    if m.degenerate {
        println!("note: single-class dataset (degenerate)");
    }
    Ok(0)
}

fn train_config(a: &TrainArgs, arch_doc: &Document) -> anyhow::Result<TrainConfig> {
    let mut cfg = TrainConfig::from_document(arch_doc).map_err(|e| usage(format!("{}: {e}", a.arch.arch)))?;
    if let Some(p) = &a.config {
        let text = fs::read_to_string(p).map_err(|e| usage(format!("--config {}: {e}", p.display())))?;
        let doc = Document::parse(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?;
        if doc.section("train").is_some() {
            cfg = TrainConfig::from_document(&doc).map_err(|e| usage(format!("{}: {e}", p.display())))?;
        }
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.iterations {
        cfg.iterations = v;
    }
    if let Some(v) = a.weights {
        cfg.weight_strategy = v;
    }
    if let Some(v) = a.l {
        cfg.l = v;
    }
    if let Some(v) = a.gamma {
        cfg.gamma = v;
    }
    if let Some(v) = a.aux_weight {
        cfg.aux_weight = v;
    }
    if let Some(v) = a.lr {
        cfg.lr0 = v;
    }
    if let Some(v) = a.decay_interval {
        cfg.decay_interval = v;
    }
    if let Some(v) = a.batch {
        cfg.batch = v;
    }
    if let Some(v) = a.eval_interval {
        cfg.eval_interval = v;
    }
    if let Some(v) = a.crop {
        cfg.crop = Some(v);
    }
    if let Some(v) = a.flip {
        cfg.flip = v;
    }
    if let Some(v) = a.checkpoint_interval {
        cfg.checkpoint_interval = Some(v);
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"))
}

fn train(a: TrainArgs) -> anyhow::Result<u8> {
    let out = a.arch.out.clone().ok_or_else(|| usage("train needs --out"))?;
    let (arch, doc) = load_arch(&a.arch)?;
    let cfg = train_config(&a, &doc)?;
    let data = Dataset::open(&a.data, LabelSpace::new(arch.num_classes), cfg.eval_fraction)?;
    let mut trainer = match &a.resume {
        Some(dir) => Trainer::resume(dir, Some(&cfg), &data)?,
        None => Trainer::new(&arch, &cfg, &data)?,
    };
    println!(
        "training {} parameters on {} images ({} held out), {} iterations",
        trainer.graph().param_count(),
        data.train.len(),
        data.eval.len(),
        cfg.iterations
    );
    let start = Instant::now();
    let report = trainer.run(&data, Some(&out), &mut |r| {
        println!(
            "iter {:>7}  lr {:.2e}  train loss {:>8}  eval loss {:.4}  miou {}  acc {}  [{:.0}s]",
            r.iteration,
            r.lr,
            r.train_loss.map_or_else(|| "-".to_string(), |v| format!("{v:.4}")),
            r.eval_loss,
            fmt_opt(r.mean_iou),
            fmt_opt(r.global_accuracy),
            start.elapsed().as_secs_f64()
        );
    })?;
    match report.status {
        RunStatus::Completed => {
            println!("final miou {}; outputs in {}", fmt_opt(report.final_miou()), out.display());
            Ok(0)
        }
        RunStatus::Diverged { iteration, reason } => {
            eprintln!("training diverged at iteration {iteration}: {reason}");
            Ok(2)
        }
    }
}

fn eval(a: EvalArgs) -> anyhow::Result<u8> {
    let cfg = ddnet_train::checkpoint_config(&a.checkpoint)?;
    let arch = ddnet_train::checkpoint_arch(&a.checkpoint)?;
    let space = LabelSpace::new(arch.num_classes);
    let data = Dataset::open(&a.data, space, cfg.eval_fraction)?;
    let samples = match a.split.as_str() {
        "eval" => data.eval,
        "train" => data.train,
        "all" => [data.train, data.eval].concat(),
        other => return Err(usage(format!("unknown split {other:?} (expected eval, train or all)"))),
    };
    let report = ddnet_train::evaluate_checkpoint(&a.checkpoint, &samples, space, cfg.eval_batch)?;
    print!("{}", report.to_text());
    if let Some(out) = &a.out {
        write_out(out, "metrics.json", &(report.to_json() + "\n"))?;
    }
    Ok(0)
}

fn gradcheck(a: GradcheckArgs) -> anyhow::Result<u8> {
    if a.precision != "double" {
        return Err(usage(format!(
            "gradient checks run in double precision only (got --precision {})",
            a.precision
        )));
    }
    let start = Instant::now();
    let reports = gradsuite::run_suite()?;
    print!("{}", gradsuite::format_table(&reports));
    let passed = reports.iter().all(|r| r.passed);
    println!(
        "{} of {} cases passed in {:.1}s",
        reports.iter().filter(|r| r.passed).count(),
        reports.len(),
        start.elapsed().as_secs_f64()
    );
    if let Some(out) = &a.out {
        write_out(out, "gradcheck.json", &(serde_json::to_string_pretty(&reports)? + "\n"))?;
    }
    Ok(if passed { 0 } else { 2 })
}

#[derive(Serialize)]
struct ParamsOut<'a> {
    total: usize,
    modules: Vec<(String, usize)>,
    arch: &'a str,
}

fn params(a: ArchArgs) -> anyhow::Result<u8> {
    let (spec, _) = load_arch(&a)?;
    let graph = Graph::build(&spec)?;
    let breakdown = graph.param_breakdown();
    for (m, n) in &breakdown {
        println!("{m:<32} {n:>12}");
    }
    println!("{:<32} {:>12}", "total", graph.param_count());
    if let Some(out) = &a.out {
        let text = spec.to_text();
        let body = ParamsOut {
            total: graph.param_count(),
            modules: breakdown,
            arch: &text,
        };
        write_out(out, "params.json", &(serde_json::to_string_pretty(&body)? + "\n"))?;
    }
    Ok(0)
}

fn export_graph(a: ExportArgs) -> anyhow::Result<u8> {
    let out = a.arch.out.clone().ok_or_else(|| usage("export-graph needs --out"))?;
    let (spec, _) = load_arch(&a.arch)?;
    let graph = Graph::build(&spec)?;
    let export = graph.export();
    write_out(&out, "graph.dot", &export.to_dot())?;
    write_out(&out, "graph.json", &(graph.to_json() + "\n"))?;
    println!("{} nodes, {} edges", export.nodes.len(), export.edges.len());
    for kind in [EdgeKind::Data, EdgeKind::Forward, EdgeKind::Backward, EdgeKind::StackedResidual] {
        println!("{:<18} {}", kind.as_str(), export.count_edges(kind));
    }
    println!("heads {}", graph.head_count());
    Ok(0)
}
