//! `smt` — one front door for the whole workbench: size/compute summaries,
//! gradient verification, training, evaluation, map export, attention
//! distances, timing, and ablation cost tables.
//!
//! Exit codes: 0 success, 1 domain failure (bad config, data, or training
//! state), 2 usage error (unknown flags or malformed invocations). The
//! `SMT_LOG` environment variable (`error`, `info`, `debug`) controls
//! diagnostic verbosity. Every file this tool writes is created atomically
//! (temp file, then rename), so an interrupted run never leaves a
//! truncated artifact behind.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use smt_core::analyzer::{
    count_flops, extract_modulation_maps, mean_attention_distance, summarize, MapReduce, Upsample,
};
use smt_core::checkpoint::{apply_to_model, Checkpoint};
use smt_core::config::{ablation_family, parse_config, preset, ModelConfig};
use smt_core::data::{load_dataset_dir, load_ppm, stack_batch, synth_scale_discrimination, Dataset};
use smt_core::error::{Error, Result};
use smt_core::gradcheck::{check_model, GradCheck};
use smt_core::graph::Graph;
use smt_core::io::{atomic_write, write_grid};
use smt_core::model::Model;
use smt_core::rng::Rng;
use smt_core::tensor::Tensor;
use smt_core::train::{evaluate_checkpoint, train, TrainSpec};
use smt_core::blocks::{CaptureSpec, Mode};

// ====================================================================
// Invocation grammar
// ====================================================================

#[derive(Parser)]
#[command(
    name = "smt",
    version,
    about = "Scale-aware modulation backbone workbench",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Per-stage table of resolutions, widths, block plans, parameters,
    /// and compute.
    Summarize(SummarizeArgs),
    /// Verify analytic gradients against central differences in f64.
    Gradcheck(GradcheckArgs),
    /// Train a model, writing metrics and checkpoints to a directory.
    Train(TrainArgs),
    /// Top-1 accuracy of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Export modulation maps of one stage as binary float grids.
    ExportMaps(ExportMapsArgs),
    /// Mean attention distance per attention layer, in input pixels.
    AttnDistance(AttnDistanceArgs),
    /// Forward-pass wall-clock timing (no quality claims).
    Bench(BenchArgs),
    /// Parameter/compute table across one ablation family.
    Ablation(AblationArgs),
}

/// Where the model configuration comes from: a built-in preset or a JSON
/// file. Exactly one must be given.
#[derive(Args)]
#[group(required = true, multiple = false)]
struct ModelSource {
    /// Built-in preset name (see `summarize --preset help-me` for the list).
    #[arg(long)]
    preset: Option<String>,
    /// Path to a model configuration JSON file.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ModelSource {
    fn load(&self) -> Result<ModelConfig> {
        match (&self.preset, &self.config) {
            (Some(name), None) => preset(name),
            (None, Some(path)) => parse_config(&read_text(path)?),
            _ => unreachable!("clap enforces exactly one source"),
        }
    }
}

#[derive(Args)]
struct SummarizeArgs {
    #[command(flatten)]
    model: ModelSource,
    /// Square input edge used for the compute columns.
    #[arg(long, default_value_t = 224)]
    input_size: usize,
    /// Also write the table to this path as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Preset to verify (the smallest is the practical choice).
    #[arg(long, default_value = "smt-micro")]
    preset: String,
    /// Maximum allowed relative error per coordinate.
    #[arg(long, default_value_t = 1e-5)]
    tolerance: f64,
    /// Seed for weights, probe input, and coordinate sampling.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Dataset argument shared by training/evaluation commands: either a
/// directory of `<class>/<image>.ppm`, or `synth:scale_discrimination`
/// (optionally `synth:scale_discrimination:<seed>`) for the built-in
/// two-class generator.
#[derive(Args, Clone)]
struct DataSource {
    /// Dataset directory or synthetic spec.
    #[arg(long)]
    data: String,
    /// Images per class for synthetic data.
    #[arg(long, default_value_t = 256)]
    synth_per_class: usize,
    /// Generator seed for synthetic specs that do not carry their own.
    #[arg(long, default_value_t = 0)]
    synth_seed: u64,
}

impl DataSource {
    fn load(&self) -> Result<Dataset<f32>> {
        load_data(&self.data, self.synth_seed, self.synth_per_class)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelSource,
    #[command(flatten)]
    data: DataSource,
    /// Training hyperparameter JSON file.
    #[arg(long)]
    spec: PathBuf,
    /// Output directory for metrics and checkpoints.
    #[arg(long)]
    out: PathBuf,
    /// Snapshot to resume from.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Held-out dataset for accuracy tracking (directory or synthetic
    /// spec; a bare synthetic spec uses the training seed plus one).
    #[arg(long)]
    eval_data: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint holding weights and their configuration.
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    data: DataSource,
    /// Evaluation batch size.
    #[arg(long, default_value_t = 16)]
    batch: usize,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum UpsampleArg {
    None,
    Nearest,
    Bilinear,
}

impl From<UpsampleArg> for Upsample {
    fn from(u: UpsampleArg) -> Upsample {
        match u {
            UpsampleArg::None => Upsample::None,
            UpsampleArg::Nearest => Upsample::Nearest,
            UpsampleArg::Bilinear => Upsample::Bilinear,
        }
    }
}

#[derive(Args)]
struct ExportMapsArgs {
    /// Checkpoint holding weights and their configuration.
    #[arg(long)]
    ckpt: PathBuf,
    /// Input image (binary PPM) to drive the forward pass.
    #[arg(long)]
    image: PathBuf,
    /// Stage to capture, counted 1-4 from the input.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=4))]
    stage: u8,
    /// Output directory; one `.grid` plus one `.json` sidecar per map.
    #[arg(long)]
    out: PathBuf,
    /// Scale maps up to the input resolution for display.
    #[arg(long, value_enum, default_value_t = UpsampleArg::None)]
    upsample: UpsampleArg,
    /// Also export each mixer head's own map.
    #[arg(long)]
    per_head: bool,
    /// Export this channel instead of the channel mean.
    #[arg(long)]
    channel: Option<usize>,
}

#[derive(Args)]
struct AttnDistanceArgs {
    /// Checkpoint holding weights and their configuration.
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    data: DataSource,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
    /// How many images to average over.
    #[arg(long, default_value_t = 8)]
    batch: usize,
}

#[derive(Args)]
struct BenchArgs {
    /// Preset to time.
    #[arg(long)]
    preset: String,
    /// Images per forward pass.
    #[arg(long, default_value_t = 1)]
    batch: usize,
    /// Timed repetitions (after one warmup pass).
    #[arg(long, default_value_t = 5)]
    reps: usize,
    /// Square input edge.
    #[arg(long, default_value_t = 224)]
    input_size: usize,
}

#[derive(Args)]
struct AblationArgs {
    /// Family to sweep: heads, aggregation, stacking, or components.
    #[arg(long)]
    family: String,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
    /// Square input edge for the compute column.
    #[arg(long, default_value_t = 224)]
    input_size: usize,
}

// ====================================================================
// Shared plumbing
// ====================================================================

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

const SYNTH_PREFIX: &str = "synth:";

/// Resolve a dataset argument. Synthetic specs look like
/// `synth:scale_discrimination` or `synth:scale_discrimination:<seed>`.
fn load_data(spec: &str, default_seed: u64, per_class: usize) -> Result<Dataset<f32>> {
    if let Some(rest) = spec.strip_prefix(SYNTH_PREFIX) {
        let mut parts = rest.splitn(2, ':');
        let task = parts.next().unwrap_or("");
        if task != "scale_discrimination" {
            return Err(Error::Usage(format!(
                "unknown synthetic task '{task}'; available: scale_discrimination"
            )));
        }
        let seed = match parts.next() {
            Some(s) => s.parse::<u64>().map_err(|_| {
                Error::Usage(format!("bad synthetic seed '{s}', expected an integer"))
            })?,
            None => default_seed,
        };
        log::info!("generating synthetic data: seed {seed}, {per_class} images/class");
        synth_scale_discrimination(seed, per_class)
    } else {
        load_dataset_dir(Path::new(spec))
    }
}

/// Rebuild the model a checkpoint was trained with and load its weights.
fn model_from_checkpoint(path: &Path) -> Result<(Checkpoint, Model<f32>)> {
    let ckpt = Checkpoint::load(path)?;
    let mut model = Model::<f32>::build(&ckpt.config.resolved()?, 0)?;
    apply_to_model(&ckpt, &mut model)?;
    Ok((ckpt, model))
}

/// First `n` images of a dataset stacked into one batch.
fn probe_batch(ds: &Dataset<f32>, n: usize) -> Result<Tensor<f32>> {
    if ds.is_empty() {
        return Err(Error::Data("dataset is empty".into()));
    }
    let take = n.clamp(1, ds.len());
    stack_batch(&ds.images[..take])
}

fn quote_csv(field: &str) -> String {
    if field.contains(',') || field.contains('"') || field.contains('\n') {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

// ====================================================================
// Subcommand bodies
// ====================================================================

fn run_summarize(args: &SummarizeArgs) -> Result<()> {
    let cfg = args.model.load()?.resolved()?;
    let model = Model::<f32>::build(&cfg, 0)?;
    let report = count_flops(&model, args.input_size)?;
    print!("{}", summarize(&cfg, &report, false));
    if let Some(csv) = &args.csv {
        atomic_write(csv, summarize(&cfg, &report, true).as_bytes())?;
        println!("csv written to {}", csv.display());
    }
    Ok(())
}

fn run_gradcheck(args: &GradcheckArgs) -> Result<()> {
    let cfg = preset(&args.preset)?;
    let mut model = Model::<f64>::build(&cfg, args.seed)?;
    let mut rng = Rng::from_seed(args.seed ^ 0x9E37_79B9);
    let side = 64;
    let batch = 2;
    let data: Vec<f64> = (0..batch * side * side * 3)
        .map(|_| rng.uniform(-1.0, 1.0))
        .collect();
    let images = Tensor::from_vec(&[batch, side, side, 3], data)?;
    let labels: Vec<usize> = (0..batch).map(|i| i % cfg.num_classes).collect();
    let opts = GradCheck {
        step: 1e-5,
        tolerance: args.tolerance,
        coords_per_tensor: 20,
        seed: args.seed ^ 0x5eed,
    };
    let report = check_model(&mut model, &images, &labels, 0.1, &opts)?;
    println!("{}", report.summary());
    if report.pass() {
        println!(
            "gradcheck passed: {} tensors, max relative error {:.3e}",
            report.entries.len(),
            report.max_rel_err()
        );
        Ok(())
    } else {
        Err(Error::Data(format!(
            "gradient check failed: max relative error {:.3e} exceeds {:.1e}",
            report.max_rel_err(),
            args.tolerance
        )))
    }
}

fn run_train(args: &TrainArgs) -> Result<()> {
    let cfg = args.model.load()?;
    let spec = TrainSpec::parse(&read_text(&args.spec)?)?;
    let train_set = args.data.load()?;
    let eval_set = match &args.eval_data {
        Some(s) => Some(load_data(
            s,
            // A bare synthetic eval spec must not reuse the training draw.
            args.data.synth_seed.wrapping_add(1),
            args.data.synth_per_class,
        )?),
        None => None,
    };
    let result = train(
        &cfg,
        &train_set,
        eval_set.as_ref(),
        &spec,
        &args.out,
        args.resume.as_deref(),
    )?;
    println!(
        "trained {} steps; metrics {}",
        result.steps_run,
        result.metrics.display()
    );
    println!(
        "final checkpoint {}",
        result.final_checkpoint.display()
    );
    println!("best checkpoint  {}", result.best_checkpoint.display());
    if let (Some(f), Some(b)) = (result.final_accuracy, result.best_accuracy) {
        println!("final accuracy {f:.4}, best accuracy {b:.4}");
    }
    Ok(())
}

fn run_eval(args: &EvalArgs) -> Result<()> {
    let ds = args.data.load()?;
    let accuracy = evaluate_checkpoint(&args.ckpt, &ds, args.batch)?;
    println!(
        "accuracy {:.4} over {} images ({})",
        accuracy,
        ds.len(),
        ds.split
    );
    Ok(())
}

fn run_export_maps(args: &ExportMapsArgs) -> Result<()> {
    let (ckpt, mut model) = model_from_checkpoint(&args.ckpt)?;
    let image = load_ppm::<f32>(&args.image)?;
    let shape = image.shape().to_vec();
    let batched = image.reshaped(&[1, shape[0], shape[1], shape[2]])?;
    let reduce = match args.channel {
        Some(c) => MapReduce::SingleChannel(c),
        None => MapReduce::ChannelMean,
    };
    let extraction = extract_modulation_maps(
        &mut model,
        &batched,
        Some(args.stage as usize - 1),
        reduce,
        args.upsample.into(),
        args.per_head,
    )?;
    if let Some(warning) = &extraction.warning {
        log::warn!("{warning}");
        eprintln!("warning: {warning}");
    }
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    for map in &extraction.maps {
        let path = args.out.join(format!("{}.grid", map.name));
        write_grid(&path, map, &ckpt.config.name)?;
    }
    println!(
        "wrote {} map(s) to {}",
        extraction.maps.len(),
        args.out.display()
    );
    Ok(())
}

fn run_attn_distance(args: &AttnDistanceArgs) -> Result<()> {
    let (_, mut model) = model_from_checkpoint(&args.ckpt)?;
    let ds = args.data.load()?;
    let batch = probe_batch(&ds, args.batch)?;
    let report = mean_attention_distance(&mut model, &batch)?;
    let layers = report.attention_distances.unwrap_or_default();

    let mut csv = String::from("stage,block,head,distance_px\n");
    for layer in &layers {
        for (head, d) in layer.per_head.iter().enumerate() {
            let _ = writeln!(csv, "{},{},{head},{d:.6}", layer.stage, layer.block);
        }
    }
    atomic_write(&args.out, csv.as_bytes())?;

    if let Some(warning) = &report.warning {
        log::warn!("{warning}");
        eprintln!("warning: {warning}");
    }
    for layer in &layers {
        println!(
            "stage {} block {}: mean {:.2}px, spread {:.2}px over {} heads",
            layer.stage,
            layer.block,
            layer.mean,
            layer.std,
            layer.per_head.len()
        );
    }
    println!("distances written to {}", args.out.display());
    Ok(())
}

fn run_bench(args: &BenchArgs) -> Result<()> {
    let cfg = preset(&args.preset)?;
    let mut model = Model::<f32>::build(&cfg, 0)?;
    let mut rng = Rng::from_seed(1);
    let data: Vec<f32> = (0..args.batch * args.input_size * args.input_size * 3)
        .map(|_| rng.uniform(-1.0, 1.0) as f32)
        .collect();
    let x = Tensor::from_vec(&[args.batch, args.input_size, args.input_size, 3], data)?;

    let forward = |model: &mut Model<f32>| -> Result<f64> {
        let started = Instant::now();
        let mut g = Graph::new();
        let node = g.constant(x.clone());
        model.forward(&mut g, node, Mode::Eval, None, CaptureSpec::none())?;
        Ok(started.elapsed().as_secs_f64() * 1e3)
    };

    forward(&mut model)?; // warmup; first pass may pay allocation costs
    let mut times = Vec::with_capacity(args.reps);
    for _ in 0..args.reps {
        times.push(forward(&mut model)?);
    }
    let mean = times.iter().sum::<f64>() / times.len() as f64;
    let best = times.iter().cloned().fold(f64::INFINITY, f64::min);
    println!(
        "{} @ {}x{} batch {}: mean {:.1} ms/pass (best {:.1}), {:.1} images/s",
        cfg.name,
        args.input_size,
        args.input_size,
        args.batch,
        mean,
        best,
        args.batch as f64 / (mean / 1e3)
    );
    for (i, t) in times.iter().enumerate() {
        log::info!("rep {i}: {t:.2} ms");
    }
    Ok(())
}

fn run_ablation(args: &AblationArgs) -> Result<()> {
    let variants = ablation_family(&args.family)?;
    let mut csv = String::from("variant,params,flops\n");
    let mut shown = Vec::new();
    for (name, cfg) in variants {
        match cfg {
            Ok(cfg) => {
                let model = Model::<f32>::build(&cfg, 0)?;
                let report = count_flops(&model, args.input_size)?;
                let (p, f) = (report.total_params(), report.total_flops());
                let _ = writeln!(csv, "{},{p},{f}", quote_csv(&name));
                shown.push(format!("{name}: {p} params, {f} flops"));
            }
            Err(e) => {
                log::warn!("skipping {name}: {e}");
                eprintln!("note: {name} is not buildable at this scale ({e})");
            }
        }
    }
    atomic_write(&args.out, csv.as_bytes())?;
    for line in &shown {
        println!("{line}");
    }
    println!("table written to {}", args.out.display());
    Ok(())
}

// ====================================================================
// Entry
// ====================================================================

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Summarize(a) => run_summarize(a),
        Command::Gradcheck(a) => run_gradcheck(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::ExportMaps(a) => run_export_maps(a),
        Command::AttnDistance(a) => run_attn_distance(a),
        Command::Bench(a) => run_bench(a),
        Command::Ablation(a) => run_ablation(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SMT_LOG", "error"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse(); // malformed invocations exit 2 here
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Error::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
