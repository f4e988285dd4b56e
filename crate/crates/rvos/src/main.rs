//! Command-line front end: generate scenes, train, run inference,
//! evaluate prediction trees, and benchmark expression sharing.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use rvos::harness::bench::bench;
use rvos::harness::config::RunConfig;
use rvos::harness::io::{evaluate_dirs, write_report};
use rvos::harness::pipeline::{Model, RunMode};
use rvos::harness::scene::{generate_scene, validate_scene, SceneSpec};
use rvos::harness::train::{final_checkpoint_path, infer_scene, train, write_ground_truth};
use rvos::{Error, Result};

#[derive(Parser)]
#[command(name = "rvos", version, about = "Referring video object segmentation on synthetic desk scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene: spec JSON plus ground-truth masks.
    Gen(GenArgs),
    /// Train a model from a configuration file.
    Train(TrainArgs),
    /// Run a trained model over a scene and write predicted masks.
    Infer(InferArgs),
    /// Score a prediction tree against a ground-truth tree.
    Eval(EvalArgs),
    /// Compare per-expression against shared processing.
    Bench(BenchArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    seed: u64,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 3)]
    frames: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 2)]
    objects: usize,
    /// Phrasing variants per object (1..=3).
    #[arg(long, default_value_t = 1)]
    paraphrases: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// `key = value` configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory for checkpoints and the loss curve.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Single,
    Multi,
}

#[derive(Args)]
struct InferArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    ckpt: PathBuf,
    /// Scene directory (containing scene.json) or a scene JSON file.
    #[arg(long)]
    scene: PathBuf,
    /// Process expressions one at a time or in one shared pass.
    #[arg(long, value_enum, default_value_t = ModeArg::Single)]
    mode: ModeArg,
    /// Shorthand for `--mode multi`.
    #[arg(long)]
    multi_object: bool,
    #[arg(long)]
    out: PathBuf,
    /// Additionally dump raw mask logits next to each PGM.
    #[arg(long)]
    dump_logits: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of predicted masks (with scores.json).
    #[arg(long)]
    pred: PathBuf,
    /// Directory of ground-truth masks.
    #[arg(long)]
    gt: PathBuf,
    /// Where to write the JSON report.
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    report: PathBuf,
    #[arg(long, default_value_t = 424242)]
    seed: u64,
}

fn load_scene(path: &Path) -> Result<SceneSpec> {
    let file = if path.is_dir() { path.join("scene.json") } else { path.to_path_buf() };
    let spec: SceneSpec = serde_json::from_str(&fs::read_to_string(&file)?)?;
    validate_scene(&spec)?;
    Ok(spec)
}

fn run_gen(args: &GenArgs) -> Result<()> {
    let spec = generate_scene(
        args.seed,
        args.frames,
        args.height,
        args.width,
        args.objects,
        args.paraphrases,
    )?;
    fs::create_dir_all(&args.out)?;
    fs::write(
        args.out.join("scene.json"),
        serde_json::to_string_pretty(&spec)?,
    )?;
    write_ground_truth(&spec, &args.out)?;
    println!(
        "scene {}: {} objects, {} expressions, {} frames of {}x{} -> {}",
        args.seed,
        spec.objects.len(),
        spec.expressions.len(),
        spec.frames,
        spec.width,
        spec.height,
        args.out.display()
    );
    Ok(())
}

fn run_train(args: &TrainArgs) -> Result<()> {
    let cfg = RunConfig::from_file(&args.config)?;
    let (_, report) = train(&cfg, &args.out)?;
    println!(
        "trained {} iterations, final loss {:.5} -> {}",
        report.iterations_run,
        report.final_loss,
        final_checkpoint_path(&args.out).display()
    );
    if let Some((iter, jf)) = report.evals.last() {
        println!("training-set J&F {jf:.4} at iteration {iter}");
    }
    Ok(())
}

fn run_infer(args: &InferArgs) -> Result<()> {
    let (model, _store, _cfg) = Model::from_checkpoint(&args.ckpt)?;
    let spec = load_scene(&args.scene)?;
    let mode = if args.multi_object {
        RunMode::Multi
    } else {
        match args.mode {
            ModeArg::Single => RunMode::Single,
            ModeArg::Multi => RunMode::Multi,
        }
    };
    fs::create_dir_all(&args.out)?;
    let stats = infer_scene(&model, &spec, mode, &args.out, args.dump_logits)?;
    println!(
        "{} expressions -> {} (backbone runs: {})",
        spec.expressions.len(),
        args.out.join("masks").display(),
        stats.visual_encoder_evals
    );
    Ok(())
}

fn run_eval(args: &EvalArgs) -> Result<()> {
    let report = evaluate_dirs(&args.pred, &args.gt)?;
    write_report(&args.report, &report)?;
    println!(
        "J {:.4}  F {:.4}  J&F {:.4}  overall IoU {:.4}  mAP {:.4}",
        report.j, report.f, report.jf, report.overall_iou, report.map
    );
    Ok(())
}

fn run_bench(args: &BenchArgs) -> Result<()> {
    let (model, _store, cfg) = Model::from_checkpoint(&args.ckpt)?;
    let report = bench(&model, &cfg, args.seed, &[1, 2, 5, 10])?;
    for p in &report.points {
        println!(
            "{:2} expressions: single {:8.2} ms   multi {:8.2} ms",
            p.expressions, p.single_ms, p.multi_ms
        );
    }
    println!(
        "per object at {} expressions: single {:.2} ms, multi {:.2} ms ({:.2}x)",
        report.points.last().map_or(0, |p| p.expressions),
        report.single_per_object_ms,
        report.multi_per_object_ms,
        report.speedup
    );
    println!(
        "backbone runs at the largest count: multi {}, single {}",
        report.multi_visual_encoder_evals, report.single_visual_encoder_evals
    );
    println!(
        "token drift: decoder transform {:.3} vs same-distribution split {:.3}",
        report.drift.decoder_transform, report.drift.split_halves
    );
    let file = fs::File::create(&args.report)?;
    serde_json::to_writer_pretty(file, &report)?;
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Gen(args) => run_gen(args),
        Command::Train(args) => run_train(args),
        Command::Infer(args) => run_infer(args),
        Command::Eval(args) => run_eval(args),
        Command::Bench(args) => run_bench(args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::Config(_) = e {
                eprintln!("hint: run with --help for accepted options");
            }
            ExitCode::FAILURE
        }
    }
}
