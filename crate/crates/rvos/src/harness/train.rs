//! Training: overfit the model onto a fixed set of synthetic scenes.
//!
//! Each iteration runs one scene in the shared (multi-expression) mode,
//! averages the per-expression losses, and takes one SGD-with-momentum
//! step. Because the optimizer replaces parameter tensors, the model is
//! rebuilt from the store every iteration — a cheap fetch of shared
//! buffers, not a re-initialization.
//!
//! Two checkpoints bracket a run: `init.ckpt` before the first step and
//! `model.ckpt` after the last. Both embed the configuration, and the
//! iteration-0 loss is exactly reproducible from `init.ckpt`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::harness::encoders::{encode_text, tokenize};
use crate::harness::pipeline::{
    best_query, embed_expressions, query_predictions, refine_query, run_video, ExpressionInput,
    Model, RunMode, RunStats,
};
use crate::harness::scene::{generate_scene, render_video, SceneSpec};
use crate::loss::{select_query, total_loss, FrameTargets};
use crate::metrics::{evaluate_pairs, Mask};
use crate::tensor::{no_grad, sorted_sum, ParamStore, Tensor};

/// One scene prepared for repeated passes: rendered frames, tokenized
/// expressions, and per-expression targets.
pub struct SceneBundle {
    pub spec: SceneSpec,
    pub frames: Vec<Tensor>,
    pub tokens: Vec<Vec<usize>>,
    pub targets: Vec<Vec<FrameTargets>>,
}

/// Generates and prepares the training scenes named by the configuration.
/// Scene seeds derive from the training seed, so a run is reproducible
/// end to end.
pub fn build_training_scenes(cfg: &RunConfig) -> Result<Vec<SceneBundle>> {
    (0..cfg.train_scenes)
        .map(|i| {
            let spec = generate_scene(
                cfg.train_seed.wrapping_add(1000 + i as u64),
                cfg.train_frames,
                cfg.train_height,
                cfg.train_width,
                cfg.train_objects,
                cfg.train_paraphrases,
            )?;
            bundle_scene(spec)
        })
        .collect()
}

/// Prepares one scene for training or evaluation.
pub fn bundle_scene(spec: SceneSpec) -> Result<SceneBundle> {
    let (frames, _) = render_video(&spec)?;
    let tokens = spec
        .expressions
        .iter()
        .map(|e| tokenize(&e.words))
        .collect::<Result<Vec<_>>>()?;
    let targets = crate::harness::scene::expression_targets(&spec)?;
    Ok(SceneBundle {
        spec,
        frames,
        tokens,
        targets,
    })
}

fn embed_tokens(bundle: &SceneBundle, model: &Model) -> Result<Vec<ExpressionInput>> {
    bundle
        .tokens
        .iter()
        .map(|ids| {
            let (words, sentence) = encode_text(ids, &model.text)?;
            Ok(ExpressionInput { words, sentence })
        })
        .collect()
}

/// Full forward pass over one scene: mean of the per-expression losses.
/// The text embedding runs inside the graph, so language parameters train
/// together with everything else.
pub fn scene_loss(store: &ParamStore, cfg: &RunConfig, bundle: &SceneBundle) -> Result<Tensor> {
    let model = {
        let mut view = store.view();
        Model::build(&mut view, cfg)?
    };
    let exprs = embed_tokens(bundle, &model)?;
    let mut stats = RunStats::default();
    let outs = run_video(&model, &bundle.frames, &exprs, RunMode::Multi, &mut stats)?;
    let mut losses = Vec::with_capacity(outs.expressions.len());
    for (out, targets) in outs.expressions.iter().zip(&bundle.targets) {
        let preds = query_predictions(out)?;
        let (matched, _) = select_query(&preds, targets, &cfg.loss)?;
        let refined = refine_query(&model, out, &outs.visuals, matched, &mut stats)?;
        losses.push(total_loss(&preds, matched, &refined, targets, &cfg.loss)?);
    }
    sorted_sum(&losses)?.mul_scalar(1.0 / losses.len() as f64)
}

/// Inference-style quality on prepared scenes: for every expression pick
/// the highest-confidence query, refine it, threshold, and score the pooled
/// region/boundary quality against the ground truth.
pub fn evaluate_scenes(store: &ParamStore, cfg: &RunConfig, scenes: &[SceneBundle]) -> Result<f64> {
    no_grad(|| {
        let model = {
            let mut view = store.view();
            Model::build(&mut view, cfg)?
        };
        let mut pairs = Vec::new();
        for bundle in scenes {
            let exprs = embed_tokens(bundle, &model)?;
            let mut stats = RunStats::default();
            let outs = run_video(&model, &bundle.frames, &exprs, RunMode::Multi, &mut stats)?;
            for (out, targets) in outs.expressions.iter().zip(&bundle.targets) {
                let (query, _) = best_query(out)?;
                let refined = refine_query(&model, out, &outs.visuals, query, &mut stats)?;
                for (logits, target) in refined.iter().zip(targets) {
                    pairs.push((Mask::from_logits(logits)?, Mask::from_logits(&target.mask)?));
                }
            }
        }
        Ok(evaluate_pairs(&pairs)?.jf)
    })
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct TrainPoint {
    pub iteration: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainReport {
    /// Iterations actually run (early stop may cut the schedule short).
    pub iterations_run: usize,
    pub final_loss: f64,
    /// One point per iteration.
    pub curve: Vec<TrainPoint>,
    /// `(iteration, J&F over the training scenes)` at evaluation points.
    pub evals: Vec<(usize, f64)>,
    pub stopped_early: bool,
}

/// Location of the pre-training checkpoint inside an output directory.
pub fn init_checkpoint_path(out: &Path) -> std::path::PathBuf {
    out.join("init.ckpt")
}

/// Location of the final checkpoint inside an output directory.
pub fn final_checkpoint_path(out: &Path) -> std::path::PathBuf {
    out.join("model.ckpt")
}

/// Trains from scratch per the configuration, writing checkpoints and a
/// per-iteration loss curve (`loss.csv`) into `out`.
pub fn train(cfg: &RunConfig, out: &Path) -> Result<(ParamStore, TrainReport)> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    let scenes = build_training_scenes(cfg)?;
    let mut store = ParamStore::new(b"rvos", cfg.train_seed);
    // Materialize every parameter once, then freeze the shape of the run.
    Model::build(&mut store, cfg)?;
    store.save(&init_checkpoint_path(out), &cfg.to_text())?;

    let mut curve = Vec::with_capacity(cfg.train_iters);
    let mut evals = Vec::new();
    let mut stopped_early = false;
    for iteration in 0..cfg.train_iters {
        let bundle = &scenes[iteration % scenes.len()];
        let loss = scene_loss(&store, cfg, bundle)?;
        let value = loss.item()?;
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "training diverged: loss {value} at iteration {iteration}"
            )));
        }
        let grads = loss.backward()?;
        let grad_norm =
            store.sgd_step_clipped(&grads, cfg.train_lr, cfg.train_momentum, cfg.train_clip)?;
        if !grad_norm.is_finite() {
            return Err(Error::Numeric(format!(
                "training diverged: gradient norm {grad_norm} at iteration {iteration}"
            )));
        }
        curve.push(TrainPoint {
            iteration,
            loss: value,
            grad_norm,
        });
        if cfg.train_log_every != 0 && iteration % cfg.train_log_every == 0 {
            println!("iter {iteration:5}  loss {value:.5}  |g| {grad_norm:.4}");
        }
        let due = cfg.train_eval_every != 0
            && (iteration + 1) % cfg.train_eval_every == 0;
        if due {
            let jf = evaluate_scenes(&store, cfg, &scenes)?;
            if cfg.train_log_every != 0 {
                println!("iter {iteration:5}  train J&F {jf:.4}");
            }
            evals.push((iteration + 1, jf));
            if cfg.train_target_jf > 0.0 && jf >= cfg.train_target_jf {
                stopped_early = true;
                break;
            }
        }
    }
    store.save(&final_checkpoint_path(out), &cfg.to_text())?;

    let mut csv = String::from("iteration,loss,grad_norm\n");
    for p in &curve {
        let _ = writeln!(csv, "{},{},{}", p.iteration, p.loss, p.grad_norm);
    }
    fs::write(out.join("loss.csv"), csv)?;

    let report = TrainReport {
        iterations_run: curve.len(),
        final_loss: curve.last().map_or(f64::NAN, |p| p.loss),
        curve,
        evals,
        stopped_early,
    };
    let file = fs::File::create(out.join("train_report.json"))?;
    serde_json::to_writer_pretty(file, &report)?;
    Ok((store, report))
}

/// Re-runs inference on one scene with a trained model and writes the
/// per-expression masks and confidences via [`crate::harness::io`].
pub fn infer_scene(
    model: &Model,
    spec: &SceneSpec,
    mode: RunMode,
    out: &Path,
    dump_logits: bool,
) -> Result<RunStats> {
    let bundle = bundle_scene(spec.clone())?;
    no_grad(|| {
        let mut stats = RunStats::default();
        let exprs = embed_expressions(&spec.expressions, &model.text)?;
        let outs = run_video(model, &bundle.frames, &exprs, mode, &mut stats)?;
        let masks_dir = out.join("masks");
        fs::create_dir_all(&masks_dir)?;
        let mut scores = std::collections::BTreeMap::new();
        for (i, out_e) in outs.expressions.iter().enumerate() {
            let name = format!("expr_{i:03}");
            let expr_dir = masks_dir.join(&name);
            fs::create_dir_all(&expr_dir)?;
            let (query, confidence) = best_query(out_e)?;
            let refined = refine_query(model, out_e, &outs.visuals, query, &mut stats)?;
            for (t, logits) in refined.iter().enumerate() {
                let mask = Mask::from_logits(logits)?;
                crate::harness::io::write_mask_pgm(
                    &expr_dir.join(format!("frame_{t:03}.pgm")),
                    &mask,
                )?;
                if dump_logits {
                    crate::tensor::write_tensor(
                        &expr_dir.join(format!("frame_{t:03}.logits.sgt")),
                        logits,
                    )?;
                }
            }
            scores.insert(name, confidence);
        }
        crate::harness::io::write_scores(&masks_dir, &scores)?;
        Ok(stats)
    })
}

/// Writes a scene's ground truth in the same directory layout predictions
/// use, for direct evaluation.
pub fn write_ground_truth(spec: &SceneSpec, out: &Path) -> Result<()> {
    let (_, masks) = render_video(spec)?;
    let gt_dir = out.join("gt");
    for (i, expr) in spec.expressions.iter().enumerate() {
        let expr_dir = gt_dir.join(format!("expr_{i:03}"));
        fs::create_dir_all(&expr_dir)?;
        for (t, frame_masks) in masks.iter().enumerate() {
            crate::harness::io::write_mask_pgm(
                &expr_dir.join(format!("frame_{t:03}.pgm")),
                &frame_masks[expr.object],
            )?;
        }
    }
    Ok(())
}
