//! The end-to-end model: expressions plus a video in, per-query masks,
//! boxes, and confidences out.
//!
//! Per frame, the shared trunk runs once regardless of how many
//! expressions ride along: backbone pyramid, language-gated fusion at three
//! scales, a merge onto the stride-16 grid, and the token encoder. Each
//! expression then recovers its own view of the shared tokens by gating
//! them with its attention summary, and runs the lightweight tail: query
//! decoding, box/score heads, and dynamic mask kernels.
//!
//! [`RunMode::Single`] processes expressions one at a time, re-running the
//! trunk for each — the baseline the invocation counters and benchmarks
//! compare against. With one expression the two modes are bit-identical,
//! because single mode literally is the shared pass with a one-expression
//! batch.

use std::path::Path;

use crate::decoder::{
    build_queries, decode_embeddings, encode_features, predict_boxes, score_logits, DecoderParams,
};
use crate::error::{Error, Result};
use crate::fusion::{tokens_to_feature, AttentionParams, FusionParams};
use crate::harness::config::RunConfig;
use crate::harness::encoders::{
    encode_frames, encode_words, FramePyramid, TextEncoderParams, VisualEncoderParams,
};
use crate::harness::scene::ExpressionSpec;
use crate::loss::{FramePrediction, QueryPrediction};
use crate::multi::{decouple_tokens, multi_instance_fusion};
use crate::patch::{flatten_patches, merge_scales, predict_masks, KernelHeadParams, PatchMask};
use crate::refine::{refine_masks, RefineParams};
use crate::tensor::{resize_bilinear, ParamStore, Params, Tensor};

/// Stride of the grid the mask kernels run on.
pub const MASK_STRIDE: usize = 16;

pub struct Model {
    pub visual: VisualEncoderParams,
    pub text: TextEncoderParams,
    pub fuse8: FusionParams,
    pub fuse16: FusionParams,
    pub fuse32: FusionParams,
    /// Gate that recovers one expression's view of the shared tokens.
    pub decouple: AttentionParams,
    pub decoder: DecoderParams,
    pub kernel_head: KernelHeadParams,
    pub refine: RefineParams,
}

impl Model {
    /// Creates or fetches every parameter under fixed name prefixes, so a
    /// checkpoint can rebuild the identical model.
    pub fn build(store: &mut impl Params, cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let dim = cfg.dim;
        Ok(Model {
            visual: VisualEncoderParams::new(store, "venc", dim)?,
            text: TextEncoderParams::new(store, "text", dim)?,
            fuse8: FusionParams::new(store, "fuse8", dim, cfg.scf_bandwidth, cfg.scf_enabled)?,
            fuse16: FusionParams::new(store, "fuse16", dim, cfg.scf_bandwidth, cfg.scf_enabled)?,
            fuse32: FusionParams::new(store, "fuse32", dim, cfg.scf_bandwidth, cfg.scf_enabled)?,
            decouple: AttentionParams::new(store, "decouple", dim)?,
            decoder: DecoderParams::new(
                store,
                "dec",
                dim,
                cfg.enc_layers,
                cfg.dec_layers,
                cfg.num_queries,
                cfg.positional,
            )?,
            kernel_head: KernelHeadParams::new(store, "kernel", dim, cfg.cpk_hidden, cfg.cpk_patch)?,
            refine: RefineParams::new(
                store,
                "refine",
                dim,
                cfg.cpk_patch,
                cfg.cpk_hidden,
                cfg.mso_enabled,
            )?,
        })
    }

    /// Rebuilds a model from a checkpoint whose metadata carries the
    /// configuration. Parameters are only fetched, never created, so a
    /// truncated checkpoint surfaces as an unknown-parameter error.
    pub fn from_checkpoint(path: &Path) -> Result<(Self, ParamStore, RunConfig)> {
        let (store, meta) = ParamStore::load(path)?;
        let cfg = RunConfig::parse(&meta)?;
        let model = {
            let mut view = store.view();
            Model::build(&mut view, &cfg)?
        };
        Ok((model, store, cfg))
    }
}

/// How a video with several expressions is processed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunMode {
    /// One full pass per expression (no sharing).
    Single,
    /// One shared trunk pass; expressions split off at the token gate.
    Multi,
}

/// Work counters, tallied per call into the respective block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize)]
pub struct RunStats {
    /// Backbone invocations; the whole clip counts once.
    pub visual_encoder_evals: u64,
    pub fusion_evals: u64,
    pub token_encoder_evals: u64,
    pub decouple_evals: u64,
    pub decoder_evals: u64,
    pub kernel_evals: u64,
    pub refine_evals: u64,
}

/// One expression's embedded words `(Nw, C)` and sentence vector `(C,)`.
pub struct ExpressionInput {
    pub words: Tensor,
    pub sentence: Tensor,
}

/// Embeds scene expressions with the model's text encoder.
pub fn embed_expressions(
    exprs: &[ExpressionSpec],
    text: &TextEncoderParams,
) -> Result<Vec<ExpressionInput>> {
    exprs
        .iter()
        .map(|e| {
            let (words, sentence) = encode_words(&e.words, text)?;
            Ok(ExpressionInput { words, sentence })
        })
        .collect()
}

/// Pre-fusion visual features one frame of refinement needs.
pub struct FrameVisuals {
    pub f8: Tensor,
    pub f4: Tensor,
}

/// Everything the heads produced for one expression.
pub struct ExpressionOutput {
    /// Query embeddings, `(T, N, C)`.
    pub embeddings: Tensor,
    /// Stride-16 patch masks, indexed `[frame][query]`.
    pub masks: Vec<Vec<PatchMask>>,
    /// Normalized center/size boxes, `(T, N, 4)`.
    pub boxes: Tensor,
    /// Confidence logits, `(T, N)`.
    pub score_logits: Tensor,
}

pub struct VideoOutputs {
    pub expressions: Vec<ExpressionOutput>,
    pub visuals: Vec<FrameVisuals>,
}

/// One shared pass over the clip for a batch of expressions.
fn run_pass(
    model: &Model,
    frames: &[Tensor],
    exprs: &[ExpressionInput],
    stats: &mut RunStats,
) -> Result<VideoOutputs> {
    if exprs.is_empty() {
        return Err(Error::EmptyContext { op: "run_pass" });
    }
    stats.visual_encoder_evals += 1;
    let pyramids: Vec<FramePyramid> = encode_frames(frames, &model.visual)?;
    let expr_words: Vec<Tensor> = exprs.iter().map(|e| e.words.clone()).collect();

    // Shared trunk: fuse language into each scale, merge, encode tokens.
    let mut encoded = Vec::with_capacity(pyramids.len());
    let mut visuals = Vec::with_capacity(pyramids.len());
    for p in &pyramids {
        let fused8 = multi_instance_fusion(&expr_words, &p.f8, &model.fuse8)?;
        let fused16 = multi_instance_fusion(&expr_words, &p.f16, &model.fuse16)?;
        let fused32 = multi_instance_fusion(&expr_words, &p.f32, &model.fuse32)?;
        stats.fusion_evals += 3;
        let merged = merge_scales(&fused8, &fused16, &fused32)?;
        let (h, w) = (merged.shape()[1], merged.shape()[2]);
        let tokens = encode_features(&merged, &model.decoder)?;
        stats.token_encoder_evals += 1;
        encoded.push((tokens, h, w));
        visuals.push(FrameVisuals {
            f8: p.f8.clone(),
            f4: p.f4.clone(),
        });
    }

    // Per-expression tail on the shared tokens.
    let n = model.decoder.num_queries();
    let c = model.decoder.dim();
    let mut outputs = Vec::with_capacity(exprs.len());
    for e in exprs {
        let mut frame_tokens = Vec::with_capacity(encoded.len());
        for (tokens, _, _) in &encoded {
            frame_tokens.push(decouple_tokens(tokens, &e.words, &model.decouple)?);
            stats.decouple_evals += 1;
        }
        let queries = build_queries(&e.sentence, &model.decoder)?;
        let embeddings = decode_embeddings(&queries, &frame_tokens, &model.decoder)?;
        stats.decoder_evals += 1;
        let boxes = predict_boxes(&embeddings, &model.decoder)?;
        let scores = score_logits(&embeddings, &model.decoder)?;
        let mut masks = Vec::with_capacity(frame_tokens.len());
        for (t, (tokens, (_, h, w))) in frame_tokens.iter().zip(&encoded).enumerate() {
            let q_t = embeddings.narrow0(t, 1)?.reshape(&[n, c])?;
            let feature = tokens_to_feature(tokens, *h, *w)?;
            masks.push(predict_masks(&q_t, tokens, &feature, &model.kernel_head, MASK_STRIDE)?);
            stats.kernel_evals += 1;
        }
        outputs.push(ExpressionOutput {
            embeddings,
            masks,
            boxes,
            score_logits: scores,
        });
    }
    Ok(VideoOutputs {
        expressions: outputs,
        visuals,
    })
}

/// Runs the pipeline over one clip in the chosen mode.
pub fn run_video(
    model: &Model,
    frames: &[Tensor],
    exprs: &[ExpressionInput],
    mode: RunMode,
    stats: &mut RunStats,
) -> Result<VideoOutputs> {
    match mode {
        RunMode::Multi => run_pass(model, frames, exprs, stats),
        RunMode::Single => {
            if exprs.is_empty() {
                return Err(Error::EmptyContext { op: "run_video" });
            }
            let mut expressions = Vec::with_capacity(exprs.len());
            let mut visuals = Vec::new();
            for e in exprs {
                let mut out = run_pass(model, frames, std::slice::from_ref(e), stats)?;
                expressions.push(out.expressions.pop().expect("one expression in, one out"));
                visuals = out.visuals;
            }
            Ok(VideoOutputs { expressions, visuals })
        }
    }
}

/// `(A, B, ...)` tensor to its `i`-th sub-tensor `(B, ...)`.
fn index0(t: &Tensor, i: usize) -> Result<Tensor> {
    let rest: Vec<usize> = t.shape()[1..].to_vec();
    t.narrow0(i, 1)?.reshape(&rest)
}

/// Upsamples one stride-16 patch mask to full-resolution logits `(H, W)`
/// without learned refinement (two bilinear doublings).
pub fn coarse_to_full(mask: &PatchMask) -> Result<Tensor> {
    let flat = flatten_patches(mask)?;
    let (h, w) = (flat.shape()[0], flat.shape()[1]);
    let up = resize_bilinear(&resize_bilinear(&flat.reshape(&[1, h, w])?, 2)?, 2)?;
    up.reshape(&[4 * h, 4 * w])
}

/// Reshapes one expression's outputs into per-query, per-frame predictions
/// for matching and loss computation. Coarse logits are upsampled to full
/// resolution; boxes and scores are graph-tracked slices.
pub fn query_predictions(output: &ExpressionOutput) -> Result<Vec<QueryPrediction>> {
    let t_frames = output.masks.len();
    let n = output.boxes.shape()[1];
    let mut queries = Vec::with_capacity(n);
    for q in 0..n {
        let mut frames = Vec::with_capacity(t_frames);
        for t in 0..t_frames {
            let coarse = coarse_to_full(&output.masks[t][q])?;
            let box_cxcywh = index0(&index0(&output.boxes, t)?, q)?;
            let score_logit = index0(&index0(&output.score_logits, t)?, q)?.reshape(&[])?;
            frames.push(FramePrediction {
                coarse,
                box_cxcywh,
                score_logit,
            });
        }
        queries.push(QueryPrediction { frames });
    }
    Ok(queries)
}

/// Full-resolution refined logits for one query across all frames.
pub fn refine_query(
    model: &Model,
    output: &ExpressionOutput,
    visuals: &[FrameVisuals],
    query: usize,
    stats: &mut RunStats,
) -> Result<Vec<Tensor>> {
    output
        .masks
        .iter()
        .zip(visuals)
        .map(|(frame_masks, v)| {
            stats.refine_evals += 1;
            refine_masks(&frame_masks[query], &v.f8, &v.f4, &model.refine)
        })
        .collect()
}

/// Mean over frames of the sigmoid confidence, per query `(N,)`.
pub fn mean_scores(output: &ExpressionOutput) -> Result<Vec<f64>> {
    let probs = output.score_logits.sigmoid()?;
    let (t, n) = (probs.shape()[0], probs.shape()[1]);
    Ok((0..n)
        .map(|q| (0..t).map(|i| probs.data()[i * n + q]).sum::<f64>() / t as f64)
        .collect())
}

/// The query with the highest mean confidence and that confidence.
pub fn best_query(output: &ExpressionOutput) -> Result<(usize, f64)> {
    let scores = mean_scores(output)?;
    let best = scores
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, &s)| (i, s))
        .expect("at least one query");
    Ok(best)
}
