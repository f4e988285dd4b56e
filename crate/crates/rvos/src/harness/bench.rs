//! Latency and feature-drift measurements.
//!
//! The benchmark times the single-pass-per-expression baseline against the
//! shared-trunk mode at growing expression counts on one clip, reporting
//! median-of-five wall times and the backbone invocation counters. It also
//! measures how far a decoder block transforms the encoded tokens away
//! from their own distribution, against a same-distribution split as the
//! null baseline — a diagnostic, not a gate.

use std::time::Instant;

use serde::Serialize;

use crate::decoder::encode_features;
use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::harness::encoders::encode_frames;
use crate::harness::pipeline::{
    embed_expressions, run_video, ExpressionInput, Model, RunMode, RunStats,
};
use crate::harness::scene::generate_scene;
use crate::harness::train::bundle_scene;
use crate::multi::multi_instance_fusion;
use crate::patch::merge_scales;
use crate::tensor::{no_grad, Tensor};

#[derive(Clone, Copy, Debug, Serialize)]
pub struct BenchPoint {
    pub expressions: usize,
    pub single_ms: f64,
    pub multi_ms: f64,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct DriftReport {
    /// Drift of decoder-transformed tokens from the encoded tokens.
    pub decoder_transform: f64,
    /// Null baseline: drift between two halves of the same token set.
    pub split_halves: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub points: Vec<BenchPoint>,
    /// Per-object wall time at the largest expression count.
    pub single_per_object_ms: f64,
    pub multi_per_object_ms: f64,
    /// `single_per_object_ms / multi_per_object_ms`.
    pub speedup: f64,
    /// Backbone invocations at the largest count (sharing makes this 1).
    pub multi_visual_encoder_evals: u64,
    pub single_visual_encoder_evals: u64,
    pub drift: DriftReport,
}

fn median_ms(mut samples: Vec<f64>) -> f64 {
    samples.sort_by(f64::total_cmp);
    samples[samples.len() / 2]
}

fn time_mode(
    model: &Model,
    frames: &[Tensor],
    exprs: &[ExpressionInput],
    mode: RunMode,
    repeats: usize,
) -> Result<f64> {
    let mut samples = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        let mut stats = RunStats::default();
        run_video(model, frames, exprs, mode, &mut stats)?;
        samples.push(start.elapsed().as_secs_f64() * 1e3);
    }
    Ok(median_ms(samples))
}

/// Encoded spatial tokens of every frame stacked into one `(T*HW, C)`
/// population, plus the same tokens pushed through one decoder block.
fn token_populations(
    model: &Model,
    frames: &[Tensor],
    exprs: &[ExpressionInput],
) -> Result<(Tensor, Tensor)> {
    let pyramids = encode_frames(frames, &model.visual)?;
    let words: Vec<Tensor> = exprs.iter().map(|e| e.words.clone()).collect();
    let mut all = Vec::new();
    for p in &pyramids {
        let fused8 = multi_instance_fusion(&words, &p.f8, &model.fuse8)?;
        let fused16 = multi_instance_fusion(&words, &p.f16, &model.fuse16)?;
        let fused32 = multi_instance_fusion(&words, &p.f32, &model.fuse32)?;
        let merged = merge_scales(&fused8, &fused16, &fused32)?;
        all.push(encode_features(&merged, &model.decoder)?);
    }
    let stacked = if all.len() == 1 {
        all.pop().expect("one frame")
    } else {
        let c = all[0].shape()[1];
        let total: usize = all.iter().map(|t| t.shape()[0]).sum();
        let mut data = Vec::with_capacity(total * c);
        for t in &all {
            data.extend_from_slice(t.data());
        }
        Tensor::from_vec(&[total, c], data)?
    };
    let block = model
        .decoder
        .decoder_layers
        .first()
        .or_else(|| model.decoder.encoder_layers.first())
        .ok_or_else(|| Error::Config("drift probe needs at least one layer".into()))?;
    let transformed = block.apply(&stacked, &stacked)?;
    Ok((stacked, transformed))
}

/// Splits the rows into two halves along a seeded random permutation.
/// A parity or block split would correlate with the spatial grid (and its
/// positional encoding), biasing the null comparison.
fn split_rows(t: &Tensor, seed: u64) -> Result<(Tensor, Tensor)> {
    use rand::{Rng, SeedableRng};
    let (n, c) = (t.shape()[0], t.shape()[1]);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
    for i in (1..n).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    let half = n / 2;
    let gather = |rows: &[usize]| -> Result<Tensor> {
        let mut data = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            data.extend_from_slice(&t.data()[i * c..(i + 1) * c]);
        }
        Tensor::from_vec(&[rows.len(), c], data)
    };
    Ok((gather(&order[..half])?, gather(&order[half..])?))
}

/// Runs the full benchmark on a freshly generated clip.
///
/// The clip carries enough expressions to cover `counts` (four objects,
/// three phrasings each). Timings exclude scene rendering and embedding.
pub fn bench(model: &Model, cfg: &RunConfig, seed: u64, counts: &[usize]) -> Result<BenchReport> {
    let max = *counts.iter().max().ok_or_else(|| {
        Error::Config("benchmark needs at least one expression count".into())
    })?;
    let spec = generate_scene(
        seed,
        cfg.train_frames,
        cfg.train_height,
        cfg.train_width,
        4,
        3,
    )?;
    if max > spec.expressions.len() {
        return Err(Error::Config(format!(
            "benchmark scene has {} expressions, requested {max}",
            spec.expressions.len()
        )));
    }
    let bundle = bundle_scene(spec)?;
    no_grad(|| {
        let exprs = embed_expressions(&bundle.spec.expressions, &model.text)?;
        let mut points = Vec::with_capacity(counts.len());
        for &n in counts {
            let subset = &exprs[..n];
            points.push(BenchPoint {
                expressions: n,
                single_ms: time_mode(model, &bundle.frames, subset, RunMode::Single, 5)?,
                multi_ms: time_mode(model, &bundle.frames, subset, RunMode::Multi, 5)?,
            });
        }
        let subset = &exprs[..max];
        let mut single_stats = RunStats::default();
        run_video(model, &bundle.frames, subset, RunMode::Single, &mut single_stats)?;
        let mut multi_stats = RunStats::default();
        run_video(model, &bundle.frames, subset, RunMode::Multi, &mut multi_stats)?;

        let last = points.last().expect("at least one count");
        let single_per = last.single_ms / max as f64;
        let multi_per = last.multi_ms / max as f64;

        let (tokens, transformed) = token_populations(model, &bundle.frames, subset)?;
        let (left, right) = split_rows(&tokens, seed)?;
        let drift = DriftReport {
            decoder_transform: crate::metrics::drift_score(&tokens, &transformed)?,
            split_halves: crate::metrics::drift_score(&left, &right)?,
        };
        Ok(BenchReport {
            points,
            single_per_object_ms: single_per,
            multi_per_object_ms: multi_per,
            speedup: single_per / multi_per,
            multi_visual_encoder_evals: multi_stats.visual_encoder_evals,
            single_visual_encoder_evals: single_stats.visual_encoder_evals,
            drift: DriftReport {
                decoder_transform: drift.decoder_transform,
                split_halves: drift.split_halves,
            },
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ParamStore;

    fn bench_config() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.dim = 8;
        cfg.enc_layers = 1;
        cfg.dec_layers = 1;
        cfg.num_queries = 2;
        cfg.cpk_hidden = 4;
        cfg.train_height = 32;
        cfg.train_width = 32;
        cfg.train_frames = 1;
        cfg
    }

    #[test]
    fn report_counts_backbone_invocations_per_mode() {
        let cfg = bench_config();
        let mut store = ParamStore::new(b"b", 1);
        let model = Model::build(&mut store, &cfg).unwrap();
        let report = bench(&model, &cfg, 3, &[1, 3]).unwrap();
        assert_eq!(report.points.len(), 2);
        assert_eq!(report.multi_visual_encoder_evals, 1);
        assert_eq!(report.single_visual_encoder_evals, 3);
        assert!(report.single_per_object_ms > 0.0);
        assert!(report.multi_per_object_ms > 0.0);
        assert!(report.drift.decoder_transform.is_finite());
        assert!(report.drift.split_halves.is_finite());
    }

    #[test]
    fn oversized_counts_are_rejected() {
        let cfg = bench_config();
        let mut store = ParamStore::new(b"b", 2);
        let model = Model::build(&mut store, &cfg).unwrap();
        // 4 objects x 3 phrasings = 12 expressions available.
        assert!(bench(&model, &cfg, 3, &[13]).is_err());
        assert!(bench(&model, &cfg, 3, &[]).is_err());
    }

    #[test]
    fn split_halves_of_one_population_barely_drift() {
        let cfg = bench_config();
        let mut store = ParamStore::new(b"b", 3);
        let model = Model::build(&mut store, &cfg).unwrap();
        let report = bench(&model, &cfg, 5, &[2]).unwrap();
        // The null split stays well below the structural transform.
        assert!(
            report.drift.split_halves < report.drift.decoder_transform,
            "null {} vs transform {}",
            report.drift.split_halves,
            report.drift.decoder_transform
        );
    }
}
