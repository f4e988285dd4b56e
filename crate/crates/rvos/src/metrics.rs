//! Segmentation quality metrics.
//!
//! Masks here are hard binary grids (predictions are thresholded logits).
//! Region quality is plain intersection-over-union; boundary quality
//! extracts 4-connected contours and scores precision/recall with a
//! distance tolerance proportional to the image diagonal. Sequence-level
//! summaries, a detection-style averaged precision over IoU thresholds, and
//! a centroid-drift diagnostic for comparing token populations round out
//! the set.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A binary mask on an `(h, w)` pixel grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    h: usize,
    w: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(h: usize, w: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::Shape {
                op: "mask",
                detail: format!("{} pixels for a {h}x{w} mask", data.len()),
            });
        }
        Ok(Mask { h, w, data })
    }

    pub fn empty(h: usize, w: usize) -> Self {
        Mask { h, w, data: vec![false; h * w] }
    }

    /// Thresholds `(H, W)` logits at zero (probability one half).
    pub fn from_logits(logits: &Tensor) -> Result<Self> {
        if logits.rank() != 2 {
            return Err(Error::Shape {
                op: "mask_from_logits",
                detail: format!("expected (H, W), got {:?}", logits.shape()),
            });
        }
        Ok(Mask {
            h: logits.shape()[0],
            w: logits.shape()[1],
            data: logits.data().iter().map(|&v| v > 0.0).collect(),
        })
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.w + x]
    }

    /// Number of foreground pixels.
    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }
}

fn check_same_grid(a: &Mask, b: &Mask, op: &'static str) -> Result<()> {
    if a.h != b.h || a.w != b.w {
        return Err(Error::Shape {
            op,
            detail: format!("{}x{} vs {}x{}", a.h, a.w, b.h, b.w),
        });
    }
    Ok(())
}

/// Intersection-over-union; two empty masks count as a perfect match.
pub fn region_j(pred: &Mask, gt: &Mask) -> Result<f64> {
    check_same_grid(pred, gt, "region_j")?;
    let mut inter = 0usize;
    let mut union = 0usize;
    for (p, g) in pred.data.iter().zip(&gt.data) {
        inter += (*p && *g) as usize;
        union += (*p || *g) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Foreground pixels with at least one background (or out-of-image)
/// 4-neighbor.
fn contour(mask: &Mask) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for y in 0..mask.h {
        for x in 0..mask.w {
            if !mask.get(y, x) {
                continue;
            }
            let edge = y == 0
                || x == 0
                || y + 1 == mask.h
                || x + 1 == mask.w
                || !mask.get(y - 1, x)
                || !mask.get(y + 1, x)
                || !mask.get(y, x - 1)
                || !mask.get(y, x + 1);
            if edge {
                out.push((y, x));
            }
        }
    }
    out
}

fn matched_within(from: &[(usize, usize)], to: &[(usize, usize)], tol: usize) -> usize {
    let tol2 = (tol * tol) as i64;
    from.iter()
        .filter(|&&(y, x)| {
            to.iter().any(|&(ty, tx)| {
                let dy = y as i64 - ty as i64;
                let dx = x as i64 - tx as i64;
                dy * dy + dx * dx <= tol2
            })
        })
        .count()
}

/// Default contour-matching tolerance: 0.75% of the image diagonal, at
/// least one pixel.
pub fn default_boundary_tolerance(h: usize, w: usize) -> usize {
    let diag = ((h * h + w * w) as f64).sqrt();
    ((0.0075 * diag).round() as usize).max(1)
}

/// Contour F-measure with a pixel-distance tolerance: precision counts
/// predicted contour pixels near the target contour, recall the reverse.
/// Two contour-free masks score 1; exactly one contour-free mask scores 0.
pub fn boundary_f_with_tolerance(pred: &Mask, gt: &Mask, tol: usize) -> Result<f64> {
    check_same_grid(pred, gt, "boundary_f")?;
    let pb = contour(pred);
    let gb = contour(gt);
    match (pb.is_empty(), gb.is_empty()) {
        (true, true) => return Ok(1.0),
        (true, false) | (false, true) => return Ok(0.0),
        _ => {}
    }
    let precision = matched_within(&pb, &gb, tol) as f64 / pb.len() as f64;
    let recall = matched_within(&gb, &pb, tol) as f64 / gb.len() as f64;
    Ok(if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    })
}

/// [`boundary_f_with_tolerance`] at the default diagonal-scaled tolerance.
pub fn boundary_f(pred: &Mask, gt: &Mask) -> Result<f64> {
    boundary_f_with_tolerance(pred, gt, default_boundary_tolerance(gt.h, gt.w))
}

/// Sequence-level summary over (prediction, target) pairs.
#[derive(Clone, Debug)]
pub struct SequenceEval {
    /// Mean region IoU.
    pub j: f64,
    /// Mean contour F-measure.
    pub f: f64,
    /// `(j + f) / 2`.
    pub jf: f64,
    /// IoU of all pairs pooled into one count.
    pub overall_iou: f64,
    /// Mean per-pair IoU.
    pub mean_iou: f64,
}

pub fn evaluate_pairs(pairs: &[(Mask, Mask)]) -> Result<SequenceEval> {
    if pairs.is_empty() {
        return Err(Error::EmptyContext { op: "evaluate_pairs" });
    }
    let mut j_sum = 0.0;
    let mut f_sum = 0.0;
    let mut inter = 0usize;
    let mut union = 0usize;
    for (pred, gt) in pairs {
        j_sum += region_j(pred, gt)?;
        f_sum += boundary_f(pred, gt)?;
        for (p, g) in pred.data.iter().zip(&gt.data) {
            inter += (*p && *g) as usize;
            union += (*p || *g) as usize;
        }
    }
    let n = pairs.len() as f64;
    let j = j_sum / n;
    let f = f_sum / n;
    Ok(SequenceEval {
        j,
        f,
        jf: (j + f) / 2.0,
        overall_iou: if union == 0 { 1.0 } else { inter as f64 / union as f64 },
        mean_iou: j,
    })
}

/// Average precision at one IoU threshold for `(score, iou)` detections,
/// each against its own (distinct) target. Standard interpolated
/// precision-recall area: detections sorted by score, precision
/// monotonized from the right.
pub fn average_precision(detections: &[(f64, f64)], num_targets: usize, iou_thresh: f64) -> Result<f64> {
    if num_targets == 0 {
        return Err(Error::NoGroundTruth);
    }
    let mut dets = detections.to_vec();
    dets.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(dets.len());
    for (k, (_, iou)) in dets.iter().enumerate() {
        if *iou >= iou_thresh {
            tp += 1;
        }
        points.push((tp as f64 / num_targets as f64, tp as f64 / (k + 1) as f64));
    }
    // Monotone non-increasing precision envelope.
    let mut best = 0.0;
    for point in points.iter_mut().rev() {
        best = f64::max(best, point.1);
        point.1 = best;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (recall, precision) in points {
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

/// Mean of [`average_precision`] over IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn map_at_thresholds(detections: &[(f64, f64)], num_targets: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0;
    for i in 0..10 {
        let thresh = 0.5 + 0.05 * i as f64;
        total += average_precision(detections, num_targets, thresh)?;
        count += 1;
    }
    Ok(total / count as f64)
}

/// Centroid separation of two token populations `(n, C)` in units of their
/// average within-set spread (root-mean-square per-coordinate deviation).
/// Both sets need at least two rows and a non-zero spread.
pub fn drift_score(a: &Tensor, b: &Tensor) -> Result<f64> {
    let stats = |t: &Tensor, label: &str| -> Result<(Vec<f64>, f64)> {
        if t.rank() != 2 {
            return Err(Error::Shape {
                op: "drift_score",
                detail: format!("expected (n, C) tokens, got {:?}", t.shape()),
            });
        }
        let (n, c) = (t.shape()[0], t.shape()[1]);
        if n < 2 {
            return Err(Error::UndefinedSpread(format!(
                "{label} set has {n} token(s); spread needs at least 2"
            )));
        }
        let mut mean = vec![0.0; c];
        for row in 0..n {
            for col in 0..c {
                mean[col] += t.data()[row * c + col];
            }
        }
        for m in mean.iter_mut() {
            *m /= n as f64;
        }
        let mut var = 0.0;
        for row in 0..n {
            for col in 0..c {
                let d = t.data()[row * c + col] - mean[col];
                var += d * d;
            }
        }
        let spread = (var / (n * c) as f64).sqrt();
        if spread == 0.0 {
            return Err(Error::UndefinedSpread(format!("{label} set has zero spread")));
        }
        Ok((mean, spread))
    };
    let (mean_a, spread_a) = stats(a, "first")?;
    let (mean_b, spread_b) = stats(b, "second")?;
    if mean_a.len() != mean_b.len() {
        return Err(Error::Shape {
            op: "drift_score",
            detail: format!("widths {} vs {}", mean_a.len(), mean_b.len()),
        });
    }
    let dist: f64 = mean_a
        .iter()
        .zip(&mean_b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    Ok(dist / ((spread_a + spread_b) / 2.0))
}
