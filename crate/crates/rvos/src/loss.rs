//! Training losses and query-to-target matching.
//!
//! Each expression supplies one ground-truth object per frame; the model
//! proposes several candidate queries. A detection-style matching cost —
//! mask overlap terms on the coarse mask, box terms, and a confidence term
//! — picks the candidate to supervise. The selected query is trained on
//! both its coarse and refined masks plus boxes and confidence; every other
//! query is pushed toward a low confidence and nothing else.
//!
//! All mask losses consume raw logits. The focal term is evaluated in a
//! saturation-safe form (`softplus` of sign-flipped logits), so extreme
//! logits give extreme losses, not infinities.

use crate::decoder::boxes_cxcywh_to_xyxy;
use crate::error::{Error, Result};
use crate::tensor::{no_grad, Tensor};

/// Scalar weights and constants of the composite loss.
#[derive(Clone, Debug)]
pub struct LossWeights {
    pub dice: f64,
    pub focal: f64,
    pub l1: f64,
    pub giou: f64,
    pub score: f64,
    /// Additive smoothing of the dice ratio.
    pub dice_eps: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            dice: 5.0,
            focal: 2.0,
            l1: 5.0,
            giou: 2.0,
            score: 2.0,
            dice_eps: 1.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
        }
    }
}

impl LossWeights {
    /// All five term weights multiplied by `c` (constants untouched).
    pub fn scaled(&self, c: f64) -> Self {
        LossWeights {
            dice: self.dice * c,
            focal: self.focal * c,
            l1: self.l1 * c,
            giou: self.giou * c,
            score: self.score * c,
            ..self.clone()
        }
    }
}

/// Soft dice loss on probabilities: `1 - (2*sum(p*y) + eps) / (sum(p) + sum(y) + eps)`.
pub fn dice_from_probs(probs: &Tensor, target: &Tensor, eps: f64) -> Result<Tensor> {
    if probs.shape() != target.shape() {
        return Err(Error::Shape {
            op: "dice",
            detail: format!("{:?} vs {:?}", probs.shape(), target.shape()),
        });
    }
    let overlap = probs.mul(target)?.sum_all()?.mul_scalar(2.0)?.add_scalar(eps)?;
    let total = probs.sum_all()?.add(&target.sum_all()?)?.add_scalar(eps)?;
    overlap.div(&total)?.neg()?.add_scalar(1.0)
}

/// Soft dice loss on logits.
pub fn dice_loss(logits: &Tensor, target: &Tensor, eps: f64) -> Result<Tensor> {
    dice_from_probs(&logits.sigmoid()?, target, eps)
}

/// Mean focal loss on logits against a {0, 1} target of the same shape:
/// `alpha_t * (1 - p_t)^gamma * (-log p_t)` averaged over elements.
pub fn focal_loss(logits: &Tensor, target: &Tensor, alpha: f64, gamma: f64) -> Result<Tensor> {
    if logits.shape() != target.shape() {
        return Err(Error::Shape {
            op: "focal",
            detail: format!("{:?} vs {:?}", logits.shape(), target.shape()),
        });
    }
    // z = x for negatives, -x for positives; then p_t = sigmoid(-z),
    // -log p_t = softplus(z), and 1 - p_t = sigmoid(z).
    let flip: Vec<f64> = target.data().iter().map(|y| 1.0 - 2.0 * y).collect();
    let alpha_t: Vec<f64> = target
        .data()
        .iter()
        .map(|y| alpha * y + (1.0 - alpha) * (1.0 - y))
        .collect();
    let z = logits.mul(&Tensor::from_vec(logits.shape(), flip)?)?;
    let focus = z.sigmoid()?.powf(gamma)?;
    z.softplus()?
        .mul(&focus)?
        .mul(&Tensor::from_vec(logits.shape(), alpha_t)?)?
        .mean_all()
}

/// Sum of absolute coordinate differences between two `(4,)` boxes.
pub fn box_l1(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    pred.sub(target)?.abs()?.sum_all()
}

fn corner_parts(xyxy: &Tensor) -> Result<(Tensor, Tensor, Tensor, Tensor)> {
    let flat = xyxy.reshape(&[4])?;
    Ok((
        flat.narrow0(0, 1)?,
        flat.narrow0(1, 1)?,
        flat.narrow0(2, 1)?,
        flat.narrow0(3, 1)?,
    ))
}

/// Generalized-IoU loss `1 - giou` between two `(4,)` center/size boxes.
/// The ground-truth box must have strictly positive width and height.
pub fn giou_loss(pred_cxcywh: &Tensor, target_cxcywh: &Tensor) -> Result<Tensor> {
    if pred_cxcywh.numel() != 4 || target_cxcywh.numel() != 4 {
        return Err(Error::Shape {
            op: "giou",
            detail: format!(
                "need (4,) boxes, got {:?} and {:?}",
                pred_cxcywh.shape(),
                target_cxcywh.shape()
            ),
        });
    }
    let (gw, gh) = (target_cxcywh.data()[2], target_cxcywh.data()[3]);
    if !(gw > 0.0 && gh > 0.0) {
        return Err(Error::DegenerateBox { w: gw, h: gh });
    }
    let p = boxes_cxcywh_to_xyxy(&pred_cxcywh.reshape(&[1, 4])?)?;
    let g = boxes_cxcywh_to_xyxy(&target_cxcywh.reshape(&[1, 4])?)?;
    let (px1, py1, px2, py2) = corner_parts(&p)?;
    let (gx1, gy1, gx2, gy2) = corner_parts(&g)?;
    let inter_w = px2.emin(&gx2)?.sub(&px1.emax(&gx1)?)?.relu()?;
    let inter_h = py2.emin(&gy2)?.sub(&py1.emax(&gy1)?)?.relu()?;
    let inter = inter_w.mul(&inter_h)?;
    let area_p = px2.sub(&px1)?.mul(&py2.sub(&py1)?)?;
    let area_g = gx2.sub(&gx1)?.mul(&gy2.sub(&gy1)?)?;
    let union = area_p.add(&area_g)?.sub(&inter)?;
    let iou = inter.div(&union)?;
    let enc_w = px2.emax(&gx2)?.sub(&px1.emin(&gx1)?)?;
    let enc_h = py2.emax(&gy2)?.sub(&py1.emin(&gy1)?)?;
    let enclose = enc_w.mul(&enc_h)?;
    let giou = iou.sub(&enclose.sub(&union)?.div(&enclose)?)?;
    giou.neg()?.add_scalar(1.0)?.reshape(&[])
}

/// Ground truth for one expression in one frame.
pub struct FrameTargets {
    /// `(H, W)` values in {0, 1}.
    pub mask: Tensor,
    /// Normalized `(4,)` center/size box.
    pub box_cxcywh: Tensor,
}

/// One candidate query's outputs for one frame.
pub struct FramePrediction {
    /// Coarse mask logits upsampled to `(H, W)` (pre-refinement).
    pub coarse: Tensor,
    /// Normalized `(4,)` center/size box.
    pub box_cxcywh: Tensor,
    /// Rank-0 confidence logit.
    pub score_logit: Tensor,
}

/// One candidate query across all frames.
pub struct QueryPrediction {
    pub frames: Vec<FramePrediction>,
}

fn check_frames(pred_frames: usize, target_frames: usize) -> Result<()> {
    if pred_frames != target_frames || pred_frames == 0 {
        return Err(Error::Shape {
            op: "loss_frames",
            detail: format!("{pred_frames} predicted frames vs {target_frames} target frames"),
        });
    }
    Ok(())
}

fn score_focal(logit: &Tensor, positive: bool, w: &LossWeights) -> Result<Tensor> {
    let target = Tensor::full(logit.shape(), if positive { 1.0 } else { 0.0 })?;
    focal_loss(logit, &target, w.focal_alpha, w.focal_gamma)
}

/// Per-frame supervision terms for a query treated as the match.
fn matched_frame_terms(
    pred: &FramePrediction,
    target: &FrameTargets,
    w: &LossWeights,
) -> Result<Tensor> {
    let mask_terms = dice_loss(&pred.coarse, &target.mask, w.dice_eps)?
        .mul_scalar(w.dice)?
        .add(&focal_loss(&pred.coarse, &target.mask, w.focal_alpha, w.focal_gamma)?.mul_scalar(w.focal)?)?;
    let box_terms = box_l1(&pred.box_cxcywh, &target.box_cxcywh)?
        .mul_scalar(w.l1)?
        .add(&giou_loss(&pred.box_cxcywh, &target.box_cxcywh)?.mul_scalar(w.giou)?)?;
    mask_terms
        .add(&box_terms)?
        .add(&score_focal(&pred.score_logit, true, w)?.mul_scalar(w.score)?)
}

/// Assignment cost of one query against the expression's targets: the
/// matched-frame terms averaged over frames, evaluated without recording.
pub fn matching_cost(
    query: &QueryPrediction,
    targets: &[FrameTargets],
    w: &LossWeights,
) -> Result<f64> {
    check_frames(query.frames.len(), targets.len())?;
    no_grad(|| {
        let mut total = 0.0;
        for (pred, target) in query.frames.iter().zip(targets) {
            total += matched_frame_terms(pred, target, w)?.item()?;
        }
        Ok(total / targets.len() as f64)
    })
}

/// Picks the lowest-cost query; returns its index and cost.
pub fn select_query(
    queries: &[QueryPrediction],
    targets: &[FrameTargets],
    w: &LossWeights,
) -> Result<(usize, f64)> {
    if queries.is_empty() {
        return Err(Error::EmptyContext { op: "select_query" });
    }
    let mut best = (0, f64::INFINITY);
    for (i, q) in queries.iter().enumerate() {
        let c = matching_cost(q, targets, w)?;
        if c < best.1 {
            best = (i, c);
        }
    }
    Ok(best)
}

/// Minimum-cost assignment of `cols` targets to distinct rows of a
/// row-major `rows x cols` cost matrix (`rows >= cols`). Returns, for each
/// column, its assigned row. Shortest-augmenting-path implementation with
/// row/column potentials.
pub fn hungarian_assign(cost: &[f64], rows: usize, cols: usize) -> Result<Vec<usize>> {
    if cols == 0 || rows < cols || cost.len() != rows * cols {
        return Err(Error::Config(format!(
            "assignment needs rows >= cols >= 1 and a full matrix; got {rows}x{cols} with {} entries",
            cost.len()
        )));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite { op: "hungarian_assign" });
    }
    // Columns play the "worker" role (the scarce side); tasks are rows.
    // p[r] holds the 1-based column assigned to row r; index 0 is a
    // sentinel task used to seed each augmenting search.
    let mut u = vec![0.0; cols + 1];
    let mut v = vec![0.0; rows + 1];
    let mut p = vec![0usize; rows + 1];
    for col in 1..=cols {
        p[0] = col;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; rows + 1];
        let mut way = vec![0usize; rows + 1];
        let mut used = vec![false; rows + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=rows {
                if used[j] {
                    continue;
                }
                let cur = cost[(j - 1) * cols + (i0 - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=rows {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        while j0 != 0 {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        }
    }
    let mut assignment = vec![usize::MAX; cols];
    for row in 1..=rows {
        if p[row] != 0 {
            assignment[p[row] - 1] = row - 1;
        }
    }
    debug_assert!(assignment.iter().all(|&r| r != usize::MAX));
    Ok(assignment)
}

/// Full training loss for one expression: the matched query is supervised
/// on its coarse mask, its refined mask (`refined` holds one `(H, W)` logit
/// map per frame), its box, and a positive confidence target; all other
/// queries only on a negative confidence target. Averaged over frames.
pub fn total_loss(
    queries: &[QueryPrediction],
    matched: usize,
    refined: &[Tensor],
    targets: &[FrameTargets],
    w: &LossWeights,
) -> Result<Tensor> {
    if matched >= queries.len() {
        return Err(Error::Config(format!(
            "matched query {matched} out of {} candidates",
            queries.len()
        )));
    }
    check_frames(refined.len(), targets.len())?;
    let mut total = Tensor::scalar(0.0)?;
    for (qi, query) in queries.iter().enumerate() {
        check_frames(query.frames.len(), targets.len())?;
        for (t, (pred, target)) in query.frames.iter().zip(targets).enumerate() {
            if qi == matched {
                let refined_terms = dice_loss(&refined[t], &target.mask, w.dice_eps)?
                    .mul_scalar(w.dice)?
                    .add(
                        &focal_loss(&refined[t], &target.mask, w.focal_alpha, w.focal_gamma)?
                            .mul_scalar(w.focal)?,
                    )?;
                total = total
                    .add(&matched_frame_terms(pred, target, w)?)?
                    .add(&refined_terms)?;
            } else {
                total = total.add(&score_focal(&pred.score_logit, false, w)?.mul_scalar(w.score)?)?;
            }
        }
    }
    total.mul_scalar(1.0 / targets.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, Init, ParamStore};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn dice_is_near_zero_for_saturated_correct_logits() {
        let target = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let logits = Tensor::from_vec(&[2, 2], vec![20.0, -20.0, 20.0, -20.0]).unwrap();
        let d = dice_loss(&logits, &target, 1.0).unwrap().item().unwrap();
        assert!(d.abs() <= 1e-3, "saturated dice {d}");
    }

    #[test]
    fn dice_on_disjoint_eight_pixel_masks_matches_closed_form() {
        // No overlap, 8 predicted pixels at probability 1, 8 target pixels:
        // 1 - (0 + 1) / (8 + 8 + 1).
        let mut probs = vec![0.0; 32];
        let mut target = vec![0.0; 32];
        for i in 0..8 {
            probs[i] = 1.0;
            target[16 + i] = 1.0;
        }
        let d = dice_from_probs(
            &Tensor::from_vec(&[32], probs).unwrap(),
            &Tensor::from_vec(&[32], target).unwrap(),
            1.0,
        )
        .unwrap()
        .item()
        .unwrap();
        assert!((d - (1.0 - 1.0 / 17.0)).abs() < 1e-12, "dice {d}");
    }

    #[test]
    fn dice_on_hard_quarter_overlap_is_exactly_a_quarter() {
        let probs = Tensor::from_vec(&[4], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let target = Tensor::from_vec(&[4], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let d = dice_from_probs(&probs, &target, 1.0).unwrap().item().unwrap();
        assert_eq!(d, 0.25);
    }

    #[test]
    fn focal_at_even_odds_matches_closed_form() {
        // Single positive at p = 0.5: alpha * (1-p)^gamma * (-ln p).
        let logit = Tensor::zeros(&[1]);
        let pos = focal_loss(&logit, &Tensor::full(&[1], 1.0).unwrap(), 0.25, 2.0)
            .unwrap()
            .item()
            .unwrap();
        let expect = 0.25 * 0.25 * std::f64::consts::LN_2;
        assert!((pos - expect).abs() < 1e-12, "positive focal {pos} vs {expect}");
        let neg = focal_loss(&logit, &Tensor::zeros(&[1]), 0.25, 2.0)
            .unwrap()
            .item()
            .unwrap();
        let expect = 0.75 * 0.25 * std::f64::consts::LN_2;
        assert!((neg - expect).abs() < 1e-12, "negative focal {neg} vs {expect}");
    }

    #[test]
    fn focal_vanishes_on_confident_correct_predictions() {
        let target = Tensor::from_vec(&[4], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let logits = Tensor::from_vec(&[4], vec![20.0, -20.0, 20.0, -20.0]).unwrap();
        let f = focal_loss(&logits, &target, 0.25, 2.0).unwrap().item().unwrap();
        assert!(f < 1e-6, "saturated focal {f}");
        // And stays finite (not inf/nan) on confidently wrong ones.
        let wrong = focal_loss(&logits.neg().unwrap(), &target, 0.25, 2.0)
            .unwrap()
            .item()
            .unwrap();
        assert!(wrong.is_finite() && wrong > 1.0);
    }

    #[test]
    fn giou_on_touching_unit_boxes_is_one_point_five() {
        // Corners (0,0,1,1) and (1,1,2,2): zero IoU, union 2, enclosure 4.
        let pred = Tensor::from_vec(&[4], vec![0.5, 0.5, 1.0, 1.0]).unwrap();
        let target = Tensor::from_vec(&[4], vec![1.5, 1.5, 1.0, 1.0]).unwrap();
        let loss = giou_loss(&pred, &target).unwrap().item().unwrap();
        assert!((loss - 1.5).abs() < 1e-15, "giou loss {loss}");
        // Identical boxes: IoU 1, no enclosure slack.
        let same = giou_loss(&pred, &pred).unwrap().item().unwrap();
        assert!(same.abs() < 1e-15);
    }

    #[test]
    fn degenerate_target_boxes_are_rejected() {
        let pred = Tensor::from_vec(&[4], vec![0.5, 0.5, 0.2, 0.2]).unwrap();
        let flat = Tensor::from_vec(&[4], vec![0.5, 0.5, 0.2, 0.0]).unwrap();
        assert!(matches!(
            giou_loss(&pred, &flat),
            Err(Error::DegenerateBox { .. })
        ));
        let thin = Tensor::from_vec(&[4], vec![0.5, 0.5, 0.0, 0.2]).unwrap();
        assert!(matches!(
            giou_loss(&pred, &thin),
            Err(Error::DegenerateBox { .. })
        ));
    }

    #[test]
    fn box_l1_sums_absolute_coordinate_gaps() {
        let a = Tensor::from_vec(&[4], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let b = Tensor::from_vec(&[4], vec![0.2, 0.0, 0.3, 0.9]).unwrap();
        let l = box_l1(&a, &b).unwrap().item().unwrap();
        assert!((l - (0.1 + 0.2 + 0.0 + 0.5)).abs() < 1e-15);
    }

    fn tiny_query(rng: &mut ChaCha20Rng, frames: usize) -> QueryPrediction {
        QueryPrediction {
            frames: (0..frames)
                .map(|_| FramePrediction {
                    coarse: Tensor::from_vec(
                        &[2, 2],
                        (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect(),
                    )
                    .unwrap(),
                    box_cxcywh: Tensor::from_vec(
                        &[4],
                        vec![
                            rng.gen_range(0.3..0.7),
                            rng.gen_range(0.3..0.7),
                            rng.gen_range(0.2..0.5),
                            rng.gen_range(0.2..0.5),
                        ],
                    )
                    .unwrap(),
                    score_logit: Tensor::scalar(rng.gen_range(-1.0..1.0)).unwrap(),
                })
                .collect(),
        }
    }

    fn tiny_targets(frames: usize) -> Vec<FrameTargets> {
        (0..frames)
            .map(|_| FrameTargets {
                mask: Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
                box_cxcywh: Tensor::from_vec(&[4], vec![0.5, 0.5, 0.4, 0.4]).unwrap(),
            })
            .collect()
    }

    #[test]
    fn doubling_every_weight_doubles_the_matching_cost_exactly() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let query = tiny_query(&mut rng, 2);
        let targets = tiny_targets(2);
        let w = LossWeights::default();
        let base = matching_cost(&query, &targets, &w).unwrap();
        let double = matching_cost(&query, &targets, &w.scaled(2.0)).unwrap();
        assert_eq!(double, 2.0 * base);
    }

    #[test]
    fn query_selection_agrees_with_exhaustive_search() {
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let queries: Vec<QueryPrediction> = (0..5).map(|_| tiny_query(&mut rng, 2)).collect();
        let targets = tiny_targets(2);
        let w = LossWeights::default();
        let (picked, cost) = select_query(&queries, &targets, &w).unwrap();
        let costs: Vec<f64> = queries
            .iter()
            .map(|q| matching_cost(q, &targets, &w).unwrap())
            .collect();
        let best = costs
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap();
        assert_eq!(picked, best.0);
        assert_eq!(cost, *best.1);
    }

    #[test]
    fn assignment_matches_brute_force_on_square_matrices() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        for trial in 0..20 {
            let n = 6;
            let cost: Vec<f64> = (0..n * n).map(|_| rng.gen_range(0.0..10.0)).collect();
            let assign = hungarian_assign(&cost, n, n).unwrap();
            // Must be a permutation.
            let mut seen = vec![false; n];
            for &r in &assign {
                assert!(!seen[r]);
                seen[r] = true;
            }
            let got: f64 = assign.iter().enumerate().map(|(c, &r)| cost[r * n + c]).sum();
            // Brute force over all 720 row permutations.
            let mut best = f64::INFINITY;
            let mut rows: Vec<usize> = (0..n).collect();
            permute(&mut rows, 0, &mut |perm| {
                let c: f64 = perm.iter().enumerate().map(|(col, &r)| cost[r * n + col]).sum();
                if c < best {
                    best = c;
                }
            });
            assert_eq!(got, best, "trial {trial}");
        }
    }

    fn permute(items: &mut Vec<usize>, k: usize, visit: &mut impl FnMut(&[usize])) {
        if k == items.len() {
            visit(items);
            return;
        }
        for i in k..items.len() {
            items.swap(k, i);
            permute(items, k + 1, visit);
            items.swap(k, i);
        }
    }

    #[test]
    fn single_column_assignment_is_the_row_argmin() {
        let cost = vec![3.0, 1.5, 2.0, 4.0, 0.25];
        let assign = hungarian_assign(&cost, 5, 1).unwrap();
        assert_eq!(assign, vec![4]);
    }

    #[test]
    fn assignment_rejects_bad_shapes_and_non_finite_costs() {
        assert!(hungarian_assign(&[1.0, 2.0], 1, 2).is_err());
        assert!(hungarian_assign(&[1.0, f64::NAN], 2, 1).is_err());
        assert!(hungarian_assign(&[], 0, 0).is_err());
    }

    #[test]
    fn unmatched_queries_receive_only_confidence_gradient() {
        let mut store = ParamStore::new(b"loss", 8);
        let matched_coarse = store.init("m.coarse", &[2, 2], Init::Uniform(-1.0, 1.0)).unwrap();
        let other_coarse = store.init("o.coarse", &[2, 2], Init::Uniform(-1.0, 1.0)).unwrap();
        let matched_score = store.init("m.score", &[], Init::Constant(0.2)).unwrap();
        let other_score = store.init("o.score", &[], Init::Constant(-0.3)).unwrap();
        let boxes = store
            .init("m.box", &[4], Init::Literal(vec![0.5, 0.5, 0.4, 0.4]))
            .unwrap();
        let refined = store.init("m.refined", &[2, 2], Init::Uniform(-1.0, 1.0)).unwrap();
        let make = |coarse: &Tensor, score: &Tensor| QueryPrediction {
            frames: vec![FramePrediction {
                coarse: coarse.clone(),
                box_cxcywh: boxes.clone(),
                score_logit: score.clone(),
            }],
        };
        let queries = vec![
            make(&matched_coarse, &matched_score),
            make(&other_coarse, &other_score),
        ];
        let targets = tiny_targets(1);
        let loss = total_loss(
            &queries,
            0,
            &[refined.clone()],
            &targets,
            &LossWeights::default(),
        )
        .unwrap();
        let grads = loss.backward().unwrap();
        let norm = |t: &Tensor| -> f64 {
            grads
                .get(t)
                .map(|g| g.iter().map(|v| v * v).sum::<f64>().sqrt())
                .unwrap_or(0.0)
        };
        assert!(norm(&matched_coarse) > 1e-6, "matched mask must be supervised");
        assert!(norm(&refined) > 1e-6, "refined mask must be supervised");
        assert!(norm(&matched_score) > 1e-9);
        assert!(norm(&other_score) > 1e-9, "unmatched confidence must be supervised");
        assert_eq!(norm(&other_coarse), 0.0, "unmatched mask must be ignored");
    }

    #[test]
    fn total_loss_gradient_check() {
        let mut store = ParamStore::new(b"loss-grad", 9);
        store.init("q0.coarse", &[2, 2], Init::Uniform(-1.5, 1.5)).unwrap();
        store.init("q1.coarse", &[2, 2], Init::Uniform(-1.5, 1.5)).unwrap();
        // Chosen so no predicted corner ties a target corner exactly (the
        // min/max terms are non-differentiable at ties, which would make the
        // finite-difference probe disagree by construction).
        store.init("q0.box", &[4], Init::Literal(vec![0.45, 0.55, 0.42, 0.26])).unwrap();
        store.init("q1.box", &[4], Init::Literal(vec![0.3, 0.3, 0.2, 0.2])).unwrap();
        store.init("q0.score", &[], Init::Constant(0.4)).unwrap();
        store.init("q1.score", &[], Init::Constant(-0.6)).unwrap();
        store.init("refined", &[2, 2], Init::Uniform(-1.5, 1.5)).unwrap();
        let targets = tiny_targets(1);
        let err = grad_check(&store, |s| {
            let queries = vec![
                QueryPrediction {
                    frames: vec![FramePrediction {
                        coarse: s.get("q0.coarse")?,
                        box_cxcywh: s.get("q0.box")?,
                        score_logit: s.get("q0.score")?,
                    }],
                },
                QueryPrediction {
                    frames: vec![FramePrediction {
                        coarse: s.get("q1.coarse")?,
                        box_cxcywh: s.get("q1.box")?,
                        score_logit: s.get("q1.score")?,
                    }],
                },
            ];
            total_loss(
                &queries,
                0,
                &[s.get("refined")?],
                &targets,
                &LossWeights::default(),
            )
        })
        .unwrap();
        assert!(err < 1e-4, "gradient error {err}");
    }
}
