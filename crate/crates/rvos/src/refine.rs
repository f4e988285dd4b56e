//! Coarse-to-fine mask refinement.
//!
//! Patch logits predicted on the stride-16 grid are walked down to full
//! resolution in two residual stages (stride 8, then stride 4). Each stage
//! bilinearly doubles the token grid, then adds a correction computed from
//! the upsampled logits concatenated with the visual features at that
//! stride: a low-width projection conv, a relu, and a residual conv back to
//! the patch channels. Because the correction is purely additive, zeroing
//! its convolutions (or disabling refinement) leaves exact bilinear
//! upsampling — the ablation baseline is the same code path with the
//! correction removed.

use crate::error::{Error, Result};
use crate::patch::{flatten_patches, PatchMask};
use crate::tensor::{concat_channels, conv1x1, resize_bilinear, Init, Params, Tensor};

/// One refinement stage: projection into a narrow working width and a
/// residual conv back out to the patch channels.
pub struct StageParams {
    pub proj_w: Tensor,
    pub proj_b: Tensor,
    pub res_w: Tensor,
    pub res_b: Tensor,
}

impl StageParams {
    /// `dim` is the visual feature width, `patch` the mask patch edge,
    /// `hidden` the narrow working width.
    pub fn new(store: &mut impl Params, prefix: &str, dim: usize, patch: usize, hidden: usize) -> Result<Self> {
        let cat = dim + patch * patch;
        Ok(StageParams {
            proj_w: store.init(
                &format!("{prefix}.proj.w"),
                &[hidden, cat],
                Init::Normal(1.0 / (cat as f64).sqrt()),
            )?,
            proj_b: store.init(&format!("{prefix}.proj.b"), &[hidden], Init::Zeros)?,
            res_w: store.init(&format!("{prefix}.res.w"), &[patch * patch, hidden], Init::Zeros)?,
            res_b: store.init(&format!("{prefix}.res.b"), &[patch * patch], Init::Zeros)?,
        })
    }
}

/// Both stages plus the ablation switch.
pub struct RefineParams {
    pub stage8: StageParams,
    pub stage4: StageParams,
    pub enabled: bool,
}

impl RefineParams {
    pub fn new(
        store: &mut impl Params,
        prefix: &str,
        dim: usize,
        patch: usize,
        hidden: usize,
        enabled: bool,
    ) -> Result<Self> {
        Ok(RefineParams {
            stage8: StageParams::new(store, &format!("{prefix}.s8"), dim, patch, hidden)?,
            stage4: StageParams::new(store, &format!("{prefix}.s4"), dim, patch, hidden)?,
            enabled,
        })
    }
}

/// Doubles the token grid of `mask` and adds a feature-conditioned
/// correction; the result lives at half the input's stride.
pub fn refine_stage(mask: &PatchMask, visual: &Tensor, stage: &StageParams) -> Result<PatchMask> {
    if mask.stride() % 2 != 0 {
        return Err(Error::Config(format!(
            "cannot halve an odd mask stride {}",
            mask.stride()
        )));
    }
    let upsampled = resize_bilinear(mask.logits(), 2)?;
    if visual.rank() != 3
        || visual.shape()[1] != upsampled.shape()[1]
        || visual.shape()[2] != upsampled.shape()[2]
    {
        return Err(Error::Shape {
            op: "refine_stage",
            detail: format!(
                "visual features {:?} do not cover the upsampled {:?} grid",
                visual.shape(),
                upsampled.shape()
            ),
        });
    }
    let stacked = concat_channels(&[upsampled.clone(), visual.clone()])?;
    let correction = conv1x1(
        &conv1x1(&stacked, &stage.proj_w, &stage.proj_b)?.relu()?,
        &stage.res_w,
        &stage.res_b,
    )?;
    PatchMask::from_tensor(upsampled.add(&correction)?, mask.stride() / 2)
}

/// Pure bilinear doubling with no correction (the disabled/ablation path).
fn upsample_stage(mask: &PatchMask) -> Result<PatchMask> {
    PatchMask::from_tensor(resize_bilinear(mask.logits(), 2)?, mask.stride() / 2)
}

/// Walks a stride-16 patch mask to full-resolution logits `(H, W)` using the
/// stride-8 and stride-4 visual features. Requires a patch edge of 4 so the
/// final flatten lands exactly on the pixel grid.
pub fn refine_masks(
    mask: &PatchMask,
    visual8: &Tensor,
    visual4: &Tensor,
    params: &RefineParams,
) -> Result<Tensor> {
    if mask.patch() != 4 {
        return Err(Error::Config(format!(
            "full-resolution refinement needs 4x4 patches, got {}",
            mask.patch()
        )));
    }
    if mask.stride() != 16 {
        return Err(Error::Config(format!(
            "refinement starts from stride 16, got {}",
            mask.stride()
        )));
    }
    let out = if params.enabled {
        let mid = refine_stage(mask, visual8, &params.stage8)?;
        refine_stage(&mid, visual4, &params.stage4)?
    } else {
        upsample_stage(&upsample_stage(mask)?)?
    };
    flatten_patches(&out)
}
