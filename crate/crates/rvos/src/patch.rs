//! Query-conditioned patch segmentation.
//!
//! Masks are predicted one *patch* at a time: at feature stride `i`, a token
//! covers a `p x p` pixel block, and a mask over the full image is stored as
//! `p^2` logit channels on the token grid. Each instance query predicts the
//! flat weight vector of a tiny two-layer pointwise network (its
//! *conditional kernel*); running that network over the shared feature map
//! yields the query's patch logits. The flat layout keeps kernel prediction
//! a single linear map, and [`flatten_patches`] / [`unflatten_patches`]
//! convert losslessly between patch-channel and pixel layouts.

use crate::error::{Error, Result};
use crate::fusion::{cross_attention, AttentionParams};
use crate::tensor::{avg_pool2, conv1x1, resize_bilinear, Init, Params, Tensor};

/// Mask logits stored as `p^2` channels over a token grid at a fixed
/// feature stride.
#[derive(Clone)]
pub struct PatchMask {
    logits: Tensor,
    stride: usize,
    patch: usize,
}

impl PatchMask {
    /// Wraps `(p^2, th, tw)` logits; the channel count must be a perfect
    /// square.
    pub fn from_tensor(logits: Tensor, stride: usize) -> Result<Self> {
        if logits.rank() != 3 {
            return Err(Error::Shape {
                op: "patch_mask",
                detail: format!("expected (p^2, th, tw), got {:?}", logits.shape()),
            });
        }
        let c = logits.shape()[0];
        let patch = (c as f64).sqrt().round() as usize;
        if patch * patch != c {
            return Err(Error::Format(format!(
                "patch mask needs a square channel count, got {c}"
            )));
        }
        Ok(PatchMask { logits, stride, patch })
    }

    pub fn logits(&self) -> &Tensor {
        &self.logits
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    /// Patch edge length `p`.
    pub fn patch(&self) -> usize {
        self.patch
    }

    pub fn tokens_h(&self) -> usize {
        self.logits.shape()[1]
    }

    pub fn tokens_w(&self) -> usize {
        self.logits.shape()[2]
    }
}

/// Flat length of a conditional kernel for feature width `dim`, hidden
/// width `hidden`, and patch edge `patch`: first-layer weight and bias,
/// then second-layer weight and bias.
pub fn kernel_len(dim: usize, hidden: usize, patch: usize) -> usize {
    hidden * dim + hidden + hidden * patch * patch + patch * patch
}

/// Parameters of the kernel-prediction head: queries attend over the
/// spatial tokens, then a single linear map emits the flat kernel vector.
pub struct KernelHeadParams {
    pub attention: AttentionParams,
    pub fc_w: Tensor,
    pub fc_b: Tensor,
    pub dim: usize,
    pub hidden: usize,
    pub patch: usize,
}

/// Starting logit bias of predicted masks. Foreground is rare, so fresh
/// masks lean background; without this prior the background term of the
/// classification loss drives all logits into saturation before the
/// overlap term can pick out the object.
pub const MASK_BIAS_INIT: f64 = -2.0;

impl KernelHeadParams {
    pub fn new(store: &mut impl Params, prefix: &str, dim: usize, hidden: usize, patch: usize) -> Result<Self> {
        let len = kernel_len(dim, hidden, patch);
        // The tail of each kernel vector is its output bias; see the
        // layout in `kernel_len`.
        let mut bias = vec![0.0; len];
        for v in bias.iter_mut().skip(len - patch * patch) {
            *v = MASK_BIAS_INIT;
        }
        Ok(KernelHeadParams {
            attention: AttentionParams::new(store, &format!("{prefix}.attn"), dim)?,
            fc_w: store.init(&format!("{prefix}.fc.w"), &[dim, len], Init::Normal(0.02))?,
            fc_b: store.init(&format!("{prefix}.fc.b"), &[len], Init::Literal(bias))?,
            dim,
            hidden,
            patch,
        })
    }
}

/// Predicts one flat kernel vector per query: `(N, kernel_len)`.
pub fn predict_kernels(
    query_embeddings: &Tensor,
    tokens: &Tensor,
    head: &KernelHeadParams,
) -> Result<Tensor> {
    cross_attention(query_embeddings, tokens, &head.attention)?
        .matmul(&head.fc_w)?
        .add_row_vector(&head.fc_b)
}

/// Runs one flat kernel vector over a feature map, producing patch logits
/// at the given stride. The kernel is a pointwise two-layer network:
/// `conv1x1 -> relu -> conv1x1`, with no activation on the logits.
pub fn apply_kernel(
    kernel: &Tensor,
    feature: &Tensor,
    head: &KernelHeadParams,
    stride: usize,
) -> Result<PatchMask> {
    let (c, hid, p) = (head.dim, head.hidden, head.patch);
    if kernel.rank() != 1 || kernel.numel() != kernel_len(c, hid, p) {
        return Err(Error::Config(format!(
            "kernel vector of {} values does not fit layout ({c} wide, {hid} hidden, patch {p} -> {})",
            kernel.numel(),
            kernel_len(c, hid, p)
        )));
    }
    if feature.rank() != 3 || feature.shape()[0] != c {
        return Err(Error::Shape {
            op: "apply_kernel",
            detail: format!("feature {:?} does not match kernel width {c}", feature.shape()),
        });
    }
    let mut at = 0;
    let mut take = |len: usize| -> Result<Tensor> {
        let t = kernel.narrow0(at, len);
        at += len;
        t
    };
    let w1 = take(hid * c)?.reshape(&[hid, c])?;
    let b1 = take(hid)?;
    let w2 = take(hid * p * p)?.reshape(&[p * p, hid])?;
    let b2 = take(p * p)?;
    let hidden = conv1x1(feature, &w1, &b1)?.relu()?;
    PatchMask::from_tensor(conv1x1(&hidden, &w2, &b2)?, stride)
}

/// Predicts and applies a kernel for every query against one frame's
/// feature map.
pub fn predict_masks(
    query_embeddings: &Tensor,
    tokens: &Tensor,
    feature: &Tensor,
    head: &KernelHeadParams,
    stride: usize,
) -> Result<Vec<PatchMask>> {
    let kernels = predict_kernels(query_embeddings, tokens, head)?;
    let n = kernels.shape()[0];
    let len = kernels.shape()[1];
    (0..n)
        .map(|i| {
            let row = kernels.narrow0(i, 1)?.reshape(&[len])?;
            apply_kernel(&row, feature, head, stride)
        })
        .collect()
}

/// Collapses a three-scale feature pyramid onto the middle grid by summing:
/// the finer map is average-pooled, the coarser map bilinearly upsampled.
pub fn merge_scales(fine: &Tensor, mid: &Tensor, coarse: &Tensor) -> Result<Tensor> {
    avg_pool2(fine)?.add(mid)?.add(&resize_bilinear(coarse, 2)?)
}

/// Rearranges patch-channel logits into a flat pixel grid: token `(ti, tj)`
/// channel `k` lands at pixel `(ti*p + k/p, tj*p + k%p)`. A pure, lossless
/// permutation (and an exact identity for `p = 1`).
pub fn flatten_patches(mask: &PatchMask) -> Result<Tensor> {
    let p = mask.patch();
    let (th, tw) = (mask.tokens_h(), mask.tokens_w());
    let (out_h, out_w) = (p * th, p * tw);
    let logits = mask.logits();
    let src = logits.data();
    let mut data = vec![0.0; out_h * out_w];
    for k in 0..p * p {
        for ti in 0..th {
            for tj in 0..tw {
                data[(ti * p + k / p) * out_w + (tj * p + k % p)] = src[(k * th + ti) * tw + tj];
            }
        }
    }
    let need = logits.needs_grad();
    Tensor::from_op(
        "flatten_patches",
        vec![out_h, out_w],
        data,
        vec![logits.clone()],
        Box::new(move |g, slots| {
            if need {
                let mut dx = vec![0.0; p * p * th * tw];
                for k in 0..p * p {
                    for ti in 0..th {
                        for tj in 0..tw {
                            dx[(k * th + ti) * tw + tj] =
                                g[(ti * p + k / p) * out_w + (tj * p + k % p)];
                        }
                    }
                }
                slots[0] = Some(dx);
            }
        }),
    )
}

/// Inverse of [`flatten_patches`]: regroups a pixel grid into `p^2` patch
/// channels on the token grid at the given stride.
pub fn unflatten_patches(pixels: &Tensor, patch: usize, stride: usize) -> Result<PatchMask> {
    if pixels.rank() != 2 {
        return Err(Error::Shape {
            op: "unflatten_patches",
            detail: format!("expected (H, W), got {:?}", pixels.shape()),
        });
    }
    let (h, w) = (pixels.shape()[0], pixels.shape()[1]);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Shape {
            op: "unflatten_patches",
            detail: format!("{h}x{w} grid does not tile into {patch}x{patch} patches"),
        });
    }
    let (th, tw) = (h / patch, w / patch);
    let src = pixels.data();
    let mut data = vec![0.0; patch * patch * th * tw];
    for k in 0..patch * patch {
        for ti in 0..th {
            for tj in 0..tw {
                data[(k * th + ti) * tw + tj] =
                    src[(ti * patch + k / patch) * w + (tj * patch + k % patch)];
            }
        }
    }
    let need = pixels.needs_grad();
    let logits = Tensor::from_op(
        "unflatten_patches",
        vec![patch * patch, th, tw],
        data,
        vec![pixels.clone()],
        Box::new(move |g, slots| {
            if need {
                let mut dx = vec![0.0; h * w];
                for k in 0..patch * patch {
                    for ti in 0..th {
                        for tj in 0..tw {
                            dx[(ti * patch + k / patch) * w + (tj * patch + k % patch)] =
                                g[(k * th + ti) * tw + tj];
                        }
                    }
                }
                slots[0] = Some(dx);
            }
        }),
    )?;
    PatchMask::from_tensor(logits, stride)
}
