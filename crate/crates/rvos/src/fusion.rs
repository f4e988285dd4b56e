//! Fourier-domain fusion of text and vision features.
//!
//! The fusion block sandwiches a cross-attention gate between two *spectrum
//! augmentation* stages. Each augmentation is a residual update computed in
//! the frequency domain: the feature's 2D spectrum is attenuated by an
//! adaptive Gaussian low-pass filter, mixed across channels by a pointwise
//! convolution over stacked (real ‖ imaginary) planes, transformed back, and
//! added to the input. The filter's bandwidth scale is predicted from the
//! feature itself (mean pool → linear → softplus), so smoothing strength is
//! content-dependent and differentiable.
//!
//! The attention gate multiplies each spatial token by its attention summary
//! over the word features (a Hadamard gate), which is also the hook where
//! multi-expression fusion plugs in: see [`crate::multi`].

use crate::error::{Error, Result};
use crate::tensor::{conv1x1, fft2, ifft2_real, Init, Params, Spectrum, Tensor};

/// `softplus(x) = 1` at this input; used to start filter scales at exactly 1.
pub const SOFTPLUS_UNIT: f64 = 0.5413248546129181;

/// Projection weights for single-head scaled-dot-product attention.
pub struct AttentionParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
}

impl AttentionParams {
    /// Creates (or fetches) `prefix.{wq,wk,wv}` of shape `(dim, dim)`.
    pub fn new(store: &mut impl Params, prefix: &str, dim: usize) -> Result<Self> {
        let std = 1.0 / (dim as f64).sqrt();
        Ok(AttentionParams {
            wq: store.init(&format!("{prefix}.wq"), &[dim, dim], Init::Normal(std))?,
            wk: store.init(&format!("{prefix}.wk"), &[dim, dim], Init::Normal(std))?,
            wv: store.init(&format!("{prefix}.wv"), &[dim, dim], Init::Normal(std))?,
        })
    }

    pub fn dim(&self) -> usize {
        self.wq.shape()[0]
    }
}

/// Single-head scaled-dot-product attention of `queries` over `context`
/// rows: `softmax(Q·Wq · (K·Wk)^T / sqrt(C)) · (K·Wv)`.
pub fn cross_attention(queries: &Tensor, context: &Tensor, params: &AttentionParams) -> Result<Tensor> {
    if queries.rank() != 2 || context.rank() != 2 {
        return Err(Error::Shape {
            op: "cross_attention",
            detail: format!("need (N, C) matrices, got {:?} and {:?}", queries.shape(), context.shape()),
        });
    }
    let c = params.dim();
    if queries.shape()[1] != c || context.shape()[1] != c {
        return Err(Error::Shape {
            op: "cross_attention",
            detail: format!(
                "width mismatch: queries {:?}, context {:?}, projections {c}",
                queries.shape(),
                context.shape()
            ),
        });
    }
    if context.shape()[0] == 0 {
        return Err(Error::EmptyContext { op: "cross_attention" });
    }
    let q = queries.matmul(&params.wq)?;
    let k = context.matmul(&params.wk)?;
    let v = context.matmul(&params.wv)?;
    let scores = q.matmul(&k.transpose2()?)?.mul_scalar(1.0 / (c as f64).sqrt())?;
    scores.softmax_rows()?.matmul(&v)
}

/// Parameters of one spectrum-augmentation stage.
pub struct AugmentParams {
    /// Pointwise mixing over stacked real/imaginary planes: `(2C, 2C)`.
    pub conv_weight: Tensor,
    pub conv_bias: Tensor,
    /// Filter-scale predictor: `(1, C)` weight and `(1,)` bias on the
    /// mean-pooled feature.
    pub scale_weight: Tensor,
    pub scale_bias: Tensor,
}

impl AugmentParams {
    /// Creates (or fetches) the stage under `prefix.*`. The spectral conv
    /// starts near zero (the stage is then near-identity) and the scale
    /// predictor starts at exactly `softplus(SOFTPLUS_UNIT) = 1`.
    pub fn new(store: &mut impl Params, prefix: &str, dim: usize) -> Result<Self> {
        Ok(AugmentParams {
            conv_weight: store.init(
                &format!("{prefix}.conv.w"),
                &[2 * dim, 2 * dim],
                Init::Normal(0.02),
            )?,
            conv_bias: store.init(&format!("{prefix}.conv.b"), &[2 * dim], Init::Zeros)?,
            scale_weight: store.init(&format!("{prefix}.scale.w"), &[1, dim], Init::Zeros)?,
            scale_bias: store.init(
                &format!("{prefix}.scale.b"),
                &[1],
                Init::Constant(SOFTPLUS_UNIT),
            )?,
        })
    }
}

/// A Gaussian low-pass attenuation map over the frequency grid, together
/// with the differentiable scale that shaped it.
pub struct FilterMap {
    /// `(H, W)` values in (0, 1]; exactly 1 at the DC bin.
    pub values: Tensor,
    /// Predicted positive scale multiplying the base bandwidth.
    pub scale: Tensor,
    pub bandwidth: f64,
}

/// Squared centered frequency radius for bin `u` of an axis of length `n`,
/// in normalized units (each axis contributes at most 0.25, so the radius
/// itself ranges over `[0, sqrt(2)/2]` on a 2D grid).
fn centered_radius_sq(u: usize, n: usize) -> f64 {
    let f = if 2 * u <= n {
        u as f64 / n as f64
    } else {
        (u as f64 - n as f64) / n as f64
    };
    f * f
}

/// Builds the low-pass map `exp(-d(u,v)^2 / (2 (s·K)^2))` where `d` is the
/// centered normalized frequency radius and `s` is predicted from the
/// feature: `softplus(linear(mean_pool(feature)))`.
pub fn make_gaussian_lowpass(
    bandwidth: f64,
    feature: &Tensor,
    params: &AugmentParams,
) -> Result<FilterMap> {
    if !(bandwidth > 0.0) {
        return Err(Error::Config(format!(
            "filter bandwidth must be positive, got {bandwidth}"
        )));
    }
    if feature.rank() != 3 {
        return Err(Error::Shape {
            op: "make_gaussian_lowpass",
            detail: format!("expected (C, H, W), got {:?}", feature.shape()),
        });
    }
    let (h, w) = (feature.shape()[1], feature.shape()[2]);
    let pooled = feature.mean_spatial()?; // (C,)
    let raw = params
        .scale_weight
        .matmul(&pooled.reshape(&[pooled.numel(), 1])?)?
        .reshape(&[1])?
        .add(&params.scale_bias)?;
    let scale = raw.softplus()?.reshape(&[])?;
    let mut d2 = vec![0.0; h * w];
    for u in 0..h {
        for v in 0..w {
            d2[u * w + v] = centered_radius_sq(u, h) + centered_radius_sq(v, w);
        }
    }
    let d2 = Tensor::from_vec(&[h, w], d2)?;
    // G = exp(d2 * (-1 / (2 K^2 s^2))); the DC bin has d2 = 0, so its value
    // is exactly 1 regardless of the scale.
    let coef = scale
        .mul(&scale)?
        .mul_scalar(2.0 * bandwidth * bandwidth)?
        .recip()?
        .mul_scalar(-1.0)?;
    let values = d2.mul_scalar_tensor(&coef)?.exp()?;
    Ok(FilterMap {
        values,
        scale,
        bandwidth,
    })
}

/// Residual spectral update: `F + ifft(conv(filter ⊙ fft(F)))`.
///
/// The spectrum is treated as `2C` real planes (real block, then imaginary
/// block); the filter attenuates both blocks, the pointwise conv mixes all
/// `2C` planes freely, and the inverse transform keeps the real part (the
/// mixing is free to break conjugate symmetry — its imaginary output is
/// defined away rather than an error).
pub fn spectrum_augment(feature: &Tensor, bandwidth: f64, params: &AugmentParams) -> Result<Tensor> {
    let filter = make_gaussian_lowpass(bandwidth, feature, params)?;
    let spec = fft2(feature)?;
    let filtered = spec.packed().mul_spatial(&filter.values)?;
    let mixed = conv1x1(&filtered, &params.conv_weight, &params.conv_bias)?;
    let spatial = ifft2_real(&Spectrum::from_packed(mixed)?)?;
    feature.add(&spatial)
}

/// Full text/vision fusion parameters: two augmentation stages around one
/// attention gate. The stages share a structure but never parameters.
pub struct FusionParams {
    pub pre: AugmentParams,
    pub post: AugmentParams,
    pub attention: AttentionParams,
    pub bandwidth: f64,
    /// With spectral stages disabled the block degrades to the plain
    /// attention gate (ablation switch).
    pub spectral: bool,
}

impl FusionParams {
    pub fn new(
        store: &mut impl Params,
        prefix: &str,
        dim: usize,
        bandwidth: f64,
        spectral: bool,
    ) -> Result<Self> {
        Ok(FusionParams {
            pre: AugmentParams::new(store, &format!("{prefix}.pre"), dim)?,
            post: AugmentParams::new(store, &format!("{prefix}.post"), dim)?,
            attention: AttentionParams::new(store, &format!("{prefix}.attn"), dim)?,
            bandwidth,
            spectral,
        })
    }
}

/// `(C, H, W)` feature to `(H*W, C)` token matrix (row-major pixels).
pub fn feature_to_tokens(feature: &Tensor) -> Result<Tensor> {
    if feature.rank() != 3 {
        return Err(Error::Shape {
            op: "feature_to_tokens",
            detail: format!("expected (C, H, W), got {:?}", feature.shape()),
        });
    }
    let (c, h, w) = (feature.shape()[0], feature.shape()[1], feature.shape()[2]);
    feature.reshape(&[c, h * w])?.transpose2()
}

/// Inverse of [`feature_to_tokens`].
pub fn tokens_to_feature(tokens: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    if tokens.rank() != 2 || tokens.shape()[0] != h * w {
        return Err(Error::Shape {
            op: "tokens_to_feature",
            detail: format!("expected ({} tokens, C), got {:?}", h * w, tokens.shape()),
        });
    }
    let c = tokens.shape()[1];
    tokens.transpose2()?.reshape(&[c, h, w])
}

/// Core fusion plumbing: pre-augment, build a `(H*W, C)` gate from the
/// augmented tokens, multiply, post-augment. The gate closure is what
/// varies between single-expression fusion and shared multi-expression
/// fusion, so both paths execute byte-identical surrounding code.
pub fn fuse_with_gate<G>(visual: &Tensor, params: &FusionParams, gate_fn: G) -> Result<Tensor>
where
    G: FnOnce(&Tensor) -> Result<Tensor>,
{
    let (h, w) = (visual.shape()[1], visual.shape()[2]);
    let pre = if params.spectral {
        spectrum_augment(visual, params.bandwidth, &params.pre)?
    } else {
        visual.clone()
    };
    let tokens = feature_to_tokens(&pre)?;
    let gate = gate_fn(&tokens)?;
    if gate.shape() != tokens.shape() {
        return Err(Error::Shape {
            op: "fuse_with_gate",
            detail: format!("gate {:?} vs tokens {:?}", gate.shape(), tokens.shape()),
        });
    }
    let gated = tokens.mul(&gate)?;
    let fused = tokens_to_feature(&gated, h, w)?;
    if params.spectral {
        spectrum_augment(&fused, params.bandwidth, &params.post)
    } else {
        Ok(fused)
    }
}

/// Fuses one expression's word features into a visual feature map.
pub fn fuse(words: &Tensor, visual: &Tensor, params: &FusionParams) -> Result<Tensor> {
    fuse_with_gate(visual, params, |tokens| {
        cross_attention(tokens, words, &params.attention)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, ParamStore};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn rand_tensor(rng: &mut ChaCha20Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn literal(store: &mut ParamStore, name: &str, shape: &[usize], values: Vec<f64>) -> Tensor {
        store.init(name, shape, Init::Literal(values)).unwrap()
    }

    /// Augment-stage params with explicit conv and scale values.
    fn augment_params(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        conv_w: Vec<f64>,
        conv_b: Vec<f64>,
        scale_w: Vec<f64>,
        scale_b: f64,
    ) -> AugmentParams {
        AugmentParams {
            conv_weight: literal(store, &format!("{prefix}.conv.w"), &[2 * dim, 2 * dim], conv_w),
            conv_bias: literal(store, &format!("{prefix}.conv.b"), &[2 * dim], conv_b),
            scale_weight: literal(store, &format!("{prefix}.scale.w"), &[1, dim], scale_w),
            scale_bias: literal(store, &format!("{prefix}.scale.b"), &[1], vec![scale_b]),
        }
    }

    fn eye(n: usize) -> Vec<f64> {
        let mut v = vec![0.0; n * n];
        for i in 0..n {
            v[i * n + i] = 1.0;
        }
        v
    }

    #[test]
    fn filter_is_one_at_dc_and_monotone_in_radius() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let mut store = ParamStore::new(b"filt", 0);
        let params = AugmentParams::new(&mut store, "sa", 3).unwrap();
        let f = rand_tensor(&mut rng, &[3, 8, 8]);
        let filt = make_gaussian_lowpass(0.25, &f, &params).unwrap();
        assert_eq!(filt.values.data()[0].to_bits(), 1.0f64.to_bits());
        let mut cells: Vec<(f64, f64)> = Vec::new();
        for u in 0..8 {
            for v in 0..8 {
                let d2 = centered_radius_sq(u, 8) + centered_radius_sq(v, 8);
                cells.push((d2, filt.values.data()[u * 8 + v]));
            }
        }
        cells.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        for pair in cells.windows(2) {
            assert!(
                pair[1].1 <= pair[0].1 + 1e-15,
                "filter must not increase with radius: {pair:?}"
            );
        }
    }

    #[test]
    fn huge_predicted_scale_gives_exact_all_pass_filter() {
        let mut store = ParamStore::new(b"filt", 1);
        let params = augment_params(&mut store, "sa", 2, vec![0.0; 16], vec![0.0; 4], vec![0.0; 2], 1e9);
        let f = Tensor::full(&[2, 4, 4], 0.3).unwrap();
        let filt = make_gaussian_lowpass(0.25, &f, &params).unwrap();
        for v in filt.values.data() {
            assert_eq!(v.to_bits(), 1.0f64.to_bits());
        }
    }

    #[test]
    fn filter_matches_closed_form_at_unit_scale() {
        // Zero predictor weight and bias softplus^{-1}(1) pin the scale to 1,
        // so the map must equal exp(-d^2 / (2 * 0.25^2)) = exp(-d^2 / 0.125).
        let mut store = ParamStore::new(b"filt", 2);
        let params = augment_params(
            &mut store,
            "sa",
            2,
            vec![0.0; 16],
            vec![0.0; 4],
            vec![0.0; 2],
            SOFTPLUS_UNIT,
        );
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let f = rand_tensor(&mut rng, &[2, 8, 8]);
        let filt = make_gaussian_lowpass(0.25, &f, &params).unwrap();
        assert!((filt.scale.item().unwrap() - 1.0).abs() < 1e-12);
        for u in 0..8 {
            for v in 0..8 {
                // Independent oracle: center each axis index, normalize,
                // evaluate the Gaussian directly.
                let fu = if u <= 4 { u as f64 } else { u as f64 - 8.0 } / 8.0;
                let fv = if v <= 4 { v as f64 } else { v as f64 - 8.0 } / 8.0;
                let expected = (-(fu * fu + fv * fv) / 0.125).exp();
                let got = filt.values.data()[u * 8 + v];
                assert!((got - expected).abs() < 1e-12, "bin ({u},{v}): {got} vs {expected}");
            }
        }
    }

    #[test]
    fn bandwidth_must_be_positive() {
        let mut store = ParamStore::new(b"filt", 3);
        let params = AugmentParams::new(&mut store, "sa", 2).unwrap();
        let f = Tensor::zeros(&[2, 4, 4]);
        assert!(make_gaussian_lowpass(0.0, &f, &params).is_err());
        assert!(make_gaussian_lowpass(-1.0, &f, &params).is_err());
    }

    #[test]
    fn augment_with_zero_conv_is_exact_identity() {
        let mut store = ParamStore::new(b"sa", 4);
        let params = augment_params(&mut store, "sa", 2, vec![0.0; 16], vec![0.0; 4], vec![0.0; 2], 0.3);
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let f = rand_tensor(&mut rng, &[2, 4, 4]);
        let out = spectrum_augment(&f, 0.25, &params).unwrap();
        assert!(out.bit_eq(&f.detach()) || out.max_abs_diff(&f).unwrap() == 0.0);
    }

    #[test]
    fn augment_with_identity_conv_and_all_pass_filter_doubles_input() {
        let mut store = ParamStore::new(b"sa", 5);
        let params = augment_params(&mut store, "sa", 2, eye(4), vec![0.0; 4], vec![0.0; 2], 1e9);
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let f = rand_tensor(&mut rng, &[2, 4, 4]);
        let out = spectrum_augment(&f, 0.25, &params).unwrap();
        let doubled = f.mul_scalar(2.0).unwrap();
        assert!(out.max_abs_diff(&doubled).unwrap() < 1e-9);
    }

    /// Independent spatial-domain oracle for the augmentation stage.
    ///
    /// Attenuating the spectrum by a real symmetric map equals circular
    /// convolution with that map's (real) inverse transform. The pointwise
    /// complex-plane mixing then decomposes, for the real output, into the
    /// symmetric part of the (re→re, im→im) weights applied to the
    /// convolved planes and the antisymmetric part applied to their
    /// index-reflections; the cross (re↔im) weights cannot reach the real
    /// output. The real-plane bias lands entirely on the DC bin, i.e. on
    /// pixel (0,0).
    fn spatial_oracle(
        f: &Tensor,
        bandwidth: f64,
        conv_w: &[f64],
        conv_b: &[f64],
        scale_w: &[f64],
        scale_b: f64,
    ) -> Vec<f64> {
        let (c, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2]);
        let hw = h * w;
        // Predicted scale.
        let mut raw = scale_b;
        for ch in 0..c {
            let mean: f64 = f.data()[ch * hw..(ch + 1) * hw].iter().sum::<f64>() / hw as f64;
            raw += scale_w[ch] * mean;
        }
        let s = raw.max(0.0) + (-raw.abs()).exp().ln_1p(); // softplus
        // Filter and its spatial kernel.
        let centered = |u: usize, n: usize| -> f64 {
            let v = if 2 * u <= n {
                u as f64 / n as f64
            } else {
                (u as f64 - n as f64) / n as f64
            };
            v * v
        };
        let mut g = vec![0.0; hw];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for u in 0..h {
                    for v in 0..w {
                        let d2 = centered(u, h) + centered(v, w);
                        let filt = (-d2 / (2.0 * (s * bandwidth) * (s * bandwidth))).exp();
                        let ang = std::f64::consts::TAU
                            * (u * y) as f64
                            / h as f64
                            + std::f64::consts::TAU * (v * x) as f64 / w as f64;
                        acc += filt * ang.cos();
                    }
                }
                g[y * w + x] = acc / hw as f64;
            }
        }
        // Circular convolution of every channel with g.
        let mut smoothed = vec![0.0; c * hw];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for dy in 0..h {
                        for dx in 0..w {
                            let sy = (y + h - dy) % h;
                            let sx = (x + w - dx) % w;
                            acc += g[dy * w + dx] * f.data()[ch * hw + sy * w + sx];
                        }
                    }
                    smoothed[ch * hw + y * w + x] = acc;
                }
            }
        }
        // Channel mixing with reflection terms plus the DC bias impulse.
        let mut out = f.data().to_vec();
        for co in 0..c {
            for ci in 0..c {
                let sym = (conv_w[co * 2 * c + ci] + conv_w[(c + co) * 2 * c + (c + ci)]) / 2.0;
                let asym = (conv_w[co * 2 * c + ci] - conv_w[(c + co) * 2 * c + (c + ci)]) / 2.0;
                for y in 0..h {
                    for x in 0..w {
                        let direct = smoothed[ci * hw + y * w + x];
                        let reflected = smoothed[ci * hw + ((h - y) % h) * w + (w - x) % w];
                        out[co * hw + y * w + x] += sym * direct + asym * reflected;
                    }
                }
            }
            out[co * hw] += conv_b[co];
        }
        out
    }

    #[test]
    fn augment_matches_spatial_convolution_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        for trial in 0..5 {
            let c = 2;
            let conv_w: Vec<f64> = (0..4 * c * c).map(|_| rng.gen_range(-0.5..0.5)).collect();
            let conv_b: Vec<f64> = (0..2 * c).map(|_| rng.gen_range(-0.5..0.5)).collect();
            let scale_w: Vec<f64> = (0..c).map(|_| rng.gen_range(-0.5..0.5)).collect();
            let scale_b = rng.gen_range(-0.5..1.0);
            let mut store = ParamStore::new(b"sa-oracle", trial);
            let params = augment_params(
                &mut store,
                "sa",
                c,
                conv_w.clone(),
                conv_b.clone(),
                scale_w.clone(),
                scale_b,
            );
            let f = rand_tensor(&mut rng, &[c, 4, 4]);
            let got = spectrum_augment(&f, 0.25, &params).unwrap();
            let want = spatial_oracle(&f, 0.25, &conv_w, &conv_b, &scale_w, scale_b);
            for (a, b) in got.data().iter().zip(&want) {
                let rel = (a - b).abs() / b.abs().max(1.0);
                assert!(rel < 1e-8, "trial {trial}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn attention_with_single_context_row_copies_its_value() {
        let mut store = ParamStore::new(b"attn", 8);
        let params = AttentionParams::new(&mut store, "a", 3).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let queries = rand_tensor(&mut rng, &[4, 3]);
        let context = rand_tensor(&mut rng, &[1, 3]);
        let out = cross_attention(&queries, &context, &params).unwrap();
        let value = context.matmul(&params.wv).unwrap();
        for row in 0..4 {
            for col in 0..3 {
                assert!((out.data()[row * 3 + col] - value.data()[col]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_over_identical_rows_equals_their_common_value() {
        let mut store = ParamStore::new(b"attn", 10);
        let params = AttentionParams::new(&mut store, "a", 3).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let queries = rand_tensor(&mut rng, &[2, 3]);
        let row: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let context =
            Tensor::from_vec(&[5, 3], row.iter().cycle().take(15).copied().collect()).unwrap();
        let out = cross_attention(&queries, &context, &params).unwrap();
        let single = Tensor::from_vec(&[1, 3], row).unwrap();
        let value = single.matmul(&params.wv).unwrap();
        for r in 0..2 {
            for col in 0..3 {
                assert!((out.data()[r * 3 + col] - value.data()[col]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_matches_hand_evaluated_softmax_with_identity_projections() {
        let mut store = ParamStore::new(b"attn", 12);
        let params = AttentionParams {
            wq: literal(&mut store, "a.wq", &[2, 2], eye(2)),
            wk: literal(&mut store, "a.wk", &[2, 2], eye(2)),
            wv: literal(&mut store, "a.wv", &[2, 2], eye(2)),
        };
        let queries = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 2.0]).unwrap();
        let context = Tensor::from_vec(&[2, 2], vec![1.0, 1.0, -1.0, 0.5]).unwrap();
        let out = cross_attention(&queries, &context, &params).unwrap();
        // Oracle recomputed from first principles.
        let inv_sqrt = 1.0 / 2.0f64.sqrt();
        for (qi, q) in [[1.0, 0.0], [0.0, 2.0]].iter().enumerate() {
            let s0 = (q[0] * 1.0 + q[1] * 1.0) * inv_sqrt;
            let s1 = (q[0] * -1.0 + q[1] * 0.5) * inv_sqrt;
            let m = s0.max(s1);
            let (e0, e1) = ((s0 - m).exp(), (s1 - m).exp());
            let z = e0 + e1;
            let (w0, w1) = (e0 / z, e1 / z);
            let expect = [w0 * 1.0 + w1 * -1.0, w0 * 1.0 + w1 * 0.5];
            for col in 0..2 {
                assert!((out.data()[qi * 2 + col] - expect[col]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_requires_context_rows() {
        let mut store = ParamStore::new(b"attn", 13);
        let params = AttentionParams::new(&mut store, "a", 2).unwrap();
        let queries = Tensor::zeros(&[2, 2]);
        let empty = Tensor::zeros(&[0, 2]);
        assert!(matches!(
            cross_attention(&queries, &empty, &params),
            Err(Error::EmptyContext { .. })
        ));
    }

    #[test]
    fn all_ones_gate_reduces_fusion_to_stacked_augmentations() {
        let mut store = ParamStore::new(b"fuse", 14);
        let params = FusionParams::new(&mut store, "f", 2, 0.25, true).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(15);
        let visual = rand_tensor(&mut rng, &[2, 4, 4]);
        let gated = fuse_with_gate(&visual, &params, |t| {
            Ok(Tensor::full(t.shape(), 1.0).unwrap())
        })
        .unwrap();
        let pre = spectrum_augment(&visual, 0.25, &params.pre).unwrap();
        let direct = spectrum_augment(&pre, 0.25, &params.post).unwrap();
        assert!(gated.bit_eq(&direct));
    }

    #[test]
    fn fusion_preserves_shape_on_non_square_non_pow2_grids() {
        let mut store = ParamStore::new(b"fuse", 16);
        let params = FusionParams::new(&mut store, "f", 3, 0.25, true).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(17);
        let visual = rand_tensor(&mut rng, &[3, 2, 6]);
        let words = rand_tensor(&mut rng, &[4, 3]);
        let out = fuse(&words, &visual, &params).unwrap();
        assert_eq!(out.shape(), visual.shape());
    }

    #[test]
    fn disabling_spectral_stages_leaves_plain_attention_gating() {
        let mut store = ParamStore::new(b"fuse", 18);
        let params = FusionParams::new(&mut store, "f", 2, 0.25, false).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(19);
        let visual = rand_tensor(&mut rng, &[2, 4, 4]);
        let words = rand_tensor(&mut rng, &[3, 2]);
        let out = fuse(&words, &visual, &params).unwrap();
        let tokens = feature_to_tokens(&visual).unwrap();
        let gate = cross_attention(&tokens, &words, &params.attention).unwrap();
        let expect = tokens_to_feature(&tokens.mul(&gate).unwrap(), 4, 4).unwrap();
        assert!(out.bit_eq(&expect));
    }

    #[test]
    fn token_layout_round_trips() {
        let mut rng = ChaCha20Rng::seed_from_u64(20);
        let f = rand_tensor(&mut rng, &[3, 2, 5]);
        let back = tokens_to_feature(&feature_to_tokens(&f).unwrap(), 2, 5).unwrap();
        assert!(back.bit_eq(&f));
    }

    #[test]
    fn full_fusion_gradient_check() {
        let mut store = ParamStore::new(b"fuse-grad", 21);
        store.init("visual", &[2, 4, 4], Init::Uniform(-1.0, 1.0)).unwrap();
        store.init("words", &[3, 2], Init::Uniform(-1.0, 1.0)).unwrap();
        // Materialize all fusion parameters up front so grad_check probes them.
        FusionParams::new(&mut store, "f", 2, 0.25, true).unwrap();
        let err = grad_check(&store, |s| {
            let mut view = s.view();
            let params = FusionParams::new(&mut view, "f", 2, 0.25, true)?;
            let out = fuse(&view.get("words")?, &view.get("visual")?, &params)?;
            let n = out.numel();
            let weights = Tensor::from_vec(&[n], (0..n).map(|i| 0.1 + 0.03 * i as f64).collect())?;
            out.reshape(&[n])?.mul(&weights)?.sum_all()
        })
        .unwrap();
        assert!(err < 1e-4, "gradient error {err}");
    }
}
