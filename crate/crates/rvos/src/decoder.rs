//! Instance decoding: turning a fused feature map into per-query instance
//! embeddings plus confidence and box predictions.
//!
//! The stack is deliberately small. A feature encoder applies a couple of
//! residual self-attention + feed-forward layers to the spatial tokens
//! (optionally with fixed 2D sinusoidal positions added first). A query
//! decoder then refines a set of learned instance queries — each offset by
//! the sentence feature so queries are expression-conditioned — with
//! residual cross-attention into each frame's tokens. Every layer is
//! residual, so zero-initialized (or ablated) layers are exact identities.

use crate::error::{Error, Result};
use crate::fusion::{cross_attention, feature_to_tokens, AttentionParams};
use crate::tensor::{concat_channels, Init, Params, Tensor};

/// Two-layer pointwise feed-forward block with a `2*dim` hidden width.
pub struct FfnParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl FfnParams {
    pub fn new(store: &mut impl Params, prefix: &str, dim: usize) -> Result<Self> {
        let hidden = 2 * dim;
        Ok(FfnParams {
            w1: store.init(
                &format!("{prefix}.w1"),
                &[dim, hidden],
                Init::Normal(1.0 / (dim as f64).sqrt()),
            )?,
            b1: store.init(&format!("{prefix}.b1"), &[hidden], Init::Zeros)?,
            w2: store.init(
                &format!("{prefix}.w2"),
                &[hidden, dim],
                Init::Normal(1.0 / (hidden as f64).sqrt()),
            )?,
            b2: store.init(&format!("{prefix}.b2"), &[dim], Init::Zeros)?,
        })
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(&self.w1)?
            .add_row_vector(&self.b1)?
            .relu()?
            .matmul(&self.w2)?
            .add_row_vector(&self.b2)
    }
}

/// One residual attention + feed-forward layer.
pub struct LayerParams {
    pub attn: AttentionParams,
    pub ffn: FfnParams,
}

impl LayerParams {
    pub fn new(store: &mut impl Params, prefix: &str, dim: usize) -> Result<Self> {
        Ok(LayerParams {
            attn: AttentionParams::new(store, &format!("{prefix}.attn"), dim)?,
            ffn: FfnParams::new(store, &format!("{prefix}.ffn"), dim)?,
        })
    }

    /// `x + Att(x, context)` followed by `x + FFN(x)`.
    pub fn apply(&self, x: &Tensor, context: &Tensor) -> Result<Tensor> {
        let x = x.add(&cross_attention(x, context, &self.attn)?)?;
        x.add(&self.ffn.apply(&x)?)
    }
}

/// Full decoding stack: feature-encoder layers, query-decoder layers,
/// learned queries, and the prediction heads.
pub struct DecoderParams {
    pub encoder_layers: Vec<LayerParams>,
    pub decoder_layers: Vec<LayerParams>,
    /// Learned instance queries, `(N, C)`.
    pub queries: Tensor,
    pub score_w: Tensor,
    pub score_b: Tensor,
    pub box_w1: Tensor,
    pub box_b1: Tensor,
    pub box_w2: Tensor,
    pub box_b2: Tensor,
    /// Add fixed sinusoidal positions to spatial tokens before encoding.
    pub positional: bool,
}

impl DecoderParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut impl Params,
        prefix: &str,
        dim: usize,
        encoder_layers: usize,
        decoder_layers: usize,
        num_queries: usize,
        positional: bool,
    ) -> Result<Self> {
        let enc = (0..encoder_layers)
            .map(|i| LayerParams::new(store, &format!("{prefix}.enc{i}"), dim))
            .collect::<Result<Vec<_>>>()?;
        let dec = (0..decoder_layers)
            .map(|i| LayerParams::new(store, &format!("{prefix}.dec{i}"), dim))
            .collect::<Result<Vec<_>>>()?;
        Ok(DecoderParams {
            encoder_layers: enc,
            decoder_layers: dec,
            queries: store.init(&format!("{prefix}.queries"), &[num_queries, dim], Init::Normal(1.0))?,
            score_w: store.init(&format!("{prefix}.score.w"), &[dim, 1], Init::Zeros)?,
            score_b: store.init(&format!("{prefix}.score.b"), &[1], Init::Zeros)?,
            box_w1: store.init(
                &format!("{prefix}.box.w1"),
                &[dim, dim],
                Init::Normal(1.0 / (dim as f64).sqrt()),
            )?,
            box_b1: store.init(&format!("{prefix}.box.b1"), &[dim], Init::Zeros)?,
            box_w2: store.init(&format!("{prefix}.box.w2"), &[dim, 4], Init::Zeros)?,
            box_b2: store.init(&format!("{prefix}.box.b2"), &[4], Init::Zeros)?,
            positional,
        })
    }

    pub fn dim(&self) -> usize {
        self.queries.shape()[1]
    }

    pub fn num_queries(&self) -> usize {
        self.queries.shape()[0]
    }
}

/// Fixed 2D sinusoidal position table for an `h x w` grid, `(h*w, dim)`.
/// Half the channels encode the row index, half the column index, each as
/// interleaved sine/cosine pairs over a geometric frequency ladder.
pub fn positional_encoding(dim: usize, h: usize, w: usize) -> Result<Tensor> {
    if dim % 4 != 0 {
        return Err(Error::Config(format!(
            "positional encoding needs a channel count divisible by 4, got {dim}"
        )));
    }
    let half = dim / 2;
    let axis = |pos: f64, ch: &mut Vec<f64>| {
        for i in 0..half / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / half as f64);
            ch.push((pos * freq).sin());
            ch.push((pos * freq).cos());
        }
    };
    let mut data = Vec::with_capacity(h * w * dim);
    for y in 0..h {
        for x in 0..w {
            axis(y as f64, &mut data);
            axis(x as f64, &mut data);
        }
    }
    Tensor::from_vec(&[h * w, dim], data)
}

/// Runs the feature-encoder layers over a token matrix. `h`/`w` describe the
/// token grid and are only consulted when positions are enabled.
pub fn encode_tokens(tokens: &Tensor, h: usize, w: usize, params: &DecoderParams) -> Result<Tensor> {
    let mut x = if params.positional {
        if tokens.shape()[0] != h * w {
            return Err(Error::Shape {
                op: "encode_tokens",
                detail: format!("{} tokens for a {h}x{w} grid", tokens.shape()[0]),
            });
        }
        tokens.add(&positional_encoding(tokens.shape()[1], h, w)?)?
    } else {
        tokens.clone()
    };
    for layer in &params.encoder_layers {
        x = layer.apply(&x, &x)?;
    }
    Ok(x)
}

/// Encodes a `(C, H, W)` feature map into contextualized spatial tokens.
pub fn encode_features(feature: &Tensor, params: &DecoderParams) -> Result<Tensor> {
    let (h, w) = (feature.shape()[1], feature.shape()[2]);
    encode_tokens(&feature_to_tokens(feature)?, h, w, params)
}

/// Expression-conditioned queries: each learned query plus the sentence
/// feature `(C,)`.
pub fn build_queries(sentence: &Tensor, params: &DecoderParams) -> Result<Tensor> {
    params.queries.add_row_vector(sentence)
}

/// Refines `queries` against each frame's token matrix independently and
/// stacks the results into `(T, N, C)`.
pub fn decode_embeddings(
    queries: &Tensor,
    frame_tokens: &[Tensor],
    params: &DecoderParams,
) -> Result<Tensor> {
    if frame_tokens.is_empty() {
        return Err(Error::EmptyContext { op: "decode_embeddings" });
    }
    let (n, c) = (queries.shape()[0], queries.shape()[1]);
    let mut frames = Vec::with_capacity(frame_tokens.len());
    for tokens in frame_tokens {
        let mut x = queries.clone();
        for layer in &params.decoder_layers {
            x = layer.apply(&x, tokens)?;
        }
        frames.push(x.reshape(&[1, n, c])?);
    }
    concat_channels(&frames)
}

/// Confidence logits, `(T, N)`.
pub fn score_logits(embeddings: &Tensor, params: &DecoderParams) -> Result<Tensor> {
    let (t, n, c) = (
        embeddings.shape()[0],
        embeddings.shape()[1],
        embeddings.shape()[2],
    );
    embeddings
        .reshape(&[t * n, c])?
        .matmul(&params.score_w)?
        .add_row_vector(&params.score_b)?
        .reshape(&[t, n])
}

/// Confidence probabilities, `(T, N)`.
pub fn predict_scores(embeddings: &Tensor, params: &DecoderParams) -> Result<Tensor> {
    score_logits(embeddings, params)?.sigmoid()
}

/// Normalized boxes `(T, N, 4)` as (cx, cy, w, h), each component in (0, 1).
pub fn predict_boxes(embeddings: &Tensor, params: &DecoderParams) -> Result<Tensor> {
    let (t, n, c) = (
        embeddings.shape()[0],
        embeddings.shape()[1],
        embeddings.shape()[2],
    );
    embeddings
        .reshape(&[t * n, c])?
        .matmul(&params.box_w1)?
        .add_row_vector(&params.box_b1)?
        .relu()?
        .matmul(&params.box_w2)?
        .add_row_vector(&params.box_b2)?
        .sigmoid()?
        .reshape(&[t, n, 4])
}

fn box_columns(boxes: &Tensor) -> Result<(Tensor, Tensor, Tensor, Tensor)> {
    if boxes.rank() != 2 || boxes.shape()[1] != 4 {
        return Err(Error::Shape {
            op: "box_convert",
            detail: format!("expected (N, 4), got {:?}", boxes.shape()),
        });
    }
    let t = boxes.transpose2()?; // (4, N)
    Ok((
        t.narrow0(0, 1)?,
        t.narrow0(1, 1)?,
        t.narrow0(2, 1)?,
        t.narrow0(3, 1)?,
    ))
}

/// `(N, 4)` center/size boxes to corner form (x1, y1, x2, y2).
pub fn boxes_cxcywh_to_xyxy(boxes: &Tensor) -> Result<Tensor> {
    let (cx, cy, w, h) = box_columns(boxes)?;
    let hw = w.mul_scalar(0.5)?;
    let hh = h.mul_scalar(0.5)?;
    let x1 = cx.sub(&hw)?;
    let y1 = cy.sub(&hh)?;
    let x2 = cx.add(&hw)?;
    let y2 = cy.add(&hh)?;
    concat_channels(&[x1, y1, x2, y2])?.transpose2()
}

/// Inverse of [`boxes_cxcywh_to_xyxy`].
pub fn boxes_xyxy_to_cxcywh(boxes: &Tensor) -> Result<Tensor> {
    let (x1, y1, x2, y2) = box_columns(boxes)?;
    let cx = x1.add(&x2)?.mul_scalar(0.5)?;
    let cy = y1.add(&y2)?.mul_scalar(0.5)?;
    let w = x2.sub(&x1)?;
    let h = y2.sub(&y1)?;
    concat_channels(&[cx, cy, w, h])?.transpose2()
}
