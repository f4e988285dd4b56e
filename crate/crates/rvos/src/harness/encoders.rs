//! Toy backbones: a strided-patch visual encoder and an embedding-table
//! text encoder.
//!
//! The visual encoder stacks four non-overlapping patch convolutions with
//! ReLU, producing a feature pyramid at strides 4, 8, 16, and 32. Because
//! each output cell sees exactly one input patch, translating an image by
//! the base stride translates the stride-4 feature grid by one cell — a
//! property the tests pin down bitwise.
//!
//! The text encoder is an embedding lookup; a sentence vector is the mean
//! of its word vectors.

use crate::error::{Error, Result};
use crate::tensor::{patch_conv, select_rows, Init, Params, Tensor};

/// Words the text encoder understands, in token-id order.
pub fn vocabulary() -> Vec<&'static str> {
    let mut words: Vec<&'static str> = super::scene::COLORS.iter().map(|(n, _)| *n).collect();
    words.extend_from_slice(super::scene::SHAPES);
    words.extend_from_slice(super::scene::FILLER_WORDS);
    words
}

/// Maps words to token ids; a word outside the vocabulary is an error.
pub fn tokenize(words: &[String]) -> Result<Vec<usize>> {
    let vocab = vocabulary();
    words
        .iter()
        .map(|w| {
            vocab
                .iter()
                .position(|v| v == w)
                .ok_or_else(|| Error::Config(format!("word {w:?} not in vocabulary")))
        })
        .collect()
}

pub struct TextEncoderParams {
    embed: Tensor,
    dim: usize,
}

impl TextEncoderParams {
    pub fn new(store: &mut impl Params, prefix: &str, dim: usize) -> Result<Self> {
        let vocab = vocabulary().len();
        let embed = store.init(
            &format!("{prefix}.embed"),
            &[vocab, dim],
            Init::Normal(1.0),
        )?;
        Ok(TextEncoderParams { embed, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

/// Embeds a token sequence: per-word vectors `(Nw, C)` plus their mean as
/// the sentence vector `(C,)`.
pub fn encode_text(tokens: &[usize], params: &TextEncoderParams) -> Result<(Tensor, Tensor)> {
    if tokens.is_empty() {
        return Err(Error::EmptyContext { op: "encode_text" });
    }
    let vocab = params.embed.shape()[0];
    for &id in tokens {
        if id >= vocab {
            return Err(Error::UnknownToken(id as u32));
        }
    }
    let words = select_rows(&params.embed, tokens)?;
    let sentence = words.mean_rows()?.reshape(&[params.dim])?;
    Ok((words, sentence))
}

/// Convenience: tokenize then embed.
pub fn encode_words(words: &[String], params: &TextEncoderParams) -> Result<(Tensor, Tensor)> {
    encode_text(&tokenize(words)?, params)
}

struct Stage {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
}

impl Stage {
    fn new(
        store: &mut impl Params,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
    ) -> Result<Self> {
        // ReLU halves second moments, so the usual gain of sqrt(2) keeps
        // activation variance roughly constant across stages. Without it
        // the stride-32 features shrink enough that position terms drown
        // out content in downstream attention.
        let fan_in = (c_in * stride * stride) as f64;
        let weight = store.init(
            &format!("{name}.w"),
            &[c_out, c_in, stride, stride],
            Init::Normal((2.0 / fan_in).sqrt()),
        )?;
        let bias = store.init(&format!("{name}.b"), &[c_out], Init::Zeros)?;
        Ok(Stage { weight, bias, stride })
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        patch_conv(x, &self.weight, &self.bias, self.stride)?.relu()
    }
}

pub struct VisualEncoderParams {
    s4: Stage,
    s8: Stage,
    s16: Stage,
    s32: Stage,
    dim: usize,
}

impl VisualEncoderParams {
    pub fn new(store: &mut impl Params, prefix: &str, dim: usize) -> Result<Self> {
        Ok(VisualEncoderParams {
            s4: Stage::new(store, &format!("{prefix}.s4"), 3, dim, 4)?,
            s8: Stage::new(store, &format!("{prefix}.s8"), dim, dim, 2)?,
            s16: Stage::new(store, &format!("{prefix}.s16"), dim, dim, 2)?,
            s32: Stage::new(store, &format!("{prefix}.s32"), dim, dim, 2)?,
            dim,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

/// Per-frame features at strides 4, 8, 16, and 32, each `(C, H/s, W/s)`.
pub struct FramePyramid {
    pub f4: Tensor,
    pub f8: Tensor,
    pub f16: Tensor,
    pub f32: Tensor,
}

fn encode_frame(image: &Tensor, params: &VisualEncoderParams) -> Result<FramePyramid> {
    if image.rank() != 3 || image.shape()[0] != 3 {
        return Err(Error::Shape {
            op: "visual_encoder",
            detail: format!("expected (3, H, W) image, got {:?}", image.shape()),
        });
    }
    let (h, w) = (image.shape()[1], image.shape()[2]);
    if h % 32 != 0 || w % 32 != 0 || h == 0 || w == 0 {
        return Err(Error::Shape {
            op: "visual_encoder",
            detail: format!("image size {h}x{w} must be a positive multiple of 32"),
        });
    }
    let f4 = params.s4.apply(image)?;
    let f8 = params.s8.apply(&f4)?;
    let f16 = params.s16.apply(&f8)?;
    let f32 = params.s32.apply(&f16)?;
    Ok(FramePyramid { f4, f8, f16, f32 })
}

/// Encodes a whole clip. One call is one backbone invocation — callers
/// tally invocations to compare sharing strategies.
pub fn encode_frames(frames: &[Tensor], params: &VisualEncoderParams) -> Result<Vec<FramePyramid>> {
    if frames.is_empty() {
        return Err(Error::EmptyContext { op: "visual_encoder" });
    }
    frames.iter().map(|f| encode_frame(f, params)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ParamStore;

    #[test]
    fn vocabulary_covers_scene_words_without_duplicates() {
        let vocab = vocabulary();
        assert_eq!(vocab.len(), 9);
        for (color, _) in super::super::scene::COLORS {
            assert!(vocab.contains(color));
        }
        for shape in super::super::scene::SHAPES {
            assert!(vocab.contains(shape));
        }
        let mut sorted = vocab.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), vocab.len());
    }

    #[test]
    fn tokenize_round_trips_and_rejects_unknown_words() {
        let words: Vec<String> = ["the", "red", "circle"].iter().map(|s| s.to_string()).collect();
        let ids = tokenize(&words).unwrap();
        let vocab = vocabulary();
        for (id, w) in ids.iter().zip(&words) {
            assert_eq!(vocab[*id], w);
        }
        assert!(matches!(
            tokenize(&["crimson".to_string()]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn sentence_vector_is_the_word_mean() {
        let mut store = ParamStore::new(b"t", 5);
        let params = TextEncoderParams::new(&mut store, "text", 6).unwrap();
        let (words, sentence) = encode_text(&[1, 4, 7], &params).unwrap();
        assert_eq!(words.shape(), &[3, 6]);
        assert_eq!(sentence.shape(), &[6]);
        for c in 0..6 {
            let mean = (0..3).map(|r| words.data()[r * 6 + c]).sum::<f64>() / 3.0;
            assert!((sentence.data()[c] - mean).abs() < 1e-15);
        }
    }

    #[test]
    fn out_of_table_token_ids_are_reported() {
        let mut store = ParamStore::new(b"t", 5);
        let params = TextEncoderParams::new(&mut store, "text", 4).unwrap();
        assert!(matches!(
            encode_text(&[42], &params),
            Err(Error::UnknownToken(42))
        ));
        assert!(matches!(
            encode_text(&[], &params),
            Err(Error::EmptyContext { .. })
        ));
    }

    fn test_image(h: usize, w: usize, shift: usize) -> Tensor {
        // Deterministic smooth pattern, cyclically shifted right by `shift`.
        let mut data = vec![0.0; 3 * h * w];
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let sx = (x + w - shift) % w;
                    data[(c * h + y) * w + x] =
                        ((c * h * w + y * w + sx) as f64 * 0.37).sin() * 0.5 + 0.5;
                }
            }
        }
        Tensor::from_vec(&[3, h, w], data).unwrap()
    }

    #[test]
    fn pyramid_strides_match_the_stage_layout() {
        let mut store = ParamStore::new(b"v", 1);
        let params = VisualEncoderParams::new(&mut store, "venc", 8).unwrap();
        let pyramids = encode_frames(&[test_image(64, 32, 0)], &params).unwrap();
        let p = &pyramids[0];
        assert_eq!(p.f4.shape(), &[8, 16, 8]);
        assert_eq!(p.f8.shape(), &[8, 8, 4]);
        assert_eq!(p.f16.shape(), &[8, 4, 2]);
        assert_eq!(p.f32.shape(), &[8, 2, 1]);
        // ReLU output: non-negative everywhere.
        assert!(p.f4.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn base_stride_translation_shifts_tokens_by_one_cell() {
        let mut store = ParamStore::new(b"v", 2);
        let params = VisualEncoderParams::new(&mut store, "venc", 6).unwrap();
        let plain = encode_frame(&test_image(32, 32, 0), &params).unwrap();
        let moved = encode_frame(&test_image(32, 32, 4), &params).unwrap();
        let (c, gh, gw) = (6, 8, 8);
        for ch in 0..c {
            for i in 0..gh {
                for j in 0..gw {
                    let a = plain.f4.data()[(ch * gh + i) * gw + j];
                    let b = moved.f4.data()[(ch * gh + i) * gw + (j + 1) % gw];
                    assert_eq!(a.to_bits(), b.to_bits(), "cell ({ch}, {i}, {j})");
                }
            }
        }
    }

    #[test]
    fn malformed_images_are_rejected() {
        let mut store = ParamStore::new(b"v", 3);
        let params = VisualEncoderParams::new(&mut store, "venc", 4).unwrap();
        let gray = Tensor::from_vec(&[1, 32, 32], vec![0.0; 32 * 32]).unwrap();
        assert!(encode_frames(&[gray], &params).is_err());
        let ragged = Tensor::from_vec(&[3, 24, 32], vec![0.0; 3 * 24 * 32]).unwrap();
        assert!(encode_frames(&[ragged], &params).is_err());
        assert!(matches!(
            encode_frames(&[], &params),
            Err(Error::EmptyContext { .. })
        ));
    }
}
