//! Sharing one forward pass across several referring expressions.
//!
//! When a video carries `N` expressions, the expensive per-frame work
//! (visual encoding, fusion, feature encoding) should run once, not `N`
//! times. The combined gate sums each expression's attention summary into a
//! single modulation of the shared visual tokens — with one expression this
//! collapses exactly to the single-expression fusion path. Individual
//! instances are recovered afterwards by *decoupling*: re-gating the shared
//! encoded tokens with one expression's attention before query decoding.
//!
//! The per-expression summaries are combined with a value-sorted sum, so
//! the fused feature is bit-for-bit independent of expression order.

use crate::error::{Error, Result};
use crate::fusion::{cross_attention, fuse_with_gate, AttentionParams, FusionParams};
use crate::tensor::{sorted_sum, Tensor};

/// Sums every expression's attention readout over the shared spatial
/// tokens: `(H*W, C)`. The sum is order-independent down to the last bit.
pub fn semantic_fusion(
    expressions: &[Tensor],
    tokens: &Tensor,
    params: &AttentionParams,
) -> Result<Tensor> {
    if expressions.is_empty() {
        return Err(Error::EmptyContext { op: "semantic_fusion" });
    }
    let summaries = expressions
        .iter()
        .map(|words| cross_attention(tokens, words, params))
        .collect::<Result<Vec<_>>>()?;
    sorted_sum(&summaries)
}

/// Fuses all expressions into one visual feature map in a single pass.
/// With exactly one expression this equals [`crate::fusion::fuse`]
/// bit-for-bit.
pub fn multi_instance_fusion(
    expressions: &[Tensor],
    visual: &Tensor,
    params: &FusionParams,
) -> Result<Tensor> {
    fuse_with_gate(visual, params, |tokens| {
        semantic_fusion(expressions, tokens, &params.attention)
    })
}

/// Recovers one instance's view of the shared encoded tokens by gating them
/// with that expression's attention summary.
pub fn decouple_tokens(tokens: &Tensor, words: &Tensor, params: &AttentionParams) -> Result<Tensor> {
    tokens.mul(&cross_attention(tokens, words, params)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::fuse;
    use crate::tensor::{grad_check, Init, ParamStore, Params};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn rand_tensor(rng: &mut ChaCha20Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn empty_expression_set_is_rejected() {
        let mut store = ParamStore::new(b"multi", 0);
        let params = AttentionParams::new(&mut store, "a", 2).unwrap();
        let tokens = Tensor::zeros(&[4, 2]);
        assert!(matches!(
            semantic_fusion(&[], &tokens, &params),
            Err(Error::EmptyContext { .. })
        ));
    }

    #[test]
    fn fused_gate_is_bitwise_invariant_to_expression_order() {
        let mut store = ParamStore::new(b"multi", 1);
        let params = AttentionParams::new(&mut store, "a", 3).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let tokens = rand_tensor(&mut rng, &[5, 3]);
        let exprs = vec![
            rand_tensor(&mut rng, &[2, 3]),
            rand_tensor(&mut rng, &[4, 3]),
            rand_tensor(&mut rng, &[1, 3]),
        ];
        let fwd = semantic_fusion(&exprs, &tokens, &params).unwrap();
        let rev: Vec<Tensor> = exprs.iter().rev().cloned().collect();
        let bwd = semantic_fusion(&rev, &tokens, &params).unwrap();
        let rot = vec![exprs[1].clone(), exprs[2].clone(), exprs[0].clone()];
        let mid = semantic_fusion(&rot, &tokens, &params).unwrap();
        assert!(fwd.bit_eq(&bwd));
        assert!(fwd.bit_eq(&mid));
    }

    #[test]
    fn two_expressions_sum_their_attention_readouts_exactly() {
        let mut store = ParamStore::new(b"multi", 3);
        let params = AttentionParams::new(&mut store, "a", 3).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let tokens = rand_tensor(&mut rng, &[4, 3]);
        let e1 = rand_tensor(&mut rng, &[2, 3]);
        let e2 = rand_tensor(&mut rng, &[3, 3]);
        let fused = semantic_fusion(&[e1.clone(), e2.clone()], &tokens, &params).unwrap();
        let direct = cross_attention(&tokens, &e1, &params)
            .unwrap()
            .add(&cross_attention(&tokens, &e2, &params).unwrap())
            .unwrap();
        assert_eq!(fused.max_abs_diff(&direct).unwrap(), 0.0);
    }

    #[test]
    fn single_expression_collapses_to_plain_fusion_bitwise() {
        let mut store = ParamStore::new(b"multi", 5);
        let params = FusionParams::new(&mut store, "f", 2, 0.25, true).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let visual = rand_tensor(&mut rng, &[2, 4, 4]);
        let words = rand_tensor(&mut rng, &[3, 2]);
        let shared = multi_instance_fusion(&[words.clone()], &visual, &params).unwrap();
        let single = fuse(&words, &visual, &params).unwrap();
        assert!(shared.bit_eq(&single));
    }

    #[test]
    fn decoupling_gates_tokens_with_their_attention_summary() {
        let mut store = ParamStore::new(b"multi", 7);
        let params = AttentionParams::new(&mut store, "a", 3).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let tokens = rand_tensor(&mut rng, &[4, 3]);
        let words = rand_tensor(&mut rng, &[2, 3]);
        let gated = decouple_tokens(&tokens, &words, &params).unwrap();
        let gate = cross_attention(&tokens, &words, &params).unwrap();
        for i in 0..tokens.numel() {
            assert_eq!(gated.data()[i], tokens.data()[i] * gate.data()[i]);
        }
    }

    #[test]
    fn shared_fusion_and_decoupling_gradient_check() {
        let mut store = ParamStore::new(b"multi-grad", 9);
        store.init("visual", &[2, 4, 4], Init::Uniform(-1.0, 1.0)).unwrap();
        store.init("e1", &[2, 2], Init::Uniform(-1.0, 1.0)).unwrap();
        store.init("e2", &[3, 2], Init::Uniform(-1.0, 1.0)).unwrap();
        FusionParams::new(&mut store, "f", 2, 0.25, true).unwrap();
        AttentionParams::new(&mut store, "dc", 2).unwrap();
        let err = grad_check(&store, |s| {
            let mut view = s.view();
            let fusion = FusionParams::new(&mut view, "f", 2, 0.25, true)?;
            let dc = AttentionParams::new(&mut view, "dc", 2)?;
            let exprs = vec![view.get("e1")?, view.get("e2")?];
            let fused = multi_instance_fusion(&exprs, &view.get("visual")?, &fusion)?;
            let tokens = crate::fusion::feature_to_tokens(&fused)?;
            let inst = decouple_tokens(&tokens, &exprs[0], &dc)?;
            let n = inst.numel();
            let w = Tensor::from_vec(&[n], (0..n).map(|i| 0.05 + 0.02 * i as f64).collect())?;
            inst.reshape(&[n])?.mul(&w)?.sum_all()
        })
        .unwrap();
        assert!(err < 1e-4, "gradient error {err}");
    }
}
