//! Finite-difference verification of reverse-mode gradients.
//!
//! [`grad_check`] treats the model as a black box `f(params) -> scalar`:
//! it computes analytic gradients once via backpropagation, then probes
//! every parameter element with a central difference and reports the worst
//! relative disagreement. Callers assert against their own threshold
//! (1e-4 is appropriate for the default epsilon).
//!
//! The probe step perturbs a *copy* of the store, so `f` must read
//! parameters through the store it is handed — capturing tensors from an
//! outer scope would silently bypass the perturbation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use super::{no_grad, ParamStore, Tensor};
use crate::error::Result;

/// Central-difference step size.
pub const GRAD_CHECK_EPSILON: f64 = 1e-4;

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

fn probe<F>(store: &ParamStore, f: &F, name: &str, index: usize, analytic: f64) -> Result<f64>
where
    F: Fn(&ParamStore) -> Result<Tensor>,
{
    let plus = store.perturbed(name, index, GRAD_CHECK_EPSILON)?;
    let minus = store.perturbed(name, index, -GRAD_CHECK_EPSILON)?;
    let lp = no_grad(|| f(&plus))?.item()?;
    let lm = no_grad(|| f(&minus))?.item()?;
    let numeric = (lp - lm) / (2.0 * GRAD_CHECK_EPSILON);
    Ok(relative_error(analytic, numeric))
}

/// Checks every element of every parameter; returns the worst relative
/// error between analytic and central-difference gradients.
pub fn grad_check<F>(store: &ParamStore, f: F) -> Result<f64>
where
    F: Fn(&ParamStore) -> Result<Tensor>,
{
    let loss = f(store)?;
    let grads = loss.backward()?;
    let mut worst = 0.0f64;
    for name in store.names() {
        let param = store.get(name)?;
        let analytic = grads.get(&param);
        for index in 0..param.numel() {
            let a = analytic.map_or(0.0, |g| g[index]);
            worst = worst.max(probe(store, &f, name, index, a)?);
        }
    }
    Ok(worst)
}

/// Like [`grad_check`] but probes a deterministic random subset of
/// parameter elements — for models where exhaustive probing is too slow.
/// Every parameter contributes at least one probed element.
pub fn grad_check_sampled<F>(store: &ParamStore, f: F, samples: usize, seed: u64) -> Result<f64>
where
    F: Fn(&ParamStore) -> Result<Tensor>,
{
    let loss = f(store)?;
    let grads = loss.backward()?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut picks: Vec<(&str, usize)> = Vec::new();
    let mut pool: Vec<(&str, usize)> = Vec::new();
    for name in store.names() {
        let param = store.get(name)?;
        let n = param.numel();
        if n == 0 {
            continue;
        }
        let chosen = *(0..n).collect::<Vec<_>>().choose(&mut rng).expect("non-empty");
        picks.push((name, chosen));
        for index in 0..n {
            pool.push((name, index));
        }
    }
    let extra = samples.saturating_sub(picks.len());
    picks.extend(pool.choose_multiple(&mut rng, extra.min(pool.len())).copied());
    let mut worst = 0.0f64;
    for (name, index) in picks {
        let param = store.get(name)?;
        let analytic = grads.get(&param).map_or(0.0, |g| g[index]);
        worst = worst.max(probe(store, &f, name, index, analytic)?);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Init;

    #[test]
    fn agrees_on_a_quadratic_with_known_gradient() {
        let mut store = ParamStore::new(b"gc", 5);
        store.init("p", &[4], Init::Uniform(0.5, 1.5)).unwrap();
        let err = grad_check(&store, |s| {
            let p = s.get("p")?;
            p.mul(&p)?.sum_all()
        })
        .unwrap();
        assert!(err < 1e-8, "quadratics are exact under central differences: {err}");
    }

    #[test]
    fn detects_a_deliberately_wrong_gradient() {
        // sum(p) has gradient 1 everywhere; pretend the loss is sum(2p)
        // while evaluating sum(p) under perturbation by scaling after the
        // graph is built. A mismatch must be flagged.
        let mut store = ParamStore::new(b"gc-bad", 6);
        store.init("p", &[3], Init::Uniform(0.5, 1.5)).unwrap();
        // f builds sum(2p) analytically but the probe sees f too — so
        // instead simulate the bug by checking against a *different*
        // function than the analytic pass used.
        let loss = store.get("p").unwrap().mul_scalar(2.0).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let p = store.get("p").unwrap();
        let analytic = grads.get(&p).unwrap()[0];
        let err = probe(&store, &|s: &ParamStore| s.get("p")?.sum_all(), "p", 0, analytic).unwrap();
        assert!(err > 0.5, "a 2x-wrong gradient must be detected, got {err}");
    }

    #[test]
    fn sampled_variant_covers_every_parameter() {
        let mut store = ParamStore::new(b"gc-s", 7);
        store.init("a", &[10], Init::Uniform(0.5, 1.5)).unwrap();
        store.init("b", &[10], Init::Uniform(0.5, 1.5)).unwrap();
        let err = grad_check_sampled(
            &store,
            |s| {
                let a = s.get("a")?;
                let b = s.get("b")?;
                a.mul(&b)?.sum_all()
            },
            6,
            11,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }
}
