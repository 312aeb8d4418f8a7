//! Numerical verification of the weak-to-strong scale law.
//!
//! In the closed-form setting the branch output is set to its tracking
//! optimum `zeta* = (G* - G) / alpha_strong`, where
//! `G* = eps' - v_pre(x_tilde, t)` is the ideal generator output implied
//! by the frozen pretrained view. Two generator gradients are then
//! computed through two separate code routes:
//!
//! - the weak-to-strong route differentiates
//!   `mean ||G* - G(phi) - alpha_weak * zeta*(phi)||^2` with the branch
//!   tracking its optimum (chain factor `-(1 - alpha_weak/alpha_strong)`
//!   per unit of generator output);
//! - the vanilla route differentiates `mean ||G* - G(phi)||^2` directly.
//!
//! The two must agree elementwise up to the factor
//! `((alpha_strong - alpha_weak) / alpha_strong)^2` - at the default
//! scales (0.25, 1) that factor is 0.5625.

use crate::error::{Error, Result};
use crate::lora::{optimal_branch_oracle, LoraMode};
use crate::numerics::{MlpNet, ParamVector};
use crate::rng::derive_rng;
use crate::scheduler::{add_noise, TimestepSampler};
use crate::Batch;

use super::losses::randn;

/// Alpha grids the verifier is expected to pass on (all cross pairs).
pub const PROP1_ALPHA_WEAK_GRID: [f64; 6] = [0.0, 0.1, 0.25, 0.5, 0.75, 0.9];
pub const PROP1_ALPHA_STRONG_GRID: [f64; 3] = [0.5, 1.0, 2.0];

#[derive(Debug, Clone)]
pub struct Prop1Report {
    pub alpha_weak: f64,
    pub alpha_strong: f64,
    /// `((alpha_strong - alpha_weak) / alpha_strong)^2`
    pub scale_factor: f64,
    pub max_abs_deviation: f64,
    pub w2s_grad: Vec<f64>,
    pub vanilla_grad: Vec<f64>,
}

/// Run the verifier on a fixed problem: a frozen pretrained net, a
/// (slightly perturbed) generator copy, and seed-derived noise draws.
/// Only the output placement makes the branch-output substitution exact,
/// so deep mode is rejected.
pub fn verify_prop1(
    net: &MlpNet,
    pre_params: &ParamVector,
    gen_params: &ParamVector,
    mode: LoraMode,
    alpha_weak: f64,
    alpha_strong: f64,
    batch: usize,
    seed: u64,
) -> Result<Prop1Report> {
    if mode != LoraMode::Output {
        return Err(Error::Domain(
            "verify_prop1: the scale law is exact only in output-lora mode; deep mode is rejected".into(),
        ));
    }
    if !alpha_strong.is_finite() || alpha_strong == 0.0 {
        return Err(Error::Domain("verify_prop1: alpha_strong must be nonzero".into()));
    }
    let d = net.data_dim();
    let mut rng = derive_rng(seed, "prop1", 0);
    let eps = randn(&mut rng, batch, d);
    let eps_prime = randn(&mut rng, batch, d);
    let sampler = TimestepSampler::LogitNormal { mean: 0.0, std: 1.0 };
    let t = sampler.sample_batch(batch, &mut rng);

    // one generator application from pure noise: G = eps - v(eps, 1000)
    let t_one = vec![1000.0; batch];
    let (v_gen, cache) = net.forward_cached(gen_params, &eps, &t_one, None)?;
    let g_out: Batch = eps
        .iter()
        .zip(&v_gen)
        .map(|(e, v)| e.iter().zip(v).map(|(&ev, &vv)| ev - vv).collect())
        .collect();

    let x_tilde = add_noise(&g_out, &eps_prime, &t)?;
    let v_pre = net.forward(pre_params, &x_tilde, &t, None)?;
    // ideal generator output implied by the frozen view: G* = eps' - v_pre
    let g_star: Batch = eps_prime
        .iter()
        .zip(&v_pre)
        .map(|(e, v)| e.iter().zip(v).map(|(&ev, &vv)| ev - vv).collect())
        .collect();
    let residual: Batch = g_star
        .iter()
        .zip(&g_out)
        .map(|(s, g)| s.iter().zip(g).map(|(&sv, &gv)| sv - gv).collect())
        .collect();
    let zeta = optimal_branch_oracle(&residual, alpha_strong)?;

    let bn = batch as f64;
    // vanilla route: d/dG of mean ||G* - G||^2 is -2 (G* - G) / B,
    // and dG/d(net output) = -1 at t = 1000.
    let u_vanilla: Batch = residual
        .iter()
        .map(|row| row.iter().map(|&r| -(-2.0 / bn) * r).collect())
        .collect();
    let mut vanilla = ParamVector::zeros(net.layout());
    net.backward(gen_params, &cache, &u_vanilla, Some(&mut vanilla), false)?;

    // weak-to-strong route: residual r = G* - G - alpha_weak * zeta*,
    // with zeta* tracking the optimum so dr/dG = -(1 - alpha_weak/alpha_strong).
    let shrink = 1.0 - alpha_weak / alpha_strong;
    let u_w2s: Batch = residual
        .iter()
        .zip(&zeta)
        .map(|(rrow, zrow)| {
            rrow.iter()
                .zip(zrow)
                .map(|(&r, &z)| {
                    let rw = r - alpha_weak * z;
                    -(-2.0 * shrink / bn) * rw
                })
                .collect()
        })
        .collect();
    let mut w2s = ParamVector::zeros(net.layout());
    net.backward(gen_params, &cache, &u_w2s, Some(&mut w2s), false)?;

    let scale_factor = ((alpha_strong - alpha_weak) / alpha_strong).powi(2);
    let max_abs_deviation = w2s
        .values()
        .iter()
        .zip(vanilla.values())
        .map(|(&l, &r)| (l - scale_factor * r).abs())
        .fold(0.0, f64::max);
    Ok(Prop1Report {
        alpha_weak,
        alpha_strong,
        scale_factor,
        max_abs_deviation,
        w2s_grad: w2s.values().to_vec(),
        vanilla_grad: vanilla.values().to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Activation;

    fn problem() -> (MlpNet, ParamVector, ParamVector) {
        let net = MlpNet::new(2, &[8, 6], 8, 0, Activation::Silu).unwrap();
        let pre = net.init_params(100);
        // perturbed copy as the generator
        let mut gen = pre.clone();
        let mut rng = crate::rng::derive_rng(101, "perturb", 0);
        use rand::Rng;
        for v in gen.values_mut() {
            *v += rng.gen_range(-0.05..0.05);
        }
        (net, pre, gen)
    }

    #[test]
    fn default_scales_give_0p5625() {
        let (net, pre, gen) = problem();
        let r = verify_prop1(&net, &pre, &gen, LoraMode::Output, 0.25, 1.0, 16, 7).unwrap();
        assert_eq!(r.scale_factor, 0.5625);
        assert!(r.max_abs_deviation <= 1e-10, "deviation {}", r.max_abs_deviation);
    }

    #[test]
    fn zero_weak_scale_reduces_to_vanilla() {
        let (net, pre, gen) = problem();
        let r = verify_prop1(&net, &pre, &gen, LoraMode::Output, 0.0, 1.0, 16, 8).unwrap();
        assert_eq!(r.scale_factor, 1.0);
        assert!(r.max_abs_deviation <= 1e-12, "deviation {}", r.max_abs_deviation);
        for (a, b) in r.w2s_grad.iter().zip(&r.vanilla_grad) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn equal_scales_zero_the_gradient() {
        let (net, pre, gen) = problem();
        for alpha in [0.5, 1.0] {
            let r = verify_prop1(&net, &pre, &gen, LoraMode::Output, alpha, alpha, 16, 9).unwrap();
            assert_eq!(r.scale_factor, 0.0);
            assert!(r.w2s_grad.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn full_grid_stays_within_1e10() {
        let (net, pre, gen) = problem();
        for &aw in &PROP1_ALPHA_WEAK_GRID {
            for &as_ in &PROP1_ALPHA_STRONG_GRID {
                let r = verify_prop1(&net, &pre, &gen, LoraMode::Output, aw, as_, 16, 11).unwrap();
                assert!(
                    r.max_abs_deviation <= 1e-10,
                    "alpha=({aw},{as_}): deviation {}",
                    r.max_abs_deviation
                );
            }
        }
    }

    #[test]
    fn deep_mode_is_rejected() {
        let (net, pre, gen) = problem();
        assert!(verify_prop1(&net, &pre, &gen, LoraMode::Deep, 0.25, 1.0, 8, 1).is_err());
    }
}
