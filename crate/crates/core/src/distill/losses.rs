//! The distillation losses.
//!
//! The DMD and regularization gradients are realized through a
//! double-stopgrad surrogate: with a per-sample direction `d` and the
//! generator output `x0_hat`, the surrogate `mean_i 0.5 * ||x0_hat_i -
//! stopgrad(x0_hat_i - d_i)||^2` has gradient exactly `d_i / B` w.r.t.
//! `x0_hat_i`, so plain backprop reproduces the analytic update while the
//! score views stay gradient-free. Tests target `d` directly through
//! [`dmd_direction`].

use rand::Rng;
use rand_distr::StandardNormal;

use super::{DiscriminatorHead, DistillState, GenSource};
use crate::error::{Error, Result};
use crate::lora::{accumulate_branch_gradient, eval_view, eval_view_cached};
use crate::numerics::{MlpCache, MlpNet, ParamVector, StackCache};
use crate::scheduler::{add_noise, denoise_prediction, sigma, velocity_target};
use crate::Batch;

pub(crate) fn randn(rng: &mut impl Rng, n: usize, d: usize) -> Batch {
    (0..n)
        .map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect())
        .collect()
}

/// One generator application in the training-loop pattern: noise the
/// ground truth (or take pure noise), predict the velocity once and read
/// off the clean-sample prediction `x0_hat = x_in - sigma_t * v`.
#[derive(Debug)]
pub struct GenForward {
    pub x_in: Batch,
    pub t: Vec<f64>,
    pub x0_hat: Batch,
    pub cache: MlpCache,
}

pub fn generator_forward(
    net: &MlpNet,
    params: &ParamVector,
    source: GenSource,
    x_gt: &Batch,
    eps: &Batch,
    t: &[f64],
    cond: Option<&Batch>,
) -> Result<GenForward> {
    let x_in = match source {
        GenSource::NoisedGroundTruth => add_noise(x_gt, eps, t)?,
        GenSource::PureNoise => eps.clone(),
    };
    let (v, cache) = net.forward_cached(params, &x_in, t, cond)?;
    let x0_hat = denoise_prediction(&x_in, &v, t)?;
    Ok(GenForward {
        x_in,
        t: t.to_vec(),
        x0_hat,
        cache,
    })
}

/// The per-sample DMD update direction
/// `d = x0_fake_pred - x0_real_pred`, i.e. the sign-flipped bracket of the
/// reverse-KL gradient. With the optional normalizer, `d` is divided by
/// the per-sample mean absolute gap between the real prediction and the
/// generator output (off by default: the scale-law arithmetic assumes the
/// raw direction).
pub fn dmd_direction(x0_hat: &Batch, x0_real: &Batch, x0_fake: &Batch, normalize: bool) -> Batch {
    let mut d: Batch = x0_fake
        .iter()
        .zip(x0_real)
        .map(|(f, r)| f.iter().zip(r).map(|(&fv, &rv)| fv - rv).collect())
        .collect();
    if normalize {
        for (i, row) in d.iter_mut().enumerate() {
            let s: f64 = x0_real[i]
                .iter()
                .zip(&x0_hat[i])
                .map(|(&rv, &hv)| (rv - hv).abs())
                .sum::<f64>()
                / row.len() as f64;
            let s = s.max(1e-12);
            for v in row.iter_mut() {
                *v /= s;
            }
        }
    }
    d
}

/// Both view predictions at the renoised point: the weak view plays the
/// real model, the strong view the fake model. Neither carries gradients.
pub(crate) fn view_predictions(
    state: &DistillState,
    x_tilde: &Batch,
    t: &[f64],
    cond: Option<&Batch>,
) -> Result<(Batch, Batch)> {
    let vr = eval_view(
        &state.net,
        &state.pre_params,
        &state.branch,
        &state.aux_params,
        state.scales.alpha_weak,
        x_tilde,
        t,
        cond,
    )?;
    let vf = eval_view(
        &state.net,
        &state.pre_params,
        &state.branch,
        &state.aux_params,
        state.scales.alpha_strong,
        x_tilde,
        t,
        cond,
    )?;
    Ok((denoise_prediction(x_tilde, &vr, t)?, denoise_prediction(x_tilde, &vf, t)?))
}

/// A generator-side surrogate loss: the scalar value, the gradient over
/// the generator parameters, and the frozen target `x0_hat - d` that lets
/// a finite-difference oracle re-evaluate the same surrogate with the
/// views held fixed.
#[derive(Debug)]
pub struct GenLossResult {
    pub loss: f64,
    pub grads: ParamVector,
    pub frozen_target: Batch,
}

pub(crate) fn surrogate_from_direction(
    net: &MlpNet,
    gen_params: &ParamVector,
    gf: &GenForward,
    d: &Batch,
) -> Result<GenLossResult> {
    let b = d.len() as f64;
    let mut loss = 0.0;
    let mut upstream = Vec::with_capacity(d.len());
    let mut frozen = Vec::with_capacity(d.len());
    for (i, row) in d.iter().enumerate() {
        let s = sigma(gf.t[i]);
        let mut urow = Vec::with_capacity(row.len());
        let mut crow = Vec::with_capacity(row.len());
        for (j, &dv) in row.iter().enumerate() {
            loss += 0.5 * dv * dv / b;
            // d(x0_hat)/d(net output) = -sigma_t
            urow.push(-s * dv / b);
            crow.push(gf.x0_hat[i][j] - dv);
        }
        upstream.push(urow);
        frozen.push(crow);
    }
    let mut grads = ParamVector::zeros(net.layout());
    net.backward(gen_params, &gf.cache, &upstream, Some(&mut grads), false)?;
    Ok(GenLossResult {
        loss,
        grads,
        frozen_target: frozen,
    })
}

/// Surrogate value `mean_i 0.5 ||x0_hat(params) - target_i||^2` for a
/// frozen target: the finite-difference side of the gradient checks.
pub fn surrogate_value(
    net: &MlpNet,
    gen_params: &ParamVector,
    source: GenSource,
    x_gt: &Batch,
    eps: &Batch,
    t: &[f64],
    cond: Option<&Batch>,
    frozen_target: &Batch,
) -> Result<f64> {
    let gf = generator_forward(net, gen_params, source, x_gt, eps, t, cond)?;
    let b = frozen_target.len() as f64;
    let mut loss = 0.0;
    for (row, tgt) in gf.x0_hat.iter().zip(frozen_target) {
        for (&a, &c) in row.iter().zip(tgt) {
            loss += 0.5 * (a - c) * (a - c) / b;
        }
    }
    Ok(loss)
}

fn ensure_finite_direction(state: &DistillState, name: &str, d: &Batch) -> Result<()> {
    for row in d {
        for &v in row {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    iteration: state.iteration,
                    loss: name.into(),
                    detail: format!(
                        "direction value {v}; alpha_weak={}, alpha_strong={}",
                        state.scales.alpha_weak, state.scales.alpha_strong
                    ),
                });
            }
        }
    }
    Ok(())
}

/// DMD generator loss with explicit draws (`eps`, `t`): synthesize
/// `x0_hat`, renoise it with the same noise and timesteps, evaluate both
/// views there, and backpropagate the direction into the generator.
pub fn dmd_generator_loss_with(
    state: &DistillState,
    x_gt: &Batch,
    eps: &Batch,
    t: &[f64],
    cond: Option<&Batch>,
) -> Result<GenLossResult> {
    let gf = generator_forward(&state.net, &state.gen_params, state.gen_source, x_gt, eps, t, cond)?;
    let x_tilde = add_noise(&gf.x0_hat, eps, t)?;
    let (x0r, x0f) = view_predictions(state, &x_tilde, t, cond)?;
    let d = dmd_direction(&gf.x0_hat, &x0r, &x0f, state.weights.normalizer_enabled);
    ensure_finite_direction(state, "l_dmd", &d)?;
    surrogate_from_direction(&state.net, &state.gen_params, &gf, &d)
}

/// DMD generator loss with internal draws: `t` uniform over the schedule
/// entries, fresh Gaussian noise.
pub fn dmd_generator_loss(
    state: &DistillState,
    x_gt: &Batch,
    cond: Option<&Batch>,
    rng: &mut impl Rng,
) -> Result<GenLossResult> {
    let t = state.schedule.sample_uniform(x_gt.len(), rng);
    let eps = randn(rng, x_gt.len(), state.net.data_dim());
    dmd_generator_loss_with(state, x_gt, &eps, &t, cond)
}

/// Ground-truth supervision: pull the strong view's denoised prediction of
/// the renoised generator output toward the data sample. The denoiser
/// Jacobian w.r.t. the generator output is taken as identity, so the
/// direction `x0_fake_pred - x_gt` backpropagates through `x0_hat` alone.
pub fn reg_generator_loss_with(
    state: &DistillState,
    x_gt: &Batch,
    eps: &Batch,
    t: &[f64],
    cond: Option<&Batch>,
) -> Result<GenLossResult> {
    let gf = generator_forward(&state.net, &state.gen_params, state.gen_source, x_gt, eps, t, cond)?;
    let x_tilde = add_noise(&gf.x0_hat, eps, t)?;
    let vf = eval_view(
        &state.net,
        &state.pre_params,
        &state.branch,
        &state.aux_params,
        state.scales.alpha_strong,
        &x_tilde,
        t,
        cond,
    )?;
    let x0f = denoise_prediction(&x_tilde, &vf, t)?;
    if x_gt.len() != x0f.len() || x_gt.iter().zip(&x0f).any(|(a, b)| a.len() != b.len()) {
        return Err(Error::config("batch", "ground-truth batch shape mismatch"));
    }
    let d: Batch = x0f
        .iter()
        .zip(x_gt)
        .map(|(f, g)| f.iter().zip(g).map(|(&fv, &gv)| fv - gv).collect())
        .collect();
    ensure_finite_direction(state, "l_reg", &d)?;
    surrogate_from_direction(&state.net, &state.gen_params, &gf, &d)
}

pub fn reg_generator_loss(
    state: &DistillState,
    x_gt: &Batch,
    cond: Option<&Batch>,
    rng: &mut impl Rng,
) -> Result<GenLossResult> {
    let t = state.schedule.sample_uniform(x_gt.len(), rng);
    let eps = randn(rng, x_gt.len(), state.net.data_dim());
    reg_generator_loss_with(state, x_gt, &eps, &t, cond)
}

/// Branch-side diffusion regression result. `x_t`, `t` and `target` are
/// the frozen pieces a finite-difference oracle needs to re-evaluate the
/// strong view under perturbed factors.
#[derive(Debug)]
pub struct BranchLossResult {
    pub loss: f64,
    /// Gradient over the aux vector; only `lora/...` entries are nonzero.
    pub grads: ParamVector,
    pub x_t: Batch,
    pub t: Vec<f64>,
    pub target: Batch,
}

/// Diffusion loss for the branch: regress the strong view, evaluated on
/// the renoised stop-gradded generator output, onto `eps' - x0_hat`.
pub fn diffusion_branch_loss_with(
    state: &DistillState,
    x0_hat: &Batch,
    eps_prime: &Batch,
    t: &[f64],
    cond: Option<&Batch>,
) -> Result<BranchLossResult> {
    let x_t = add_noise(x0_hat, eps_prime, t)?;
    let target = velocity_target(x0_hat, eps_prime)?;
    let (vf, vcache) = eval_view_cached(
        &state.net,
        &state.pre_params,
        &state.branch,
        &state.aux_params,
        state.scales.alpha_strong,
        &x_t,
        t,
        cond,
    )?;
    let b = x_t.len() as f64;
    let mut loss = 0.0;
    let mut upstream = Vec::with_capacity(vf.len());
    for (row, tgt) in vf.iter().zip(&target) {
        let mut urow = Vec::with_capacity(row.len());
        for (&a, &c) in row.iter().zip(tgt) {
            let r = a - c;
            loss += r * r / b;
            urow.push(2.0 * r / b);
        }
        upstream.push(urow);
    }
    let mut grads = ParamVector::zeros(state.aux_params.layout().clone());
    accumulate_branch_gradient(&state.net, &state.branch, &state.aux_params, &vcache, &upstream, &mut grads)?;
    Ok(BranchLossResult {
        loss,
        grads,
        x_t,
        t: t.to_vec(),
        target,
    })
}

/// Strong-view regression value at frozen `(x_t, t, target)` under given
/// factors: the finite-difference side of the branch gradient check.
pub fn branch_loss_value(
    state: &DistillState,
    factors: &ParamVector,
    x_t: &Batch,
    t: &[f64],
    target: &Batch,
    cond: Option<&Batch>,
) -> Result<f64> {
    let vf = eval_view(
        &state.net,
        &state.pre_params,
        &state.branch,
        factors,
        state.scales.alpha_strong,
        x_t,
        t,
        cond,
    )?;
    let b = x_t.len() as f64;
    let mut loss = 0.0;
    for (row, tgt) in vf.iter().zip(target) {
        for (&a, &c) in row.iter().zip(tgt) {
            loss += (a - c) * (a - c) / b;
        }
    }
    Ok(loss)
}

/// Diffusion loss with internal draws: fresh logit-normal `t`, fresh
/// noise, the generator output stop-gradded.
pub fn diffusion_branch_loss(
    state: &DistillState,
    x_gt: &Batch,
    cond: Option<&Batch>,
    rng: &mut impl Rng,
) -> Result<BranchLossResult> {
    let n = x_gt.len();
    let d = state.net.data_dim();
    let t = state.branch_sampler.sample_batch(n, rng);
    let eps = randn(rng, n, d);
    let gf = generator_forward(&state.net, &state.gen_params, state.gen_source, x_gt, &eps, &t, cond)?;
    let eps_prime = randn(rng, n, d);
    diffusion_branch_loss_with(state, &gf.x0_hat, &eps_prime, &t, cond)
}

/// Hinge terms for one (fake, real) score pair. Returns the loss
/// contribution and the subgradients w.r.t. the two scores; the
/// subgradient at an exactly-zero hinge argument is 0 by convention.
pub fn hinge_terms(fake_score: f64, real_score: f64) -> (f64, f64, f64) {
    let hf = 1.0 + fake_score;
    let hr = 1.0 - real_score;
    let loss = hf.max(0.0) + hr.max(0.0);
    let d_fake = if hf > 0.0 { 1.0 } else { 0.0 };
    let d_real = if hr > 0.0 { -1.0 } else { 0.0 };
    (loss, d_fake, d_real)
}

/// Discriminator forward: score = head(tap features of the frozen
/// backbone). When `noised` is given, the input is first pushed to
/// `x_t = (1 - sigma) x + sigma eps` and the chain factor `1 - sigma` is
/// recorded for the generator-side backward.
#[derive(Debug)]
pub struct DiscForward {
    pub scores: Vec<f64>,
    tap_cache: MlpCache,
    head_cache: StackCache,
    input_scale: Vec<f64>,
}

pub fn disc_scores(
    net: &MlpNet,
    pre_params: &ParamVector,
    disc: &DiscriminatorHead,
    head_params: &ParamVector,
    x: &Batch,
    noised: Option<(&Batch, &[f64])>,
    cond: Option<&Batch>,
) -> Result<DiscForward> {
    let (x_in, t, input_scale): (Batch, Vec<f64>, Vec<f64>) = match noised {
        Some((eps, td)) => (
            add_noise(x, eps, td)?,
            td.to_vec(),
            td.iter().map(|&tv| 1.0 - sigma(tv)).collect(),
        ),
        None => (x.clone(), vec![0.0; x.len()], vec![1.0; x.len()]),
    };
    let (feats, tap_cache) = net.forward_to_tap(pre_params, &x_in, &t, cond, disc.tap)?;
    let (rows, head_cache) = disc.stack.forward_prefix(head_params, &feats, disc.stack.n_layers())?;
    Ok(DiscForward {
        scores: rows.iter().map(|r| r[0]).collect(),
        tap_cache,
        head_cache,
        input_scale,
    })
}

/// Backprop score gradients into the head parameters (the backbone stays
/// frozen: its parameter gradient is never formed).
pub(crate) fn disc_backward_head(
    disc: &DiscriminatorHead,
    head_params: &ParamVector,
    fwd: &DiscForward,
    dscore: &[f64],
    grads: &mut ParamVector,
) -> Result<()> {
    let upstream: Batch = dscore.iter().map(|&v| vec![v]).collect();
    disc.stack
        .backward(head_params, &fwd.head_cache, &upstream, Some(grads), false)?;
    Ok(())
}

/// Backprop score gradients to the discriminator's *pre-noising* input,
/// through the frozen head and frozen backbone tap.
pub(crate) fn disc_backward_input(
    net: &MlpNet,
    pre_params: &ParamVector,
    disc: &DiscriminatorHead,
    head_params: &ParamVector,
    fwd: &DiscForward,
    dscore: &[f64],
) -> Result<Batch> {
    let upstream: Batch = dscore.iter().map(|&v| vec![v]).collect();
    let dfeats = disc
        .stack
        .backward(head_params, &fwd.head_cache, &upstream, None, true)?
        .expect("input gradient requested");
    let dx_in = net
        .backward(pre_params, &fwd.tap_cache, &dfeats, None, true)?
        .expect("input gradient requested");
    Ok(dx_in
        .into_iter()
        .zip(&fwd.input_scale)
        .map(|(row, &s)| row.into_iter().map(|v| s * v).collect())
        .collect())
}

/// Both adversarial losses from separate forward passes: the hinge loss
/// with its head gradient, and the generator score loss with its
/// generator-parameter gradient.
#[derive(Debug)]
pub struct AdvLossResult {
    pub l_dis: f64,
    /// Gradient over the aux vector; only `disc/...` entries are nonzero.
    pub dis_grads: ParamVector,
    pub l_gen: f64,
    pub gen_grads: ParamVector,
}

pub fn adversarial_losses(
    state: &DistillState,
    x_gt: &Batch,
    eps: &Batch,
    t: &[f64],
    cond: Option<&Batch>,
    rng: &mut impl Rng,
) -> Result<AdvLossResult> {
    let n = x_gt.len();
    let d = state.net.data_dim();
    let gf = generator_forward(&state.net, &state.gen_params, state.gen_source, x_gt, eps, t, cond)?;

    // discriminator update pass: generator output is data here, no grads
    let (l_dis, dis_grads) = {
        let td = state.branch_sampler.sample_batch(n, rng);
        let ef = randn(rng, n, d);
        let er = randn(rng, n, d);
        let noised_f = state.disc_noised.then_some((&ef, td.as_slice()));
        let noised_r = state.disc_noised.then_some((&er, td.as_slice()));
        let fake = disc_scores(
            &state.net,
            &state.pre_params,
            &state.disc,
            &state.aux_params,
            &gf.x0_hat,
            noised_f.map(|(e, t)| (e as &Batch, t)),
            cond,
        )?;
        let real = disc_scores(
            &state.net,
            &state.pre_params,
            &state.disc,
            &state.aux_params,
            x_gt,
            noised_r.map(|(e, t)| (e as &Batch, t)),
            cond,
        )?;
        let b = n as f64;
        let mut loss = 0.0;
        let mut df = vec![0.0; n];
        let mut dr = vec![0.0; n];
        for i in 0..n {
            let (l, gf_, gr_) = hinge_terms(fake.scores[i], real.scores[i]);
            loss += l / b;
            df[i] = gf_ / b;
            dr[i] = gr_ / b;
        }
        let mut grads = ParamVector::zeros(state.aux_params.layout().clone());
        disc_backward_head(&state.disc, &state.aux_params, &fake, &df, &mut grads)?;
        disc_backward_head(&state.disc, &state.aux_params, &real, &dr, &mut grads)?;
        (loss, grads)
    };

    // generator update pass: fresh draws, gradient through the score input
    let (l_gen, gen_grads) = {
        let td = state.branch_sampler.sample_batch(n, rng);
        let eg = randn(rng, n, d);
        let noised = state.disc_noised.then_some((&eg, td.as_slice()));
        let fwd = disc_scores(
            &state.net,
            &state.pre_params,
            &state.disc,
            &state.aux_params,
            &gf.x0_hat,
            noised.map(|(e, t)| (e as &Batch, t)),
            cond,
        )?;
        let b = n as f64;
        let loss = -fwd.scores.iter().sum::<f64>() / b;
        let dscore = vec![-1.0 / b; n];
        let dx0 = disc_backward_input(
            &state.net,
            &state.pre_params,
            &state.disc,
            &state.aux_params,
            &fwd,
            &dscore,
        )?;
        let upstream: Batch = dx0
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let s = sigma(gf.t[i]);
                row.iter().map(|&v| -s * v).collect()
            })
            .collect();
        let mut grads = ParamVector::zeros(state.net.layout());
        state
            .net
            .backward(&state.gen_params, &gf.cache, &upstream, Some(&mut grads), false)?;
        (loss, grads)
    };

    Ok(AdvLossResult {
        l_dis,
        dis_grads,
        l_gen,
        gen_grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distill::testutil::{randomize_factors, tiny_state};
    use crate::lora::LoraMode;
    use crate::numerics::{checksum, grad_check, timestep_embedding};
    use crate::rng::derive_rng;
    use std::cell::RefCell;

    fn fixed_batch(seed: u64, n: usize, d: usize, spread: f64) -> Batch {
        let mut rng = derive_rng(seed, "fixed-batch", 0);
        randn(&mut rng, n, d)
            .into_iter()
            .map(|r| r.into_iter().map(|v| v * spread).collect())
            .collect()
    }

    #[test]
    fn equal_scales_give_zero_direction_and_gradient() {
        let mut state = tiny_state(LoraMode::Output, 1.0, 1.0, &[6], 1);
        randomize_factors(&mut state, 2, 0.5);
        let x_gt = fixed_batch(3, 4, 2, 1.0);
        let eps = fixed_batch(4, 4, 2, 1.0);
        let t = vec![1000.0, 937.5, 833.3, 625.0];
        let r = dmd_generator_loss_with(&state, &x_gt, &eps, &t, None).unwrap();
        assert_eq!(r.loss, 0.0);
        assert!(r.grads.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_branch_gives_zero_direction_for_any_scales() {
        for mode in [LoraMode::Output, LoraMode::Deep] {
            // fresh init keeps A = 0, so the branch output vanishes
            let state = tiny_state(mode, 0.25, 1.0, &[6], 5);
            let x_gt = fixed_batch(6, 4, 2, 1.0);
            let eps = fixed_batch(7, 4, 2, 1.0);
            let t = vec![625.0; 4];
            let r = dmd_generator_loss_with(&state, &x_gt, &eps, &t, None).unwrap();
            assert_eq!(r.loss, 0.0, "mode {mode:?}");
            assert!(r.grads.values().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn direction_matches_hand_expansion_of_the_bracket() {
        // output placement: v_view = v_pre + alpha * z with z = A (B h),
        // so d = x0_fake - x0_real = -sigma * (alpha_s - alpha_w) * z.
        let (aw, as_) = (0.25, 1.0);
        let mut state = tiny_state(LoraMode::Output, aw, as_, &[6], 8);
        randomize_factors(&mut state, 9, 0.7);
        let x_tilde = fixed_batch(10, 3, 2, 1.2);
        let t = vec![333.0, 777.0, 90.0];
        let (x0r, x0f) = view_predictions(&state, &x_tilde, &t, None).unwrap();
        let d = dmd_direction(&x_tilde, &x0r, &x0f, false);

        let tap = state.net.n_layers() - 2;
        let (h, _) = state
            .net
            .forward_to_tap(&state.pre_params, &x_tilde, &t, None, tap)
            .unwrap();
        let a = state.aux_params.tensor("lora/layer1/a");
        let b = state.aux_params.tensor("lora/layer1/b");
        let (r, din) = (2usize, 6usize);
        for i in 0..x_tilde.len() {
            let mut mid = vec![0.0; r];
            for k in 0..r {
                for j in 0..din {
                    mid[k] += b[k * din + j] * h[i][j];
                }
            }
            for o in 0..2 {
                let mut z = 0.0;
                for k in 0..r {
                    z += a[o * r + k] * mid[k];
                }
                let want = -sigma(t[i]) * (as_ - aw) * z;
                assert!(
                    (d[i][o] - want).abs() <= 1e-12,
                    "d[{i}][{o}] = {}, want {want}",
                    d[i][o]
                );
            }
        }
    }

    #[test]
    fn normalizer_divides_by_mean_absolute_gap() {
        let x0_hat = vec![vec![0.0, 0.0]];
        let x0_real = vec![vec![1.0, 3.0]];
        let x0_fake = vec![vec![2.0, 1.0]];
        let raw = dmd_direction(&x0_hat, &x0_real, &x0_fake, false);
        assert_eq!(raw, vec![vec![1.0, -2.0]]);
        let normed = dmd_direction(&x0_hat, &x0_real, &x0_fake, true);
        assert_eq!(normed, vec![vec![0.5, -1.0]]);
    }

    #[test]
    fn dmd_gradient_matches_finite_differences() {
        let mut state = tiny_state(LoraMode::Output, 0.25, 1.0, &[6], 11);
        randomize_factors(&mut state, 12, 0.5);
        let x_gt = fixed_batch(13, 5, 2, 1.0);
        let eps = fixed_batch(14, 5, 2, 1.0);
        let t = vec![1000.0, 625.0, 937.5, 833.3, 625.0];
        let r = dmd_generator_loss_with(&state, &x_gt, &eps, &t, None).unwrap();
        let net = state.net.clone();
        let src = state.gen_source;
        let loss = |p: &crate::numerics::ParamVector| {
            let v = surrogate_value(&net, p, src, &x_gt, &eps, &t, None, &r.frozen_target).unwrap();
            (v, r.grads.clone())
        };
        let mut rng = derive_rng(15, "fd", 0);
        let err = grad_check(&loss, &state.gen_params, 200, 1e-5, &mut rng);
        assert!(err < 1e-5, "max relative error {err}");
    }

    #[test]
    fn reg_direction_is_zero_when_prediction_equals_ground_truth() {
        // at t = 0 everything collapses onto the data sample
        let mut state = tiny_state(LoraMode::Output, 0.25, 1.0, &[6], 16);
        state.pre_params.fill(0.0);
        state.gen_params.fill(0.0);
        let x_gt = fixed_batch(17, 3, 2, 1.0);
        let eps = fixed_batch(18, 3, 2, 1.0);
        let t = vec![0.0; 3];
        let r = reg_generator_loss_with(&state, &x_gt, &eps, &t, None).unwrap();
        assert_eq!(r.loss, 0.0);
        assert!(r.grads.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reg_step_decreases_prediction_gap_on_point_mass_data() {
        // zero branch, generator = pretrained copy, data at the origin
        let state = tiny_state(LoraMode::Output, 0.25, 1.0, &[8], 19);
        let n = 16;
        let x_gt = vec![vec![0.0, 0.0]; n];
        let eps = fixed_batch(20, n, 2, 1.0);
        let t = state.schedule.sample_uniform(n, &mut derive_rng(21, "t", 0));
        let gap = |params: &crate::numerics::ParamVector| -> f64 {
            let gf = generator_forward(&state.net, params, state.gen_source, &x_gt, &eps, &t, None).unwrap();
            let x_tilde = add_noise(&gf.x0_hat, &eps, &t).unwrap();
            let vf = eval_view(
                &state.net,
                &state.pre_params,
                &state.branch,
                &state.aux_params,
                state.scales.alpha_strong,
                &x_tilde,
                &t,
                None,
            )
            .unwrap();
            let x0f = denoise_prediction(&x_tilde, &vf, &t).unwrap();
            x0f.iter()
                .zip(&x_gt)
                .map(|(p, g)| p.iter().zip(g).map(|(&a, &b)| (a - b) * (a - b)).sum::<f64>())
                .sum::<f64>()
                / n as f64
        };
        let before = gap(&state.gen_params);
        let r = reg_generator_loss_with(&state, &x_gt, &eps, &t, None).unwrap();
        let mut stepped = state.gen_params.clone();
        stepped.add_scaled(&r.grads, -1e-3);
        let after = gap(&stepped);
        assert!(after < before, "gap {before} -> {after}");
    }

    #[test]
    fn reg_gradient_matches_finite_differences() {
        let mut state = tiny_state(LoraMode::Output, 0.25, 1.0, &[6], 22);
        randomize_factors(&mut state, 23, 0.4);
        let x_gt = fixed_batch(24, 5, 2, 0.8);
        let eps = fixed_batch(25, 5, 2, 1.0);
        let t = vec![937.5, 625.0, 1000.0, 833.3, 937.5];
        let r = reg_generator_loss_with(&state, &x_gt, &eps, &t, None).unwrap();
        let net = state.net.clone();
        let src = state.gen_source;
        let loss = |p: &crate::numerics::ParamVector| {
            let v = surrogate_value(&net, p, src, &x_gt, &eps, &t, None, &r.frozen_target).unwrap();
            (v, r.grads.clone())
        };
        let mut rng = derive_rng(26, "fd", 0);
        let err = grad_check(&loss, &state.gen_params, 200, 1e-5, &mut rng);
        assert!(err < 1e-5, "max relative error {err}");
    }

    #[test]
    fn diffusion_loss_is_zero_when_view_matches_target() {
        let mut state = tiny_state(LoraMode::Output, 0.25, 1.0, &[6], 27);
        state.pre_params.fill(0.0);
        state.aux_params.fill(0.0);
        let x0_hat = fixed_batch(28, 3, 2, 1.0);
        let eps_prime = x0_hat.clone(); // target = eps' - x0 = 0
        let t = vec![500.0; 3];
        let r = diffusion_branch_loss_with(&state, &x0_hat, &eps_prime, &t, None).unwrap();
        assert_eq!(r.loss, 0.0);
        assert!(r.grads.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn diffusion_loss_of_zero_view_matches_monte_carlo() {
        let mut state = tiny_state(LoraMode::Output, 0.25, 1.0, &[6], 29);
        state.pre_params.fill(0.0);
        state.aux_params.fill(0.0);
        let mut rng = derive_rng(30, "mc", 0);
        let mut total = 0.0;
        let reps = 100;
        for _ in 0..reps {
            let x0_hat = vec![vec![0.0, 0.0]; 1000];
            let eps_prime = randn(&mut rng, 1000, 2);
            let t = state.branch_sampler.sample_batch(1000, &mut rng);
            total += diffusion_branch_loss_with(&state, &x0_hat, &eps_prime, &t, None)
                .unwrap()
                .loss;
        }
        let mean = total / reps as f64;
        assert!((mean - 2.0).abs() < 0.04, "mean {mean}");
    }

    #[test]
    fn diffusion_factor_gradient_matches_finite_differences() {
        for mode in [LoraMode::Output, LoraMode::Deep] {
            let mut state = tiny_state(mode, 0.25, 1.0, &[6], 31);
            randomize_factors(&mut state, 32, 0.4);
            let x0_hat = fixed_batch(33, 4, 2, 1.0);
            let eps_prime = fixed_batch(34, 4, 2, 1.0);
            let t = vec![200.0, 400.0, 600.0, 800.0];
            let r = diffusion_branch_loss_with(&state, &x0_hat, &eps_prime, &t, None).unwrap();
            let loss = |f: &crate::numerics::ParamVector| {
                let v = branch_loss_value(&state, f, &r.x_t, &r.t, &r.target, None).unwrap();
                (v, r.grads.clone())
            };
            let mut rng = derive_rng(35, "fd", 0);
            let err = grad_check(&loss, &state.aux_params, 200, 1e-5, &mut rng);
            assert!(err < 1e-5, "mode {mode:?}: max relative error {err}");
        }
    }

    #[test]
    fn hinge_terms_match_hand_values() {
        // both hinges inactive
        let (l, df, dr) = hinge_terms(-2.0, 2.0);
        assert_eq!((l, df, dr), (0.0, 0.0, 0.0));
        // zero scores: both hinges active at value 1
        let (l, df, dr) = hinge_terms(0.0, 0.0);
        assert_eq!((l, df, dr), (2.0, 1.0, -1.0));
        // exactly at the kink: subgradient 0 by convention
        let (l, df, _) = hinge_terms(-1.0, 0.5);
        assert_eq!(l, 0.5);
        assert_eq!(df, 0.0);
        let (_, _, dr) = hinge_terms(0.5, 1.0);
        assert_eq!(dr, 0.0);
        // just inside the active region
        let (_, df, dr) = hinge_terms(-1.0 + 1e-9, 1.0 - 1e-9);
        assert_eq!(df, 1.0);
        assert_eq!(dr, -1.0);
    }

    #[test]
    fn zero_head_scores_give_hinge_two_and_gen_zero() {
        let mut state = tiny_state(LoraMode::Output, 0.25, 1.0, &[6], 36);
        for d in state.aux_params.layout().tensors().to_vec() {
            if d.name.starts_with("disc/") {
                for v in state.aux_params.tensor_mut(&d.name) {
                    *v = 0.0;
                }
            }
        }
        let x_gt = fixed_batch(37, 4, 2, 1.0);
        let eps = fixed_batch(38, 4, 2, 1.0);
        let t = vec![625.0; 4];
        let mut rng = derive_rng(39, "adv", 0);
        let r = adversarial_losses(&state, &x_gt, &eps, &t, None, &mut rng).unwrap();
        assert_eq!(r.l_dis, 2.0);
        assert_eq!(r.l_gen, 0.0);
    }

    #[test]
    fn adversarial_gradients_match_finite_differences() {
        let state = tiny_state(LoraMode::Output, 0.25, 1.0, &[6], 40);
        let x_gt = fixed_batch(41, 4, 2, 1.0);
        let eps = fixed_batch(42, 4, 2, 1.0);
        let t = vec![937.5, 625.0, 1000.0, 833.3];
        let cell = RefCell::new(state);

        // generator side: smooth everywhere
        let gen_loss = |p: &crate::numerics::ParamVector| {
            let mut st = cell.borrow_mut();
            st.gen_params = p.clone();
            let mut rng = derive_rng(43, "adv-fd", 0);
            let r = adversarial_losses(&st, &x_gt, &eps, &t, None, &mut rng).unwrap();
            (r.l_gen, r.gen_grads)
        };
        let base_gen = cell.borrow().gen_params.clone();
        let mut rng = derive_rng(44, "fd", 0);
        let err = grad_check(&gen_loss, &base_gen, 200, 1e-5, &mut rng);
        assert!(err < 1e-5, "generator side: max relative error {err}");

        // discriminator side: piecewise linear, checked away from kinks
        let dis_loss = |p: &crate::numerics::ParamVector| {
            let mut st = cell.borrow_mut();
            st.aux_params = p.clone();
            let mut rng = derive_rng(43, "adv-fd", 0);
            let r = adversarial_losses(&st, &x_gt, &eps, &t, None, &mut rng).unwrap();
            (r.l_dis, r.dis_grads)
        };
        let base_aux = cell.borrow().aux_params.clone();
        let err = grad_check(&dis_loss, &base_aux, 200, 1e-5, &mut rng);
        assert!(err < 1e-5, "discriminator side: max relative error {err}");
    }

    #[test]
    fn generator_losses_never_touch_branch_or_backbone() {
        let mut state = tiny_state(LoraMode::Output, 0.25, 1.0, &[6], 45);
        randomize_factors(&mut state, 46, 0.5);
        let aux_before = checksum(&state.aux_params);
        let pre_before = checksum(&state.pre_params);
        let x_gt = fixed_batch(47, 4, 2, 1.0);
        let mut rng = derive_rng(48, "sg", 0);
        let r = dmd_generator_loss(&state, &x_gt, None, &mut rng).unwrap();
        crate::numerics::adam_step(&mut state.adam_gen, &mut state.gen_params, &r.grads).unwrap();
        assert_eq!(aux_before, checksum(&state.aux_params));
        assert_eq!(pre_before, checksum(&state.pre_params));

        // and the branch loss never touches the generator
        let gen_before = checksum(&state.gen_params);
        let r = diffusion_branch_loss(&state, &x_gt, None, &mut rng).unwrap();
        crate::numerics::adam_step(&mut state.adam_aux, &mut state.aux_params, &r.grads).unwrap();
        assert_eq!(gen_before, checksum(&state.gen_params));
    }

    #[test]
    fn timestep_embedding_is_smooth_input_for_views() {
        // embedding sanity: frequencies distinct, values bounded
        let e = timestep_embedding(512.0, 8);
        assert_eq!(e.len(), 8);
        assert!(e.iter().all(|v| v.abs() <= 1.0));
    }
}
