//! The alternating training loop.

use rand::Rng;

use super::losses::{
    disc_backward_head, disc_backward_input, disc_scores, dmd_direction, generator_forward,
    hinge_terms, randn, view_predictions,
};
use super::{CurriculumSchedule, DistillState, RenoiseT};
use crate::data::{sample_batch, Dataset};
use crate::error::{Error, Result};
use crate::numerics::{adam_step, checksum, ParamVector};
use crate::scheduler::{add_noise, denoise_prediction, few_step_sample_with, sigma, TimestepSchedule};
use crate::Batch;

/// Per-iteration loss and gradient-norm telemetry. Branch-phase values are
/// means over the `update_ratio` repeats of the macro-iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepTelemetry {
    pub iter: u64,
    pub l_dmd: f64,
    pub l_reg: f64,
    pub l_diff: f64,
    pub l_dis: f64,
    pub l_gen: f64,
    pub l_pair: f64,
    pub grad_norm_phi: f64,
    pub grad_norm_branch: f64,
}

/// A frozen few-step generator used to synthesize noise-data pairs online
/// during 1-step training.
#[derive(Debug)]
pub struct PairSource {
    pub params: ParamVector,
    pub schedule: TimestepSchedule,
}

fn nonfinite(iteration: u64, loss: &str, err: Error) -> Error {
    match err {
        Error::Domain(detail) => Error::NonFinite {
            iteration,
            loss: loss.into(),
            detail,
        },
        other => other,
    }
}

/// One macro-iteration: the generator phase once (weighted DMD +
/// ground-truth regularization + adversarial generator term + optional
/// pair regression, one Adam step on the generator), then the
/// branch/discriminator phase `update_ratio` times (diffusion regression
/// for the branch + hinge loss for the head, one joint Adam step each).
pub fn train_step(
    state: &mut DistillState,
    dataset: &Dataset,
    batch: usize,
    rng: &mut impl Rng,
    curriculum: Option<(&CurriculumSchedule, &PairSource)>,
) -> Result<StepTelemetry> {
    let iter = state.iteration;
    let d = state.net.data_dim();
    let b = batch;
    let bn = b as f64;

    // ---- generator phase ----
    let (x_gt, cond) = sample_batch(dataset, b, rng);
    let cond = cond.as_ref();
    let eps = randn(rng, b, d);
    let t = state.schedule.sample_uniform(b, rng);
    let gf = generator_forward(&state.net, &state.gen_params, state.gen_source, &x_gt, &eps, &t, cond)?;
    let reg_on = state.reg_active();
    // the ground-truth pull always acts at the tied renoise point (same
    // noise and timestep as the synthesis step)
    let x_tilde = add_noise(&gf.x0_hat, &eps, &t)?;
    // the distribution-matching views may be queried at the tied point or
    // at a fresh, typically sharper, noise level
    let (x0r, x0f_dmd, x0f_tied) = match &state.renoise_t {
        RenoiseT::SharedSchedule => {
            let (x0r, x0f) = view_predictions(state, &x_tilde, &t, cond)?;
            (x0r, x0f.clone(), x0f)
        }
        RenoiseT::Fresh(sampler) => {
            let t_r = sampler.sample_batch(b, rng);
            let eps_r = randn(rng, b, d);
            let x_tilde_r = add_noise(&gf.x0_hat, &eps_r, &t_r)?;
            let (x0r, x0f) = view_predictions(state, &x_tilde_r, &t_r, cond)?;
            let x0f_tied = if reg_on {
                let vf = crate::lora::eval_view(
                    &state.net,
                    &state.pre_params,
                    &state.branch,
                    &state.aux_params,
                    state.scales.alpha_strong,
                    &x_tilde,
                    &t,
                    cond,
                )?;
                denoise_prediction(&x_tilde, &vf, &t)?
            } else {
                x0f.clone()
            };
            (x0r, x0f, x0f_tied)
        }
    };
    let d_dmd = dmd_direction(&gf.x0_hat, &x0r, &x0f_dmd, state.weights.normalizer_enabled);

    let (w_distill, w_dmd) = match curriculum {
        Some((c, _)) => c.weights_at(iter),
        None => (state.weights.w_distill, state.weights.w_dmd),
    };

    let mut l_dmd = 0.0;
    let mut l_reg = 0.0;
    let mut upstream_x0: Batch = vec![vec![0.0; d]; b];
    for i in 0..b {
        for j in 0..d {
            let dv = d_dmd[i][j];
            l_dmd += 0.5 * dv * dv / bn;
            upstream_x0[i][j] += w_dmd * dv / bn;
            if reg_on {
                let rv = x0f_tied[i][j] - x_gt[i][j];
                l_reg += 0.5 * rv * rv / bn;
                upstream_x0[i][j] += state.weights.w_reg * rv / bn;
            }
        }
    }
    if !(l_dmd.is_finite() && l_reg.is_finite()) {
        return Err(Error::NonFinite {
            iteration: iter,
            loss: if l_dmd.is_finite() { "l_reg" } else { "l_dmd" }.into(),
            detail: format!("l_dmd={l_dmd}, l_reg={l_reg}"),
        });
    }

    let mut l_gen = 0.0;
    if state.weights.w_gen > 0.0 {
        let td = state.branch_sampler.sample_batch(b, rng);
        let eg = randn(rng, b, d);
        let noised = state.disc_noised.then_some((&eg, td.as_slice()));
        let fwd = disc_scores(
            &state.net,
            &state.pre_params,
            &state.disc,
            &state.aux_params,
            &gf.x0_hat,
            noised.map(|(e, tt)| (e as &Batch, tt)),
            cond,
        )?;
        l_gen = -fwd.scores.iter().sum::<f64>() / bn;
        let dscore = vec![-1.0 / bn; b];
        let dx0 = disc_backward_input(
            &state.net,
            &state.pre_params,
            &state.disc,
            &state.aux_params,
            &fwd,
            &dscore,
        )?;
        for i in 0..b {
            for j in 0..d {
                upstream_x0[i][j] += state.weights.w_gen * dx0[i][j];
            }
        }
    }

    // chain d(x0_hat)/d(net output) = -sigma_t, backprop once
    let u_net: Batch = upstream_x0
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let s = sigma(gf.t[i]);
            row.iter().map(|&v| -s * v).collect()
        })
        .collect();
    let mut grads_phi = ParamVector::zeros(state.net.layout());
    state
        .net
        .backward(&state.gen_params, &gf.cache, &u_net, Some(&mut grads_phi), false)?;

    // online noise-data pair regression (1-step curriculum)
    let mut l_pair = 0.0;
    if let Some((_, pairs)) = curriculum {
        let pair_cond = if dataset.cond_dim() > 0 {
            sample_batch(dataset, b, rng).1
        } else {
            None
        };
        let pc = pair_cond.as_ref();
        let (eps_p, x0_p) = few_step_sample_with(
            &mut |x: &Batch, tt: f64| state.net.forward(&pairs.params, x, &vec![tt; x.len()], pc),
            &pairs.schedule,
            d,
            b,
            rng,
        )?;
        let t_one = vec![1000.0; b];
        let (v, cache_p) = state.net.forward_cached(&state.gen_params, &eps_p, &t_one, pc)?;
        let pred = denoise_prediction(&eps_p, &v, &t_one)?;
        let mut u_pair: Batch = Vec::with_capacity(b);
        for (prow, trow) in pred.iter().zip(&x0_p) {
            let mut urow = Vec::with_capacity(d);
            for (&a, &c) in prow.iter().zip(trow) {
                let r = a - c;
                l_pair += r * r / bn;
                // chain through x0 = eps - 1.0 * v
                urow.push(-w_distill * 2.0 * r / bn);
            }
            u_pair.push(urow);
        }
        state
            .net
            .backward(&state.gen_params, &cache_p, &u_pair, Some(&mut grads_phi), false)?;
    }

    let grad_norm_phi = grads_phi.l2_norm();
    adam_step(&mut state.adam_gen, &mut state.gen_params, &grads_phi).map_err(|e| {
        nonfinite(
            iter,
            "generator update",
            match e {
                Error::Domain(dd) => Error::Domain(format!("{dd}; grad_norm_phi={grad_norm_phi}")),
                other => other,
            },
        )
    })?;

    // ---- branch / discriminator phase ----
    let mut l_diff_sum = 0.0;
    let mut l_dis_sum = 0.0;
    let mut gn_branch_sum = 0.0;
    for _ in 0..state.update_ratio {
        let (xb, cb) = sample_batch(dataset, b, rng);
        let cb = cb.as_ref();
        let tb = state.branch_sampler.sample_batch(b, rng);
        let eb = randn(rng, b, d);
        let gfb = generator_forward(&state.net, &state.gen_params, state.gen_source, &xb, &eb, &tb, cb)?;
        let eps_prime = randn(rng, b, d);
        let diff = super::losses::diffusion_branch_loss_with(state, &gfb.x0_hat, &eps_prime, &tb, cb)?;

        let td = state.branch_sampler.sample_batch(b, rng);
        let ef = randn(rng, b, d);
        let er = randn(rng, b, d);
        let noised_f = state.disc_noised.then_some((&ef, td.as_slice()));
        let noised_r = state.disc_noised.then_some((&er, td.as_slice()));
        let fake = disc_scores(
            &state.net,
            &state.pre_params,
            &state.disc,
            &state.aux_params,
            &gfb.x0_hat,
            noised_f.map(|(e, tt)| (e as &Batch, tt)),
            cb,
        )?;
        let real = disc_scores(
            &state.net,
            &state.pre_params,
            &state.disc,
            &state.aux_params,
            &xb,
            noised_r.map(|(e, tt)| (e as &Batch, tt)),
            cb,
        )?;
        let mut l_dis = 0.0;
        let mut df = vec![0.0; b];
        let mut dr = vec![0.0; b];
        for i in 0..b {
            let (l, gfv, grv) = hinge_terms(fake.scores[i], real.scores[i]);
            l_dis += l / bn;
            df[i] = gfv / bn;
            dr[i] = grv / bn;
        }
        let mut grads_aux = diff.grads;
        disc_backward_head(&state.disc, &state.aux_params, &fake, &df, &mut grads_aux)?;
        disc_backward_head(&state.disc, &state.aux_params, &real, &dr, &mut grads_aux)?;
        let gn = grads_aux.l2_norm();
        adam_step(&mut state.adam_aux, &mut state.aux_params, &grads_aux).map_err(|e| {
            nonfinite(
                iter,
                "branch update",
                match e {
                    Error::Domain(dd) => Error::Domain(format!("{dd}; grad_norm_branch={gn}")),
                    other => other,
                },
            )
        })?;
        state.record_diffusion_loss(diff.loss);
        l_diff_sum += diff.loss;
        l_dis_sum += l_dis;
        gn_branch_sum += gn;
    }

    debug_assert_eq!(
        checksum(&state.pre_params),
        state.pre_checksum(),
        "frozen backbone changed during train_step"
    );

    state.iteration += 1;
    let ratio = state.update_ratio as f64;
    Ok(StepTelemetry {
        iter,
        l_dmd,
        l_reg,
        l_diff: l_diff_sum / ratio,
        l_dis: l_dis_sum / ratio,
        l_gen,
        l_pair,
        grad_norm_phi,
        grad_norm_branch: gn_branch_sum / ratio,
    })
}

/// 1-step training: every iteration draws fresh noise, runs the frozen
/// few-step generator to pair it with a sample, and adds the pair
/// regression (weight ramping 1 -> 0.25) to the usual objective while the
/// DMD weight ramps 0.25 -> 1. `on_iter` sees the state after each
/// macro-iteration (for snapshots, telemetry and checkpoints).
pub fn one_step_curriculum(
    state: &mut DistillState,
    pair_source: &PairSource,
    curriculum: &CurriculumSchedule,
    dataset: &Dataset,
    batch: usize,
    iters: u64,
    rng: &mut impl Rng,
    mut on_iter: impl FnMut(&mut DistillState, StepTelemetry) -> Result<()>,
) -> Result<()> {
    for _ in 0..iters {
        let tel = train_step(state, dataset, batch, rng, Some((curriculum, pair_source)))?;
        on_iter(state, tel)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ConditionSpec, DatasetKind};
    use crate::distill::testutil::tiny_state;
    use crate::distill::{CurriculumSchedule, LossWeights};
    use crate::lora::LoraMode;
    use crate::rng::derive_rng;

    fn mixture(seed: u64) -> Dataset {
        Dataset::new(DatasetKind::GaussianMixture8, 512, seed, ConditionSpec::Unconditional).unwrap()
    }

    #[test]
    fn ratio_accounting_is_five_to_one() {
        let mut state = tiny_state(LoraMode::Output, 0.25, 1.0, &[8], 50);
        let ds = mixture(1);
        let mut rng = derive_rng(51, "train", 0);
        for _ in 0..3 {
            train_step(&mut state, &ds, 8, &mut rng, None).unwrap();
        }
        assert_eq!(state.adam_gen.steps_taken(), 3);
        assert_eq!(state.adam_aux.steps_taken(), 15);
        assert_eq!(state.iteration, 3);
    }

    #[test]
    fn zero_weights_leave_generator_bit_identical() {
        let mut state = tiny_state(LoraMode::Output, 0.25, 1.0, &[8], 52);
        state.weights = LossWeights {
            w_dmd: 0.0,
            w_reg: 0.0,
            w_gen: 0.0,
            w_distill: 0.0,
            reg_enabled: false,
            normalizer_enabled: false,
        };
        let before: Vec<u64> = state.gen_params.values().iter().map(|v| v.to_bits()).collect();
        let ds = mixture(2);
        let mut rng = derive_rng(53, "train", 0);
        train_step(&mut state, &ds, 8, &mut rng, None).unwrap();
        let after: Vec<u64> = state.gen_params.values().iter().map(|v| v.to_bits()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn backbone_checksum_is_stable_across_steps() {
        let mut state = tiny_state(LoraMode::Deep, 0.25, 1.0, &[8], 54);
        let ds = mixture(3);
        let mut rng = derive_rng(55, "train", 0);
        for _ in 0..5 {
            train_step(&mut state, &ds, 8, &mut rng, None).unwrap();
            assert_eq!(checksum(&state.pre_params), state.pre_checksum());
        }
    }

    #[test]
    fn identical_seeds_give_bit_identical_runs() {
        let run = || {
            let mut state = tiny_state(LoraMode::Deep, 0.25, 1.0, &[8], 56);
            let ds = mixture(4);
            let mut rng = derive_rng(57, "train", 0);
            let mut tels = Vec::new();
            for _ in 0..10 {
                tels.push(train_step(&mut state, &ds, 8, &mut rng, None).unwrap());
            }
            let bits: Vec<u64> = state.gen_params.values().iter().map(|v| v.to_bits()).collect();
            (tels, bits)
        };
        let (ta, ba) = run();
        let (tb, bb) = run();
        assert_eq!(ta, tb);
        assert_eq!(ba, bb);
    }

    #[test]
    fn reg_gate_tracks_diffusion_history() {
        let mut state = tiny_state(LoraMode::Output, 0.25, 1.0, &[8], 58);
        assert!(state.reg_active(), "no history yet: gate open");
        for _ in 0..10 {
            state.record_diffusion_loss(1.0);
        }
        assert!(state.reg_active());
        state.record_diffusion_loss(10.0); // spike above 2x median
        assert!(!state.reg_active());
        state.record_diffusion_loss(1.0);
        assert!(state.reg_active());
        state.weights.reg_enabled = false;
        state.weights.w_reg = 0.0;
        assert!(!state.reg_active());
    }

    #[test]
    fn one_step_curriculum_regresses_on_pairs() {
        let mut state = tiny_state(LoraMode::Output, 0.25, 1.0, &[8], 59);
        state.schedule = TimestepSchedule::new(vec![1000.0]).unwrap();
        let pair_source = PairSource {
            params: state.pre_params.clone(),
            schedule: TimestepSchedule::four_step_default(),
        };
        let curriculum = CurriculumSchedule::new(9);
        let ds = mixture(5);
        let mut rng = derive_rng(60, "train", 0);
        let mut pair_losses = Vec::new();
        one_step_curriculum(&mut state, &pair_source, &curriculum, &ds, 8, 3, &mut rng, |_, tel| {
            pair_losses.push(tel.l_pair);
            Ok(())
        })
        .unwrap();
        assert_eq!(pair_losses.len(), 3);
        assert!(pair_losses.iter().all(|l| l.is_finite() && *l > 0.0));
        assert_eq!(state.adam_gen.steps_taken(), 3);
    }

    #[test]
    fn telemetry_values_stay_finite_on_moving_dot() {
        use crate::distill::{DistillSetup, DistillState, GenSource};
        use crate::lora::ViewScales;
        use crate::numerics::{Activation, MlpNet};
        let kind = DatasetKind::moving_dot_default();
        let ds = Dataset::new(kind, 256, 6, ConditionSpec::FirstFrame).unwrap();
        let net = MlpNet::new(ds.dim(), &[32], 8, ds.cond_dim(), Activation::Silu).unwrap();
        let pre_params = net.init_params(61);
        let mut state = DistillState::new(DistillSetup {
            net,
            pre_params,
            scales: ViewScales::default(),
            lora_mode: LoraMode::Deep,
            lora_rank: 4,
            disc_tap: 0,
            disc_hidden: 16,
            weights: LossWeights::default(),
            schedule: TimestepSchedule::four_step_default(),
            lr_generator: 1e-4,
            lr_branch: 4e-4,
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-8,
            update_ratio: 5,
            branch_t: crate::scheduler::TimestepSampler::LogitNormal { mean: 0.0, std: 1.0 },
            gen_source: GenSource::NoisedGroundTruth,
            renoise_t: crate::distill::RenoiseT::SharedSchedule,
            disc_noised: true,
            eta_factor: 2.0,
            eta_window: 100,
            seed: 62,
        })
        .unwrap();
        let mut rng = derive_rng(63, "train", 0);
        for _ in 0..2 {
            let tel = train_step(&mut state, &ds, 4, &mut rng, None).unwrap();
            for v in [tel.l_dmd, tel.l_reg, tel.l_diff, tel.l_dis, tel.l_gen, tel.grad_norm_phi] {
                assert!(v.is_finite());
            }
        }
    }
}
