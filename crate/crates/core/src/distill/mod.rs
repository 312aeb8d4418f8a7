//! Distribution-matching distillation with weak-to-strong score views.
//!
//! The generator trains against the gradient of a reverse KL estimated
//! from two views of one frozen backbone plus one shared low-rank branch:
//! the weak view (`alpha_weak`) acts as the real score and the strong view
//! (`alpha_strong`) as the fake score. Setting `alpha_weak = 0` with the
//! regularizer off reproduces vanilla DMD through the very same code path;
//! the weak-to-strong behaviour is a parameterization, not a fork.
//!
//! One macro-iteration runs the generator phase once (DMD + ground-truth
//! regularization + adversarial generator term, one Adam step on the
//! generator) and the branch/discriminator phase `update_ratio` times
//! (strong-view diffusion regression + hinge discriminator, one joint Adam
//! step each). The 1-step curriculum adds an online noise-data pair
//! regression whose weight ramps from 1 to 0.25 while the DMD weight ramps
//! from 0.25 to 1.

mod losses;
mod prop1;
mod train;

pub use losses::{
    adversarial_losses, branch_loss_value, diffusion_branch_loss, diffusion_branch_loss_with,
    disc_scores, dmd_direction, dmd_generator_loss, dmd_generator_loss_with, generator_forward,
    hinge_terms, reg_generator_loss, reg_generator_loss_with, surrogate_value, AdvLossResult,
    BranchLossResult, DiscForward, GenForward, GenLossResult,
};
pub use prop1::{verify_prop1, Prop1Report, PROP1_ALPHA_STRONG_GRID, PROP1_ALPHA_WEAK_GRID};
pub use train::{one_step_curriculum, train_step, PairSource, StepTelemetry};

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::lora::{LoraBranch, LoraMode, ViewScales};
use crate::numerics::{checksum, AdamState, LayoutBuilder, MlpNet, MlpStack, ParamVector};
use crate::scheduler::{TimestepSampler, TimestepSchedule};

/// Loss term weights. `w_reg` must be zero exactly when the regularizer is
/// disabled, so a disabled term can never leak into the objective.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub w_dmd: f64,
    pub w_reg: f64,
    pub w_gen: f64,
    pub w_distill: f64,
    pub reg_enabled: bool,
    pub normalizer_enabled: bool,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("loss.w_dmd", self.w_dmd),
            ("loss.w_reg", self.w_reg),
            ("loss.w_gen", self.w_gen),
            ("loss.w_distill", self.w_distill),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(name, format!("must be a finite nonnegative float, got {v}")));
            }
        }
        if !self.reg_enabled && self.w_reg != 0.0 {
            return Err(Error::config(
                "loss.w_reg",
                "must be exactly 0 when the regularizer is disabled",
            ));
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_dmd: 1.0,
            w_reg: 1.0,
            w_gen: 0.01,
            w_distill: 0.0,
            reg_enabled: true,
            normalizer_enabled: false,
        }
    }
}

/// Linear ramp of `(w_distill, w_dmd)` for 1-step training. The endpoints
/// are fixed: distillation weight 1 -> 0.25 while the DMD weight rises
/// 0.25 -> 1.
#[derive(Debug, Clone, PartialEq)]
pub struct CurriculumSchedule {
    pub ramp_iters: u64,
}

impl CurriculumSchedule {
    pub const START: (f64, f64) = (1.0, 0.25);
    pub const END: (f64, f64) = (0.25, 1.0);

    pub fn new(ramp_iters: u64) -> Self {
        Self { ramp_iters }
    }

    /// `(w_distill, w_dmd)` at iteration `iter` (clamped past the ramp).
    pub fn weights_at(&self, iter: u64) -> (f64, f64) {
        let f = if self.ramp_iters == 0 {
            1.0
        } else {
            (iter as f64 / self.ramp_iters as f64).min(1.0)
        };
        (
            Self::START.0 + (Self::END.0 - Self::START.0) * f,
            Self::START.1 + (Self::END.1 - Self::START.1) * f,
        )
    }
}

/// Discriminator: a fresh small MLP head reading a hidden activation of
/// the frozen pretrained backbone. The head parameters live under the
/// `disc/` prefix and share nothing with backbone, branch or generator.
#[derive(Debug, Clone)]
pub struct DiscriminatorHead {
    pub tap: usize,
    pub stack: MlpStack,
}

impl DiscriminatorHead {
    pub fn new(net: &MlpNet, tap: usize, hidden: usize) -> Result<Self> {
        if tap + 1 >= net.n_layers() {
            return Err(Error::config(
                "disc.tap",
                format!("tap {tap} is not a hidden layer of a {}-layer net", net.n_layers()),
            ));
        }
        let w = net.hidden_width(tap);
        let widths = if hidden > 0 { vec![w, hidden, 1] } else { vec![w, 1] };
        let stack = MlpStack::new(widths, net.stack().activation, "disc/")?;
        Ok(Self { tap, stack })
    }
}

/// Where the generator phase gets the sample it denoises.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GenSource {
    /// Apply the generator to noised ground truth (the training-loop
    /// pattern; default).
    NoisedGroundTruth,
    /// Apply the generator to pure noise (ablation flag).
    PureNoise,
}

/// Where the distribution-matching step renoises the generator output
/// before querying the score views. The training loop's literal pattern
/// reuses the synthesis noise and timestep; the decoupled variant draws a
/// fresh pair so the views can be queried at sharper noise levels than
/// the sampling schedule reaches (the "DMD loss at t" knob).
#[derive(Debug, Clone, PartialEq)]
pub enum RenoiseT {
    /// Same noise and timestep as the synthesis step.
    SharedSchedule,
    /// Fresh noise at an independently sampled timestep.
    Fresh(TimestepSampler),
}

/// Everything a distillation run owns: the trainable generator (an exact
/// copy of the frozen backbone at construction), the frozen backbone, the
/// branch + discriminator parameters with their joint optimizer, and the
/// training knobs.
#[derive(Debug)]
pub struct DistillState {
    pub net: MlpNet,
    pub gen_params: ParamVector,
    pub pre_params: ParamVector,
    pub aux_params: ParamVector,
    pub branch: LoraBranch,
    pub scales: ViewScales,
    pub disc: DiscriminatorHead,
    pub adam_gen: AdamState,
    pub adam_aux: AdamState,
    pub weights: LossWeights,
    pub schedule: TimestepSchedule,
    pub branch_sampler: TimestepSampler,
    pub update_ratio: usize,
    pub gen_source: GenSource,
    pub renoise_t: RenoiseT,
    pub disc_noised: bool,
    pub eta_factor: f64,
    pub eta_window: usize,
    pub iteration: u64,
    diff_history: VecDeque<f64>,
    pre_checksum: u64,
}

/// Construction inputs for [`DistillState`].
pub struct DistillSetup {
    pub net: MlpNet,
    pub pre_params: ParamVector,
    pub scales: ViewScales,
    pub lora_mode: LoraMode,
    pub lora_rank: usize,
    pub disc_tap: usize,
    pub disc_hidden: usize,
    pub weights: LossWeights,
    pub schedule: TimestepSchedule,
    pub lr_generator: f64,
    pub lr_branch: f64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub update_ratio: usize,
    pub branch_t: TimestepSampler,
    pub gen_source: GenSource,
    pub renoise_t: RenoiseT,
    pub disc_noised: bool,
    pub eta_factor: f64,
    pub eta_window: usize,
    pub seed: u64,
}

impl DistillState {
    pub fn new(setup: DistillSetup) -> Result<Self> {
        setup.weights.validate()?;
        if setup.update_ratio == 0 {
            return Err(Error::config("train.update_ratio", "must be at least 1"));
        }
        let branch = LoraBranch::new(&setup.net, setup.lora_mode, setup.lora_rank)?;
        let disc = DiscriminatorHead::new(&setup.net, setup.disc_tap, setup.disc_hidden)?;

        let mut aux_layout = LayoutBuilder::new();
        branch.append_layout(&mut aux_layout);
        disc.stack.append_layout(&mut aux_layout);
        let aux_layout = aux_layout.build();
        // the head must share nothing with the backbone: disjoint name spaces
        debug_assert!(aux_layout
            .tensors()
            .iter()
            .all(|d| setup.net.layout().desc(&d.name).is_none()));
        let mut aux_params = ParamVector::zeros(aux_layout);
        branch.init_factors(&mut aux_params, crate::rng::derive_seed(setup.seed, "lora", 0));
        disc.stack
            .init_into(&mut aux_params, crate::rng::derive_seed(setup.seed, "disc", 0));

        let gen_params = setup.pre_params.clone();
        let pre_checksum = checksum(&setup.pre_params);
        let (b1, b2) = setup.adam_betas;
        Ok(Self {
            adam_gen: AdamState::with_hyper(gen_params.len(), setup.lr_generator, b1, b2, setup.adam_eps),
            adam_aux: AdamState::with_hyper(aux_params.len(), setup.lr_branch, b1, b2, setup.adam_eps),
            net: setup.net,
            gen_params,
            pre_params: setup.pre_params,
            aux_params,
            branch,
            scales: setup.scales,
            disc,
            weights: setup.weights,
            schedule: setup.schedule,
            branch_sampler: setup.branch_t,
            update_ratio: setup.update_ratio,
            gen_source: setup.gen_source,
            renoise_t: setup.renoise_t,
            disc_noised: setup.disc_noised,
            eta_factor: setup.eta_factor,
            eta_window: setup.eta_window,
            iteration: 0,
            diff_history: VecDeque::new(),
            pre_checksum,
        })
    }

    /// Checksum of the frozen backbone captured at construction.
    pub fn pre_checksum(&self) -> u64 {
        self.pre_checksum
    }

    pub fn record_diffusion_loss(&mut self, l: f64) {
        self.diff_history.push_back(l);
        while self.diff_history.len() > self.eta_window {
            self.diff_history.pop_front();
        }
    }

    /// Ground-truth supervision gate: the constraint "the fake view is
    /// well fitted" is enforced procedurally. The regularizer applies only
    /// while the latest diffusion loss stays within `eta_factor` times the
    /// trailing-window median; with no history yet, it applies.
    pub fn reg_active(&self) -> bool {
        if !self.weights.reg_enabled {
            return false;
        }
        if self.diff_history.len() < 5 {
            return true;
        }
        let mut sorted: Vec<f64> = self.diff_history.iter().copied().collect();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = sorted[sorted.len() / 2];
        let latest = *self.diff_history.back().unwrap();
        latest <= self.eta_factor * median
    }
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_weights_reject_enabled_mismatch() {
        let mut w = LossWeights::default();
        w.reg_enabled = false;
        assert!(w.validate().is_err());
        w.w_reg = 0.0;
        assert!(w.validate().is_ok());
        w.w_dmd = f64::NAN;
        assert!(w.validate().is_err());
    }

    #[test]
    fn curriculum_endpoints_and_midpoint_are_exact() {
        let c = CurriculumSchedule::new(1000);
        assert_eq!(c.weights_at(0), (1.0, 0.25));
        assert_eq!(c.weights_at(1000), (0.25, 1.0));
        assert_eq!(c.weights_at(5000), (0.25, 1.0));
        let (wd, wm) = c.weights_at(500);
        assert!((wd - 0.625).abs() < 1e-15 && (wm - 0.625).abs() < 1e-15);
    }

    #[test]
    fn curriculum_is_monotone() {
        let c = CurriculumSchedule::new(777);
        let mut prev = c.weights_at(0);
        for i in 1..=777 {
            let cur = c.weights_at(i);
            assert!(cur.0 <= prev.0 && cur.1 >= prev.1);
            prev = cur;
        }
    }
}
