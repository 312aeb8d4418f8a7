//! Run configuration: a flat `key = value` text format with dotted section
//! names, diff-friendly for ablation grids.
//!
//! Lines are `key = value`; `#` starts a comment; blank lines are ignored.
//! Lists are comma-separated. Every key has a default, and
//! `parse(serialize(cfg)) == cfg` holds for any parsed config. The
//! `distill-vanilla-dmd` mode is not a separate code path: parsing it
//! forces `alpha_weak = 0` and disables the regularizer, then the run
//! takes the ordinary weak-to-strong path.

use std::collections::HashSet;
use std::fmt::Write as _;

use crate::data::{ConditionSpec, Dataset, DatasetKind};
use crate::distill::{GenSource, LossWeights};
use crate::error::{Error, Result};
use crate::eval::SampleMethod;
use crate::lora::{LoraMode, ViewScales};
use crate::numerics::Activation;
use crate::scheduler::TimestepSchedule;

/// Config-level choice of the views' renoise point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RenoiseKind {
    Schedule,
    LogitNormal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    Pretrain,
    DistillW2svd,
    DistillVanillaDmd,
    Train1Step,
    Eval,
    VerifyProp1,
    Gradcheck,
}

impl RunMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            RunMode::Pretrain => "pretrain",
            RunMode::DistillW2svd => "distill-w2svd",
            RunMode::DistillVanillaDmd => "distill-vanilla-dmd",
            RunMode::Train1Step => "train-1step",
            RunMode::Eval => "eval",
            RunMode::VerifyProp1 => "verify-prop1",
            RunMode::Gradcheck => "gradcheck",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "pretrain" => RunMode::Pretrain,
            "distill-w2svd" => RunMode::DistillW2svd,
            "distill-vanilla-dmd" => RunMode::DistillVanillaDmd,
            "train-1step" => RunMode::Train1Step,
            "eval" => RunMode::Eval,
            "verify-prop1" => RunMode::VerifyProp1,
            "gradcheck" => RunMode::Gradcheck,
            other => {
                return Err(Error::config(
                    "mode",
                    format!("unknown mode {other:?} (expected pretrain | distill-w2svd | distill-vanilla-dmd | train-1step | eval | verify-prop1 | gradcheck)"),
                ))
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub mode: RunMode,
    pub seed: u64,
    pub out_dir: String,

    pub data_kind: DatasetKind,
    pub data_size: usize,
    pub data_condition: ConditionSpec,

    pub net_hidden: Vec<usize>,
    pub net_activation: Activation,
    pub net_time_embed_dim: usize,

    pub lora_mode: LoraMode,
    pub lora_rank: usize,
    pub alpha_weak: f64,
    pub alpha_strong: f64,

    pub schedule_student: Vec<f64>,
    pub schedule_teacher: Vec<f64>,

    pub lr_pretrain: f64,
    /// Cosine-decay floor for pretraining, as a fraction of `lr_pretrain`
    /// (1 = constant learning rate).
    pub lr_pretrain_floor: f64,
    pub lr_generator: f64,
    /// Cosine-decay floor for the distillation generator, as a fraction
    /// of `lr_generator` (1 = constant).
    pub lr_generator_floor: f64,
    pub lr_branch: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,

    pub w_dmd: f64,
    pub w_reg: f64,
    pub w_gen: f64,
    pub w_distill: f64,
    pub reg_enabled: bool,
    pub normalizer_enabled: bool,

    pub gen_source: GenSource,
    /// Renoise point for the score views: tied to the synthesis draw
    /// (`schedule`) or a fresh logit-normal draw (`logit-normal`).
    pub dmd_renoise: RenoiseKind,
    pub dmd_renoise_mean: f64,
    pub dmd_renoise_std: f64,
    pub disc_tap: usize,
    pub disc_hidden: usize,
    pub disc_noised: bool,

    pub batch_size: usize,
    pub update_ratio: usize,
    /// Logit-normal parameters for branch/discriminator timestep draws.
    pub branch_t_mean: f64,
    pub branch_t_std: f64,
    pub eta_factor: f64,
    pub eta_window: usize,

    pub pretrain_iters: u64,
    pub distill_iters: u64,
    pub distill_teacher_checkpoint: String,
    pub onestep_iters: u64,
    pub onestep_ramp: u64,
    pub onestep_generator_checkpoint: String,

    pub snapshot_interval: u64,
    pub snapshot_samples: usize,
    pub checkpoint_interval: u64,

    pub collapse_threshold: f64,
    pub collapse_patience: usize,
    pub collapse_fatal: bool,

    pub eval_samples: usize,
    pub eval_projections: usize,
    pub eval_checkpoint: String,
    pub eval_sampler: SampleMethod,

    pub prop1_batch: usize,
    pub gradcheck_probes: usize,
    pub gradcheck_h: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: RunMode::Pretrain,
            seed: 0,
            out_dir: "runs/out".into(),
            data_kind: DatasetKind::GaussianMixture8,
            data_size: 8192,
            data_condition: ConditionSpec::Unconditional,
            net_hidden: vec![64, 64],
            net_activation: Activation::Silu,
            net_time_embed_dim: 8,
            lora_mode: LoraMode::Deep,
            lora_rank: 4,
            alpha_weak: 0.25,
            alpha_strong: 1.0,
            schedule_student: vec![1000.0, 937.5, 833.3, 625.0],
            schedule_teacher: TimestepSchedule::uniform(28).unwrap().steps().to_vec(),
            lr_pretrain: 1e-3,
            lr_pretrain_floor: 0.05,
            lr_generator: 1e-4,
            lr_generator_floor: 1.0,
            lr_branch: 4e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            w_dmd: 1.0,
            w_reg: 1.0,
            w_gen: 0.01,
            w_distill: 0.0,
            reg_enabled: true,
            normalizer_enabled: false,
            gen_source: GenSource::NoisedGroundTruth,
            dmd_renoise: RenoiseKind::Schedule,
            dmd_renoise_mean: 0.0,
            dmd_renoise_std: 1.0,
            disc_tap: 1,
            disc_hidden: 32,
            disc_noised: true,
            batch_size: 64,
            update_ratio: 5,
            branch_t_mean: 0.0,
            branch_t_std: 1.0,
            eta_factor: 2.0,
            eta_window: 100,
            pretrain_iters: 20_000,
            distill_iters: 3000,
            distill_teacher_checkpoint: String::new(),
            onestep_iters: 2000,
            onestep_ramp: 1999,
            onestep_generator_checkpoint: String::new(),
            snapshot_interval: 50,
            snapshot_samples: 1024,
            checkpoint_interval: 1000,
            collapse_threshold: 2.0,
            collapse_patience: 3,
            collapse_fatal: false,
            eval_samples: 4096,
            eval_projections: 128,
            eval_checkpoint: String::new(),
            eval_sampler: SampleMethod::FewStep,
            prop1_batch: 32,
            gradcheck_probes: 200,
            gradcheck_h: 1e-5,
        }
    }
}

fn join_f64(xs: &[f64]) -> String {
    xs.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn join_usize(xs: &[usize]) -> String {
    xs.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_list_f64(key: &str, v: &str) -> Result<Vec<f64>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::config(key, format!("bad float {s:?}")))
        })
        .collect()
}

fn parse_list_usize(key: &str, v: &str) -> Result<Vec<usize>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Error::config(key, format!("bad integer {s:?}")))
        })
        .collect()
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.parse::<f64>().map_err(|_| Error::config(key, format!("bad float {v:?}")))
}

fn parse_u64(key: &str, v: &str) -> Result<u64> {
    v.parse::<u64>().map_err(|_| Error::config(key, format!("bad integer {v:?}")))
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.parse::<usize>().map_err(|_| Error::config(key, format!("bad integer {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::config(key, format!("bad bool {v:?} (expected true | false)"))),
    }
}

impl RunConfig {
    /// Parse the flat text format. Unknown and duplicate keys are
    /// field-level errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen: HashSet<String> = HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}", lineno + 1), format!("expected `key = value`, got {raw:?}"))
            })?;
            let key = key.trim();
            let value = value.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::config(key, "duplicate key"));
            }
            cfg.apply(key, value)?;
        }
        cfg.resolve()?;
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "mode" => self.mode = RunMode::parse(v)?,
            "seed" => self.seed = parse_u64(key, v)?,
            "out_dir" => self.out_dir = v.to_string(),
            "data.kind" => {
                self.data_kind = match v {
                    "gaussian-mixture-8" => DatasetKind::GaussianMixture8,
                    "checkerboard" => DatasetKind::Checkerboard,
                    "moving-dot" => DatasetKind::moving_dot_default(),
                    _ => {
                        return Err(Error::config(
                            key,
                            format!("unknown dataset {v:?} (expected gaussian-mixture-8 | checkerboard | moving-dot)"),
                        ))
                    }
                }
            }
            "data.size" => self.data_size = parse_usize(key, v)?,
            "data.condition" => {
                self.data_condition = match v {
                    "none" => ConditionSpec::Unconditional,
                    "first-frame" => ConditionSpec::FirstFrame,
                    _ => return Err(Error::config(key, format!("unknown condition {v:?}"))),
                }
            }
            "net.hidden" => self.net_hidden = parse_list_usize(key, v)?,
            "net.activation" => {
                self.net_activation = match v {
                    "silu" => Activation::Silu,
                    "tanh" => Activation::Tanh,
                    _ => return Err(Error::config(key, format!("unknown activation {v:?}"))),
                }
            }
            "net.time_embed_dim" => self.net_time_embed_dim = parse_usize(key, v)?,
            "lora.mode" => {
                self.lora_mode = match v {
                    "output" => LoraMode::Output,
                    "deep" => LoraMode::Deep,
                    _ => return Err(Error::config(key, format!("unknown lora mode {v:?}"))),
                }
            }
            "lora.rank" => self.lora_rank = parse_usize(key, v)?,
            "lora.alpha_weak" => self.alpha_weak = parse_f64(key, v)?,
            "lora.alpha_strong" => self.alpha_strong = parse_f64(key, v)?,
            "schedule.student" => self.schedule_student = parse_list_f64(key, v)?,
            "schedule.teacher" => self.schedule_teacher = parse_list_f64(key, v)?,
            "opt.lr_pretrain" => self.lr_pretrain = parse_f64(key, v)?,
            "opt.lr_pretrain_floor" => self.lr_pretrain_floor = parse_f64(key, v)?,
            "opt.lr_generator" => self.lr_generator = parse_f64(key, v)?,
            "opt.lr_generator_floor" => self.lr_generator_floor = parse_f64(key, v)?,
            "opt.lr_branch" => self.lr_branch = parse_f64(key, v)?,
            "opt.beta1" => self.adam_beta1 = parse_f64(key, v)?,
            "opt.beta2" => self.adam_beta2 = parse_f64(key, v)?,
            "opt.eps" => self.adam_eps = parse_f64(key, v)?,
            "loss.w_dmd" => self.w_dmd = parse_f64(key, v)?,
            "loss.w_reg" => self.w_reg = parse_f64(key, v)?,
            "loss.w_gen" => self.w_gen = parse_f64(key, v)?,
            "loss.w_distill" => self.w_distill = parse_f64(key, v)?,
            "loss.reg_enabled" => self.reg_enabled = parse_bool(key, v)?,
            "loss.normalizer_enabled" => self.normalizer_enabled = parse_bool(key, v)?,
            "gen.source" => {
                self.gen_source = match v {
                    "noised-gt" => GenSource::NoisedGroundTruth,
                    "pure-noise" => GenSource::PureNoise,
                    _ => return Err(Error::config(key, format!("unknown generator source {v:?}"))),
                }
            }
            "dmd.renoise" => {
                self.dmd_renoise = match v {
                    "schedule" => RenoiseKind::Schedule,
                    "logit-normal" => RenoiseKind::LogitNormal,
                    _ => return Err(Error::config(key, format!("unknown renoise source {v:?}"))),
                }
            }
            "dmd.renoise_mean" => self.dmd_renoise_mean = parse_f64(key, v)?,
            "dmd.renoise_std" => self.dmd_renoise_std = parse_f64(key, v)?,
            "disc.tap" => self.disc_tap = parse_usize(key, v)?,
            "disc.hidden" => self.disc_hidden = parse_usize(key, v)?,
            "disc.noised" => self.disc_noised = parse_bool(key, v)?,
            "train.batch" => self.batch_size = parse_usize(key, v)?,
            "train.update_ratio" => self.update_ratio = parse_usize(key, v)?,
            "train.branch_t_mean" => self.branch_t_mean = parse_f64(key, v)?,
            "train.branch_t_std" => self.branch_t_std = parse_f64(key, v)?,
            "train.eta_factor" => self.eta_factor = parse_f64(key, v)?,
            "train.eta_window" => self.eta_window = parse_usize(key, v)?,
            "pretrain.iters" => self.pretrain_iters = parse_u64(key, v)?,
            "distill.iters" => self.distill_iters = parse_u64(key, v)?,
            "distill.teacher_checkpoint" => self.distill_teacher_checkpoint = v.to_string(),
            "onestep.iters" => self.onestep_iters = parse_u64(key, v)?,
            "onestep.ramp" => self.onestep_ramp = parse_u64(key, v)?,
            "onestep.generator_checkpoint" => self.onestep_generator_checkpoint = v.to_string(),
            "snapshot.interval" => self.snapshot_interval = parse_u64(key, v)?,
            "snapshot.samples" => self.snapshot_samples = parse_usize(key, v)?,
            "checkpoint.interval" => self.checkpoint_interval = parse_u64(key, v)?,
            "collapse.threshold" => self.collapse_threshold = parse_f64(key, v)?,
            "collapse.patience" => self.collapse_patience = parse_usize(key, v)?,
            "collapse.fatal" => self.collapse_fatal = parse_bool(key, v)?,
            "eval.samples" => self.eval_samples = parse_usize(key, v)?,
            "eval.projections" => self.eval_projections = parse_usize(key, v)?,
            "eval.checkpoint" => self.eval_checkpoint = v.to_string(),
            "eval.sampler" => {
                self.eval_sampler = match v {
                    "few-step" => SampleMethod::FewStep,
                    "euler" => SampleMethod::Euler,
                    _ => return Err(Error::config(key, format!("unknown sampler {v:?}"))),
                }
            }
            "prop1.batch" => self.prop1_batch = parse_usize(key, v)?,
            "gradcheck.probes" => self.gradcheck_probes = parse_usize(key, v)?,
            "gradcheck.h" => self.gradcheck_h = parse_f64(key, v)?,
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    /// Mode forcing and validation. Vanilla DMD is the weak-to-strong path
    /// with `alpha_weak = 0` and the regularizer off.
    fn resolve(&mut self) -> Result<()> {
        if self.mode == RunMode::DistillVanillaDmd {
            self.alpha_weak = 0.0;
            self.reg_enabled = false;
            self.w_reg = 0.0;
        }
        if !self.reg_enabled {
            self.w_reg = 0.0;
        }
        self.validate()
    }

    fn validate(&self) -> Result<()> {
        if self.data_size == 0 {
            return Err(Error::config("data.size", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch", "must be positive"));
        }
        if self.update_ratio == 0 {
            return Err(Error::config("train.update_ratio", "must be positive"));
        }
        if self.snapshot_interval == 0 {
            return Err(Error::config("snapshot.interval", "must be positive"));
        }
        if self.checkpoint_interval == 0 {
            return Err(Error::config("checkpoint.interval", "must be positive"));
        }
        if self.net_hidden.is_empty() {
            return Err(Error::config("net.hidden", "need at least one hidden layer"));
        }
        if !(0.0..=1.0).contains(&self.lr_pretrain_floor) {
            return Err(Error::config("opt.lr_pretrain_floor", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.lr_generator_floor) {
            return Err(Error::config("opt.lr_generator_floor", "must lie in [0, 1]"));
        }
        if !(self.branch_t_std > 0.0) {
            return Err(Error::config("train.branch_t_std", "must be positive"));
        }
        if !(self.dmd_renoise_std > 0.0) {
            return Err(Error::config("dmd.renoise_std", "must be positive"));
        }
        ViewScales::new(self.alpha_weak, self.alpha_strong)?;
        self.loss_weights().validate()?;
        TimestepSchedule::new(self.schedule_student.clone())
            .map_err(|e| Error::config("schedule.student", e.to_string()))?;
        TimestepSchedule::new(self.schedule_teacher.clone())
            .map_err(|e| Error::config("schedule.teacher", e.to_string()))?;
        self.dataset()?;
        Ok(())
    }

    /// Serialize every key in a fixed order; `parse` of the output equals
    /// `self`.
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let kind = match self.data_kind {
            DatasetKind::GaussianMixture8 => "gaussian-mixture-8",
            DatasetKind::Checkerboard => "checkerboard",
            DatasetKind::MovingDot { .. } => "moving-dot",
        };
        let _ = writeln!(s, "mode = {}", self.mode.as_str());
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "out_dir = {}", self.out_dir);
        let _ = writeln!(s, "data.kind = {kind}");
        let _ = writeln!(s, "data.size = {}", self.data_size);
        let _ = writeln!(
            s,
            "data.condition = {}",
            match self.data_condition {
                ConditionSpec::Unconditional => "none",
                ConditionSpec::FirstFrame => "first-frame",
            }
        );
        let _ = writeln!(s, "net.hidden = {}", join_usize(&self.net_hidden));
        let _ = writeln!(
            s,
            "net.activation = {}",
            match self.net_activation {
                Activation::Silu => "silu",
                Activation::Tanh => "tanh",
            }
        );
        let _ = writeln!(s, "net.time_embed_dim = {}", self.net_time_embed_dim);
        let _ = writeln!(
            s,
            "lora.mode = {}",
            match self.lora_mode {
                LoraMode::Output => "output",
                LoraMode::Deep => "deep",
            }
        );
        let _ = writeln!(s, "lora.rank = {}", self.lora_rank);
        let _ = writeln!(s, "lora.alpha_weak = {}", self.alpha_weak);
        let _ = writeln!(s, "lora.alpha_strong = {}", self.alpha_strong);
        let _ = writeln!(s, "schedule.student = {}", join_f64(&self.schedule_student));
        let _ = writeln!(s, "schedule.teacher = {}", join_f64(&self.schedule_teacher));
        let _ = writeln!(s, "opt.lr_pretrain = {}", self.lr_pretrain);
        let _ = writeln!(s, "opt.lr_pretrain_floor = {}", self.lr_pretrain_floor);
        let _ = writeln!(s, "opt.lr_generator = {}", self.lr_generator);
        let _ = writeln!(s, "opt.lr_generator_floor = {}", self.lr_generator_floor);
        let _ = writeln!(s, "opt.lr_branch = {}", self.lr_branch);
        let _ = writeln!(s, "opt.beta1 = {}", self.adam_beta1);
        let _ = writeln!(s, "opt.beta2 = {}", self.adam_beta2);
        let _ = writeln!(s, "opt.eps = {}", self.adam_eps);
        let _ = writeln!(s, "loss.w_dmd = {}", self.w_dmd);
        let _ = writeln!(s, "loss.w_reg = {}", self.w_reg);
        let _ = writeln!(s, "loss.w_gen = {}", self.w_gen);
        let _ = writeln!(s, "loss.w_distill = {}", self.w_distill);
        let _ = writeln!(s, "loss.reg_enabled = {}", self.reg_enabled);
        let _ = writeln!(s, "loss.normalizer_enabled = {}", self.normalizer_enabled);
        let _ = writeln!(
            s,
            "gen.source = {}",
            match self.gen_source {
                GenSource::NoisedGroundTruth => "noised-gt",
                GenSource::PureNoise => "pure-noise",
            }
        );
        let _ = writeln!(
            s,
            "dmd.renoise = {}",
            match self.dmd_renoise {
                RenoiseKind::Schedule => "schedule",
                RenoiseKind::LogitNormal => "logit-normal",
            }
        );
        let _ = writeln!(s, "dmd.renoise_mean = {}", self.dmd_renoise_mean);
        let _ = writeln!(s, "dmd.renoise_std = {}", self.dmd_renoise_std);
        let _ = writeln!(s, "disc.tap = {}", self.disc_tap);
        let _ = writeln!(s, "disc.hidden = {}", self.disc_hidden);
        let _ = writeln!(s, "disc.noised = {}", self.disc_noised);
        let _ = writeln!(s, "train.batch = {}", self.batch_size);
        let _ = writeln!(s, "train.update_ratio = {}", self.update_ratio);
        let _ = writeln!(s, "train.branch_t_mean = {}", self.branch_t_mean);
        let _ = writeln!(s, "train.branch_t_std = {}", self.branch_t_std);
        let _ = writeln!(s, "train.eta_factor = {}", self.eta_factor);
        let _ = writeln!(s, "train.eta_window = {}", self.eta_window);
        let _ = writeln!(s, "pretrain.iters = {}", self.pretrain_iters);
        let _ = writeln!(s, "distill.iters = {}", self.distill_iters);
        let _ = writeln!(s, "distill.teacher_checkpoint = {}", self.distill_teacher_checkpoint);
        let _ = writeln!(s, "onestep.iters = {}", self.onestep_iters);
        let _ = writeln!(s, "onestep.ramp = {}", self.onestep_ramp);
        let _ = writeln!(s, "onestep.generator_checkpoint = {}", self.onestep_generator_checkpoint);
        let _ = writeln!(s, "snapshot.interval = {}", self.snapshot_interval);
        let _ = writeln!(s, "snapshot.samples = {}", self.snapshot_samples);
        let _ = writeln!(s, "checkpoint.interval = {}", self.checkpoint_interval);
        let _ = writeln!(s, "collapse.threshold = {}", self.collapse_threshold);
        let _ = writeln!(s, "collapse.patience = {}", self.collapse_patience);
        let _ = writeln!(s, "collapse.fatal = {}", self.collapse_fatal);
        let _ = writeln!(s, "eval.samples = {}", self.eval_samples);
        let _ = writeln!(s, "eval.projections = {}", self.eval_projections);
        let _ = writeln!(s, "eval.checkpoint = {}", self.eval_checkpoint);
        let _ = writeln!(
            s,
            "eval.sampler = {}",
            match self.eval_sampler {
                SampleMethod::FewStep => "few-step",
                SampleMethod::Euler => "euler",
            }
        );
        let _ = writeln!(s, "prop1.batch = {}", self.prop1_batch);
        let _ = writeln!(s, "gradcheck.probes = {}", self.gradcheck_probes);
        let _ = writeln!(s, "gradcheck.h = {}", self.gradcheck_h);
        s
    }

    /// Apply CLI overrides, then re-run mode forcing and validation.
    pub fn override_and_validate(
        &mut self,
        mode: Option<RunMode>,
        seed: Option<u64>,
        out_dir: Option<String>,
    ) -> Result<()> {
        if let Some(m) = mode {
            self.mode = m;
        }
        if let Some(s) = seed {
            self.seed = s;
        }
        if let Some(o) = out_dir {
            self.out_dir = o;
        }
        self.resolve()
    }

    /// Non-cryptographic hash of the serialized form, embedded in reports.
    pub fn hash(&self) -> String {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.serialize().bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        format!("{h:016x}")
    }

    pub fn dataset(&self) -> Result<Dataset> {
        Dataset::new(self.data_kind, self.data_size, self.seed, self.data_condition)
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            w_dmd: self.w_dmd,
            w_reg: self.w_reg,
            w_gen: self.w_gen,
            w_distill: self.w_distill,
            reg_enabled: self.reg_enabled,
            normalizer_enabled: self.normalizer_enabled,
        }
    }

    pub fn student_schedule(&self) -> TimestepSchedule {
        TimestepSchedule::new(self.schedule_student.clone()).expect("validated")
    }

    pub fn teacher_schedule(&self) -> TimestepSchedule {
        TimestepSchedule::new(self.schedule_teacher.clone()).expect("validated")
    }
}
