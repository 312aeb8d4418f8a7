//! Run orchestration: the operational surface behind the `w2sd` CLI.
//!
//! Every mode writes its artifacts under the run's output directory:
//! `config.resolved.cfg` (the parsed config re-serialized), `metrics.csv`
//! for training modes, periodic and final checkpoints, and a final
//! `report.json` carrying the metric report plus the config hash. All
//! randomness derives from the run seed, so a rerun into a fresh
//! directory reproduces every artifact byte for byte.

use std::cell::RefCell;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::Serialize;

use crate::checkpoint::{self, CheckpointTensor};
use crate::config::{RunConfig, RunMode};
use crate::data::{sample_batch, Dataset};
use crate::distill::{
    branch_loss_value, diffusion_branch_loss_with, dmd_generator_loss_with, one_step_curriculum,
    reg_generator_loss_with, surrogate_value, train_step, verify_prop1, CurriculumSchedule,
    DistillSetup, DistillState, PairSource, StepTelemetry,
};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate_generator, median_pairwise_distance, rbf_mmd2, sliced_w2, CollapseMonitor,
    MetricReport, SampleMethod,
};
use crate::metrics::{compare_runs, Comparison, MetricsRow, MetricsWriter, RunTrace};
use crate::numerics::{adam_step, grad_check, AdamState, MlpNet, ParamVector};
use crate::rng::{derive_rng, derive_seed};
use crate::scheduler::{
    euler_sample, few_step_sample, flow_matching_loss, TimestepSampler, TimestepSchedule,
};
use crate::Batch;

pub const GRADCHECK_TOLERANCE: f64 = 1e-5;
pub const PROP1_TOLERANCE: f64 = 1e-10;

#[derive(Debug)]
pub struct RunOutcome {
    pub out_dir: PathBuf,
    pub report: Option<MetricReport>,
    /// One line per headline result, printed by the CLI.
    pub messages: Vec<String>,
}

pub fn run(cfg: &RunConfig) -> Result<RunOutcome> {
    let out_dir = PathBuf::from(&cfg.out_dir);
    std::fs::create_dir_all(&out_dir)?;
    std::fs::write(out_dir.join("config.resolved.cfg"), cfg.serialize())?;
    match cfg.mode {
        RunMode::Pretrain => run_pretrain(cfg, &out_dir),
        RunMode::DistillW2svd | RunMode::DistillVanillaDmd => run_distill(cfg, &out_dir),
        RunMode::Train1Step => run_train_1step(cfg, &out_dir),
        RunMode::Eval => run_eval(cfg, &out_dir),
        RunMode::VerifyProp1 => run_verify_prop1(cfg, &out_dir),
        RunMode::Gradcheck => run_gradcheck(cfg, &out_dir),
    }
}

fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

#[derive(Serialize)]
struct ReportFile<'a> {
    #[serde(flatten)]
    report: &'a MetricReport,
    config_hash: String,
    git_describe: String,
}

fn write_report(cfg: &RunConfig, out_dir: &Path, report: &MetricReport) -> Result<()> {
    let file = ReportFile {
        report,
        config_hash: cfg.hash(),
        git_describe: git_describe(),
    };
    let json = serde_json::to_string_pretty(&file).expect("report serialization");
    std::fs::write(out_dir.join("report.json"), json)?;
    Ok(())
}

fn build_net(cfg: &RunConfig, dataset: &Dataset) -> Result<MlpNet> {
    MlpNet::new(
        dataset.dim(),
        &cfg.net_hidden,
        cfg.net_time_embed_dim,
        dataset.cond_dim(),
        cfg.net_activation,
    )
}

/// Evaluation-side dataset: same family, disjoint seed stream.
fn eval_dataset(cfg: &RunConfig) -> Result<Dataset> {
    Dataset::new(
        cfg.data_kind,
        cfg.data_size,
        derive_seed(cfg.seed, "eval-dataset", 0),
        cfg.data_condition,
    )
}

/// Fixed ground-truth set and kernel bandwidth for in-training snapshots.
struct SnapshotCtx {
    gt: Batch,
    cond: Option<Batch>,
    bandwidth: f64,
}

impl SnapshotCtx {
    fn new(cfg: &RunConfig, eval_ds: &Dataset) -> Self {
        let mut rng = derive_rng(cfg.seed, "snapshot-data", 0);
        let (gt, cond) = sample_batch(eval_ds, cfg.snapshot_samples, &mut rng);
        let bandwidth = median_pairwise_distance(&gt);
        Self { gt, cond, bandwidth }
    }

    fn measure(
        &self,
        cfg: &RunConfig,
        net: &MlpNet,
        params: &ParamVector,
        method: SampleMethod,
        schedule: &TimestepSchedule,
        iter: u64,
    ) -> Result<(f64, f64)> {
        let mut gen_rng = derive_rng(cfg.seed, "snapshot-gen", iter);
        let generated = match method {
            SampleMethod::Euler => {
                let eps: Batch = (0..self.gt.len())
                    .map(|_| {
                        (0..net.data_dim())
                            .map(|_| gen_rng.sample(rand_distr::StandardNormal))
                            .collect()
                    })
                    .collect();
                euler_sample(net, params, schedule, &eps, self.cond.as_ref())?
            }
            SampleMethod::FewStep => {
                few_step_sample(net, params, schedule, self.gt.len(), &mut gen_rng, self.cond.as_ref())?
            }
        };
        let mut proj_rng = derive_rng(cfg.seed, "snapshot-proj", iter);
        let w2 = sliced_w2(&generated, &self.gt, cfg.eval_projections, &mut proj_rng)?;
        let mmd = rbf_mmd2(&generated, &self.gt, self.bandwidth)?;
        Ok((w2, mmd))
    }
}

fn checkpoint_path(out_dir: &Path, iter: Option<u64>) -> PathBuf {
    match iter {
        Some(i) => out_dir.join(format!("checkpoint_{i:07}.bin")),
        None => out_dir.join("checkpoint_final.bin"),
    }
}

fn pretrain_tensors(params: &ParamVector) -> Vec<CheckpointTensor> {
    checkpoint::tensors_from_params("pre/", params)
}

fn distill_tensors(state: &DistillState) -> Vec<CheckpointTensor> {
    let mut t = checkpoint::tensors_from_params("pre/", &state.pre_params);
    t.extend(checkpoint::tensors_from_params("gen/", &state.gen_params));
    t.extend(checkpoint::tensors_from_params("", &state.aux_params));
    t
}

fn run_pretrain(cfg: &RunConfig, out_dir: &Path) -> Result<RunOutcome> {
    let dataset = cfg.dataset()?;
    let eval_ds = eval_dataset(cfg)?;
    let net = build_net(cfg, &dataset)?;
    let mut params = net.init_params(derive_seed(cfg.seed, "pretrain-init", 0));
    let mut adam = AdamState::with_hyper(
        params.len(),
        cfg.lr_pretrain,
        cfg.adam_beta1,
        cfg.adam_beta2,
        cfg.adam_eps,
    );
    let sampler = TimestepSampler::LogitNormal { mean: 0.0, std: 1.0 };
    let mut rng = derive_rng(cfg.seed, "pretrain", 0);
    let mut writer = MetricsWriter::create(&out_dir.join("metrics.csv"))?;
    let ctx = SnapshotCtx::new(cfg, &eval_ds);
    let teacher_schedule = cfg.teacher_schedule();

    for iter in 0..cfg.pretrain_iters {
        // cosine decay from lr_pretrain down to its configured floor
        let progress = iter as f64 / cfg.pretrain_iters.max(1) as f64;
        let floor = cfg.lr_pretrain * cfg.lr_pretrain_floor;
        adam.lr = floor + (cfg.lr_pretrain - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        let (x0, cond) = sample_batch(&dataset, cfg.batch_size, &mut rng);
        let (loss, grads) = flow_matching_loss(&net, &params, &x0, cond.as_ref(), &sampler, &mut rng)?;
        let grad_norm = grads.l2_norm();
        adam_step(&mut adam, &mut params, &grads).map_err(|e| Error::NonFinite {
            iteration: iter,
            loss: "flow_matching".into(),
            detail: e.to_string(),
        })?;
        let mut row = MetricsRow {
            iter,
            l_dmd: 0.0,
            l_reg: 0.0,
            l_diff: loss,
            l_dis: 0.0,
            l_gen: 0.0,
            grad_norm_phi: grad_norm,
            grad_norm_branch: 0.0,
            w2_snapshot: None,
            mmd_snapshot: None,
        };
        if (iter + 1) % cfg.snapshot_interval == 0 {
            let (w2, mmd) = ctx.measure(cfg, &net, &params, SampleMethod::Euler, &teacher_schedule, iter)?;
            row.w2_snapshot = Some(w2);
            row.mmd_snapshot = Some(mmd);
            eprintln!("[pretrain] iter {iter}: loss={loss:.5} w2={w2:.5}");
        }
        writer.append(&row)?;
        if (iter + 1) % cfg.checkpoint_interval == 0 {
            checkpoint::save(&checkpoint_path(out_dir, Some(iter + 1)), &pretrain_tensors(&params))?;
        }
    }
    writer.flush()?;
    checkpoint::save(&checkpoint_path(out_dir, None), &pretrain_tensors(&params))?;
    let report = evaluate_generator(
        &net,
        &params,
        SampleMethod::Euler,
        &teacher_schedule,
        &eval_ds,
        cfg.eval_samples,
        cfg.eval_projections,
        cfg.seed,
    )?;
    write_report(cfg, out_dir, &report)?;
    let messages = vec![format!(
        "pretrain: {} iterations, final w2={:.5} mmd={:.6}",
        cfg.pretrain_iters, report.w2, report.mmd
    )];
    Ok(RunOutcome {
        out_dir: out_dir.to_path_buf(),
        report: Some(report),
        messages,
    })
}

fn build_distill_state(cfg: &RunConfig, net: MlpNet, pre_params: ParamVector) -> Result<DistillState> {
    DistillState::new(DistillSetup {
        net,
        pre_params,
        scales: crate::lora::ViewScales::new(cfg.alpha_weak, cfg.alpha_strong)?,
        lora_mode: cfg.lora_mode,
        lora_rank: cfg.lora_rank,
        disc_tap: cfg.disc_tap,
        disc_hidden: cfg.disc_hidden,
        weights: cfg.loss_weights(),
        schedule: cfg.student_schedule(),
        lr_generator: cfg.lr_generator,
        lr_branch: cfg.lr_branch,
        adam_betas: (cfg.adam_beta1, cfg.adam_beta2),
        adam_eps: cfg.adam_eps,
        update_ratio: cfg.update_ratio,
        branch_t: TimestepSampler::LogitNormal {
            mean: cfg.branch_t_mean,
            std: cfg.branch_t_std,
        },
        gen_source: cfg.gen_source,
        renoise_t: match cfg.dmd_renoise {
            crate::config::RenoiseKind::Schedule => crate::distill::RenoiseT::SharedSchedule,
            crate::config::RenoiseKind::LogitNormal => {
                crate::distill::RenoiseT::Fresh(TimestepSampler::LogitNormal {
                    mean: cfg.dmd_renoise_mean,
                    std: cfg.dmd_renoise_std,
                })
            }
        },
        disc_noised: cfg.disc_noised,
        eta_factor: cfg.eta_factor,
        eta_window: cfg.eta_window,
        seed: cfg.seed,
    })
}

fn telemetry_row(tel: &StepTelemetry) -> MetricsRow {
    MetricsRow {
        iter: tel.iter,
        l_dmd: tel.l_dmd,
        l_reg: tel.l_reg,
        l_diff: tel.l_diff,
        l_dis: tel.l_dis,
        l_gen: tel.l_gen,
        grad_norm_phi: tel.grad_norm_phi,
        grad_norm_branch: tel.grad_norm_branch,
        w2_snapshot: None,
        mmd_snapshot: None,
    }
}

fn collapse_error(iteration: u64, monitor: &CollapseMonitor) -> Error {
    let tail: Vec<String> = monitor.tail().iter().map(|v| format!("{v:.6}")).collect();
    Error::Collapse {
        iteration,
        detail: format!(
            "w2 exceeded {} x best ({:.6}) for {} consecutive snapshots; trailing w2: [{}]",
            monitor.threshold,
            monitor.best(),
            monitor.patience,
            tail.join(", ")
        ),
    }
}

fn run_distill(cfg: &RunConfig, out_dir: &Path) -> Result<RunOutcome> {
    if cfg.distill_teacher_checkpoint.is_empty() {
        return Err(Error::config(
            "distill.teacher_checkpoint",
            "distillation needs a pretrained teacher checkpoint",
        ));
    }
    let dataset = cfg.dataset()?;
    let eval_ds = eval_dataset(cfg)?;
    let net = build_net(cfg, &dataset)?;
    let tensors = checkpoint::load(Path::new(&cfg.distill_teacher_checkpoint))?;
    let pre_params = checkpoint::params_from_tensors("pre/", net.layout(), &tensors)?;
    let mut state = build_distill_state(cfg, net, pre_params)?;

    let mut rng = derive_rng(cfg.seed, "distill", 0);
    let mut writer = MetricsWriter::create(&out_dir.join("metrics.csv"))?;
    let ctx = SnapshotCtx::new(cfg, &eval_ds);
    let mut monitor = CollapseMonitor::new(cfg.collapse_threshold, cfg.collapse_patience);
    let student_schedule = cfg.student_schedule();

    for k in 0..cfg.distill_iters {
        let progress = k as f64 / cfg.distill_iters.max(1) as f64;
        let floor = cfg.lr_generator * cfg.lr_generator_floor;
        state.adam_gen.lr =
            floor + (cfg.lr_generator - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        let tel = train_step(&mut state, &dataset, cfg.batch_size, &mut rng, None)?;
        let mut row = telemetry_row(&tel);
        if (tel.iter + 1) % cfg.snapshot_interval == 0 {
            let (w2, mmd) = ctx.measure(
                cfg,
                &state.net,
                &state.gen_params,
                SampleMethod::FewStep,
                &student_schedule,
                tel.iter,
            )?;
            row.w2_snapshot = Some(w2);
            row.mmd_snapshot = Some(mmd);
            let fired = monitor.observe(w2);
            eprintln!(
                "[{}] iter {}: l_dmd={:.5} l_diff={:.5} w2={:.5}{}",
                cfg.mode.as_str(),
                tel.iter,
                tel.l_dmd,
                tel.l_diff,
                w2,
                if fired { " [collapse]" } else { "" }
            );
            if fired && cfg.collapse_fatal {
                writer.append(&row)?;
                writer.flush()?;
                return Err(collapse_error(tel.iter, &monitor));
            }
        }
        writer.append(&row)?;
        if (tel.iter + 1) % cfg.checkpoint_interval == 0 {
            checkpoint::save(&checkpoint_path(out_dir, Some(tel.iter + 1)), &distill_tensors(&state))?;
        }
    }
    writer.flush()?;
    checkpoint::save(&checkpoint_path(out_dir, None), &distill_tensors(&state))?;
    let report = evaluate_generator(
        &state.net,
        &state.gen_params,
        SampleMethod::FewStep,
        &student_schedule,
        &eval_ds,
        cfg.eval_samples,
        cfg.eval_projections,
        cfg.seed,
    )?;
    write_report(cfg, out_dir, &report)?;
    let messages = vec![format!(
        "{}: {} iterations, student w2={:.5} coverage={:.3} collapse={}",
        cfg.mode.as_str(),
        cfg.distill_iters,
        report.w2,
        report.mode_coverage,
        monitor.fired()
    )];
    Ok(RunOutcome {
        out_dir: out_dir.to_path_buf(),
        report: Some(report),
        messages,
    })
}

fn run_train_1step(cfg: &RunConfig, out_dir: &Path) -> Result<RunOutcome> {
    if cfg.onestep_generator_checkpoint.is_empty() {
        return Err(Error::config(
            "onestep.generator_checkpoint",
            "1-step training needs the distilled few-step generator checkpoint",
        ));
    }
    let dataset = cfg.dataset()?;
    let eval_ds = eval_dataset(cfg)?;
    let net = build_net(cfg, &dataset)?;
    let tensors = checkpoint::load(Path::new(&cfg.onestep_generator_checkpoint))?;
    let pre_params = checkpoint::params_from_tensors("pre/", net.layout(), &tensors)?;
    let gen4_params = checkpoint::params_from_tensors("gen/", net.layout(), &tensors)?;
    let one_step = TimestepSchedule::new(vec![1000.0])?;

    let mut state = build_distill_state(cfg, net, pre_params)?;
    state.schedule = one_step.clone();
    let pair_source = PairSource {
        params: gen4_params,
        schedule: cfg.student_schedule(),
    };
    let curriculum = CurriculumSchedule::new(cfg.onestep_ramp);

    let mut rng = derive_rng(cfg.seed, "train-1step", 0);
    let writer = RefCell::new(MetricsWriter::create(&out_dir.join("metrics.csv"))?);
    let ctx = SnapshotCtx::new(cfg, &eval_ds);
    let monitor = RefCell::new(CollapseMonitor::new(cfg.collapse_threshold, cfg.collapse_patience));

    one_step_curriculum(
        &mut state,
        &pair_source,
        &curriculum,
        &dataset,
        cfg.batch_size,
        cfg.onestep_iters,
        &mut rng,
        |st, tel| {
            let mut row = telemetry_row(&tel);
            if (tel.iter + 1) % cfg.snapshot_interval == 0 {
                let (w2, mmd) =
                    ctx.measure(cfg, &st.net, &st.gen_params, SampleMethod::FewStep, &one_step, tel.iter)?;
                row.w2_snapshot = Some(w2);
                row.mmd_snapshot = Some(mmd);
                let fired = monitor.borrow_mut().observe(w2);
                eprintln!(
                    "[train-1step] iter {}: l_pair={:.5} l_dmd={:.5} w2={:.5}",
                    tel.iter, tel.l_pair, tel.l_dmd, w2
                );
                if fired && cfg.collapse_fatal {
                    writer.borrow_mut().append(&row)?;
                    writer.borrow_mut().flush()?;
                    return Err(collapse_error(tel.iter, &monitor.borrow()));
                }
            }
            writer.borrow_mut().append(&row)?;
            if (tel.iter + 1) % cfg.checkpoint_interval == 0 {
                checkpoint::save(&checkpoint_path(out_dir, Some(tel.iter + 1)), &distill_tensors(st))?;
            }
            Ok(())
        },
    )?;
    writer.borrow_mut().flush()?;
    checkpoint::save(&checkpoint_path(out_dir, None), &distill_tensors(&state))?;
    let report = evaluate_generator(
        &state.net,
        &state.gen_params,
        SampleMethod::FewStep,
        &one_step,
        &eval_ds,
        cfg.eval_samples,
        cfg.eval_projections,
        cfg.seed,
    )?;
    write_report(cfg, out_dir, &report)?;
    let messages = vec![format!(
        "train-1step: {} iterations, 1-step w2={:.5} coverage={:.3}",
        cfg.onestep_iters, report.w2, report.mode_coverage
    )];
    Ok(RunOutcome {
        out_dir: out_dir.to_path_buf(),
        report: Some(report),
        messages,
    })
}

fn run_eval(cfg: &RunConfig, out_dir: &Path) -> Result<RunOutcome> {
    if cfg.eval_checkpoint.is_empty() {
        return Err(Error::config("eval.checkpoint", "eval needs a checkpoint path"));
    }
    let eval_ds = eval_dataset(cfg)?;
    let net = build_net(cfg, &eval_ds)?;
    let tensors = checkpoint::load(Path::new(&cfg.eval_checkpoint))?;
    // a distilled checkpoint carries the generator; a pretrain checkpoint
    // only the backbone
    let params = if checkpoint::has_prefix(&tensors, "gen/") {
        checkpoint::params_from_tensors("gen/", net.layout(), &tensors)?
    } else {
        checkpoint::params_from_tensors("pre/", net.layout(), &tensors)?
    };
    let schedule = match cfg.eval_sampler {
        SampleMethod::FewStep => cfg.student_schedule(),
        SampleMethod::Euler => cfg.teacher_schedule(),
    };
    let report = evaluate_generator(
        &net,
        &params,
        cfg.eval_sampler,
        &schedule,
        &eval_ds,
        cfg.eval_samples,
        cfg.eval_projections,
        cfg.seed,
    )?;
    write_report(cfg, out_dir, &report)?;
    let messages = vec![format!(
        "eval: w2={:.5} mmd={:.6} coverage={:.3}",
        report.w2, report.mmd, report.mode_coverage
    )];
    Ok(RunOutcome {
        out_dir: out_dir.to_path_buf(),
        report: Some(report),
        messages,
    })
}

fn run_verify_prop1(cfg: &RunConfig, out_dir: &Path) -> Result<RunOutcome> {
    use crate::distill::{PROP1_ALPHA_STRONG_GRID, PROP1_ALPHA_WEAK_GRID};
    let dataset = cfg.dataset()?;
    let net = build_net(cfg, &dataset)?;
    let pre = net.init_params(derive_seed(cfg.seed, "prop1-pre", 0));
    let mut gen = pre.clone();
    let mut rng = derive_rng(cfg.seed, "prop1-gen", 0);
    for v in gen.values_mut() {
        *v += rng.gen_range(-0.05..0.05);
    }

    let mut combos: Vec<(f64, f64)> = vec![(cfg.alpha_weak, cfg.alpha_strong)];
    for &aw in &PROP1_ALPHA_WEAK_GRID {
        for &as_ in &PROP1_ALPHA_STRONG_GRID {
            if !combos.contains(&(aw, as_)) {
                combos.push((aw, as_));
            }
        }
    }

    #[derive(Serialize)]
    struct Entry {
        alpha_weak: f64,
        alpha_strong: f64,
        scale_factor: f64,
        max_abs_deviation: f64,
    }
    let mut entries = Vec::new();
    let mut messages = Vec::new();
    let mut worst: Option<(f64, f64, f64)> = None;
    for (aw, as_) in combos {
        let r = verify_prop1(&net, &pre, &gen, cfg.lora_mode, aw, as_, cfg.prop1_batch, cfg.seed)?;
        messages.push(format!(
            "prop1 alpha_weak={aw} alpha_strong={as_}: scale_factor={} max_abs_deviation={:.3e}",
            r.scale_factor, r.max_abs_deviation
        ));
        if worst.map_or(true, |(_, _, w)| r.max_abs_deviation > w) {
            worst = Some((aw, as_, r.max_abs_deviation));
        }
        entries.push(Entry {
            alpha_weak: aw,
            alpha_strong: as_,
            scale_factor: r.scale_factor,
            max_abs_deviation: r.max_abs_deviation,
        });
    }
    std::fs::write(
        out_dir.join("prop1.json"),
        serde_json::to_string_pretty(&entries).expect("prop1 serialization"),
    )?;
    if let Some((aw, as_, w)) = worst {
        if w > PROP1_TOLERANCE {
            return Err(Error::Domain(format!(
                "scale-law deviation {w:.3e} at alpha=({aw},{as_}) exceeds {PROP1_TOLERANCE:.0e}"
            )));
        }
        messages.push(format!("prop1: all deviations within {PROP1_TOLERANCE:.0e} (worst {w:.3e})"));
    }
    Ok(RunOutcome {
        out_dir: out_dir.to_path_buf(),
        report: None,
        messages,
    })
}

/// Finite-difference audit of every loss gradient. Exit is clean only if
/// each loss checks below [`GRADCHECK_TOLERANCE`].
fn run_gradcheck(cfg: &RunConfig, out_dir: &Path) -> Result<RunOutcome> {
    let dataset = cfg.dataset()?;
    let net = build_net(cfg, &dataset)?;
    let pre = net.init_params(derive_seed(cfg.seed, "gradcheck-pre", 0));
    let mut state = build_distill_state(cfg, net, pre)?;
    // a materially nonzero branch so factor gradients are exercised
    {
        let mut frng = derive_rng(cfg.seed, "gradcheck-factors", 0);
        for d in state.aux_params.layout().tensors().to_vec() {
            if d.name.starts_with("lora/") {
                for v in state.aux_params.tensor_mut(&d.name) {
                    *v = frng.gen_range(-0.3..0.3);
                }
            }
        }
    }

    let b = cfg.batch_size.min(8);
    let d = state.net.data_dim();
    let mut rng = derive_rng(cfg.seed, "gradcheck-draws", 0);
    let (x_gt, cond) = sample_batch(&dataset, b, &mut rng);
    let cond = cond.as_ref();
    let eps: Batch = (0..b)
        .map(|_| (0..d).map(|_| rng.sample(rand_distr::StandardNormal)).collect())
        .collect();
    let t = state.schedule.sample_uniform(b, &mut rng);
    let t_branch = state.branch_sampler.sample_batch(b, &mut rng);
    let eps_prime: Batch = (0..b)
        .map(|_| (0..d).map(|_| rng.sample(rand_distr::StandardNormal)).collect())
        .collect();

    let probes = cfg.gradcheck_probes;
    let h = cfg.gradcheck_h;
    let mut results: Vec<(String, f64)> = Vec::new();

    // flow-matching pretraining loss over backbone weights
    {
        let sampler = TimestepSampler::LogitNormal { mean: 0.0, std: 1.0 };
        let net = state.net.clone();
        let x0 = x_gt.clone();
        let seed = cfg.seed;
        let loss = |p: &ParamVector| {
            let mut r = derive_rng(seed, "gradcheck-fm", 0);
            flow_matching_loss(&net, p, &x0, cond, &sampler, &mut r).unwrap()
        };
        let mut prng = derive_rng(cfg.seed, "gradcheck-probe", 0);
        let err = grad_check(&loss, &state.pre_params, probes, h, &mut prng);
        results.push(("flow_matching".into(), err));
    }

    // DMD surrogate over generator weights, views frozen
    {
        let r = dmd_generator_loss_with(&state, &x_gt, &eps, &t, cond)?;
        let net = state.net.clone();
        let src = state.gen_source;
        let loss = |p: &ParamVector| {
            let v = surrogate_value(&net, p, src, &x_gt, &eps, &t, cond, &r.frozen_target).unwrap();
            (v, r.grads.clone())
        };
        let mut prng = derive_rng(cfg.seed, "gradcheck-probe", 1);
        let err = grad_check(&loss, &state.gen_params, probes, h, &mut prng);
        results.push(("dmd_surrogate".into(), err));
    }

    // ground-truth regularization surrogate over generator weights
    {
        let r = reg_generator_loss_with(&state, &x_gt, &eps, &t, cond)?;
        let net = state.net.clone();
        let src = state.gen_source;
        let loss = |p: &ParamVector| {
            let v = surrogate_value(&net, p, src, &x_gt, &eps, &t, cond, &r.frozen_target).unwrap();
            (v, r.grads.clone())
        };
        let mut prng = derive_rng(cfg.seed, "gradcheck-probe", 2);
        let err = grad_check(&loss, &state.gen_params, probes, h, &mut prng);
        results.push(("reg_surrogate".into(), err));
    }

    // diffusion loss over branch factors
    {
        let gf = crate::distill::generator_forward(
            &state.net,
            &state.gen_params,
            state.gen_source,
            &x_gt,
            &eps,
            &t_branch,
            cond,
        )?;
        let r = diffusion_branch_loss_with(&state, &gf.x0_hat, &eps_prime, &t_branch, cond)?;
        let loss = |f: &ParamVector| {
            let v = branch_loss_value(&state, f, &r.x_t, &r.t, &r.target, cond).unwrap();
            (v, r.grads.clone())
        };
        let mut prng = derive_rng(cfg.seed, "gradcheck-probe", 3);
        let err = grad_check(&loss, &state.aux_params, probes, h, &mut prng);
        results.push(("diffusion".into(), err));
    }

    // adversarial losses: head side and generator side
    {
        let seed = cfg.seed;
        let x_gt2 = x_gt.clone();
        let eps2 = eps.clone();
        let t2 = t.clone();
        let cell = RefCell::new(state);
        let dis_loss = |p: &ParamVector| {
            let mut st = cell.borrow_mut();
            st.aux_params = p.clone();
            let mut r = derive_rng(seed, "gradcheck-adv", 0);
            let out = crate::distill::adversarial_losses(&st, &x_gt2, &eps2, &t2, cond, &mut r).unwrap();
            (out.l_dis, out.dis_grads)
        };
        let base_aux = cell.borrow().aux_params.clone();
        let mut prng = derive_rng(seed, "gradcheck-probe", 4);
        let err = grad_check(&dis_loss, &base_aux, probes, h, &mut prng);
        results.push(("adversarial_dis".into(), err));
        cell.borrow_mut().aux_params = base_aux;

        let gen_loss = |p: &ParamVector| {
            let mut st = cell.borrow_mut();
            st.gen_params = p.clone();
            let mut r = derive_rng(seed, "gradcheck-adv", 0);
            let out = crate::distill::adversarial_losses(&st, &x_gt2, &eps2, &t2, cond, &mut r).unwrap();
            (out.l_gen, out.gen_grads)
        };
        let base_gen = cell.borrow().gen_params.clone();
        let mut prng = derive_rng(seed, "gradcheck-probe", 5);
        let err = grad_check(&gen_loss, &base_gen, probes, h, &mut prng);
        results.push(("adversarial_gen".into(), err));
    }

    let mut messages = Vec::new();
    let mut json = String::from("{\n");
    let mut all_ok = true;
    for (i, (name, err)) in results.iter().enumerate() {
        let ok = *err <= GRADCHECK_TOLERANCE;
        all_ok &= ok;
        messages.push(format!(
            "gradcheck {name}: max_rel_err={err:.3e} [{}]",
            if ok { "ok" } else { "FAIL" }
        ));
        let _ = write!(json, "  \"{name}\": {err:e}");
        json.push_str(if i + 1 < results.len() { ",\n" } else { "\n" });
    }
    json.push_str("}\n");
    std::fs::write(out_dir.join("gradcheck.json"), json)?;
    if !all_ok {
        return Err(Error::Domain(format!(
            "gradient check exceeded {GRADCHECK_TOLERANCE:e}: {messages:?}"
        )));
    }
    Ok(RunOutcome {
        out_dir: out_dir.to_path_buf(),
        report: None,
        messages,
    })
}

/// Build comparison inputs from metrics CSV paths. The run label is the
/// parent directory name; when a sibling `config.resolved.cfg` exists its
/// `alpha_weak` keys the summary row.
pub fn compare_runs_files(paths: &[PathBuf], out_dir: Option<&Path>) -> Result<Comparison> {
    let mut traces = Vec::with_capacity(paths.len());
    let mut collapse = (2.0, 3usize);
    for (i, p) in paths.iter().enumerate() {
        let rows = crate::metrics::read_csv(p)?;
        let parent = p.parent().unwrap_or(Path::new("."));
        let label = parent
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .filter(|s| !s.is_empty())
            .unwrap_or_else(|| format!("run{i}"));
        let alpha_weak = std::fs::read_to_string(parent.join("config.resolved.cfg"))
            .ok()
            .and_then(|text| RunConfig::parse(&text).ok())
            .map(|cfg| {
                if i == 0 {
                    collapse = (cfg.collapse_threshold, cfg.collapse_patience);
                }
                cfg.alpha_weak
            });
        traces.push(RunTrace {
            label,
            alpha_weak,
            rows,
        });
    }
    let cmp = compare_runs(&traces, collapse.0, collapse.1)?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("comparison.csv"), &cmp.aligned_csv)?;
        std::fs::write(dir.join("comparison.txt"), &cmp.table)?;
    }
    Ok(cmp)
}
