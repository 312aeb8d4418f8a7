//! Shared low-rank branch over a frozen backbone.
//!
//! One branch provides both score views used by distillation: the weak
//! view `v_pre + alpha_weak * zeta` plays the real model and the strong
//! view `v_pre + alpha_strong * zeta` plays the fake model. Only the
//! branch factors train; the backbone never moves.
//!
//! Two placements are supported. `Output` puts rank-r factors on the final
//! linear layer only and adds `scale * A (B h)` to the backbone output,
//! which makes the output-additive view definition exact and the scale law
//! testable to machine precision. `Deep` composes `W + scale * A B` into
//! every linear layer, matching how low-rank adapters are used in
//! practice; there the additive form holds only to first order in the
//! branch magnitude. Proofs and verifier runs use `Output`; end-to-end
//! runs default to `Deep`.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numerics::{LayoutBuilder, MlpCache, MlpNet, ParamVector};
use crate::rng::derive_rng;
use crate::Batch;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoraMode {
    /// Factors on the final linear layer only; the branch output is added
    /// to the backbone velocity.
    Output,
    /// Factors on every linear layer, composed into effective weights.
    Deep,
}

/// The weak/strong scale pair. `alpha_weak` shifts the real view slightly
/// toward the fake view; `alpha_strong` defines the fake view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewScales {
    pub alpha_weak: f64,
    pub alpha_strong: f64,
}

impl ViewScales {
    pub fn new(alpha_weak: f64, alpha_strong: f64) -> Result<Self> {
        if !(alpha_strong > 0.0) {
            return Err(Error::config("lora.alpha_strong", "must be positive"));
        }
        if !(0.0..=alpha_strong).contains(&alpha_weak) {
            return Err(Error::config(
                "lora.alpha_weak",
                format!("must lie in [0, alpha_strong={alpha_strong}], got {alpha_weak}"),
            ));
        }
        Ok(Self {
            alpha_weak,
            alpha_strong,
        })
    }
}

impl Default for ViewScales {
    /// Paper defaults: weak 0.25, strong 1.
    fn default() -> Self {
        Self {
            alpha_weak: 0.25,
            alpha_strong: 1.0,
        }
    }
}

/// Low-rank factor pairs `(A: d_out x r, B: r x d_in)` on the targeted
/// backbone layers. Factor values live in an external parameter vector
/// under `lora/layer{i}/{a,b}` names.
#[derive(Debug, Clone)]
pub struct LoraBranch {
    mode: LoraMode,
    rank: usize,
    /// (layer index, d_out, d_in) per targeted linear layer.
    targets: Vec<(usize, usize, usize)>,
}

impl LoraBranch {
    pub fn new(net: &MlpNet, mode: LoraMode, rank: usize) -> Result<Self> {
        if rank == 0 {
            return Err(Error::config("lora.rank", "rank must be positive"));
        }
        let stack = net.stack();
        let layers: Vec<usize> = match mode {
            LoraMode::Output => vec![stack.n_layers() - 1],
            LoraMode::Deep => (0..stack.n_layers()).collect(),
        };
        let mut targets = Vec::with_capacity(layers.len());
        for l in layers {
            let (dout, din) = stack.weight_shape(l);
            if rank > dout.min(din) {
                return Err(Error::config(
                    "lora.rank",
                    format!("rank {rank} exceeds min(d_out={dout}, d_in={din}) of layer {l}"),
                ));
            }
            targets.push((l, dout, din));
        }
        Ok(Self { mode, rank, targets })
    }

    pub fn mode(&self) -> LoraMode {
        self.mode
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn a_name(layer: usize) -> String {
        format!("lora/layer{layer}/a")
    }

    pub fn b_name(layer: usize) -> String {
        format!("lora/layer{layer}/b")
    }

    pub fn append_layout(&self, b: &mut LayoutBuilder) {
        for &(l, dout, din) in &self.targets {
            b.push(Self::a_name(l), vec![dout, self.rank]);
            b.push(Self::b_name(l), vec![self.rank, din]);
        }
    }

    /// A starts at zero and B Gaussian(0, 0.02), so the branch is an exact
    /// no-op at initialization and the fake view starts equal to the
    /// pretrained view.
    pub fn init_factors(&self, params: &mut ParamVector, seed: u64) {
        let mut rng = derive_rng(seed, "lora-init", 0);
        for &(l, _, _) in &self.targets {
            for v in params.tensor_mut(&Self::a_name(l)) {
                *v = 0.0;
            }
            for v in params.tensor_mut(&Self::b_name(l)) {
                *v = rng.sample::<f64, _>(StandardNormal) * 0.02;
            }
        }
    }

    /// Effective backbone weights `W + scale * A B` on every targeted
    /// layer (deep mode evaluation path).
    fn compose_effective(&self, backbone: &ParamVector, factors: &ParamVector, scale: f64) -> ParamVector {
        let mut eff = backbone.clone();
        for &(l, dout, din) in &self.targets {
            let a = factors.tensor(&Self::a_name(l));
            let b = factors.tensor(&Self::b_name(l));
            let name = format!("layer{l}/w");
            let w = eff.tensor_mut(&name);
            let r = self.rank;
            for o in 0..dout {
                for i in 0..din {
                    let mut acc = 0.0;
                    for k in 0..r {
                        acc += a[o * r + k] * b[k * din + i];
                    }
                    w[o * din + i] += scale * acc;
                }
            }
        }
        eff
    }

    /// Branch output `A (B h)` of the output-mode factor, per batch row.
    /// Also returns the intermediate `B h` needed by the backward pass.
    fn output_branch(&self, factors: &ParamVector, hidden: &Batch) -> (Batch, Batch) {
        let (l, dout, din) = self.targets[0];
        let a = factors.tensor(&Self::a_name(l));
        let b = factors.tensor(&Self::b_name(l));
        let r = self.rank;
        let mut z = Vec::with_capacity(hidden.len());
        let mut bh = Vec::with_capacity(hidden.len());
        for h in hidden {
            let mut mid = vec![0.0; r];
            for (k, m) in mid.iter_mut().enumerate() {
                let row = &b[k * din..(k + 1) * din];
                *m = row.iter().zip(h).map(|(&bv, &hv)| bv * hv).sum();
            }
            let mut out = vec![0.0; dout];
            for (o, ov) in out.iter_mut().enumerate() {
                let row = &a[o * r..(o + 1) * r];
                *ov = row.iter().zip(&mid).map(|(&av, &mv)| av * mv).sum();
            }
            z.push(out);
            bh.push(mid);
        }
        (z, bh)
    }
}

/// Everything the factor backward pass needs from a view forward pass.
#[derive(Debug)]
pub struct ViewCache {
    scale: f64,
    cache: MlpCache,
    /// Deep mode: the effective parameters the forward ran with.
    effective: Option<ParamVector>,
    /// Output mode: cached `B h` rows.
    bh: Option<Batch>,
}

/// Forward pass of one view: the backbone evaluated with the branch scaled
/// by `scale`. `scale == 0` takes the plain backbone path and is
/// bit-identical to it.
pub fn eval_view(
    net: &MlpNet,
    backbone: &ParamVector,
    branch: &LoraBranch,
    factors: &ParamVector,
    scale: f64,
    x: &Batch,
    t: &[f64],
    cond: Option<&Batch>,
) -> Result<Batch> {
    Ok(eval_view_cached(net, backbone, branch, factors, scale, x, t, cond)?.0)
}

pub fn eval_view_cached(
    net: &MlpNet,
    backbone: &ParamVector,
    branch: &LoraBranch,
    factors: &ParamVector,
    scale: f64,
    x: &Batch,
    t: &[f64],
    cond: Option<&Batch>,
) -> Result<(Batch, ViewCache)> {
    if scale == 0.0 {
        let (out, cache) = net.forward_cached(backbone, x, t, cond)?;
        return Ok((
            out,
            ViewCache {
                scale,
                cache,
                effective: None,
                bh: None,
            },
        ));
    }
    match branch.mode {
        LoraMode::Output => {
            let (mut out, cache) = net.forward_cached(backbone, x, t, cond)?;
            let hidden = cache.layer_input(net.n_layers() - 1);
            let (z, bh) = branch.output_branch(factors, hidden);
            for (orow, zrow) in out.iter_mut().zip(&z) {
                for (ov, &zv) in orow.iter_mut().zip(zrow) {
                    *ov += scale * zv;
                }
            }
            Ok((
                out,
                ViewCache {
                    scale,
                    cache,
                    effective: None,
                    bh: Some(bh),
                },
            ))
        }
        LoraMode::Deep => {
            let eff = branch.compose_effective(backbone, factors, scale);
            let (out, cache) = net.forward_cached(&eff, x, t, cond)?;
            Ok((
                out,
                ViewCache {
                    scale,
                    cache,
                    effective: Some(eff),
                    bh: None,
                },
            ))
        }
    }
}

/// Accumulate d(loss)/d(factors) for a cached view forward into `grads`
/// (which must contain the `lora/...` tensors). The backbone gradient is
/// computed where needed and discarded: the backbone is frozen.
pub fn accumulate_branch_gradient(
    net: &MlpNet,
    branch: &LoraBranch,
    factors: &ParamVector,
    view: &ViewCache,
    upstream: &Batch,
    grads: &mut ParamVector,
) -> Result<()> {
    if view.scale == 0.0 {
        // d(view)/d(factors) vanishes identically at scale 0 only for the
        // output placement; in deep mode the derivative is scale * (...) = 0
        // as well, so there is nothing to accumulate either way.
        return Ok(());
    }
    match branch.mode {
        LoraMode::Output => {
            let (l, dout, din) = branch.targets[0];
            let hidden = view.cache.layer_input(net.n_layers() - 1);
            let bh = view.bh.as_ref().expect("output-mode cache");
            let r = branch.rank;
            let a = factors.tensor(&LoraBranch::a_name(l));
            {
                let da = grads.tensor_mut(&LoraBranch::a_name(l));
                for (urow, mid) in upstream.iter().zip(bh) {
                    for (o, &uo) in urow.iter().enumerate() {
                        for (k, &mk) in mid.iter().enumerate() {
                            da[o * r + k] += view.scale * uo * mk;
                        }
                    }
                }
            }
            let db = grads.tensor_mut(&LoraBranch::b_name(l));
            for (urow, h) in upstream.iter().zip(hidden) {
                // A^T u, then outer with h
                for k in 0..r {
                    let mut atu = 0.0;
                    for o in 0..dout {
                        atu += a[o * r + k] * urow[o];
                    }
                    let row = &mut db[k * din..(k + 1) * din];
                    for (dv, &hv) in row.iter_mut().zip(h) {
                        *dv += view.scale * atu * hv;
                    }
                }
            }
            Ok(())
        }
        LoraMode::Deep => {
            let eff = view.effective.as_ref().expect("deep-mode cache");
            let mut eff_grads = ParamVector::zeros(net.layout().clone());
            net.backward(eff, &view.cache, upstream, Some(&mut eff_grads), false)?;
            let r = branch.rank;
            for &(l, dout, din) in &branch.targets {
                let dw = eff_grads.tensor(&format!("layer{l}/w")).to_vec();
                let a = factors.tensor(&LoraBranch::a_name(l)).to_vec();
                let b = factors.tensor(&LoraBranch::b_name(l)).to_vec();
                {
                    let da = grads.tensor_mut(&LoraBranch::a_name(l));
                    for o in 0..dout {
                        for k in 0..r {
                            let mut acc = 0.0;
                            for i in 0..din {
                                acc += dw[o * din + i] * b[k * din + i];
                            }
                            da[o * r + k] += view.scale * acc;
                        }
                    }
                }
                let dbt = grads.tensor_mut(&LoraBranch::b_name(l));
                for k in 0..r {
                    for i in 0..din {
                        let mut acc = 0.0;
                        for o in 0..dout {
                            acc += a[o * r + k] * dw[o * din + i];
                        }
                        dbt[k * din + i] += view.scale * acc;
                    }
                }
            }
            Ok(())
        }
    }
}

/// Unconstrained minimizer of the branch-fitting objective: the ideal
/// branch output is `residual / alpha_strong` elementwise, where the
/// residual is the gap between the ideal and current generator outputs.
pub fn optimal_branch_oracle(residual: &Batch, alpha_strong: f64) -> Result<Batch> {
    if alpha_strong == 0.0 {
        return Err(Error::Domain("optimal_branch_oracle: alpha_strong must be nonzero".into()));
    }
    Ok(residual
        .iter()
        .map(|row| row.iter().map(|&v| v / alpha_strong).collect())
        .collect())
}
