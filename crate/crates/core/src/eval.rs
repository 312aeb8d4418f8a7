//! Two-sample metrics and the collapse monitor.
//!
//! Sliced 2-Wasserstein (random 1-D projections, exact 1-D transport) and
//! an unbiased RBF-kernel MMD^2 stand in for perceptual video metrics at
//! desk scale. The collapse monitor turns "training collapse" into a
//! quantitative event: a sustained blow-up of the Wasserstein trace over
//! its best value so far.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, DatasetKind, MIXTURE_STD};
use crate::error::{Error, Result};
use crate::numerics::{MlpNet, ParamVector};
use crate::rng::derive_rng;
use crate::scheduler::{euler_sample, few_step_sample, TimestepSchedule};
use crate::Batch;

/// Thread cap for metric evaluation, from `W2SD_THREADS` (default 1).
pub fn thread_cap() -> usize {
    std::env::var("W2SD_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

/// Map `f` over `0..n`, chunked over up to `thread_cap()` scoped threads.
/// Results are collected in index order, so the output (and any float
/// reduction over it) is independent of the thread count.
fn par_map<T: Send, F: Fn(usize) -> T + Sync>(n: usize, f: F) -> Vec<T> {
    let threads = thread_cap().min(n.max(1));
    if threads <= 1 {
        return (0..n).map(f).collect();
    }
    let chunk = n.div_ceil(threads);
    let mut out: Vec<Option<T>> = (0..n).map(|_| None).collect();
    std::thread::scope(|scope| {
        for (c, slot) in out.chunks_mut(chunk).enumerate() {
            let f = &f;
            scope.spawn(move || {
                for (j, s) in slot.iter_mut().enumerate() {
                    *s = Some(f(c * chunk + j));
                }
            });
        }
    });
    out.into_iter().map(|v| v.expect("filled")).collect()
}

/// Exact 1-D quadratic Wasserstein distance between empirical
/// distributions (quantile-function integration; sizes may differ).
fn w2_1d(mut a: Vec<f64>, mut b: Vec<f64>) -> f64 {
    a.sort_by(|x, y| x.partial_cmp(y).unwrap());
    b.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let (n, m) = (a.len(), b.len());
    if n == m {
        let s: f64 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum();
        return (s / n as f64).sqrt();
    }
    // merge the quantile breakpoints of both samples
    let mut cuts: Vec<f64> = Vec::with_capacity(n + m + 1);
    cuts.extend((1..n).map(|i| i as f64 / n as f64));
    cuts.extend((1..m).map(|j| j as f64 / m as f64));
    cuts.push(0.0);
    cuts.push(1.0);
    cuts.sort_by(|x, y| x.partial_cmp(y).unwrap());
    cuts.dedup();
    let mut acc = 0.0;
    for w in cuts.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        if hi <= lo {
            continue;
        }
        let mid = 0.5 * (lo + hi);
        let qa = a[((mid * n as f64) as usize).min(n - 1)];
        let qb = b[((mid * m as f64) as usize).min(m - 1)];
        acc += (qa - qb) * (qa - qb) * (hi - lo);
    }
    acc.sqrt()
}

/// Sliced 2-Wasserstein estimate: mean over `n_projections` random unit
/// directions of the exact 1-D W2 between the projected samples.
pub fn sliced_w2(a: &Batch, b: &Batch, n_projections: usize, rng: &mut impl Rng) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Domain("sliced_w2: empty sample set".into()));
    }
    let d = a[0].len();
    if b[0].len() != d {
        return Err(Error::Domain(format!(
            "sliced_w2: dimension mismatch ({} vs {})",
            d,
            b[0].len()
        )));
    }
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(n_projections);
    for _ in 0..n_projections {
        loop {
            let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                dirs.push(v.into_iter().map(|x| x / norm).collect());
                break;
            }
        }
    }
    let per_dir = par_map(n_projections, |p| {
        let u = &dirs[p];
        let pa: Vec<f64> = a.iter().map(|row| dot(row, u)).collect();
        let pb: Vec<f64> = b.iter().map(|row| dot(row, u)).collect();
        w2_1d(pa, pb)
    });
    Ok(per_dir.iter().sum::<f64>() / n_projections as f64)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Unbiased MMD^2 with Gaussian kernel `exp(-||x - y||^2 / (2 h^2))`.
/// The unbiased estimator excludes the diagonal, so it can be negative.
pub fn rbf_mmd2(a: &Batch, b: &Batch, bandwidth: f64) -> Result<f64> {
    if bandwidth <= 0.0 {
        return Err(Error::Domain("rbf_mmd2: bandwidth must be positive".into()));
    }
    let (n, m) = (a.len(), b.len());
    if n < 2 || m < 2 {
        return Err(Error::Domain("rbf_mmd2: need at least two samples per set".into()));
    }
    let g = 1.0 / (2.0 * bandwidth * bandwidth);
    let kaa: f64 = par_map(n, |i| {
        let mut s = 0.0;
        for j in 0..n {
            if j != i {
                s += (-g * sq_dist(&a[i], &a[j])).exp();
            }
        }
        s
    })
    .iter()
    .sum();
    let kbb: f64 = par_map(m, |i| {
        let mut s = 0.0;
        for j in 0..m {
            if j != i {
                s += (-g * sq_dist(&b[i], &b[j])).exp();
            }
        }
        s
    })
    .iter()
    .sum();
    let kab: f64 = par_map(n, |i| {
        let mut s = 0.0;
        for bj in b {
            s += (-g * sq_dist(&a[i], bj)).exp();
        }
        s
    })
    .iter()
    .sum();
    Ok(kaa / (n * (n - 1)) as f64 + kbb / (m * (m - 1)) as f64 - 2.0 * kab / (n * m) as f64)
}

/// Median pairwise distance of `xs` (the bandwidth heuristic, computed on
/// the ground-truth set only so the kernel does not drift with the
/// generator). Falls back to 1.0 when all points coincide.
pub fn median_pairwise_distance(xs: &Batch) -> f64 {
    let n = xs.len();
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            dists.push(sq_dist(&xs[i], &xs[j]).sqrt());
        }
    }
    if dists.is_empty() {
        return 1.0;
    }
    let mid = dists.len() / 2;
    dists.select_nth_unstable_by(mid, |a, b| a.partial_cmp(b).unwrap());
    let med = dists[mid];
    if med > 0.0 {
        med
    } else {
        1.0
    }
}

/// Two-sample summary replacing FID/FVD at desk scale. `mmd` is the
/// unbiased estimate clamped to zero from below (the raw estimator may
/// legitimately dip below zero; anything under -1e-9 still reports as 0
/// but is preserved in `mmd_raw`).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricReport {
    pub w2: f64,
    pub mmd: f64,
    pub mmd_raw: f64,
    pub mode_coverage: f64,
    pub mean_err: Vec<f64>,
    pub std_err: Vec<f64>,
    pub n_samples: usize,
}

/// Fraction of the mixture modes hit by `samples` (a mode counts as
/// covered when some sample lies within 3 component standard deviations
/// of its center). Datasets without discrete modes report 1.0.
pub fn mode_coverage(kind: &DatasetKind, samples: &Batch) -> f64 {
    match kind {
        DatasetKind::GaussianMixture8 => {
            let centers = DatasetKind::mixture_centers();
            let mut covered = vec![false; centers.len()];
            for s in samples {
                let mut best = (f64::INFINITY, 0usize);
                for (k, c) in centers.iter().enumerate() {
                    let d = sq_dist(s, c).sqrt();
                    if d < best.0 {
                        best = (d, k);
                    }
                }
                if best.0 <= 3.0 * MIXTURE_STD {
                    covered[best.1] = true;
                }
            }
            covered.iter().filter(|&&c| c).count() as f64 / centers.len() as f64
        }
        _ => 1.0,
    }
}

fn marginal_stats(xs: &Batch) -> (Vec<f64>, Vec<f64>) {
    let d = xs[0].len();
    let n = xs.len() as f64;
    let mut mean = vec![0.0; d];
    for row in xs {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v / n;
        }
    }
    let mut var = vec![0.0; d];
    for row in xs {
        for j in 0..d {
            let r = row[j] - mean[j];
            var[j] += r * r / n;
        }
    }
    (mean, var.into_iter().map(f64::sqrt).collect())
}

/// Assemble the full report for a generated set against a ground-truth
/// set. The MMD bandwidth is the median heuristic on the ground truth.
pub fn compute_report(
    kind: &DatasetKind,
    generated: &Batch,
    ground_truth: &Batch,
    n_projections: usize,
    rng: &mut impl Rng,
) -> Result<MetricReport> {
    let w2 = sliced_w2(generated, ground_truth, n_projections, rng)?;
    let bw = median_pairwise_distance(ground_truth);
    let mmd_raw = rbf_mmd2(generated, ground_truth, bw)?;
    let (gm, gs) = marginal_stats(generated);
    let (tm, ts) = marginal_stats(ground_truth);
    Ok(MetricReport {
        w2,
        mmd: mmd_raw.max(0.0),
        mmd_raw,
        mode_coverage: mode_coverage(kind, generated),
        mean_err: gm.iter().zip(&tm).map(|(a, b)| (a - b).abs()).collect(),
        std_err: gs.iter().zip(&ts).map(|(a, b)| (a - b).abs()).collect(),
        n_samples: generated.len(),
    })
}

/// How `evaluate_generator` turns a checkpointed net into samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMethod {
    /// Deterministic Euler integration (teacher-style sampling).
    Euler,
    /// Stochastic denoise/renoise few-step sampling (student-style).
    FewStep,
}

/// Draw `count` generated and ground-truth samples with seed-derived
/// streams and compute the metric report. The ground-truth stream is
/// disjoint from any training stream by tag.
pub fn evaluate_generator(
    net: &MlpNet,
    params: &ParamVector,
    method: SampleMethod,
    schedule: &TimestepSchedule,
    dataset: &Dataset,
    count: usize,
    n_projections: usize,
    seed: u64,
) -> Result<MetricReport> {
    let mut data_rng = derive_rng(seed, "eval-data", 0);
    let (gt, cond) = crate::data::sample_batch(dataset, count, &mut data_rng);
    let mut gen_rng = derive_rng(seed, "eval-gen", 0);
    let generated = match method {
        SampleMethod::Euler => {
            let eps: Batch = (0..count)
                .map(|_| (0..net.data_dim()).map(|_| gen_rng.sample(StandardNormal)).collect())
                .collect();
            euler_sample(net, params, schedule, &eps, cond.as_ref())?
        }
        SampleMethod::FewStep => few_step_sample(net, params, schedule, count, &mut gen_rng, cond.as_ref())?,
    };
    let mut proj_rng = derive_rng(seed, "eval-proj", 0);
    compute_report(&dataset.kind, &generated, &gt, n_projections, &mut proj_rng)
}

/// Fires when the Wasserstein trace exceeds `threshold` times its best
/// value so far for at least `patience` consecutive snapshots.
#[derive(Debug, Clone)]
pub struct CollapseMonitor {
    pub threshold: f64,
    pub patience: usize,
    best: f64,
    consecutive: usize,
    fired: bool,
    tail: Vec<f64>,
}

impl CollapseMonitor {
    pub fn new(threshold: f64, patience: usize) -> Self {
        Self {
            threshold,
            patience,
            best: f64::INFINITY,
            consecutive: 0,
            fired: false,
            tail: Vec::new(),
        }
    }

    /// Feed one snapshot; returns true when the monitor has fired.
    pub fn observe(&mut self, w2: f64) -> bool {
        self.tail.push(w2);
        if self.tail.len() > 32 {
            self.tail.remove(0);
        }
        if w2 < self.best {
            self.best = w2;
        }
        if w2 > self.best * self.threshold {
            self.consecutive += 1;
            if self.consecutive >= self.patience {
                self.fired = true;
            }
        } else {
            self.consecutive = 0;
        }
        self.fired
    }

    pub fn fired(&self) -> bool {
        self.fired
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    /// Recent snapshots, for the diagnostic dump on a fatal abort.
    pub fn tail(&self) -> &[f64] {
        &self.tail
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;

    fn gaussian_set(rng: &mut impl Rng, n: usize, d: usize, mean: f64) -> Batch {
        (0..n)
            .map(|_| (0..d).map(|_| rng.sample::<f64, _>(StandardNormal) + mean).collect())
            .collect()
    }

    #[test]
    fn identical_multisets_have_zero_w2() {
        let mut rng = derive_rng(1, "eval", 0);
        let a = gaussian_set(&mut rng, 50, 3, 0.0);
        let w = sliced_w2(&a, &a.clone(), 16, &mut rng).unwrap();
        assert_eq!(w, 0.0);
    }

    #[test]
    fn point_masses_in_1d_give_the_gap() {
        let a = vec![vec![0.0]; 10];
        let b = vec![vec![3.0]; 10];
        let mut rng = derive_rng(2, "eval", 0);
        let w = sliced_w2(&a, &b, 8, &mut rng).unwrap();
        assert!((w - 3.0).abs() < 1e-12, "w = {w}");
    }

    #[test]
    fn shifted_gaussians_match_closed_form() {
        // W2(N(0,1), N(2,1)) = 2 in 1-D
        let mut rng = derive_rng(3, "eval", 0);
        let a = gaussian_set(&mut rng, 100_000, 1, 0.0);
        let b = gaussian_set(&mut rng, 100_000, 1, 2.0);
        let w = sliced_w2(&a, &b, 4, &mut rng).unwrap();
        assert!((w - 2.0).abs() < 0.05, "w = {w}");
    }

    #[test]
    fn w2_handles_unequal_sizes() {
        // point masses again, but with different sample counts
        let a = vec![vec![0.0]; 7];
        let b = vec![vec![3.0]; 13];
        let mut rng = derive_rng(4, "eval", 0);
        let w = sliced_w2(&a, &b, 4, &mut rng).unwrap();
        assert!((w - 3.0).abs() < 1e-12);
    }

    #[test]
    fn constant_shift_strictly_increases_w2() {
        let mut rng = derive_rng(5, "eval", 0);
        let gt = gaussian_set(&mut rng, 2000, 2, 0.0);
        let gen = gaussian_set(&mut rng, 2000, 2, 0.0);
        let mut base_rng = derive_rng(6, "eval-proj", 0);
        let base = sliced_w2(&gen, &gt, 64, &mut base_rng).unwrap();
        let mut prev = base;
        for c in [0.5, 1.0] {
            let shifted: Batch = gen
                .iter()
                .map(|r| r.iter().map(|&v| v + c).collect())
                .collect();
            let mut rng_c = derive_rng(6, "eval-proj", 0);
            let w = sliced_w2(&shifted, &gt, 64, &mut rng_c).unwrap();
            assert!(w > prev, "shift {c}: {w} <= {prev}");
            prev = w;
        }
    }

    #[test]
    fn mmd_of_identical_sets_is_nonpositive_and_clamps_to_zero() {
        let mut rng = derive_rng(7, "eval", 0);
        let a = gaussian_set(&mut rng, 64, 2, 0.0);
        let raw = rbf_mmd2(&a, &a.clone(), 1.0).unwrap();
        assert!(raw <= 0.0, "raw = {raw}");
        assert_eq!(raw.max(0.0), 0.0);
    }

    #[test]
    fn distant_point_masses_approach_two() {
        let a = vec![vec![0.0]; 50];
        let b = vec![vec![1e6]; 50];
        let m = rbf_mmd2(&a, &b, 1.0).unwrap();
        assert!((m - 2.0).abs() < 1e-9, "mmd2 = {m}");
    }

    #[test]
    fn same_distribution_split_is_within_permutation_noise() {
        let mut rng = derive_rng(8, "eval", 0);
        let pool = gaussian_set(&mut rng, 1000, 2, 0.0);
        let (a, b) = pool.split_at(500);
        let bw = median_pairwise_distance(&a.to_vec());
        let observed = rbf_mmd2(&a.to_vec(), &b.to_vec(), bw).unwrap();
        // permutation calibration of the null scale
        let mut perms = Vec::new();
        let mut shuffled = pool.clone();
        for _ in 0..50 {
            for i in (1..shuffled.len()).rev() {
                let j = rng.gen_range(0..=i);
                shuffled.swap(i, j);
            }
            let (pa, pb) = shuffled.split_at(500);
            perms.push(rbf_mmd2(&pa.to_vec(), &pb.to_vec(), bw).unwrap());
        }
        let mean: f64 = perms.iter().sum::<f64>() / perms.len() as f64;
        let sd = (perms.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / perms.len() as f64).sqrt();
        assert!(
            observed.abs() <= 3.0 * sd.max(1e-12),
            "mmd {observed} exceeds 3 x permutation sd {sd}"
        );
    }

    #[test]
    fn coverage_counts_modes_within_three_sigma() {
        let centers = DatasetKind::mixture_centers();
        // hit 6 of 8 modes exactly
        let samples: Batch = centers[..6].iter().map(|c| vec![c[0], c[1]]).collect();
        let cov = mode_coverage(&DatasetKind::GaussianMixture8, &samples);
        assert!((cov - 0.75).abs() < 1e-12);
        // far-away points cover nothing
        let off = vec![vec![10.0, 10.0]];
        assert_eq!(mode_coverage(&DatasetKind::GaussianMixture8, &off), 0.0);
    }

    #[test]
    fn collapse_monitor_ignores_improving_traces() {
        let mut m = CollapseMonitor::new(2.0, 3);
        for i in 0..100 {
            let w2 = 1.0 / (1.0 + i as f64);
            assert!(!m.observe(w2));
        }
        assert!(!m.fired());
    }

    #[test]
    fn collapse_monitor_fires_on_sustained_doubling() {
        let mut m = CollapseMonitor::new(2.0, 3);
        for _ in 0..5 {
            m.observe(0.1);
        }
        assert!(!m.fired());
        m.observe(0.25);
        m.observe(0.25);
        assert!(!m.fired());
        m.observe(0.25);
        assert!(m.fired());
    }

    #[test]
    fn report_fields_are_finite_for_untrained_net() {
        use crate::data::ConditionSpec;
        use crate::numerics::Activation;
        let net = MlpNet::new(2, &[8], 4, 0, Activation::Silu).unwrap();
        let params = net.init_params(77);
        let ds = Dataset::new(DatasetKind::GaussianMixture8, 1024, 3, ConditionSpec::Unconditional).unwrap();
        let schedule = TimestepSchedule::four_step_default();
        let r = evaluate_generator(&net, &params, SampleMethod::FewStep, &schedule, &ds, 256, 32, 9).unwrap();
        assert!(r.w2.is_finite() && r.mmd.is_finite());
        assert!((0.0..=1.0).contains(&r.mode_coverage));
        assert!(r.mean_err.iter().chain(&r.std_err).all(|v| v.is_finite()));
        assert!(r.mmd >= 0.0);
    }
}
