//! Deterministic synthetic datasets.
//!
//! Three families stand in for the training corpus: an 8-component
//! Gaussian ring, a checkerboard, and `MovingDot`, a toy video of T frames
//! whose single lit pixel follows a seeded linear trajectory (flattened to
//! `T*H*W` dimensions). Every sample is a pure function of
//! `(kind, seed, index)`, so iteration order and batch contents reproduce
//! exactly across runs.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numerics::{MlpNet, ParamVector};
use crate::rng::derive_rng;
use crate::scheduler::{few_step_sample_with, TimestepSchedule};
use crate::Batch;

pub const MIXTURE_RADIUS: f64 = 1.0;
pub const MIXTURE_STD: f64 = 0.05;
pub const MIXTURE_MODES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    /// 8 Gaussians on a radius-1 ring, component std 0.05, D = 2.
    GaussianMixture8,
    /// Checkerboard over [-2, 2]^2, D = 2.
    Checkerboard,
    /// T x (H x W) video with one moving pixel, flattened.
    MovingDot { frames: usize, height: usize, width: usize },
}

impl DatasetKind {
    pub fn moving_dot_default() -> Self {
        DatasetKind::MovingDot {
            frames: 4,
            height: 8,
            width: 8,
        }
    }

    pub fn dim(&self) -> usize {
        match *self {
            DatasetKind::GaussianMixture8 | DatasetKind::Checkerboard => 2,
            DatasetKind::MovingDot { frames, height, width } => frames * height * width,
        }
    }

    /// Centers of the mixture components (for mode-coverage accounting).
    pub fn mixture_centers() -> Vec<[f64; 2]> {
        (0..MIXTURE_MODES)
            .map(|k| {
                let ang = 2.0 * std::f64::consts::PI * k as f64 / MIXTURE_MODES as f64;
                [MIXTURE_RADIUS * ang.cos(), MIXTURE_RADIUS * ang.sin()]
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConditionSpec {
    Unconditional,
    /// Condition vector = frame 0 of the MovingDot sample.
    FirstFrame,
}

impl ConditionSpec {
    pub fn dim(&self, kind: &DatasetKind) -> Result<usize> {
        match self {
            ConditionSpec::Unconditional => Ok(0),
            ConditionSpec::FirstFrame => match *kind {
                DatasetKind::MovingDot { height, width, .. } => Ok(height * width),
                _ => Err(Error::config(
                    "data.condition",
                    "first-frame conditioning needs the moving-dot dataset",
                )),
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub kind: DatasetKind,
    pub size: usize,
    pub seed: u64,
    pub condition: ConditionSpec,
}

impl Dataset {
    pub fn new(kind: DatasetKind, size: usize, seed: u64, condition: ConditionSpec) -> Result<Self> {
        if size == 0 {
            return Err(Error::config("data.size", "dataset size must be positive"));
        }
        condition.dim(&kind)?;
        Ok(Self {
            kind,
            size,
            seed,
            condition,
        })
    }

    pub fn dim(&self) -> usize {
        self.kind.dim()
    }

    pub fn cond_dim(&self) -> usize {
        self.condition.dim(&self.kind).expect("validated at construction")
    }

    /// Sample `index` as a pure function of `(kind, seed, index)`.
    pub fn sample_at(&self, index: usize) -> Vec<f64> {
        let mut rng = derive_rng(self.seed, "sample", index as u64);
        match self.kind {
            DatasetKind::GaussianMixture8 => {
                let centers = DatasetKind::mixture_centers();
                let c = centers[rng.gen_range(0..MIXTURE_MODES)];
                let mut out = Vec::with_capacity(2);
                for center in c {
                    let z: f64 = rng.sample(StandardNormal);
                    // clamp keeps the documented |x| <= 4 bound exact; the
                    // clipped mass is ~1e-700
                    out.push((center + MIXTURE_STD * z).clamp(-4.0, 4.0));
                }
                out
            }
            DatasetKind::Checkerboard => {
                // pick one of the 8 "on" unit cells of a 4x4 board on [-2,2]^2
                let i = rng.gen_range(0..4u32);
                let j_half = rng.gen_range(0..2u32);
                let j = 2 * j_half + (i % 2); // (i + j) even
                let u: f64 = rng.gen_range(0.0..1.0);
                let v: f64 = rng.gen_range(0.0..1.0);
                vec![-2.0 + i as f64 + u, -2.0 + j as f64 + v]
            }
            DatasetKind::MovingDot { frames, height, width } => {
                let r0 = rng.gen_range(0..height) as i64;
                let c0 = rng.gen_range(0..width) as i64;
                let mut dr = 0i64;
                let mut dc = 0i64;
                while dr == 0 && dc == 0 {
                    dr = rng.gen_range(-1..=1);
                    dc = rng.gen_range(-1..=1);
                }
                let mut out = vec![0.0; frames * height * width];
                for f in 0..frames {
                    let r = reflect(r0 + dr * f as i64, height as i64);
                    let c = reflect(c0 + dc * f as i64, width as i64);
                    out[f * height * width + (r as usize) * width + c as usize] = 1.0;
                }
                out
            }
        }
    }

    pub fn condition_of(&self, sample: &[f64]) -> Option<Vec<f64>> {
        match self.condition {
            ConditionSpec::Unconditional => None,
            ConditionSpec::FirstFrame => match self.kind {
                DatasetKind::MovingDot { height, width, .. } => Some(sample[..height * width].to_vec()),
                _ => unreachable!("validated at construction"),
            },
        }
    }
}

/// Reflect an integer coordinate into `[0, n)` (bouncing off the borders).
fn reflect(mut v: i64, n: i64) -> i64 {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    v = v.rem_euclid(period);
    if v >= n {
        period - v
    } else {
        v
    }
}

/// Draw a batch by index: `rng` only selects indices, the samples
/// themselves are pure functions of `(seed, index)`.
pub fn sample_batch(dataset: &Dataset, batch: usize, rng: &mut impl Rng) -> (Batch, Option<Batch>) {
    let mut xs = Vec::with_capacity(batch);
    let mut conds = Vec::with_capacity(batch);
    for _ in 0..batch {
        let idx = rng.gen_range(0..dataset.size);
        let x = dataset.sample_at(idx);
        if let Some(c) = dataset.condition_of(&x) {
            conds.push(c);
        }
        xs.push(x);
    }
    let cond = if conds.is_empty() { None } else { Some(conds) };
    (xs, cond)
}

/// A (noise, sample, condition) triple produced by a frozen few-step
/// generator; the recorded noise is the initial draw of the sampler.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDataPair {
    pub noise: Vec<f64>,
    pub sample: Vec<f64>,
    pub cond: Option<Vec<f64>>,
}

/// Synthesize noise-data pairs online from a frozen few-step generator.
/// Conditions, when the generator is conditional, are drawn from the
/// dataset's own stream.
pub fn synthesize_pairs(
    net: &MlpNet,
    params: &ParamVector,
    schedule: &TimestepSchedule,
    dataset: &Dataset,
    count: usize,
    rng: &mut impl Rng,
) -> Result<Vec<NoiseDataPair>> {
    let mut pairs = Vec::with_capacity(count);
    let chunk = 64usize;
    let mut remaining = count;
    while remaining > 0 {
        let n = remaining.min(chunk);
        let cond: Option<Batch> = if dataset.cond_dim() > 0 {
            let mut rows = Vec::with_capacity(n);
            for _ in 0..n {
                let idx = rng.gen_range(0..dataset.size);
                let x = dataset.sample_at(idx);
                rows.push(dataset.condition_of(&x).expect("conditional dataset"));
            }
            Some(rows)
        } else {
            None
        };
        let (noise, samples) = few_step_sample_with(
            &mut |x: &Batch, t: f64| net.forward(params, x, &vec![t; x.len()], cond.as_ref()),
            schedule,
            net.data_dim(),
            n,
            rng,
        )?;
        for i in 0..n {
            pairs.push(NoiseDataPair {
                noise: noise[i].clone(),
                sample: samples[i].clone(),
                cond: cond.as_ref().map(|c| c[i].clone()),
            });
        }
        remaining -= n;
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Activation;
    use crate::rng::derive_rng;

    #[test]
    fn mixture_mean_is_near_origin() {
        let ds = Dataset::new(DatasetKind::GaussianMixture8, 100_000, 5, ConditionSpec::Unconditional).unwrap();
        let mut mean = [0.0f64; 2];
        for i in 0..ds.size {
            let x = ds.sample_at(i);
            mean[0] += x[0];
            mean[1] += x[1];
        }
        mean[0] /= ds.size as f64;
        mean[1] /= ds.size as f64;
        assert!(mean[0].abs() < 0.02 && mean[1].abs() < 0.02, "mean {mean:?}");
    }

    #[test]
    fn samples_are_bounded() {
        for kind in [
            DatasetKind::GaussianMixture8,
            DatasetKind::Checkerboard,
            DatasetKind::moving_dot_default(),
        ] {
            let ds = Dataset::new(kind, 2000, 9, ConditionSpec::Unconditional).unwrap();
            for i in 0..ds.size {
                for &v in &ds.sample_at(i) {
                    assert!(v.is_finite() && v.abs() <= 4.0);
                }
            }
        }
    }

    #[test]
    fn moving_dot_conserves_mass_per_frame() {
        let kind = DatasetKind::moving_dot_default();
        let ds = Dataset::new(kind, 500, 3, ConditionSpec::Unconditional).unwrap();
        for i in 0..ds.size {
            let x = ds.sample_at(i);
            for f in 0..4 {
                let sum: f64 = x[f * 64..(f + 1) * 64].iter().sum();
                assert_eq!(sum, 1.0, "frame {f} of sample {i}");
            }
        }
    }

    #[test]
    fn moving_dot_pixels_in_unit_range() {
        let ds = Dataset::new(DatasetKind::moving_dot_default(), 200, 1, ConditionSpec::Unconditional).unwrap();
        for i in 0..ds.size {
            assert!(ds.sample_at(i).iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn first_frame_condition_equals_frame_zero() {
        let ds = Dataset::new(DatasetKind::moving_dot_default(), 100, 7, ConditionSpec::FirstFrame).unwrap();
        let mut rng = derive_rng(0, "test", 0);
        let (xs, cond) = sample_batch(&ds, 8, &mut rng);
        let cond = cond.unwrap();
        for (x, c) in xs.iter().zip(&cond) {
            assert_eq!(&x[..64], c.as_slice());
        }
    }

    #[test]
    fn first_frame_condition_rejects_2d_datasets() {
        assert!(Dataset::new(DatasetKind::Checkerboard, 10, 0, ConditionSpec::FirstFrame).is_err());
    }

    #[test]
    fn batches_reproduce_for_same_stream() {
        let ds = Dataset::new(DatasetKind::GaussianMixture8, 4096, 11, ConditionSpec::Unconditional).unwrap();
        let (a, _) = sample_batch(&ds, 32, &mut derive_rng(2, "batch", 0));
        let (b, _) = sample_batch(&ds, 32, &mut derive_rng(2, "batch", 0));
        assert_eq!(a, b);
    }

    #[test]
    fn checkerboard_cells_alternate() {
        let ds = Dataset::new(DatasetKind::Checkerboard, 5000, 13, ConditionSpec::Unconditional).unwrap();
        for i in 0..ds.size {
            let x = ds.sample_at(i);
            let ci = (x[0] + 2.0).floor() as i64;
            let cj = (x[1] + 2.0).floor() as i64;
            assert_eq!((ci + cj) % 2, 0, "sample {x:?} in off cell");
        }
    }

    #[test]
    fn synthesized_pairs_reproduce_and_count() {
        let net = MlpNet::new(2, &[4], 4, 0, Activation::Silu).unwrap();
        let params = net.init_params(19);
        let schedule = TimestepSchedule::four_step_default();
        let ds = Dataset::new(DatasetKind::GaussianMixture8, 128, 23, ConditionSpec::Unconditional).unwrap();
        let a = synthesize_pairs(&net, &params, &schedule, &ds, 100, &mut derive_rng(3, "pairs", 0)).unwrap();
        let b = synthesize_pairs(&net, &params, &schedule, &ds, 100, &mut derive_rng(3, "pairs", 0)).unwrap();
        assert_eq!(a.len(), 100);
        assert_eq!(a, b);
    }
}
