//! Central finite-difference gradient checking.

use rand::Rng;

use super::params::ParamVector;

/// Compare the analytic gradient of `loss` against central finite
/// differences on up to `probes` randomly chosen coordinates and return
/// the maximum relative error
/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
///
/// The closure must be deterministic: any sampled quantities inside the
/// loss have to be frozen before building the closure.
pub fn grad_check<F>(loss: &F, params: &ParamVector, probes: usize, h: f64, rng: &mut impl Rng) -> f64
where
    F: Fn(&ParamVector) -> (f64, ParamVector),
{
    let (_, analytic) = loss(params);
    let n = params.len();
    let indices: Vec<usize> = if probes >= n {
        (0..n).collect()
    } else {
        rand::seq::index::sample(rng, n, probes).into_vec()
    };
    let mut max_err = 0.0f64;
    let mut probe = params.clone();
    for idx in indices {
        let base = params.values()[idx];
        probe.values_mut()[idx] = base + h;
        let (lp, _) = loss(&probe);
        probe.values_mut()[idx] = base - h;
        let (lm, _) = loss(&probe);
        probe.values_mut()[idx] = base;
        let numeric = (lp - lm) / (2.0 * h);
        let a = analytic.values()[idx];
        let err = (a - numeric).abs() / (1e-8f64).max(a.abs() + numeric.abs());
        if err > max_err {
            max_err = err;
        }
    }
    max_err
}
