use w2sd_core::checkpoint;
use w2sd_core::data::DatasetKind;
use w2sd_core::numerics::{Activation, MlpNet};
use w2sd_core::rng::derive_rng;
use w2sd_core::scheduler::{few_step_sample, TimestepSchedule};

fn main() {
    let path = std::env::args().nth(1).unwrap();
    let net = MlpNet::new(2, &[64, 64], 8, 0, Activation::Silu).unwrap();
    let tensors = checkpoint::load(std::path::Path::new(&path)).unwrap();
    let prefix = if checkpoint::has_prefix(&tensors, "gen/") { "gen/" } else { "pre/" };
    let params = checkpoint::params_from_tensors(prefix, net.layout(), &tensors).unwrap();
    let schedule = TimestepSchedule::four_step_default();
    let mut rng = derive_rng(999, "diag", 0);
    let samples = few_step_sample(&net, &params, &schedule, 8192, &mut rng, None).unwrap();
    let centers = DatasetKind::mixture_centers();
    let mut counts = vec![0usize; 8];
    let mut sums = vec![[0.0f64; 2]; 8];
    let mut sq = vec![0.0f64; 8];
    for s in &samples {
        let (mut bi, mut bd) = (0, f64::INFINITY);
        for (k, c) in centers.iter().enumerate() {
            let d = (s[0] - c[0]).powi(2) + (s[1] - c[1]).powi(2);
            if d < bd { bd = d; bi = k; }
        }
        counts[bi] += 1;
        sums[bi][0] += s[0]; sums[bi][1] += s[1];
    }
    let means: Vec<[f64;2]> = (0..8).map(|k| [sums[k][0]/counts[k] as f64, sums[k][1]/counts[k] as f64]).collect();
    for s in &samples {
        let (mut bi, mut bd) = (0, f64::INFINITY);
        for (k, c) in centers.iter().enumerate() {
            let d = (s[0] - c[0]).powi(2) + (s[1] - c[1]).powi(2);
            if d < bd { bd = d; bi = k; }
        }
        sq[bi] += (s[0]-means[bi][0]).powi(2) + (s[1]-means[bi][1]).powi(2);
    }
    println!("count balance (expect 1024 each): {counts:?}");
    for k in 0..8 {
        let off = ((means[k][0]-centers[k][0]).powi(2) + (means[k][1]-centers[k][1]).powi(2)).sqrt();
        let std = (sq[k] / (2.0 * counts[k] as f64)).sqrt();
        println!("mode {k}: count={} offset={off:.4} std={std:.4} (target std 0.05)", counts[k]);
    }
}
