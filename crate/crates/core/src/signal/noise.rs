use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dynamics::Trajectory;
use crate::error::{Error, Result};
use crate::rng::substream;

/// Additive Gaussian noise scaled per channel by the clean channel's
/// standard deviation over the whole trajectory.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub level: f64,
    pub seed: u64,
}

fn std_dev(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// `x ← x + level·σ_x·ε` for every state channel; controls are untouched.
pub fn add_noise(traj: &Trajectory, spec: &NoiseSpec) -> Result<Trajectory> {
    if !(spec.level >= 0.0 && spec.level.is_finite()) {
        return Err(Error::config(format!("noise level must be ≥ 0, got {}", spec.level)));
    }
    let mut out = traj.clone();
    if spec.level == 0.0 || traj.is_empty() {
        return Ok(out);
    }
    let l = traj.n_states();
    for j in 0..l {
        let channel = traj.channel(j);
        let scale = spec.level * std_dev(&channel);
        let mut rng = substream(spec.seed, &format!("noise/{j}"));
        for (i, v) in channel.iter().enumerate() {
            let e: f64 = StandardNormal.sample(&mut rng);
            out.states.set(i, j, v + scale * e);
        }
    }
    out.provenance
        .extra
        .insert("noise_level".into(), serde_json::json!(spec.level));
    out.provenance
        .extra
        .insert("noise_seed".into(), serde_json::json!(spec.seed));
    Ok(out)
}
