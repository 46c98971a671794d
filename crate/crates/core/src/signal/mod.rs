//! Everything between raw trajectories and training samples: noise
//! injection, derivative estimation, re-integration and windowing.

mod diff;
mod noise;
mod tv;
mod windows;

pub use diff::{central_difference, central_difference_nonuniform, cumtrapz, differentiate_series, is_uniform};
pub use noise::{add_noise, NoiseSpec};
pub use tv::{tv_differentiate, TvOptions, TvResult};
pub use windows::{make_windows, prefix_windows, Window, WindowMode};

use crate::dynamics::Trajectory;
use crate::error::Result;
use crate::tensor::Tensor;

/// TV-differentiates each state channel, then re-integrates the derivative
/// from the first sample: returns `(denoised states, derivatives)`.
pub fn denoise_tv(traj: &Trajectory, opts: &TvOptions) -> Result<(Tensor, Tensor)> {
    let (n, l) = (traj.len(), traj.n_states());
    let mut states = Tensor::zeros(&[n, l]);
    let mut derivs = Tensor::zeros(&[n, l]);
    for j in 0..l {
        let values = traj.channel(j);
        let tv = tv_differentiate(&values, &traj.times, opts)?;
        let integrated = cumtrapz(&tv.derivative, &traj.times, values[0])?;
        for i in 0..n {
            states.set(i, j, integrated[i]);
            derivs.set(i, j, tv.derivative[i]);
        }
    }
    Ok((states, derivs))
}
