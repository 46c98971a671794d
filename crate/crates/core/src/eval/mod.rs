//! Forecasting harness (identify, integrate, compare) and metrics.

mod metrics;

use serde::{Deserialize, Serialize};

pub use metrics::{
    inverse_size_weights, mape, percentile, r2, smape, summarize, weighted_r2, MetricSummary, OutlierPolicy, Percentage,
};

use crate::dynamics::{integrate, OdeOptions, Trajectory};
use crate::error::{Error, Result};
use crate::models::SetModel;
use crate::signal::Window;
use crate::sindy::FeatureLibrary;
use crate::tensor::Tensor;
use crate::train::window_features;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastOptions {
    /// A forecast diverges once any |state| exceeds this multiple of the
    /// largest |ground truth| over the horizon.
    pub divergence_factor: f64,
    pub ode: OdeOptions,
}

impl Default for ForecastOptions {
    fn default() -> Self {
        Self {
            divergence_factor: 1e3,
            ode: OdeOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastResult {
    /// Horizon as a multiple of the window width.
    pub multiple: usize,
    /// Times of the compared rows (after the window's last sample).
    pub times: Vec<f64>,
    pub predicted: Option<Tensor>,
    pub truth: Tensor,
    /// Per state channel; `None` where undefined or diverged.
    pub mape: Vec<Option<f64>>,
    pub smape: Vec<Option<f64>>,
    pub diverged: bool,
}

fn interpolate(times: &[f64], values: &[f64], t: f64) -> f64 {
    let i = times.partition_point(|&s| s <= t);
    if i == 0 {
        return values[0];
    }
    if i == times.len() {
        return values[i - 1];
    }
    let w = (t - times[i - 1]) / (times[i] - times[i - 1]);
    values[i - 1] * (1.0 - w) + values[i] * w
}

/// Integrates `ẋ = Θ(x, u) Ξ` from the last sample of `window` over
/// `multiple` window widths and compares with the trajectory.
///
/// `xi` is Ξ flattened row-major (terms × states). Controls are linearly
/// interpolated from the trajectory. If the state leaves the divergence
/// bound or the integrator fails, the result is flagged and has no
/// metrics.
pub fn forecast(
    xi: &[f64],
    lib: &FeatureLibrary,
    traj: &Trajectory,
    window: &Window,
    multiple: usize,
    opts: &ForecastOptions,
) -> Result<ForecastResult> {
    let l = traj.n_states();
    if lib.n_states != l || lib.n_controls() != traj.n_controls() {
        return Err(Error::config("library channels do not match the trajectory"));
    }
    if xi.len() != lib.len() * l {
        return Err(Error::config(format!(
            "{} coefficients for {} terms × {l} states",
            xi.len(),
            lib.len()
        )));
    }
    if multiple == 0 || window.len == 0 {
        return Err(Error::usage("forecast horizon must be positive"));
    }
    let start = window.end() - 1;
    let end = start + multiple * window.len;
    if end >= traj.len() {
        return Err(Error::usage(format!(
            "horizon reaches row {end} of a {}-row trajectory",
            traj.len()
        )));
    }
    let grid = &traj.times[start..=end];
    let truth = traj.slice(start + 1, end + 1)?.states;
    let scale = truth.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let controls: Vec<Vec<f64>> = (0..traj.n_controls())
        .map(|j| traj.control_channel(j).unwrap())
        .collect();
    let mut row = vec![0.0; l + controls.len()];
    let rhs = |t: f64, s: &[f64], ds: &mut [f64]| {
        row[..l].copy_from_slice(s);
        for (j, c) in controls.iter().enumerate() {
            row[l + j] = interpolate(&traj.times, c, t);
        }
        ds.iter_mut().for_each(|d| *d = 0.0);
        for (k, term) in lib.terms.iter().enumerate() {
            let theta = term.eval(&row);
            for (j, d) in ds.iter_mut().enumerate() {
                *d += theta * xi[k * l + j];
            }
        }
    };
    let ode = OdeOptions {
        bound: Some(opts.divergence_factor * scale.max(f64::MIN_POSITIVE)),
        ..opts.ode
    };
    let times = grid[1..].to_vec();
    let diverged = |truth: Tensor| ForecastResult {
        multiple,
        times: times.clone(),
        predicted: None,
        truth,
        mape: vec![None; l],
        smape: vec![None; l],
        diverged: true,
    };
    let rows = match integrate(rhs, traj.states.row_slice(start), grid, &ode) {
        Ok((rows, _)) => rows,
        Err(Error::Divergence { .. }) | Err(Error::Numeric(_)) => return Ok(diverged(truth)),
        Err(e) => return Err(e),
    };
    let predicted = Tensor::from_rows(&rows[1..])?;
    if !predicted.is_finite() {
        return Ok(diverged(truth));
    }
    let column = |t: &Tensor, j: usize| -> Vec<f64> { (0..t.rows()).map(|i| t.get(i, j)).collect() };
    let (mut m, mut s) = (Vec::with_capacity(l), Vec::with_capacity(l));
    for j in 0..l {
        let (p, t) = (column(&predicted, j), column(&truth, j));
        m.push(mape(&p, &t).ok().map(|v| v.value));
        s.push(smape(&p, &t).ok().map(|v| v.value));
    }
    Ok(ForecastResult {
        multiple,
        times,
        predicted: Some(predicted),
        truth,
        mape: m,
        smape: s,
        diverged: false,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorMetric {
    Mape,
    Smape,
}

impl ErrorMetric {
    /// Outlier removal applies to MAPE only; sMAPE is bounded and kept whole.
    pub fn default_policy(self) -> OutlierPolicy {
        match self {
            ErrorMetric::Mape => OutlierPolicy::LogZScore { threshold: 3.0 },
            ErrorMetric::Smape => OutlierPolicy::Keep,
        }
    }
}

/// Summary of one channel's errors over many forecasts. Diverged forecasts
/// count toward the divergence rate; forecasts whose metric is undefined
/// (e.g. all-zero truth) are left out.
pub fn summarize_forecasts(
    results: &[ForecastResult],
    metric: ErrorMetric,
    channel: usize,
    policy: OutlierPolicy,
) -> Result<MetricSummary> {
    let values: Vec<Option<f64>> = results
        .iter()
        .filter_map(|r| {
            if r.diverged {
                return Some(None);
            }
            let v = match metric {
                ErrorMetric::Mape => r.mape.get(channel).copied().flatten(),
                ErrorMetric::Smape => r.smape.get(channel).copied().flatten(),
            };
            v.map(Some)
        })
        .collect();
    summarize(&values, policy)
}

/// Predicts Ξ for the next sub-domain from `window` with a local model and
/// forecasts with it.
pub fn forecast_with_model(
    model: &SetModel,
    lib: &FeatureLibrary,
    traj: &Trajectory,
    window: &Window,
    multiple: usize,
    opts: &ForecastOptions,
) -> Result<ForecastResult> {
    let xi = model.predict(&window_features(traj, window)?)?;
    forecast(&xi, lib, traj, window, multiple, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{simulate_lotka_volterra, uniform_grid, Control, LotkaVolterraParams};
    use crate::signal::{make_windows, WindowMode};
    use crate::sindy::{identify_local, DerivativeMethod, Stlsq, StlsqConfig};

    // Periodic orbit (δ and γ swapped relative to the default rates, whose
    // prey collapses to the integrator floor and makes relative errors
    // meaningless).
    fn lv() -> (Trajectory, FeatureLibrary) {
        let p = LotkaVolterraParams::new(0.5, 0.025, 0.005, 0.5, Control::Constant(0.0));
        let tr = simulate_lotka_volterra(&p, 27.5, 10.0, &uniform_grid(0.0, 0.1, 301), &OdeOptions::default()).unwrap();
        (tr, FeatureLibrary::polynomial(&["x", "y"], &["c"], 3))
    }

    /// Ξ of the simulated system: ẋ = 0.5x − 0.025xy, ẏ = 0.005xy − 0.5y + c.
    fn true_xi(lib: &FeatureLibrary) -> Vec<f64> {
        let mut xi = vec![0.0; lib.len() * 2];
        let mut set = |name: &str, j: usize, v: f64| xi[lib.index_of(name).unwrap() * 2 + j] = v;
        set("x", 0, 0.5);
        set("x y", 0, -0.025);
        set("x y", 1, 0.005);
        set("y", 1, -0.5);
        set("c", 1, 1.0);
        xi
    }

    #[test]
    fn true_coefficients_forecast_within_integrator_accuracy() {
        let (tr, lib) = lv();
        let xi = true_xi(&lib);
        for w in make_windows(0, tr.len(), 10, WindowMode::Fixed, 10).iter().take(25) {
            let r = forecast(&xi, &lib, &tr, w, 1, &ForecastOptions::default()).unwrap();
            assert!(!r.diverged);
            for m in r.mape.iter().flatten() {
                assert!(*m < 0.5, "{m}");
            }
        }
    }

    /// Labels fitted on overdetermined windows reproduce the window they
    /// were fitted on.
    #[test]
    fn label_oracle_forecast() {
        let (tr, lib) = lv();
        let reg = Stlsq(StlsqConfig {
            threshold: 1e-3,
            ..Default::default()
        });
        let windows = make_windows(0, tr.len(), 40, WindowMode::Fixed, 40);
        let mut worst = 0.0f64;
        for pair in windows.windows(2).take(6) {
            let label = identify_local(&tr, &pair[1], 1, &lib, &reg, &DerivativeMethod::Central).unwrap();
            let r = forecast(
                label.coefficients.data(),
                &lib,
                &tr,
                &pair[0],
                1,
                &ForecastOptions::default(),
            )
            .unwrap();
            worst = worst.max(r.mape.iter().flatten().fold(0.0, |a, &b| a.max(b)));
        }
        assert!(worst < 1.0, "{worst}");
    }

    #[test]
    fn zero_coefficients_freeze_the_state() {
        let (tr, lib) = lv();
        let w = make_windows(0, tr.len(), 10, WindowMode::Fixed, 10)[3];
        let r = forecast(&vec![0.0; lib.len() * 2], &lib, &tr, &w, 2, &ForecastOptions::default()).unwrap();
        let last = tr.states.row_slice(w.end() - 1);
        for j in 0..2 {
            let truth: Vec<f64> = (0..r.truth.rows()).map(|i| r.truth.get(i, j)).collect();
            let expected = truth.iter().map(|t| 100.0 * ((last[j] - t) / t).abs()).sum::<f64>() / truth.len() as f64;
            assert!((r.mape[j].unwrap() - expected).abs() < 1e-9);
        }
        assert_eq!(r.times.len(), 20);
    }

    #[test]
    fn runaway_coefficients_diverge() {
        let (tr, lib) = lv();
        let mut xi = vec![0.0; lib.len() * 2];
        xi[lib.index_of("x^3").unwrap() * 2] = 1.0;
        let w = make_windows(0, tr.len(), 10, WindowMode::Fixed, 10)[0];
        let r = forecast(&xi, &lib, &tr, &w, 4, &ForecastOptions::default()).unwrap();
        assert!(r.diverged);
        assert!(r.predicted.is_none() && r.mape.iter().all(Option::is_none));
    }

    #[test]
    fn summary_counts_divergence() {
        let (tr, lib) = lv();
        let xi = true_xi(&lib);
        let mut bad = vec![0.0; lib.len() * 2];
        bad[lib.index_of("x^3").unwrap() * 2] = 1.0;
        let ws = make_windows(0, tr.len(), 10, WindowMode::Fixed, 10);
        let opts = ForecastOptions::default();
        let mut results: Vec<_> = ws[..9]
            .iter()
            .map(|w| forecast(&xi, &lib, &tr, w, 1, &opts).unwrap())
            .collect();
        results.push(forecast(&bad, &lib, &tr, &ws[9], 1, &opts).unwrap());
        let s = summarize_forecasts(&results, ErrorMetric::Mape, 0, ErrorMetric::Mape.default_policy()).unwrap();
        assert!((s.divergence_pct - 10.0).abs() < 1e-12);
        assert!(s.mean < 0.5);
    }

    #[test]
    fn horizon_past_the_end_is_usage_error() {
        let (tr, lib) = lv();
        let w = make_windows(0, tr.len(), 10, WindowMode::Fixed, 10).pop().unwrap();
        assert!(matches!(
            forecast(&vec![0.0; 40], &lib, &tr, &w, 1, &ForecastOptions::default()),
            Err(Error::Usage(_))
        ));
    }
}
