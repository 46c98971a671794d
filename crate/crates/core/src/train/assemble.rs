use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{LabeledWindow, OdeData};
use crate::dynamics::Trajectory;
use crate::error::{Error, Result};
use crate::rng::substream;
use crate::signal::{prefix_windows, Window};
use crate::sindy::{derivatives, identify_lorenz, DerivativeMethod, FeatureLibrary, Label, LabelSet};
use crate::tensor::Tensor;

/// Assembled examples plus the count of windows dropped on the way.
#[derive(Clone, Debug, Default)]
pub struct Assembled {
    pub windows: Vec<LabeledWindow>,
    pub skipped: usize,
}

/// Shuffles `0..n` and cuts it into consecutive groups of the given sizes.
/// Fails if the sizes exceed `n`.
pub fn split_counts(n: usize, counts: &[usize], seed: u64) -> Result<Vec<Vec<usize>>> {
    if counts.iter().sum::<usize>() > n {
        return Err(Error::config(format!("split sizes {counts:?} exceed {n} items")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut substream(seed, "split"));
    let mut out = Vec::with_capacity(counts.len());
    let mut at = 0;
    for &c in counts {
        let mut part = order[at..at + c].to_vec();
        part.sort_unstable();
        out.push(part);
        at += c;
    }
    Ok(out)
}

/// Like [`split_counts`] with fractional sizes; the last group takes the
/// remainder.
pub fn split_fractions(n: usize, fractions: &[f64], seed: u64) -> Result<Vec<Vec<usize>>> {
    if fractions.is_empty() || fractions.iter().any(|f| !(*f >= 0.0)) || fractions.iter().sum::<f64>() > 1.0 + 1e-12 {
        return Err(Error::config(format!("bad split fractions {fractions:?}")));
    }
    let mut counts: Vec<usize> = fractions.iter().map(|f| (f * n as f64).round() as usize).collect();
    let head: usize = counts[..counts.len() - 1].iter().sum();
    *counts.last_mut().unwrap() = n.saturating_sub(head);
    split_counts(n, &counts, seed)
}

/// `"{state}:{term}"` for each flattened coefficient, term-major to match
/// the row-major layout of Ξ.
pub fn coefficient_names(lib: &FeatureLibrary, states: &[&str]) -> Vec<String> {
    lib.names()
        .iter()
        .flat_map(|term| states.iter().map(move |s| format!("d{s}:{term}")))
        .collect()
}

/// `[t − t_start, states…, controls…]` rows of a window.
pub fn window_features(traj: &Trajectory, w: &Window) -> Result<Tensor> {
    let t0 = traj.times[w.start];
    let mut rows = Vec::with_capacity(w.len);
    for i in w.range() {
        let mut r = vec![traj.times[i] - t0];
        r.extend_from_slice(traj.states.row_slice(i));
        if let Some(c) = &traj.controls {
            r.extend_from_slice(c.row_slice(i));
        }
        rows.push(r);
    }
    Tensor::from_rows(&rows)
}

/// Residual operator of a window for flattened `Ξ` (terms × states,
/// row-major): `A[i·l + j, k·l + j] = Θ[i, k]`, `b[i·l + j] = dX[i, j]`.
fn ode_data(traj: &Trajectory, w: &Window, lib: &FeatureLibrary, method: &DerivativeMethod) -> Result<OdeData> {
    let part = traj.slice(w.start, w.end())?;
    let (states, derivs) = derivatives(&part, method)?;
    let theta = lib.evaluate(&states, part.controls.as_ref())?;
    let (m, k, l) = (theta.rows(), theta.cols(), derivs.cols());
    let mut a = Tensor::zeros(&[m * l, k * l]);
    for i in 0..m {
        for j in 0..l {
            for t in 0..k {
                a.set(i * l + j, t * l + j, theta.get(i, t));
            }
        }
    }
    Ok(OdeData {
        a,
        b: Tensor::row(derivs.data()),
    })
}

/// Next-window examples for local identification: the rows of window `i`
/// (as `[t_rel, states, controls]`) are paired with the label of window
/// `i + 1` of the same trajectory and that window's ODE residual operator.
///
/// Labels must carry the library's hash. Windows without an adjacent
/// successor label, or whose successor is not finite, are skipped.
/// Rank-deficient labels are kept: short windows rarely span the whole
/// library and the thresholded minimum-norm fit is still the label.
pub fn assemble_app1(trajs: &[Trajectory], labels: &LabelSet, method: &DerivativeMethod) -> Result<Assembled> {
    let lib = &labels.library;
    let hash = lib.hash();
    let mut by_source: BTreeMap<usize, Vec<&Label>> = BTreeMap::new();
    for l in &labels.labels {
        if l.library_hash != hash {
            return Err(Error::Incompatible(format!(
                "label for window {} was made with another library",
                l.window
            )));
        }
        by_source.entry(l.source).or_default().push(l);
    }
    let mut out = Assembled::default();
    for (source, mut ls) in by_source {
        let traj = trajs
            .get(source)
            .ok_or_else(|| Error::config(format!("labels refer to missing trajectory {source}")))?;
        ls.sort_by_key(|l| l.start);
        for (i, cur) in ls.iter().enumerate() {
            let next = ls.get(i + 1).filter(|n| n.start == cur.start + cur.len);
            let Some(next) = next else {
                // The last window has nothing to predict; anything else is a gap.
                if i + 1 < ls.len() {
                    out.skipped += 1;
                }
                continue;
            };
            if next.xi.iter().any(|v| !v.is_finite()) {
                out.skipped += 1;
                continue;
            }
            let w = |l: &Label| Window {
                source,
                start: l.start,
                len: l.len,
                mode: crate::signal::WindowMode::Fixed,
            };
            let ode = ode_data(traj, &w(next), lib, method).map_err(|e| e.in_window(next.window))?;
            out.windows.push(LabeledWindow {
                source,
                index: cur.window,
                inputs: window_features(traj, &w(cur))?,
                target: next.xi.clone(),
                ode: Some(ode),
            });
        }
    }
    if out.skipped > 0 {
        log::warn!("skipped {} windows without a usable successor label", out.skipped);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LorenzTarget {
    Sigma,
    Rho,
    Beta,
}

impl LorenzTarget {
    pub const ALL: [LorenzTarget; 3] = [LorenzTarget::Sigma, LorenzTarget::Rho, LorenzTarget::Beta];

    pub fn name(self) -> &'static str {
        match self {
            LorenzTarget::Sigma => "sigma",
            LorenzTarget::Rho => "rho",
            LorenzTarget::Beta => "beta",
        }
    }
}

/// Where Lorenz targets come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "labels", rename_all = "kebab-case")]
pub enum LorenzLabels {
    /// Simulation parameters recorded in the provenance.
    Truth,
    /// Constrained identification on the trajectory itself.
    Identified(DerivativeMethod),
}

/// Prefix windows starting at row `start`, one per size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrefixSpec {
    pub start: usize,
    pub sizes: Vec<usize>,
}

/// Expanding-window examples for global Lorenz identification: inputs are
/// `[t, x, y, z]` rows, targets the selected parameters (one model per
/// parameter takes a single target).
pub fn assemble_app2(
    trajs: &[Trajectory],
    labels: &LorenzLabels,
    targets: &[LorenzTarget],
    spec: &PrefixSpec,
) -> Result<Assembled> {
    let mut out = Assembled::default();
    for (source, traj) in trajs.iter().enumerate() {
        if traj.n_states() != 3 {
            return Err(Error::dim(format!("trajectory {source} is not a Lorenz trajectory")));
        }
        let params = match labels {
            LorenzLabels::Truth => {
                let get = |k: &str| {
                    traj.provenance
                        .parameters
                        .get(k)
                        .copied()
                        .ok_or_else(|| Error::config(format!("trajectory {source} lacks parameter {k}")))
                };
                [get("sigma")?, get("rho")?, get("beta")?]
            }
            LorenzLabels::Identified(method) => match identify_lorenz(traj, method) {
                Ok(e) => [e.sigma, e.rho, e.beta],
                Err(e @ Error::Degenerate(_)) => {
                    log::warn!("trajectory {source}: {e}");
                    out.skipped += spec.sizes.len();
                    continue;
                }
                Err(e) => return Err(e),
            },
        };
        let target: Vec<f64> = targets
            .iter()
            .map(|t| match t {
                LorenzTarget::Sigma => params[0],
                LorenzTarget::Rho => params[1],
                LorenzTarget::Beta => params[2],
            })
            .collect();
        let windows = lorenz_prefix_windows(source, traj, &target, spec)?;
        out.skipped += spec.sizes.len() - windows.len();
        out.windows.extend(windows);
    }
    Ok(out)
}

/// `[t, x, y, z]` prefix windows of one trajectory starting at row
/// `spec.start`, all labelled with `target`. Sizes that do not fit are
/// dropped.
pub fn lorenz_prefix_windows(
    source: usize,
    traj: &Trajectory,
    target: &[f64],
    spec: &PrefixSpec,
) -> Result<Vec<LabeledWindow>> {
    let available = traj.len().saturating_sub(spec.start);
    prefix_windows(source, available, &spec.sizes)
        .into_iter()
        .enumerate()
        .map(|(index, w)| {
            let rows: Vec<Vec<f64>> = (spec.start..spec.start + w.len)
                .map(|i| {
                    let mut r = vec![traj.times[i]];
                    r.extend_from_slice(traj.states.row_slice(i));
                    r
                })
                .collect();
            Ok(LabeledWindow {
                source,
                index,
                inputs: Tensor::from_rows(&rows)?,
                target: target.to_vec(),
                ode: None,
            })
        })
        .collect()
}

/// Temperatures at the two ends of a heat run as a 2-channel trajectory.
pub fn heat_probes(traj: &Trajectory) -> Result<Trajectory> {
    let n = traj.n_states();
    if n < 2 {
        return Err(Error::dim("heat trajectory needs at least two nodes"));
    }
    let rows: Vec<Vec<f64>> = (0..traj.len())
        .map(|i| {
            let r = traj.states.row_slice(i);
            vec![r[0], r[n - 1]]
        })
        .collect();
    let length = traj.provenance.parameters.get("length").copied().unwrap_or(1.0);
    let mut prov = traj.provenance.clone();
    prov.extra.insert("z".into(), serde_json::json!([0.0, length]));
    Trajectory::new(traj.times.clone(), Tensor::from_rows(&rows)?, None, prov)
}

/// Abnormality examples from probe trajectories: for a run of `n` steps,
/// `2n` rows `(z, t, T)` interleaving both probes step by step (the initial
/// state is excluded), targets `[G, ratio, α_ref]`. One window per size.
pub fn assemble_app3(probes: &[Trajectory], steps: &[usize]) -> Result<Assembled> {
    let mut out = Assembled::default();
    for (source, p) in probes.iter().enumerate() {
        if p.n_states() != 2 {
            return Err(Error::dim(format!("probe trajectory {source} must have 2 channels")));
        }
        let z: Vec<f64> = p
            .provenance
            .extra
            .get("z")
            .and_then(|v| serde_json::from_value(v.clone()).ok())
            .ok_or_else(|| Error::config(format!("probe trajectory {source} lacks probe positions")))?;
        let get = |k: &str| {
            p.provenance
                .parameters
                .get(k)
                .copied()
                .ok_or_else(|| Error::config(format!("probe trajectory {source} lacks parameter {k}")))
        };
        let target = vec![get("center")?, get("ratio")?, get("alpha_ref")?];
        let available = p.len() - 1;
        for (index, &n) in steps.iter().enumerate() {
            if n == 0 || n > available {
                out.skipped += 1;
                continue;
            }
            let mut rows = Vec::with_capacity(2 * n);
            for i in 1..=n {
                for (c, &zc) in z.iter().enumerate() {
                    rows.push(vec![zc, p.times[i], p.states.get(i, c)]);
                }
            }
            out.windows.push(LabeledWindow {
                source,
                index,
                inputs: Tensor::from_rows(&rows)?,
                target: target.clone(),
                ode: None,
            });
        }
    }
    Ok(out)
}
