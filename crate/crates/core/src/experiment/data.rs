//! Deterministic dataset generation and the on-disk dataset layout.
//!
//! A dataset directory holds `config.json`, the generated files and a
//! `manifest.json` recording the data hash of the configuration that made
//! it plus a SHA-256 of every file. Loading refuses a directory whose
//! manifest does not match the current configuration or whose files changed.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{App1Spec, App2Spec, App3Spec, ClippedNormal, ExperimentConfig, LabelSource, SystemSpec, SCHEMA_VERSION};
use crate::dynamics::{
    simulate_heat_1d, simulate_lorenz, simulate_lotka_volterra, sobol_sample, uniform_grid, Control, LorenzParams,
    LotkaVolterraParams, Trajectory,
};
use crate::error::{Error, Result};
use crate::rng::substream;
use crate::signal::{add_noise, make_windows, NoiseSpec, WindowMode};
use crate::sindy::{derivatives, identify_local, identify_lorenz, DerivativeMethod, FeatureLibrary, LabelSet, Stlsq};
use crate::train::{heat_probes, split_counts, split_fractions};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

/// Controlled Lotka–Volterra runs with per-window coefficient labels.
#[derive(Clone, Debug, PartialEq)]
pub struct App1Data {
    pub trajectories: Vec<Trajectory>,
    pub labels: LabelSet,
    pub splits: Splits,
}

/// Lorenz runs over `[0, test_horizon)` at every noise level. Labels are
/// `[σ, ρ, β]` per trajectory, `None` where identification was degenerate.
#[derive(Clone, Debug, PartialEq)]
pub struct App2Data {
    pub levels: Vec<f64>,
    /// `trajectories[level][system]`.
    pub trajectories: Vec<Vec<Trajectory>>,
    pub labels: Vec<Vec<Option<[f64; 3]>>>,
    /// Held-out systems are both the validation and the test set.
    pub splits: Splits,
}

/// Two-probe heat runs at every noise level: the first `runs` are split
/// into training and validation, the rest are test runs.
#[derive(Clone, Debug, PartialEq)]
pub struct App3Data {
    pub levels: Vec<f64>,
    /// `probes[level][run]`.
    pub probes: Vec<Vec<Trajectory>>,
    pub splits: Splits,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Dataset {
    App1(App1Data),
    App2(App2Data),
    App3(App3Data),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub kind: String,
    pub data_hash: String,
    pub config_hash: String,
    pub seed: u64,
    pub counts: BTreeMap<String, usize>,
    /// Relative path → hex SHA-256.
    pub files: BTreeMap<String, String>,
}

fn derived_seed(seed: u64, name: &str) -> u64 {
    substream(seed, name).gen()
}

/// Directory (and model key) of a noise level.
pub(crate) fn level_dir(level: f64) -> String {
    format!("xi_{level}")
}

fn bounds(r: [f64; 2]) -> (f64, f64) {
    (r[0], r[1])
}

fn clipped(d: &ClippedNormal, rng: &mut crate::rng::Rng) -> Result<f64> {
    let n = Normal::new(d.mean, d.std).map_err(|e| Error::config(format!("bad normal distribution: {e}")))?;
    Ok(n.sample(rng).clamp(d.min, d.max))
}

/// Builds the dataset a configuration describes. The result depends only
/// on the configuration's data hash.
pub fn generate(cfg: &ExperimentConfig) -> Result<Dataset> {
    cfg.validate()?;
    match &cfg.system {
        SystemSpec::App1(s) => generate_app1(s, cfg.seed).map(Dataset::App1),
        SystemSpec::App2(s) => generate_app2(s, cfg.seed).map(Dataset::App2),
        SystemSpec::App3(s) => generate_app3(s, cfg.seed).map(Dataset::App3),
    }
}

pub(crate) fn app1_library(s: &App1Spec) -> FeatureLibrary {
    FeatureLibrary::polynomial(&["x", "y"], &["c"], s.degree)
}

fn generate_app1(s: &App1Spec, seed: u64) -> Result<App1Data> {
    let pts = sobol_sample(
        3,
        s.trajectories,
        &[bounds(s.control), bounds(s.x0), bounds(s.y0)],
        Some(seed),
    )?;
    let rows = (s.horizon / s.dt).round() as usize + 1;
    let grid = uniform_grid(0.0, s.dt, rows);
    let r = s.rates;
    let mut trajectories = Vec::with_capacity(s.trajectories);
    for i in 0..s.trajectories {
        let p = pts.row_slice(i);
        let params = LotkaVolterraParams::new(r.alpha, r.beta, r.delta, r.gamma, Control::Constant(p[0]));
        let mut tr = simulate_lotka_volterra(&params, p[1], p[2], &grid, &s.integrator)?;
        tr.provenance.seed = Some(seed);
        trajectories.push(tr);
    }

    let lib = app1_library(s);
    let regressor = Stlsq(s.stlsq);
    let mut labels = LabelSet::new(lib.clone(), 2);
    let mut id = 0;
    for (i, tr) in trajectories.iter().enumerate() {
        for w in make_windows(i, tr.len(), s.window, WindowMode::Fixed, s.window) {
            let xi = identify_local(tr, &w, id, &lib, &regressor, &s.derivative)?;
            labels.push(id, &w, &xi);
            id += 1;
        }
    }
    let parts = split_counts(s.trajectories, &s.split, seed)?;
    log::info!(
        "app1: {} trajectories, {} labels",
        trajectories.len(),
        labels.labels.len()
    );
    Ok(App1Data {
        trajectories,
        labels,
        splits: Splits {
            train: parts[0].clone(),
            valid: parts[1].clone(),
            test: parts[2].clone(),
        },
    })
}

/// Rows of the training section `[0, train_horizon)`.
pub(crate) fn app2_train_rows(s: &App2Spec) -> usize {
    (s.train_horizon / s.dt).round() as usize
}

/// Label of one trajectory at one noise level.
pub(crate) fn app2_label(s: &App2Spec, tr: &Trajectory, level: f64) -> Result<Option<[f64; 3]>> {
    let p = &tr.provenance.parameters;
    match s.labels {
        LabelSource::Truth => Ok(Some([p["sigma"], p["rho"], p["beta"]])),
        LabelSource::Identified => {
            let method = if level == 0.0 {
                DerivativeMethod::Central
            } else {
                DerivativeMethod::Tv(s.tv)
            };
            let part = tr.slice(0, app2_train_rows(s).min(tr.len()))?;
            match identify_lorenz(&part, &method) {
                Ok(e) => Ok(Some([e.sigma, e.rho, e.beta])),
                Err(e @ Error::Degenerate(_)) => {
                    log::warn!("{e}");
                    Ok(None)
                }
                Err(e) => Err(e),
            }
        }
    }
}

fn generate_app2(s: &App2Spec, seed: u64) -> Result<App2Data> {
    let ranges = [s.sigma, s.rho, s.beta, s.x0, s.y0, s.z0].map(bounds);
    let pts = sobol_sample(6, s.systems, &ranges, Some(seed))?;
    let grid = uniform_grid(0.0, s.dt, (s.test_horizon / s.dt).round() as usize);
    let mut clean = Vec::with_capacity(s.systems);
    for i in 0..s.systems {
        let p = pts.row_slice(i);
        let params = LorenzParams {
            sigma: p[0],
            rho: p[1],
            beta: p[2],
        };
        let mut tr = simulate_lorenz(&params, p[3], p[4], p[5], &grid, &s.integrator)?;
        tr.provenance.seed = Some(seed);
        clean.push(tr);
    }
    let mut trajectories = Vec::new();
    let mut labels = Vec::new();
    for &level in &s.noise_levels {
        let mut trs = Vec::with_capacity(s.systems);
        let mut ls = Vec::with_capacity(s.systems);
        for (i, c) in clean.iter().enumerate() {
            let spec = NoiseSpec {
                level,
                seed: derived_seed(seed, &format!("app2/noise/{level}/{i}")),
            };
            let mut tr = add_noise(c, &spec)?;
            tr.provenance.extra.insert("noise".into(), serde_json::to_value(spec)?);
            ls.push(app2_label(s, &tr, level)?);
            trs.push(tr);
        }
        let missing = ls.iter().filter(|l| l.is_none()).count();
        log::info!("app2: noise {level}: {} systems, {missing} without labels", trs.len());
        trajectories.push(trs);
        labels.push(ls);
    }
    let parts = split_fractions(s.systems, &[s.train_fraction, 1.0 - s.train_fraction], seed)?;
    Ok(App2Data {
        levels: s.noise_levels.clone(),
        trajectories,
        labels,
        splits: Splits {
            train: parts[0].clone(),
            valid: parts[1].clone(),
            test: parts[1].clone(),
        },
    })
}

fn generate_app3(s: &App3Spec, seed: u64) -> Result<App3Data> {
    let total = s.runs + s.test_runs;
    let centers = sobol_sample(1, total, &[bounds(s.center)], Some(seed))?;
    let mut rng_alpha = substream(seed, "app3/alpha_ref");
    let mut rng_ratio = substream(seed, "app3/ratio");
    let mut clean = Vec::with_capacity(total);
    for i in 0..total {
        let mut problem = s.base.clone();
        problem.center = centers.get(i, 0);
        problem.alpha_ref = clipped(&s.alpha_ref, &mut rng_alpha)?;
        problem.ratio = clipped(&s.ratio, &mut rng_ratio)?;
        let mut probes = heat_probes(&simulate_heat_1d(&problem)?)?;
        probes.provenance.seed = Some(seed);
        clean.push(probes);
    }
    let mut probes = Vec::new();
    for &level in &s.noise_levels {
        let trs = clean
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let spec = NoiseSpec {
                    level,
                    seed: derived_seed(seed, &format!("app3/noise/{level}/{i}")),
                };
                let mut tr = add_noise(c, &spec)?;
                tr.provenance.extra.insert("noise".into(), serde_json::to_value(spec)?);
                Ok(tr)
            })
            .collect::<Result<Vec<_>>>()?;
        probes.push(trs);
    }
    let parts = split_fractions(s.runs, &[s.train_fraction, 1.0 - s.train_fraction], seed)?;
    log::info!("app3: {} runs at {} noise levels", total, s.noise_levels.len());
    Ok(App3Data {
        levels: s.noise_levels.clone(),
        probes,
        splits: Splits {
            train: parts[0].clone(),
            valid: parts[1].clone(),
            test: (s.runs..total).collect(),
        },
    })
}

struct Writer<'a> {
    dir: &'a Path,
    files: BTreeMap<String, String>,
}

impl Writer<'_> {
    fn put(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&path, bytes)?;
        self.files.insert(rel.to_string(), hex::encode(Sha256::digest(bytes)));
        Ok(())
    }

    fn json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<()> {
        self.put(rel, &serde_json::to_vec_pretty(value)?)
    }

    fn trajectory(&mut self, rel: &str, tr: &Trajectory) -> Result<()> {
        self.put(&format!("{rel}.csv"), tr.to_csv().as_bytes())?;
        self.json(&format!("{rel}.json"), &tr.provenance)
    }
}

/// Writes a generated dataset under `dir`. An existing manifest is only
/// replaced with `force`.
pub fn save_dataset(cfg: &ExperimentConfig, data: &Dataset, dir: &Path, force: bool) -> Result<Manifest> {
    if dir.join("manifest.json").exists() && !force {
        return Err(Error::usage(format!(
            "{} already holds a dataset; pass --force to overwrite",
            dir.display()
        )));
    }
    std::fs::create_dir_all(dir)?;
    let mut w = Writer {
        dir,
        files: BTreeMap::new(),
    };
    let mut counts = BTreeMap::new();
    w.put("config.json", cfg.to_json()?.as_bytes())?;
    match data {
        Dataset::App1(d) => {
            let SystemSpec::App1(s) = &cfg.system else {
                return Err(Error::usage("dataset does not match the configuration"));
            };
            for (i, tr) in d.trajectories.iter().enumerate() {
                w.trajectory(&format!("trajectories/lv_{i:04}"), tr)?;
                let (_, dx) = derivatives(tr, &s.derivative)?;
                let mut csv = String::from("t,dx,dy\n");
                for (r, t) in tr.times.iter().enumerate() {
                    csv.push_str(&format!("{t},{},{}\n", dx.get(r, 0), dx.get(r, 1)));
                }
                w.put(&format!("derivatives/lv_{i:04}.csv"), csv.as_bytes())?;
            }
            w.json("labels.json", &d.labels)?;
            w.json("splits.json", &d.splits)?;
            counts.insert("trajectories".into(), d.trajectories.len());
            counts.insert("labels".into(), d.labels.labels.len());
        }
        Dataset::App2(d) => {
            for (k, &level) in d.levels.iter().enumerate() {
                let ld = level_dir(level);
                for (i, tr) in d.trajectories[k].iter().enumerate() {
                    w.trajectory(&format!("{ld}/lorenz_{i:04}"), tr)?;
                }
                w.json(&format!("{ld}/labels.json"), &d.labels[k])?;
                counts.insert(
                    format!("{ld}/unlabelled"),
                    d.labels[k].iter().filter(|l| l.is_none()).count(),
                );
            }
            w.json("splits.json", &d.splits)?;
            counts.insert("systems".into(), d.trajectories.first().map_or(0, Vec::len));
        }
        Dataset::App3(d) => {
            for (k, &level) in d.levels.iter().enumerate() {
                for (i, tr) in d.probes[k].iter().enumerate() {
                    w.trajectory(&format!("{}/run_{i:04}", level_dir(level)), tr)?;
                }
            }
            w.json("splits.json", &d.splits)?;
            counts.insert("runs".into(), d.probes.first().map_or(0, Vec::len));
        }
    }
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        kind: cfg.system.kind().into(),
        data_hash: cfg.data_hash(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        counts,
        files: w.files,
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Reads the manifest and checks it against the configuration and the
/// files on disk.
pub fn check_dataset(cfg: &ExperimentConfig, dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    if !path.exists() {
        return Err(Error::Stale(format!(
            "{} has no dataset manifest; run generate first",
            dir.display()
        )));
    }
    let manifest: Manifest = serde_json::from_slice(&std::fs::read(&path)?)?;
    if manifest.data_hash != cfg.data_hash() {
        return Err(Error::Stale(format!(
            "dataset in {} was generated from a different configuration (data hash {}, expected {})",
            dir.display(),
            &manifest.data_hash[..12.min(manifest.data_hash.len())],
            &cfg.data_hash()[..12]
        )));
    }
    for (rel, hash) in &manifest.files {
        let bytes = std::fs::read(dir.join(rel))?;
        if &hex::encode(Sha256::digest(&bytes)) != hash {
            return Err(Error::Stale(format!("{rel} changed since the dataset was generated")));
        }
    }
    Ok(manifest)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}

fn read_trajectories(dir: &Path, prefix: &str, n: usize) -> Result<Vec<Trajectory>> {
    (0..n)
        .map(|i| Trajectory::load(&dir.join(format!("{prefix}_{i:04}.csv"))))
        .collect()
}

/// Loads a dataset written by [`save_dataset`] after [`check_dataset`].
pub fn load_dataset(cfg: &ExperimentConfig, dir: &Path) -> Result<Dataset> {
    check_dataset(cfg, dir)?;
    let splits: Splits = read_json(&dir.join("splits.json"))?;
    match &cfg.system {
        SystemSpec::App1(s) => {
            let trajectories = read_trajectories(&dir.join("trajectories"), "lv", s.trajectories)?;
            let labels = LabelSet::load(&dir.join("labels.json"))?;
            if labels.library.hash() != app1_library(s).hash() {
                return Err(Error::Incompatible("labels were made with another library".into()));
            }
            Ok(Dataset::App1(App1Data {
                trajectories,
                labels,
                splits,
            }))
        }
        SystemSpec::App2(s) => {
            let mut trajectories = Vec::new();
            let mut labels = Vec::new();
            for &level in &s.noise_levels {
                let ld = dir.join(level_dir(level));
                trajectories.push(read_trajectories(&ld, "lorenz", s.systems)?);
                labels.push(read_json(&ld.join("labels.json"))?);
            }
            Ok(Dataset::App2(App2Data {
                levels: s.noise_levels.clone(),
                trajectories,
                labels,
                splits,
            }))
        }
        SystemSpec::App3(s) => {
            let probes = s
                .noise_levels
                .iter()
                .map(|&l| read_trajectories(&dir.join(level_dir(l)), "run", s.runs + s.test_runs))
                .collect::<Result<Vec<_>>>()?;
            Ok(Dataset::App3(App3Data {
                levels: s.noise_levels.clone(),
                probes,
                splits,
            }))
        }
    }
}
