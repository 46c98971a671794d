//! Versioned JSON experiment configuration, presets, dataset generation and
//! the train/evaluate/identify pipelines driven by the CLI.

mod data;
mod run;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use serde_json::Value;

pub use data::{
    check_dataset, generate, load_dataset, save_dataset, App1Data, App2Data, App3Data, Dataset, Manifest, Splits,
};
pub use run::{
    app1_examples, app1_model_config, app2_examples, app2_model_config, app2_model_name, app3_examples,
    app3_model_config, evaluate, evaluate_app1, evaluate_app2, evaluate_app3, identify_window, predict_windows,
    read_window_csv, train_app1, train_app2, train_app3, train_run, Evaluation, Identification, PredictionRow, R2Row,
    ResultRow, RunManifest, TrainedModel,
};

use crate::dynamics::{HeatProblem, OdeOptions};
use crate::error::{Error, Result};
use crate::models::{Architecture, ModelConfig};
use crate::signal::TvOptions;
use crate::sindy::{DerivativeMethod, StlsqConfig};
use crate::tensor::json_hash;
use crate::train::{LorenzTarget, LossWeights, Stage, TargetReduction, TrainingPlan, ValidationMetric, WindowPolicy};

pub const SCHEMA_VERSION: u32 = 1;

/// Names accepted by `--preset`.
pub const PRESETS: [&str; 6] = ["app1", "app2", "app3", "desk", "desk-app1", "desk-app3"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub name: String,
    /// Every random draw derives from this seed through named sub-streams.
    pub seed: u64,
    /// Default output directory; the CLI's `--out` takes precedence.
    #[serde(default)]
    pub output: Option<String>,
    pub system: SystemSpec,
    pub model: Architecture,
    pub training: TrainingSpec,
    pub evaluation: EvaluationSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SystemSpec {
    App1(App1Spec),
    App2(App2Spec),
    App3(App3Spec),
}

impl SystemSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            SystemSpec::App1(_) => "app1",
            SystemSpec::App2(_) => "app2",
            SystemSpec::App3(_) => "app3",
        }
    }
}

/// Rates of `ẋ = αx − βxy`, `ẏ = δxy − γy + c`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LvRates {
    pub alpha: f64,
    pub beta: f64,
    pub delta: f64,
    pub gamma: f64,
}

/// Local identification of controlled Lotka–Volterra trajectories.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct App1Spec {
    pub rates: LvRates,
    pub trajectories: usize,
    /// Trajectory counts for training, validation and test.
    pub split: [usize; 3],
    pub control: [f64; 2],
    pub x0: [f64; 2],
    pub y0: [f64; 2],
    pub dt: f64,
    pub horizon: f64,
    /// Rows per sub-domain.
    pub window: usize,
    pub degree: u32,
    pub stlsq: StlsqConfig,
    pub derivative: DerivativeMethod,
    #[serde(default)]
    pub integrator: OdeOptions,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelSource {
    /// Simulation parameters.
    Truth,
    /// Constrained fit on the (denoised) training portion: central
    /// differences on clean data, TV differentiation on noisy data.
    Identified,
}

/// Global Lorenz parameter identification from expanding windows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct App2Spec {
    pub systems: usize,
    pub sigma: [f64; 2],
    pub rho: [f64; 2],
    pub beta: [f64; 2],
    pub x0: [f64; 2],
    pub y0: [f64; 2],
    pub z0: [f64; 2],
    pub dt: f64,
    /// Training and validation windows lie in `[0, train_horizon)`.
    pub train_horizon: f64,
    /// Held-out trajectories run to here; `[train_horizon, test_horizon)`
    /// is the extrapolation section.
    pub test_horizon: f64,
    pub noise_levels: Vec<f64>,
    pub labels: LabelSource,
    #[serde(default)]
    pub tv: TvOptions,
    /// One model is trained per target.
    pub targets: Vec<LorenzTarget>,
    pub prefix_sizes: Vec<usize>,
    /// Training fraction; the rest is held out for validation and testing.
    pub train_fraction: f64,
    #[serde(default)]
    pub integrator: OdeOptions,
}

/// Normal distribution clamped into `[min, max]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClippedNormal {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

/// Diffusivity abnormality characterization from two temperature probes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct App3Spec {
    pub runs: usize,
    pub test_runs: usize,
    pub train_fraction: f64,
    /// Everything but the sampled characteristics.
    pub base: HeatProblem,
    pub alpha_ref: ClippedNormal,
    pub ratio: ClippedNormal,
    /// Abnormality centre range, Sobol-sampled.
    pub center: [f64; 2],
    /// One model is trained and tested per level.
    pub noise_levels: Vec<f64>,
    /// Steps per evaluation window; the largest is the training window.
    pub steps: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingSpec {
    pub stages: Vec<Stage>,
    pub batch_size: usize,
    pub loss: LossWeights,
    #[serde(default)]
    pub window_policy: WindowPolicy,
    #[serde(default)]
    pub validation: ValidationMetric,
}

impl TrainingSpec {
    pub fn plan(&self, seed: u64) -> TrainingPlan {
        TrainingPlan {
            stages: self.stages.clone(),
            batch_size: self.batch_size,
            loss: self.loss,
            window_policy: self.window_policy.clone(),
            validation: self.validation,
            fit_scaling: true,
            resume_epoch: 0,
            resume_best: None,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationSpec {
    /// Sub-domain widths used when forecasting (local identification).
    #[serde(default)]
    pub windows: Vec<usize>,
    /// Forecast horizons as multiples of the sub-domain width.
    #[serde(default)]
    pub horizons: Vec<usize>,
    pub divergence_factor: f64,
    /// |z| threshold on log-MAPE for outlier removal.
    pub outlier_z: f64,
}

impl Default for EvaluationSpec {
    fn default() -> Self {
        Self {
            windows: Vec::new(),
            horizons: Vec::new(),
            divergence_factor: 1e3,
            outlier_z: 3.0,
        }
    }
}

fn stages(lrs: &[f64], epochs: &[usize]) -> Vec<Stage> {
    lrs.iter()
        .zip(epochs)
        .map(|(&lr, &epochs)| Stage { lr, epochs })
        .collect()
}

fn arch(config: ModelConfig) -> Architecture {
    config.architecture
}

const APP1_LRS: [f64; 7] = [1e-3, 4e-4, 1e-4, 1e-5, 1e-6, 1e-7, 1e-8];
const APP2_LRS: [f64; 5] = [4e-4, 5e-5, 1e-5, 5e-6, 1e-6];

impl ExperimentConfig {
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "app1" => Ok(Self::app1()),
            "app2" => Ok(Self::app2()),
            "app3" => Ok(Self::app3()),
            "desk" => Ok(Self::desk()),
            "desk-app1" => Ok(Self::desk_app1()),
            "desk-app3" => Ok(Self::desk_app3()),
            other => Err(Error::usage(format!(
                "unknown preset {other:?}; expected one of {}",
                PRESETS.join(", ")
            ))),
        }
    }

    /// 278 controlled Lotka–Volterra runs, local Deep Set against labels
    /// of the next 10-step sub-domain.
    pub fn app1() -> Self {
        let names = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        Self {
            schema_version: SCHEMA_VERSION,
            name: "app1".into(),
            seed: 0,
            output: None,
            system: SystemSpec::App1(App1Spec {
                rates: LvRates {
                    alpha: 0.5,
                    beta: 0.025,
                    delta: 0.5,
                    gamma: 0.005,
                },
                trajectories: 278,
                split: [166, 56, 56],
                control: [-1.0, 5.0],
                x0: [5.0, 50.0],
                y0: [5.0, 15.0],
                dt: 0.1,
                horizon: 30.0,
                window: 10,
                degree: 3,
                stlsq: StlsqConfig {
                    threshold: 1e-3,
                    ..Default::default()
                },
                derivative: DerivativeMethod::Central,
                integrator: OdeOptions::default(),
            }),
            model: arch(ModelConfig::local_deep_set(names(&["t"]), names(&["a", "b"]), 2, 0)),
            training: TrainingSpec {
                stages: stages(&APP1_LRS, &[2000, 2000, 4000, 2000, 2000, 2000, 2000]),
                batch_size: 64,
                loss: LossWeights {
                    ode: 1.0,
                    weights_l1: 1e-6,
                    reduction: TargetReduction::Mean,
                },
                window_policy: WindowPolicy::Full,
                validation: ValidationMetric::Composite,
            },
            evaluation: EvaluationSpec {
                windows: vec![10, 15, 20],
                horizons: vec![1, 2, 3, 4],
                ..Default::default()
            },
        }
    }

    /// 1024 Lorenz systems at three noise levels, one Deep Set per
    /// parameter over expanding windows.
    pub fn app2() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            name: "app2".into(),
            seed: 0,
            output: None,
            system: SystemSpec::App2(App2Spec {
                systems: 1024,
                sigma: [8.0, 12.0],
                rho: [20.0, 35.0],
                beta: [0.0, 4.0],
                x0: [-5.0, 5.0],
                y0: [4.0, 50.0],
                z0: [5.0, 15.0],
                dt: 0.01,
                train_horizon: 10.0,
                test_horizon: 20.0,
                noise_levels: vec![0.0, 0.02, 0.05],
                labels: LabelSource::Identified,
                tv: TvOptions::default(),
                targets: LorenzTarget::ALL.to_vec(),
                prefix_sizes: vec![100, 300, 500, 700, 900],
                train_fraction: 0.7,
                integrator: OdeOptions::default(),
            }),
            model: arch(ModelConfig::lorenz_deep_set(0)),
            training: TrainingSpec {
                stages: stages(&APP2_LRS, &[400; 5]),
                batch_size: 64,
                loss: LossWeights::default(),
                window_policy: WindowPolicy::Prefix {
                    sizes: vec![100, 300, 500, 700, 900],
                },
                validation: ValidationMetric::Composite,
            },
            evaluation: EvaluationSpec::default(),
        }
    }

    /// 300 + 150 heat runs with a sampled diffusivity well, one Deep Set per
    /// noise level predicting `[G, ratio, α_ref]`.
    pub fn app3() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            name: "app3".into(),
            seed: 0,
            output: None,
            system: SystemSpec::App3(App3Spec {
                runs: 300,
                test_runs: 150,
                train_fraction: 0.7,
                base: HeatProblem::default(),
                alpha_ref: ClippedNormal {
                    mean: 1e-6,
                    std: 5e-8,
                    min: 8e-7,
                    max: 1.2e-6,
                },
                ratio: ClippedNormal {
                    mean: 60.0,
                    std: 8.0,
                    min: 40.0,
                    max: 80.0,
                },
                center: [0.001, 0.009],
                noise_levels: vec![0.0, 0.02, 0.05, 0.1],
                steps: vec![50, 100, 150, 200],
            }),
            model: arch(ModelConfig::heat_deep_set(0)),
            training: TrainingSpec {
                stages: stages(&APP2_LRS, &[400; 5]),
                batch_size: 64,
                loss: LossWeights {
                    ode: 0.0,
                    weights_l1: 0.01,
                    reduction: TargetReduction::SumPerTarget,
                },
                window_policy: WindowPolicy::Prefix {
                    sizes: vec![100, 200, 300, 400],
                },
                validation: ValidationMetric::Composite,
            },
            evaluation: EvaluationSpec::default(),
        }
    }

    /// Desk-scale Lorenz ρ-model: 128 clean systems, a 3×128 Deep Set and a
    /// 200-epoch ladder.
    pub fn desk() -> Self {
        let mut c = Self::app2();
        c.name = "desk".into();
        if let SystemSpec::App2(s) = &mut c.system {
            s.systems = 128;
            s.noise_levels = vec![0.0];
            s.targets = vec![LorenzTarget::Rho];
        }
        c.model = Architecture::DeepSet(crate::models::DeepSetConfig {
            encoder: vec![128; 3],
            encoder_layer: crate::models::EncoderLayer::Dense,
            equivariant_pool: None,
            pool: crate::tensor::PoolKind::Mean,
            decoder: vec![128; 2],
            activation: crate::tensor::Activation::Relu,
            heads: 1,
            hidden_norm: false,
        });
        c.training.stages = stages(&APP2_LRS.map(|lr| lr * 2.5), &[40; 5]);
        c.training.batch_size = 8;
        c
    }

    /// Desk-scale local identification: 70 trajectories, a small two-head
    /// Deep Set and the full ladder scaled down tenfold.
    pub fn desk_app1() -> Self {
        let mut c = Self::app1();
        c.name = "desk-app1".into();
        if let SystemSpec::App1(s) = &mut c.system {
            s.trajectories = 70;
            s.split = [42, 14, 14];
        }
        c.model = Architecture::DeepSet(crate::models::DeepSetConfig {
            encoder: vec![64; 3],
            encoder_layer: crate::models::EncoderLayer::Dense,
            equivariant_pool: None,
            pool: crate::tensor::PoolKind::Mean,
            decoder: vec![64; 2],
            activation: crate::tensor::Activation::Relu,
            heads: 2,
            hidden_norm: false,
        });
        c.training.stages = stages(&APP1_LRS, &[200, 200, 400, 200, 200, 200, 200]);
        c
    }

    /// Desk-scale heat study: a quarter of the runs, clean data only, a
    /// 3×64 Deep Set and a 200-epoch ladder.
    pub fn desk_app3() -> Self {
        let mut c = Self::app3();
        c.name = "desk-app3".into();
        if let SystemSpec::App3(s) = &mut c.system {
            s.runs = 75;
            s.test_runs = 38;
            s.noise_levels = vec![0.0];
        }
        c.model = Architecture::DeepSet(crate::models::DeepSetConfig {
            encoder: vec![64; 3],
            encoder_layer: crate::models::EncoderLayer::Dense,
            equivariant_pool: None,
            pool: crate::tensor::PoolKind::Mean,
            decoder: vec![64; 2],
            activation: crate::tensor::Activation::Gelu,
            heads: 3,
            hidden_norm: false,
        });
        c.training.stages = stages(&APP2_LRS.map(|lr| lr * 2.5), &[40; 5]);
        c.training.batch_size = 16;
        c
    }

    /// Parses and validates a configuration. Unknown keys, type errors and
    /// out-of-range values are all reported as schema violations naming the
    /// offending keys.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text)?;
        Self::from_value(value)
    }

    pub fn from_value(value: Value) -> Result<Self> {
        match value.get("schema_version").and_then(Value::as_u64) {
            Some(v) if v == SCHEMA_VERSION as u64 => {}
            Some(v) => {
                return Err(Error::Schema(vec![format!(
                    "schema_version (got {v}, this build reads {SCHEMA_VERSION})"
                )]))
            }
            None => return Err(Error::Schema(vec!["schema_version (missing)".into()])),
        }
        let config: Self = serde_json::from_value(value.clone()).map_err(|e| Error::Schema(vec![e.to_string()]))?;
        let mut bad = Vec::new();
        unknown_keys(&value, &serde_json::to_value(&config)?, "", &mut bad);
        bad.extend(config.violations());
        if bad.is_empty() {
            Ok(config)
        } else {
            Err(Error::Schema(bad))
        }
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = self.violations();
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Schema(bad))
        }
    }

    /// Hash of the whole configuration, embedded in every output.
    pub fn hash(&self) -> String {
        json_hash(&serde_json::to_value(self).expect("config serializes"))
    }

    /// Hash of the parts that determine the generated dataset.
    pub fn data_hash(&self) -> String {
        json_hash(&serde_json::json!({
            "schema_version": self.schema_version,
            "seed": self.seed,
            "system": self.system,
        }))
    }

    fn violations(&self) -> Vec<String> {
        let mut bad = Vec::new();
        let mut check = |ok: bool, key: &str| {
            if !ok {
                bad.push(key.to_string());
            }
        };
        let range = |r: [f64; 2]| r[0].is_finite() && r[1].is_finite() && r[0] <= r[1];
        let pos = |v: f64| v > 0.0 && v.is_finite();
        let levels = |v: &[f64]| !v.is_empty() && v.iter().all(|l| *l >= 0.0 && l.is_finite());
        match &self.system {
            SystemSpec::App1(s) => {
                check(s.trajectories > 0, "system.trajectories");
                check(
                    s.split.iter().sum::<usize>() <= s.trajectories && s.split.iter().all(|&n| n > 0),
                    "system.split",
                );
                check(range(s.control), "system.control");
                check(range(s.x0), "system.x0");
                check(range(s.y0), "system.y0");
                check(pos(s.dt), "system.dt");
                check(
                    pos(s.horizon) && s.horizon / s.dt >= 2.0 * s.window as f64,
                    "system.horizon",
                );
                check(s.window >= 3, "system.window");
                check(s.degree >= 1, "system.degree");
                check(s.stlsq.validate().is_ok(), "system.stlsq");
                let r = s.rates;
                check(
                    [r.alpha, r.beta, r.delta, r.gamma].iter().all(|v| v.is_finite()),
                    "system.rates",
                );
                check(
                    !self.evaluation.windows.is_empty() && !self.evaluation.windows.contains(&0),
                    "evaluation.windows",
                );
                check(
                    !self.evaluation.horizons.is_empty() && !self.evaluation.horizons.contains(&0),
                    "evaluation.horizons",
                );
            }
            SystemSpec::App2(s) => {
                check(s.systems >= 2, "system.systems");
                for (k, r) in [
                    ("sigma", s.sigma),
                    ("rho", s.rho),
                    ("beta", s.beta),
                    ("x0", s.x0),
                    ("y0", s.y0),
                    ("z0", s.z0),
                ] {
                    check(range(r), &format!("system.{k}"));
                }
                check(pos(s.dt), "system.dt");
                check(pos(s.train_horizon), "system.train_horizon");
                check(s.test_horizon >= s.train_horizon, "system.test_horizon");
                check(levels(&s.noise_levels), "system.noise_levels");
                check(!s.targets.is_empty(), "system.targets");
                let rows = (s.train_horizon / s.dt).round() as usize;
                check(
                    !s.prefix_sizes.is_empty() && s.prefix_sizes.iter().all(|&n| n >= 1 && n <= rows),
                    "system.prefix_sizes",
                );
                check(
                    s.train_fraction > 0.0 && s.train_fraction < 1.0,
                    "system.train_fraction",
                );
                check(
                    s.tv.iters > 0 && s.tv.tol > 0.0 && s.tv.reg_weight.is_none_or(pos),
                    "system.tv",
                );
            }
            SystemSpec::App3(s) => {
                check(s.runs >= 2, "system.runs");
                check(s.test_runs >= 1, "system.test_runs");
                check(
                    s.train_fraction > 0.0 && s.train_fraction < 1.0,
                    "system.train_fraction",
                );
                check(s.base.validate().is_ok(), "system.base");
                for (k, d) in [("alpha_ref", s.alpha_ref), ("ratio", s.ratio)] {
                    check(d.std >= 0.0 && d.min <= d.max && d.min > 0.0, &format!("system.{k}"));
                }
                check(s.ratio.min > 1.0, "system.ratio");
                check(
                    range(s.center) && s.center[0] > 0.0 && s.center[1] < s.base.length,
                    "system.center",
                );
                check(levels(&s.noise_levels), "system.noise_levels");
                check(
                    !s.steps.is_empty() && s.steps.iter().all(|&n| n >= 1 && n <= s.base.steps()),
                    "system.steps",
                );
            }
        }
        check(
            !self.training.stages.is_empty()
                && self
                    .training
                    .stages
                    .iter()
                    .all(|s| s.lr > 0.0 && s.lr.is_finite() && s.epochs > 0),
            "training.stages",
        );
        check(self.training.batch_size > 0, "training.batch_size");
        check(self.training.loss.validate().is_ok(), "training.loss");
        if let WindowPolicy::Prefix { sizes } = &self.training.window_policy {
            check(!sizes.is_empty() && !sizes.contains(&0), "training.window_policy");
        }
        check(self.evaluation.divergence_factor > 1.0, "evaluation.divergence_factor");
        check(self.evaluation.outlier_z > 0.0, "evaluation.outlier_z");
        if let Err(e) = self.probe_model() {
            bad.push(format!("model ({e})"));
        }
        bad
    }

    /// Builds the model configuration this experiment trains (the first one
    /// where several are trained).
    pub fn probe_model(&self) -> Result<ModelConfig> {
        let c = match &self.system {
            SystemSpec::App1(s) => app1_model_config(self, s),
            SystemSpec::App2(s) => app2_model_config(self, s.targets.first().copied().unwrap_or(LorenzTarget::Rho)),
            SystemSpec::App3(_) => app3_model_config(self),
        };
        c.validate()?;
        Ok(c)
    }
}

/// Keys present in `input` that did not survive a parse/serialize round trip.
fn unknown_keys(input: &Value, parsed: &Value, path: &str, out: &mut Vec<String>) {
    match (input, parsed) {
        (Value::Object(a), Value::Object(b)) => {
            let known: BTreeSet<&String> = b.keys().collect();
            for (k, v) in a {
                let p = if path.is_empty() {
                    k.clone()
                } else {
                    format!("{path}.{k}")
                };
                match b.get(k) {
                    Some(w) => unknown_keys(v, w, &p, out),
                    None if !known.contains(k) && !v.is_null() => out.push(format!("{p} (unknown key)")),
                    None => {}
                }
            }
        }
        (Value::Array(a), Value::Array(b)) => {
            for (i, (v, w)) in a.iter().zip(b).enumerate() {
                unknown_keys(v, w, &format!("{path}[{i}]"), out);
            }
        }
        _ => {}
    }
}

#[cfg(test)]
mod tests;
