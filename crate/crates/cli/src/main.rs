//! `sendi`: generate datasets, train set encoders, evaluate them and run
//! single-window identification.
//!
//! An experiment directory (`--out`) holds `data/` from `generate`, `run/`
//! from `train` and `eval/` from `evaluate`. Exit codes: 2 for configuration
//! and usage errors, 3 for missing, stale or incompatible data, 4 for numeric
//! failures and 5 for divergence.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sendi_core::experiment::{
    self, generate, save_dataset, Evaluation, ExperimentConfig, RunManifest, SystemSpec, PRESETS,
};
use sendi_core::models::SetModel;
use sendi_core::Error;

#[derive(Parser)]
#[command(name = "sendi", version, about = "Set-encoding identification of nonlinear dynamics")]
struct Cli {
    /// Log level (error, warn, info, debug, trace); RUST_LOG overrides it.
    #[arg(long, global = true, default_value = "info")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate trajectories and compute labels into <out>/data.
    Generate(Common),
    /// Train the experiment's models on <out>/data into <out>/run.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue each model from its best checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate <out>/run on the test split into <out>/eval.
    Evaluate(Common),
    /// Identify parameters from one window CSV with a checkpoint.
    Identify {
        /// Model checkpoint (a `best.json` from a run).
        #[arg(long)]
        checkpoint: PathBuf,
        /// CSV whose header lists the model features.
        #[arg(long)]
        window: PathBuf,
        /// Timed forward passes after one warm-up pass.
        #[arg(long, default_value_t = 100)]
        repeats: usize,
        /// Also write the JSON result to this file.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Print training and evaluation summaries of an experiment directory.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in configuration.
    #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(PRESETS))]
    preset: Option<String>,
    /// Overrides the configuration's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Experiment directory; defaults to the configuration's `output`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the resolved configuration and plan, then stop.
    #[arg(long)]
    dry_run: bool,
    /// Replace existing outputs.
    #[arg(long)]
    force: bool,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InWindow { source, .. } => exit_code(source),
        Error::Config(_) | Error::Usage(_) | Error::Schema(_) => 2,
        Error::Io(_) | Error::Json(_) | Error::Stale(_) | Error::Incompatible(_) => 3,
        Error::Divergence { .. } => 5,
        _ => 4,
    }
}

impl Common {
    /// `--config`, else `--preset`, else the configuration stored with the
    /// dataset in `<out>/data`.
    fn resolve(&self) -> Result<(ExperimentConfig, PathBuf), Error> {
        let mut cfg = match (&self.config, &self.preset) {
            (Some(path), _) => ExperimentConfig::load(path)?,
            (None, Some(name)) => ExperimentConfig::preset(name)?,
            (None, None) => {
                let out = self
                    .out
                    .as_ref()
                    .ok_or_else(|| Error::usage("give --config, --preset or an --out holding a dataset"))?;
                let stored = out.join("data").join("config.json");
                if !stored.exists() {
                    return Err(Error::usage(format!(
                        "no --config or --preset and no {}",
                        stored.display()
                    )));
                }
                ExperimentConfig::load(&stored)?
            }
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        let out = match (&self.out, &cfg.output) {
            (Some(o), _) => o.clone(),
            (None, Some(o)) => PathBuf::from(o),
            (None, None) => PathBuf::from("runs").join(&cfg.name),
        };
        Ok((cfg, out))
    }
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<(), Error> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn dataset_plan(cfg: &ExperimentConfig) -> serde_json::Value {
    match &cfg.system {
        SystemSpec::App1(s) => serde_json::json!({
            "trajectories": s.trajectories,
            "split": s.split,
            "rows_per_trajectory": (s.horizon / s.dt).round() as usize + 1,
            "window": s.window,
        }),
        SystemSpec::App2(s) => serde_json::json!({
            "systems": s.systems,
            "noise_levels": s.noise_levels,
            "rows_per_trajectory": (s.test_horizon / s.dt).round() as usize,
            "labels": s.labels,
        }),
        SystemSpec::App3(s) => serde_json::json!({
            "runs": s.runs,
            "test_runs": s.test_runs,
            "noise_levels": s.noise_levels,
            "steps": s.steps,
        }),
    }
}

fn model_plan(cfg: &ExperimentConfig) -> Result<serde_json::Value, Error> {
    let configs = match &cfg.system {
        SystemSpec::App1(s) => vec![("local".to_string(), experiment::app1_model_config(cfg, s))],
        SystemSpec::App2(s) => s
            .noise_levels
            .iter()
            .flat_map(|&l| s.targets.iter().map(move |&t| (l, t)))
            .map(|(l, t)| (experiment::app2_model_name(l, t), experiment::app2_model_config(cfg, t)))
            .collect(),
        SystemSpec::App3(s) => s
            .noise_levels
            .iter()
            .map(|&l| (format!("xi_{l}"), experiment::app3_model_config(cfg)))
            .collect(),
    };
    let mut models = Vec::new();
    for (name, mc) in configs {
        models.push(serde_json::json!({
            "name": name,
            "kind": mc.kind(),
            "parameters": SetModel::new(mc.clone())?.param_count(),
            "features": mc.features,
            "targets": mc.targets.len(),
        }));
    }
    Ok(serde_json::json!({
        "models": models,
        "plan": cfg.training.plan(cfg.seed),
        "epochs": cfg.training.plan(cfg.seed).total_epochs(),
    }))
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Generate(c) => {
            let (cfg, out) = c.resolve()?;
            let data_dir = out.join("data");
            if c.dry_run {
                return print_json(&serde_json::json!({
                    "config": cfg,
                    "config_hash": cfg.hash(),
                    "data_hash": cfg.data_hash(),
                    "dataset": data_dir,
                    "generates": dataset_plan(&cfg),
                }));
            }
            if data_dir.join("manifest.json").exists() && !c.force {
                return Err(Error::usage(format!(
                    "{} already holds a dataset; pass --force to overwrite",
                    data_dir.display()
                )));
            }
            let data = generate(&cfg)?;
            let manifest = save_dataset(&cfg, &data, &data_dir, c.force)?;
            log::info!("wrote {} files to {}", manifest.files.len(), data_dir.display());
            print_json(&manifest.counts)
        }
        Command::Train { common: c, resume } => {
            let (cfg, out) = c.resolve()?;
            if c.dry_run {
                return print_json(&serde_json::json!({
                    "config_hash": cfg.hash(),
                    "dataset": out.join("data"),
                    "run": out.join("run"),
                    "resume": resume,
                    "training": model_plan(&cfg)?,
                }));
            }
            let run = experiment::train_run(&cfg, &out.join("data"), &out.join("run"), c.force, resume)?;
            print_json(&run.models)
        }
        Command::Evaluate(c) => {
            let (cfg, out) = c.resolve()?;
            let eval_dir = out.join("eval");
            if c.dry_run {
                return print_json(&serde_json::json!({
                    "config_hash": cfg.hash(),
                    "run": out.join("run"),
                    "output": eval_dir,
                    "evaluation": cfg.evaluation,
                }));
            }
            if eval_dir.join("evaluation.json").exists() && !c.force {
                return Err(Error::usage(format!(
                    "{} already holds an evaluation; pass --force to overwrite",
                    eval_dir.display()
                )));
            }
            let ev = experiment::evaluate(&cfg, &out.join("data"), &out.join("run"))?;
            ev.write(&eval_dir, c.force)?;
            print!("{}", ev.summary());
            Ok(())
        }
        Command::Identify {
            checkpoint,
            window,
            repeats,
            out,
            force,
        } => {
            if let Some(o) = &out {
                if o.exists() && !force {
                    return Err(Error::usage(format!(
                        "{} exists; pass --force to overwrite",
                        o.display()
                    )));
                }
            }
            let id = experiment::identify_window(&checkpoint, &window, repeats)?;
            let text = serde_json::to_string_pretty(&id)?;
            if let Some(o) = &out {
                std::fs::write(o, &text)?;
            }
            println!("{text}");
            Ok(())
        }
        Command::Report { out } => report(&out),
    }
}

fn report(out: &Path) -> Result<(), Error> {
    let run_path = out.join("run").join("run.json");
    let eval_path = out.join("eval").join("evaluation.json");
    if !run_path.exists() && !eval_path.exists() {
        return Err(Error::Stale(format!(
            "{} holds neither a run nor an evaluation",
            out.display()
        )));
    }
    if run_path.exists() {
        let run: RunManifest = serde_json::from_slice(&std::fs::read(&run_path)?)?;
        println!("run {} ({}), config {}", run.name, run.kind, &run.config_hash[..12]);
        println!(
            "{:<16} {:>10} {:>8} {:>8} {:>7} {:>12}",
            "model", "params", "train", "valid", "best", "valid loss"
        );
        for m in &run.models {
            println!(
                "{:<16} {:>10} {:>8} {:>8} {:>7} {:>12}",
                m.name,
                m.param_count,
                m.train_windows,
                m.valid_windows,
                m.best_epoch.map_or("-".into(), |e| e.to_string()),
                m.best_valid_loss.map_or("-".into(), |l| format!("{l:.4e}")),
            );
        }
    }
    if eval_path.exists() {
        let ev: Evaluation = serde_json::from_slice(&std::fs::read(&eval_path)?)?;
        println!();
        print!("{}", ev.summary());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(&cli.log))
        .format_timestamp_secs()
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
