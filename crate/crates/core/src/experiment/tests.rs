use super::*;
use crate::eval::ErrorMetric;
use crate::models::{DeepSetConfig, EncoderLayer};
use crate::tensor::{Activation, PoolKind};

fn tiny_model(heads: usize) -> Architecture {
    Architecture::DeepSet(DeepSetConfig {
        encoder: vec![8, 8],
        encoder_layer: EncoderLayer::Dense,
        equivariant_pool: None,
        pool: PoolKind::Mean,
        decoder: vec![8],
        activation: Activation::Relu,
        heads,
        hidden_norm: false,
    })
}

fn tiny_training(c: &mut ExperimentConfig) {
    c.training.stages = vec![Stage { lr: 1e-3, epochs: 2 }];
    c.training.batch_size = 16;
}

fn tiny_app1() -> ExperimentConfig {
    let mut c = ExperimentConfig::app1();
    c.name = "tiny-app1".into();
    if let SystemSpec::App1(s) = &mut c.system {
        s.trajectories = 6;
        s.split = [3, 2, 1];
        s.horizon = 6.0;
    }
    c.model = tiny_model(2);
    tiny_training(&mut c);
    c.evaluation.windows = vec![10];
    c.evaluation.horizons = vec![1, 2];
    c
}

fn tiny_app2() -> ExperimentConfig {
    let mut c = ExperimentConfig::app2();
    c.name = "tiny-app2".into();
    if let SystemSpec::App2(s) = &mut c.system {
        s.systems = 6;
        s.train_horizon = 1.0;
        s.test_horizon = 2.0;
        s.noise_levels = vec![0.0, 0.05];
        s.targets = vec![LorenzTarget::Rho];
        s.prefix_sizes = vec![20, 50];
        s.train_fraction = 0.5;
    }
    c.model = tiny_model(1);
    tiny_training(&mut c);
    c.training.window_policy = WindowPolicy::Prefix { sizes: vec![20, 50] };
    c
}

fn tiny_app3() -> ExperimentConfig {
    let mut c = ExperimentConfig::app3();
    c.name = "tiny-app3".into();
    if let SystemSpec::App3(s) = &mut c.system {
        s.runs = 6;
        s.test_runs = 3;
        s.train_fraction = 0.5;
        s.noise_levels = vec![0.0];
        s.steps = vec![5, 10];
    }
    c.model = tiny_model(3);
    tiny_training(&mut c);
    c.training.window_policy = WindowPolicy::Prefix { sizes: vec![10, 20] };
    c
}

fn schema_keys(r: Result<ExperimentConfig>) -> Vec<String> {
    match r {
        Err(Error::Schema(keys)) => keys,
        other => panic!("expected a schema error, got {other:?}"),
    }
}

#[test]
fn presets_validate_and_round_trip() {
    for name in PRESETS {
        let c = ExperimentConfig::preset(name).unwrap();
        c.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
        let back = ExperimentConfig::from_json(&c.to_json().unwrap()).unwrap();
        assert_eq!(back, c, "{name}");
        assert_eq!(back.hash(), c.hash());
    }
    assert!(matches!(ExperimentConfig::preset("nope"), Err(Error::Usage(_))));
}

#[test]
fn unknown_keys_are_listed() {
    let mut v = serde_json::to_value(ExperimentConfig::app1()).unwrap();
    v["system"]["windw"] = serde_json::json!(12);
    v["colour"] = serde_json::json!("red");
    let keys = schema_keys(ExperimentConfig::from_value(v));
    assert!(keys.iter().any(|k| k.starts_with("system.windw")), "{keys:?}");
    assert!(keys.iter().any(|k| k.starts_with("colour")), "{keys:?}");
}

#[test]
fn out_of_range_values_are_listed() {
    let mut c = ExperimentConfig::app1();
    if let SystemSpec::App1(s) = &mut c.system {
        s.split = [200, 56, 56];
        s.dt = -0.1;
    }
    c.training.batch_size = 0;
    let keys = schema_keys(ExperimentConfig::from_json(&c.to_json().unwrap()));
    for k in ["system.split", "system.dt", "training.batch_size"] {
        assert!(keys.iter().any(|x| x == k), "{k} missing from {keys:?}");
    }
}

#[test]
fn type_errors_and_versions_are_schema_errors() {
    let mut v = serde_json::to_value(ExperimentConfig::app2()).unwrap();
    v["seed"] = serde_json::json!("seven");
    schema_keys(ExperimentConfig::from_value(v.clone()));
    v["seed"] = serde_json::json!(7);
    v["schema_version"] = serde_json::json!(99);
    let keys = schema_keys(ExperimentConfig::from_value(v.clone()));
    assert!(keys[0].starts_with("schema_version"));
    v.as_object_mut().unwrap().remove("schema_version");
    schema_keys(ExperimentConfig::from_value(v));
}

#[test]
fn model_problems_surface_as_schema_errors() {
    let mut c = tiny_app1();
    // 40 outputs cannot be split over 3 heads.
    c.model = tiny_model(3);
    let keys = schema_keys(ExperimentConfig::from_json(&c.to_json().unwrap()));
    assert!(keys.iter().any(|k| k.starts_with("model")), "{keys:?}");
}

#[test]
fn data_hash_ignores_training_and_model() {
    let a = ExperimentConfig::app2();
    let mut b = a.clone();
    b.training.batch_size = 7;
    b.model = tiny_model(1);
    assert_eq!(a.data_hash(), b.data_hash());
    assert_ne!(a.hash(), b.hash());
    b.seed = 1;
    assert_ne!(a.data_hash(), b.data_hash());
}

#[test]
fn generation_is_deterministic() {
    for c in [tiny_app1(), tiny_app2(), tiny_app3()] {
        assert_eq!(generate(&c).unwrap(), generate(&c).unwrap(), "{}", c.name);
    }
    let mut other = tiny_app1();
    other.seed = 3;
    assert_ne!(generate(&tiny_app1()).unwrap(), generate(&other).unwrap());
}

#[test]
fn datasets_round_trip_and_detect_staleness() {
    let dir = tempfile::tempdir().unwrap();
    for c in [tiny_app1(), tiny_app2(), tiny_app3()] {
        let d = dir.path().join(&c.name);
        let data = generate(&c).unwrap();
        save_dataset(&c, &data, &d, false).unwrap();
        assert_eq!(load_dataset(&c, &d).unwrap(), data, "{}", c.name);
        assert!(matches!(save_dataset(&c, &data, &d, false), Err(Error::Usage(_))));
        save_dataset(&c, &data, &d, true).unwrap();

        let mut changed = c.clone();
        changed.seed += 1;
        assert!(matches!(load_dataset(&changed, &d), Err(Error::Stale(_))));
        // Training settings do not invalidate the data.
        let mut retrained = c.clone();
        retrained.training.batch_size = 3;
        load_dataset(&retrained, &d).unwrap();
    }
    let c = tiny_app1();
    let d = dir.path().join(&c.name);
    std::fs::write(d.join("splits.json"), "{}").unwrap();
    assert!(matches!(load_dataset(&c, &d), Err(Error::Stale(_))));
    assert!(matches!(load_dataset(&c, dir.path()), Err(Error::Stale(_))));
}

#[test]
fn app2_noisy_labels_come_from_tv() {
    let c = tiny_app2();
    let Dataset::App2(d) = generate(&c).unwrap() else {
        unreachable!()
    };
    assert_eq!(d.levels, vec![0.0, 0.05]);
    assert_ne!(d.trajectories[0][0].states, d.trajectories[1][0].states);
    for (k, labels) in d.labels.iter().enumerate() {
        for (i, l) in labels.iter().enumerate() {
            let l = l.expect("label");
            let rho = d.trajectories[k][i].provenance.parameters["rho"];
            assert!(
                (l[1] - rho).abs() < 0.25 * rho,
                "level {k} system {i}: {} vs {rho}",
                l[1]
            );
        }
    }
}

fn end_to_end(c: &ExperimentConfig) -> (RunManifest, Evaluation) {
    let dir = tempfile::tempdir().unwrap();
    let (data_dir, run_dir) = (dir.path().join("data"), dir.path().join("run"));
    save_dataset(c, &generate(c).unwrap(), &data_dir, false).unwrap();
    let run = train_run(c, &data_dir, &run_dir, false, false).unwrap();
    assert!(matches!(
        train_run(c, &data_dir, &run_dir, false, false),
        Err(Error::Usage(_))
    ));
    for m in &run.models {
        assert!(run_dir.join(&m.checkpoint).exists());
        assert!(run_dir.join(&m.name).join("curves.csv").exists());
        assert_eq!(m.epochs_run, 2);
    }
    let ev = evaluate(c, &data_dir, &run_dir).unwrap();
    ev.write(&dir.path().join("eval"), false).unwrap();
    assert!(matches!(
        ev.write(&dir.path().join("eval"), false),
        Err(Error::Usage(_))
    ));

    // Resuming continues after the best checkpoint.
    let resumed = train_run(c, &data_dir, &run_dir, false, true).unwrap();
    for (old, new) in run.models.iter().zip(&resumed.models) {
        assert_eq!(new.epochs_run, 2 - old.best_epoch.unwrap());
        assert!(new.best_valid_loss.unwrap() <= old.best_valid_loss.unwrap());
        let curves = std::fs::read_to_string(run_dir.join(&new.name).join("curves.csv")).unwrap();
        assert_eq!(curves.lines().count(), 3);
    }

    let mut changed = c.clone();
    changed.training.stages[0].epochs = 3;
    assert!(matches!(evaluate(&changed, &data_dir, &run_dir), Err(Error::Stale(_))));
    (run, ev)
}

#[test]
fn app1_end_to_end() {
    let (run, ev) = end_to_end(&tiny_app1());
    assert_eq!(run.models.len(), 1);
    // 2 horizons × 2 methods × 2 channels × 2 metrics.
    assert_eq!(ev.forecasts.len(), 16, "{}", ev.summary());
    // With the default rates the prey decays to nearly nothing, so only the
    // predator channel has meaningful relative errors.
    let oracle = ev
        .forecasts
        .iter()
        .find(|r| r.method == "label-oracle" && r.metric == ErrorMetric::Smape && r.horizon == 1 && r.channel == "y")
        .unwrap();
    assert!(oracle.mean < 5.0, "{}", ev.summary());
}

#[test]
fn app1_single_row_models_train_per_row() {
    let mut c = tiny_app1();
    c.model = Architecture::Oasis(crate::models::OasisConfig {
        hidden: vec![8],
        activation: Activation::Relu,
    });
    let Dataset::App1(d) = generate(&c).unwrap() else {
        unreachable!()
    };
    let SystemSpec::App1(s) = &c.system else { unreachable!() };
    let (sets, _) = app1_examples(s, &d, false).unwrap();
    let (rows, _) = app1_examples(s, &d, true).unwrap();
    assert_eq!(rows.len(), sets.len() * 10);
    assert!(rows.iter().all(|w| w.inputs.rows() == 1));
    assert_eq!(rows.iter().filter(|w| w.ode.is_some()).count(), sets.len());
    end_to_end(&c);
}

#[test]
fn app2_end_to_end() {
    let (run, ev) = end_to_end(&tiny_app2());
    assert_eq!(run.models.len(), 2);
    // 2 levels × 2 sections × (2 sizes + weighted + pooled).
    assert_eq!(ev.r2.len(), 16);
    assert_eq!(ev.predictions.len(), 2 * 2 * 3 * 2);
}

#[test]
fn app3_end_to_end() {
    let (run, ev) = end_to_end(&tiny_app3());
    assert_eq!(run.models.len(), 1);
    // 3 targets × (2 sizes + weighted + pooled).
    assert_eq!(ev.r2.len(), 12);
    assert!(ev.predictions.iter().all(|p| p.source >= 6));
}

#[test]
fn identify_reads_a_window_and_times_it() {
    let dir = tempfile::tempdir().unwrap();
    let c = tiny_app2();
    let model = crate::models::SetModel::new(app2_model_config(&c, LorenzTarget::Rho)).unwrap();
    let ck = dir.path().join("m.json");
    model.save(&ck).unwrap();
    let csv = dir.path().join("w.csv");
    std::fs::write(&csv, "t,x,y,z\n0,1,2,3\n0.01,1.1,2.1,3.1\n").unwrap();
    let id = identify_window(&ck, &csv, 5).unwrap();
    assert_eq!(id.rows, 2);
    assert_eq!(id.repeats, 5);
    assert!(id.latency_ms > 0.0);
    let x = read_window_csv("t,x,y,z\n0,1,2,3\n0.01,1.1,2.1,3.1\n", &model.config().features).unwrap();
    assert_eq!(id.outputs["rho"], model.predict(&x).unwrap()[0]);

    std::fs::write(&csv, "t,x,z,y\n0,1,2,3\n").unwrap();
    assert!(matches!(identify_window(&ck, &csv, 1), Err(Error::Config(_))));
    std::fs::write(&csv, "t,x,y,z\n0,1,two,3\n").unwrap();
    assert!(matches!(identify_window(&ck, &csv, 1), Err(Error::Config(_))));
    std::fs::write(&csv, "t,x,y,z\n").unwrap();
    assert!(matches!(identify_window(&ck, &csv, 1), Err(Error::Usage(_))));
}
