use proptest::prelude::{prop_assert, proptest, ProptestConfig};
use rand::seq::SliceRandom;
use rand::Rng as _;

use super::*;
use crate::rng::seeded;
use crate::tensor::gradcheck::check_gradients;

fn names(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

fn random_rows(rng: &mut Rng, n: usize, d: usize) -> Tensor {
    Tensor::matrix(n, d, (0..n * d).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
}

fn small_deep_set(pool: PoolKind, layer: EncoderLayer, heads: usize) -> ModelConfig {
    ModelConfig {
        features: names("f", 3),
        targets: names("o", 2),
        seed: 11,
        architecture: Architecture::DeepSet(DeepSetConfig {
            encoder: vec![8, 6],
            encoder_layer: layer,
            equivariant_pool: None,
            pool,
            decoder: vec![5],
            activation: Activation::Gelu,
            heads,
            hidden_norm: false,
        }),
    }
}

fn small_set_transformer(encoder: Vec<BlockKind>) -> ModelConfig {
    ModelConfig {
        features: names("f", 3),
        targets: names("o", 2),
        seed: 5,
        architecture: Architecture::SetTransformer(SetTransformerConfig {
            d_model: 8,
            heads: 2,
            head_dim: None,
            encoder,
            rff_layers: 2,
            activation: Activation::Gelu,
            block_activation: Activation::None,
            pool_dim: Some(6),
            seeds: 1,
            decoder_sab: true,
            decoder_layers: 1,
            layer_norm: true,
        }),
    }
}

fn small_models() -> Vec<SetModel> {
    [
        small_deep_set(PoolKind::Mean, EncoderLayer::Dense, 1),
        small_deep_set(PoolKind::Max, EncoderLayer::Equivariant, 2),
        small_deep_set(PoolKind::AbsMean, EncoderLayer::Dense, 2),
        small_set_transformer(vec![BlockKind::Sab]),
        small_set_transformer(vec![BlockKind::Isab { inducing: 4 }, BlockKind::Sab]),
    ]
    .into_iter()
    .map(|c| SetModel::new(c).unwrap())
    .collect()
}

fn counts_match(cfg: ModelConfig) -> usize {
    let expected = cfg.param_count().unwrap();
    let model = SetModel::new(cfg).unwrap();
    assert_eq!(model.param_count(), expected);
    expected
}

#[test]
fn lorenz_deep_set_count() {
    assert_eq!(counts_match(ModelConfig::lorenz_deep_set(0)), 927_043);
}

#[test]
fn heat_deep_set_count() {
    assert_eq!(counts_match(ModelConfig::heat_deep_set(0)), 1_262_083);
}

#[test]
fn lorenz_set_transformer_count() {
    let n = counts_match(ModelConfig::lorenz_set_transformer(0));
    assert_eq!(n, 1_054_398);
    assert!((n as f64 / 1_045_733.0 - 1.0).abs() < 0.02);
}

#[test]
fn small_counts_match_builders() {
    for m in small_models() {
        assert_eq!(
            m.config().param_count().unwrap(),
            m.param_count(),
            "{}",
            m.config().kind()
        );
    }
}

#[test]
fn permutation_invariance() {
    let mut rng = seeded(3);
    for model in small_models() {
        for _ in 0..10 {
            let n = rng.gen_range(1..20);
            let x = random_rows(&mut rng, n, 3);
            let base = model.predict(&x).unwrap();
            for _ in 0..5 {
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(&mut rng);
                let y = model.predict(&x.permute_rows(&perm)).unwrap();
                for (a, b) in base.iter().zip(&y) {
                    assert!((a - b).abs() < 1e-6, "{}: {a} vs {b}", model.config().kind());
                }
            }
        }
    }
}

#[test]
fn single_row_mean_equals_sum() {
    let mean = SetModel::new(small_deep_set(PoolKind::Mean, EncoderLayer::Dense, 1)).unwrap();
    let sum = SetModel::new(small_deep_set(PoolKind::Sum, EncoderLayer::Dense, 1)).unwrap();
    let x = random_rows(&mut seeded(1), 1, 3);
    assert_eq!(mean.predict(&x).unwrap(), sum.predict(&x).unwrap());
}

#[test]
fn duplicated_rows_under_mean_and_sum() {
    let mean = SetModel::new(small_deep_set(PoolKind::Mean, EncoderLayer::Dense, 1)).unwrap();
    let sum = SetModel::new(small_deep_set(PoolKind::Sum, EncoderLayer::Dense, 1)).unwrap();
    let row = random_rows(&mut seeded(2), 1, 3);
    let twice = Tensor::from_rows(&vec![row.row_slice(0).to_vec(); 2]).unwrap();
    assert_eq!(mean.predict(&row).unwrap(), mean.predict(&twice).unwrap());
    assert_ne!(sum.predict(&row).unwrap(), sum.predict(&twice).unwrap());
}

#[test]
fn variable_lengths() {
    let mut rng = seeded(8);
    for model in small_models() {
        for n in [1, 10, 100, 1000] {
            let out = model.predict(&random_rows(&mut rng, n, 3)).unwrap();
            assert_eq!(out.len(), 2);
        }
    }
}

#[test]
fn batched_forward_matches_single() {
    let mut rng = seeded(9);
    let windows: Vec<Tensor> = [1, 4, 7].iter().map(|&n| random_rows(&mut rng, n, 3)).collect();
    let refs: Vec<&Tensor> = windows.iter().collect();
    for model in small_models() {
        let batch = model.predict_batch(&refs).unwrap();
        for (i, w) in windows.iter().enumerate() {
            let single = model.predict(w).unwrap();
            for (a, b) in batch.row_slice(i).iter().zip(&single) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn equivariant_encoder_commutes_with_permutation() {
    let model = SetModel::new(small_deep_set(PoolKind::Sum, EncoderLayer::Equivariant, 1)).unwrap();
    let mut rng = seeded(4);
    let x = random_rows(&mut rng, 9, 3);
    let mut perm: Vec<usize> = (0..9).collect();
    perm.shuffle(&mut rng);
    let a = model.encode_rows(&x.permute_rows(&perm)).unwrap();
    let b = model.encode_rows(&x).unwrap().permute_rows(&perm);
    assert_eq!(a, b);
}

#[test]
fn scaling_maps_back_to_raw_units() {
    let mut model = SetModel::new(small_deep_set(PoolKind::Mean, EncoderLayer::Dense, 1)).unwrap();
    let x = random_rows(&mut seeded(6), 5, 3);
    let base = model.predict(&x).unwrap();
    model.scaling.output_mean = vec![10.0, -3.0];
    model.scaling.output_std = vec![2.0, 0.5];
    let scaled = model.predict(&x).unwrap();
    assert!((scaled[0] - (2.0 * base[0] + 10.0)).abs() < 1e-12);
    assert!((scaled[1] - (0.5 * base[1] - 3.0)).abs() < 1e-12);
}

#[test]
fn scaling_fit_handles_constant_columns() {
    let a = Tensor::from_rows(&[vec![1.0, 5.0], vec![3.0, 5.0]]).unwrap();
    let s = Scaling::fit(&[&a], &[&[2.0], &[4.0]]).unwrap();
    assert_eq!(s.input_mean, vec![2.0, 5.0]);
    assert_eq!(s.input_std, vec![1.0, 1.0]);
    assert_eq!(s.output_mean, vec![3.0]);
    assert_eq!(s.output_std, vec![1.0]);
}

#[test]
fn oasis_takes_one_row() {
    let model = SetModel::new(ModelConfig::oasis(names("f", 4), names("o", 3), 1)).unwrap();
    let mut rng = seeded(0);
    assert_eq!(model.predict(&random_rows(&mut rng, 1, 4)).unwrap().len(), 3);
    assert!(matches!(
        model.predict(&random_rows(&mut rng, 2, 4)),
        Err(Error::Config(_))
    ));
}

#[test]
fn feature_mismatch_is_config_error() {
    let model = &small_models()[0];
    assert!(matches!(model.predict(&Tensor::zeros(&[3, 4])), Err(Error::Config(_))));
}

#[test]
fn invalid_configs_rejected() {
    let mut c = small_deep_set(PoolKind::Mean, EncoderLayer::Dense, 3);
    assert!(SetModel::new(c.clone()).is_err());
    c.architecture = small_set_transformer(vec![BlockKind::Isab { inducing: 0 }]).architecture;
    assert!(SetModel::new(c).is_err());
    let mut st = small_set_transformer(vec![BlockKind::Sab]);
    if let Architecture::SetTransformer(s) = &mut st.architecture {
        s.heads = 3;
    }
    assert!(SetModel::new(st).is_err());
}

#[test]
fn pooling_constant_rows_independent_of_count() {
    let model = SetModel::new(small_set_transformer(vec![BlockKind::Sab])).unwrap();
    let row = vec![0.3, -1.2, 0.8];
    let few = model
        .predict(&Tensor::from_rows(&vec![row.clone(); 2]).unwrap())
        .unwrap();
    let many = model.predict(&Tensor::from_rows(&vec![row; 50]).unwrap()).unwrap();
    for (a, b) in few.iter().zip(&many) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = seeded(12);
    let x = random_rows(&mut rng, 6, 3);
    for (i, mut model) in small_models().into_iter().enumerate() {
        model.scaling.input_mean = vec![0.1, 0.2, 0.3];
        model.scaling.output_std = vec![3.0, 0.25];
        let path = dir.path().join(format!("m{i}.json"));
        model.save(&path).unwrap();
        let back = SetModel::load(&path).unwrap();
        assert_eq!(back.config(), model.config());
        assert_eq!(back.scaling, model.scaling);
        for id in model.store().ids() {
            assert_eq!(back.store().get(id), model.store().get(id));
        }
        assert_eq!(back.predict(&x).unwrap(), model.predict(&x).unwrap());
    }
}

#[test]
fn corrupted_checkpoint_rejected() {
    let model = &small_models()[0];
    let mut ck = model.to_checkpoint().unwrap();
    ck.version += 1;
    assert!(matches!(SetModel::from_checkpoint(&ck), Err(Error::Incompatible(_))));
    let mut ck = model.to_checkpoint().unwrap();
    ck.params.remove("decoder/layer0/weights");
    assert!(matches!(SetModel::from_checkpoint(&ck), Err(Error::Incompatible(_))));
}

#[test]
fn gradients_match_finite_differences() {
    let mut rng = seeded(21);
    let windows: Vec<Tensor> = [3, 5].iter().map(|&n| random_rows(&mut rng, n, 3)).collect();
    for model in small_models() {
        let mut store = model.store().clone();
        let report = check_gradients(&mut store, 1e-6, |tape, p| {
            let refs: Vec<&Tensor> = windows.iter().collect();
            let y = model.forward(tape, p, &refs)?;
            let sq = tape.square(y)?;
            Ok(tape.sum_all(sq))
        })
        .unwrap();
        // Attention-score parameters get gradients near 1e-5 here, where
        // the central difference is only good to about 1e-9 absolute.
        for r in &report {
            let ok = r.rel_error < 1e-5 || r.rel_error * r.analytic_norm < 1e-8;
            assert!(
                ok,
                "{} {}: {} (norm {})",
                model.config().kind(),
                r.name,
                r.rel_error,
                r.analytic_norm
            );
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn any_permutation_leaves_output_unchanged(seed in 0u64..1000, n in 1usize..30) {
        let mut rng = seeded(seed);
        let x = random_rows(&mut rng, n, 3);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        for model in small_models() {
            let a = model.predict(&x).unwrap();
            let b = model.predict(&x.permute_rows(&perm)).unwrap();
            for (u, v) in a.iter().zip(&b) {
                prop_assert!((u - v).abs() < 1e-6);
            }
        }
    }
}
