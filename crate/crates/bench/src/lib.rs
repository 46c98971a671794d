//! Shared fixtures for the benchmarks.

use rand::Rng as _;
use sendi_core::models::{Architecture, BlockKind, ModelConfig, SetModel, SetTransformerConfig};
use sendi_core::rng::substream;
use sendi_core::tensor::Activation;
use sendi_core::Tensor;

/// `n × cols` standard-uniform window.
pub fn random_window(n: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = substream(seed, "bench/window");
    let data = (0..n * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::matrix(n, cols, data).expect("shape matches data")
}

/// Set Transformer with a single encoder block of the given kind; everything
/// else is kept small so the block dominates the cost.
pub fn one_block_set_transformer(block: BlockKind, d_model: usize, heads: usize) -> SetModel {
    let names = |p: &str, n: usize| (0..n).map(|i| format!("{p}{i}")).collect::<Vec<_>>();
    SetModel::new(ModelConfig {
        features: names("f", 4),
        targets: names("o", 1),
        seed: 0,
        architecture: Architecture::SetTransformer(SetTransformerConfig {
            d_model,
            heads,
            head_dim: None,
            encoder: vec![block],
            rff_layers: 1,
            activation: Activation::Relu,
            block_activation: Activation::None,
            pool_dim: None,
            seeds: 1,
            decoder_sab: false,
            decoder_layers: 1,
            layer_norm: true,
        }),
    })
    .expect("valid benchmark model")
}
