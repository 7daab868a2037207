//! Shared inputs for the benchmarks.

use cellnas_core::data::gen_synthetic;
use cellnas_core::{OpKind, SearchConfig, SearchData, SyntheticSpec, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// A small search setting: four operations, 8x8 images.
pub fn small_search() -> (SearchConfig, SearchData) {
    let config = SearchConfig {
        epochs: 8,
        warmup_epochs: 2,
        prune_interval: 2,
        cells: 4,
        init_channels: 8,
        batch_size: 16,
        batches_per_epoch: 2,
        ops: vec![
            OpKind::Identity,
            OpKind::SepConv3x3,
            OpKind::AvgPool3x3,
            OpKind::MaxPool3x3,
        ],
        ..SearchConfig::default()
    };
    let spec = SyntheticSpec {
        samples: 128,
        size: 8,
        ..SyntheticSpec::default()
    };
    let data = SearchData::from_halves(&gen_synthetic(&spec, 0).expect("valid spec"));
    (config, data)
}
