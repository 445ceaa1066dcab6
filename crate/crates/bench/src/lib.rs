//! Seeded fixtures shared by the benchmarks.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use svdkl::trainer::initialize_model;
use svdkl::{SvdklModel, TrainConfig, TrainingLog};

/// Uniform entries in [−1, 1).
pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

/// An initialized (untrained) model on random data plus that data.
pub fn model_fixture(
    n: usize,
    input_dim: usize,
    outputs: usize,
    layer_sizes: &[usize],
    inducing: usize,
) -> (SvdklModel, Array2<f64>, Array2<f64>) {
    let x = random_matrix(n, input_dim, 1);
    let y = random_matrix(n, outputs, 2);
    let cfg = TrainConfig {
        layer_sizes: layer_sizes.to_vec(),
        inducing_count: inducing,
        pretrain_epochs: 2,
        ..TrainConfig::default()
    };
    let model = initialize_model(x.view(), y.view(), &cfg, &mut TrainingLog::default()).expect("fixture model");
    (model, x, y)
}
