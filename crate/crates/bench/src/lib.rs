//! Shared fixtures for the criterion benches.

use rand::Rng;
use stic_core::data::{gen_gaussians_2d, gen_shapes, Dataset};
use stic_core::rng::stream;
use stic_core::{Architecture, ClassifierModel, Tensor};

/// A `shape`d tensor of uniform values in `[-1, 1]`.
pub fn uniform(shape: &[usize], seed: u64) -> Tensor {
    let mut r = stream(seed, "bench/uniform");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// The 3-Gaussian toy with an untrained `[64, 64]` MLP.
pub fn toy_points() -> (Dataset, ClassifierModel) {
    let data = gen_gaussians_2d(3, 100, 0.5, 1).expect("valid toy");
    let model = ClassifierModel::new(Architecture::mlp(2, &[64, 64], 3), 1).expect("valid arch");
    (data, model)
}

/// 8x8 shapes with the small CNN.
pub fn toy_images() -> (Dataset, ClassifierModel) {
    let data = gen_shapes(20, 8, 1).expect("valid shapes");
    let model = ClassifierModel::new(Architecture::cnn(1, 8, 3), 1).expect("valid arch");
    (data, model)
}
