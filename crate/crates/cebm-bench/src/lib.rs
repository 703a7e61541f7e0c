//! Shared fixtures for the criterion benchmarks: deterministic models,
//! datasets, and parameter sets sized like the desk-scale experiments.

use cebm_core::autodiff::TensorValue;
use cebm_core::dataio::{gen_synthetic_opt, Dataset, SyntheticKind, SyntheticOptions};
use cebm_core::expfam::GaussianNaturalParams;
use cebm_core::model::{CebmModel, EncoderConfig, Model};
use cebm_core::rng::{step_stream, Purpose, Stream};

pub const BENCH_SEED: u64 = 1234;

pub fn rng(step: u64) -> Stream {
    step_stream(BENCH_SEED, Purpose::Eval, step)
}

/// Conv-tiny CEBM over 16x16 grayscale, the shape the desk experiments use.
pub fn desk_model() -> Model {
    let enc = EncoderConfig::conv_tiny(1, 16, 16, 16);
    Model::Cebm(CebmModel::new(enc, 1.0, BENCH_SEED).expect("model builds"))
}

/// Bar patterns matching the desk experiments: four classes, jittered.
pub fn desk_data(n_per_class: usize) -> Dataset {
    let opts = SyntheticOptions {
        num_classes: None,
        noise_std: 0.08,
        jitter: 4,
    };
    let mut r = rng(0);
    gen_synthetic_opt(SyntheticKind::BarPatterns, n_per_class, 16, opts, &mut r)
        .expect("synthetic data")
}

/// A batch of uniform noise images shaped like the desk data.
pub fn noise_batch(n: usize) -> TensorValue {
    let mut r = rng(1);
    let pixels: Vec<f64> = (0..n * 256).map(|_| rand::Rng::gen::<f64>(&mut r)).collect();
    TensorValue::new(vec![n, 1, 16, 16], pixels).expect("batch shape")
}

/// Well-conditioned natural parameters of the given dimension.
pub fn natural_params(dim: usize) -> GaussianNaturalParams {
    let lam1: Vec<f64> = (0..dim).map(|i| 0.3 + 0.01 * i as f64).collect();
    let lam2: Vec<f64> = (0..dim).map(|i| -0.5 - 0.02 * i as f64).collect();
    GaussianNaturalParams::new(lam1, lam2).expect("valid params")
}
