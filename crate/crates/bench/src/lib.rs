//! Shared fixtures for the benchmarks.

use clinpeft_core::models::{EncoderConfig, EncoderModel};
use clinpeft_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Tiny encoder with a classification head over a 300-token vocabulary.
pub fn tiny_classifier(seed: u64) -> EncoderModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m =
        EncoderModel::new(EncoderConfig::tiny(300), &mut rng).expect("tiny config is valid");
    m.add_classifier_head(&mut rng)
        .expect("fresh model has no head");
    m
}

/// `n` sequences of 6..=14 ids, each starting with `[CLS]`, and
/// alternating labels.
pub fn batch(n: usize, seed: u64) -> (Vec<Vec<usize>>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids = (0..n)
        .map(|_| {
            let len = rng.gen_range(6..=14);
            std::iter::once(2)
                .chain((1..len).map(|_| rng.gen_range(4..300)))
                .collect()
        })
        .collect();
    (ids, (0..n).map(|i| i % 2).collect())
}
