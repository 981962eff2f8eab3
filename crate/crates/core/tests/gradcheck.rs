//! Back-propagated gradients of the whole network against central differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spoofbench_core::archsearch::Prenorm;
use spoofbench_core::backprop::{backward, build_with_std, forward_loss, NetConfig, TrainableNet};
use spoofbench_core::convops::LayerSpec;
use spoofbench_core::{Label, MultibandImage};

const STEP: f64 = 1e-5;
/// Gradients below this magnitude are compared absolutely; central
/// differences cannot resolve them any better in double precision.
const FLOOR: f64 = 1e-8;

fn layer(n_filters: usize, filter_size: usize, pool: (usize, usize, f64), norm_size: Option<usize>) -> LayerSpec {
    LayerSpec {
        n_filters,
        filter_size,
        pool_size: pool.0,
        pool_stride: pool.1,
        pool_exponent: pool.2,
        norm_size,
    }
}

fn config(layers: Vec<LayerSpec>, bands: usize) -> NetConfig {
    NetConfig {
        input_size: 8,
        crop_size: 8,
        in_bands: bands,
        prenorm: Prenorm::None,
        layers,
    }
}

fn randomized(config: &NetConfig, seed: u64) -> TrainableNet {
    let mut net = build_with_std(config, seed, 0.5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params: Vec<f64> = net.parameters().iter().map(|_| rng.random_range(-0.3..0.3)).collect();
    net.set_parameters(&params).unwrap();
    net
}

fn batch(bands: usize, seed: u64) -> (Vec<MultibandImage>, Vec<Label>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = (0..3)
        .map(|_| {
            MultibandImage::new(
                8,
                8,
                bands,
                (0..64 * bands).map(|_| rng.random_range(0.0..1.0)).collect(),
            )
            .unwrap()
        })
        .collect();
    (images, vec![Label::Real, Label::Fake, Label::Fake])
}

fn max_relative_error(config: &NetConfig, seed: u64) -> f64 {
    let mut net = randomized(config, seed);
    let (images, labels) = batch(config.in_bands, seed + 100);
    let (_, grads) = backward(&net, &images, &labels).unwrap();
    let analytic = grads.flatten();
    let params = net.parameters();
    assert_eq!(analytic.len(), params.len());
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        let mut p = params.clone();
        p[i] = params[i] + STEP;
        net.set_parameters(&p).unwrap();
        let plus = forward_loss(&net, &images, &labels).unwrap().0;
        p[i] = params[i] - STEP;
        net.set_parameters(&p).unwrap();
        let minus = forward_loss(&net, &images, &labels).unwrap().0;
        let numeric = (plus - minus) / (2.0 * STEP);
        let err = (numeric - analytic[i]).abs() / numeric.abs().max(analytic[i].abs()).max(FLOOR);
        worst = worst.max(err);
    }
    net.set_parameters(&params).unwrap();
    worst
}

#[test]
fn two_layers_with_normalization() {
    let cfg = config(
        vec![layer(2, 3, (3, 1, 2.0), None), layer(2, 1, (1, 1, 1.0), Some(3))],
        1,
    );
    assert_eq!(cfg.feature_len().unwrap(), 8);
    for seed in 0..3 {
        let e = max_relative_error(&cfg, seed);
        assert!(e < 1e-4, "seed {seed}: max relative error {e}");
    }
}

#[test]
fn normalization_then_strided_l10_pool() {
    let cfg = config(
        vec![layer(2, 1, (3, 1, 10.0), Some(3)), layer(3, 3, (1, 1, 2.0), None)],
        2,
    );
    for seed in 0..3 {
        let e = max_relative_error(&cfg, seed);
        assert!(e < 1e-4, "seed {seed}: max relative error {e}");
    }
}

#[test]
fn strided_average_pooling_without_normalization() {
    let cfg = config(vec![layer(2, 3, (3, 2, 1.0), None), layer(2, 1, (1, 1, 2.0), None)], 3);
    for seed in 0..3 {
        let e = max_relative_error(&cfg, seed);
        assert!(e < 1e-4, "seed {seed}: max relative error {e}");
    }
}
