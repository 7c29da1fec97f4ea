#![allow(dead_code)]

use std::path::PathBuf;

use lsrobust::data::{self, Dataset, Split};
use lsrobust::nn::{Dense, DenseNetwork, Tape};
use lsrobust::smoothing::smooth_ce_batch;
use ndarray::{Array2, ArrayView2};
use rand::Rng;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-6;

/// `|a - b| <= rel * max(|a|, |b|) + abs`.
pub fn grad_close(analytic: f64, numeric: f64, rel: f64, abs: f64) -> bool {
    (analytic - numeric).abs() <= rel * analytic.abs().max(numeric.abs()) + abs
}

fn loss(net: &DenseNetwork, x: ArrayView2<f64>, targets: ArrayView2<f64>) -> f64 {
    let z = net.logits(x).unwrap();
    smooth_ce_batch(targets, z.view()).unwrap().value
}

fn with_param(net: &DenseNetwork, layer: usize, index: usize, delta: f64) -> DenseNetwork {
    let mut layers: Vec<Dense> = net.layers().to_vec();
    let l = &mut layers[layer];
    let w = l.weight.len();
    if index < w {
        let cols = l.weight.ncols();
        l.weight[[index / cols, index % cols]] += delta;
    } else {
        l.bias[index - w] += delta;
    }
    DenseNetwork::new(layers).unwrap()
}

/// MLP with random weights and biases. Non-zero biases keep
/// pre-activations away from the ReLU kink at exactly zero, which a
/// zero-bias layer hits whenever every unit feeding it is inactive.
pub fn random_mlp(rng: &mut impl Rng, d: usize, hidden: &[usize], k: usize) -> DenseNetwork {
    let mut layers = DenseNetwork::mlp(d, hidden, k, rng.random()).unwrap().layers().to_vec();
    for l in &mut layers {
        l.bias.mapv_inplace(|_| rng.random_range(-0.5..0.5));
    }
    DenseNetwork::new(layers).unwrap()
}

/// Worst violation of [`grad_close`] over every parameter and input
/// coordinate, as `(max relative error, failures)`.
pub fn finite_difference_check(
    net: &DenseNetwork,
    x: ArrayView2<f64>,
    targets: ArrayView2<f64>,
    rel: f64,
    abs: f64,
) -> (f64, usize) {
    let mut tape = Tape::new();
    let z = tape.forward(net, x).unwrap();
    let lg = smooth_ce_batch(targets, z.view()).unwrap();
    let grads = tape.backward(net, &lg, true).unwrap();

    let mut worst: f64 = 0.0;
    let mut failures = 0;
    let mut record = |a: f64, n: f64| {
        let scale = a.abs().max(n.abs());
        if scale > abs {
            worst = worst.max((a - n).abs() / scale);
        }
        if !grad_close(a, n, rel, abs) {
            failures += 1;
        }
    };
    for (li, (layer, g)) in net.layers().iter().zip(&grads.layers).enumerate() {
        let analytic: Vec<f64> = g.weight.iter().chain(g.bias.iter()).copied().collect();
        for (i, &a) in analytic.iter().enumerate().take(layer.weight.len() + layer.bias.len()) {
            let up = loss(&with_param(net, li, i, FD_STEP), x, targets);
            let down = loss(&with_param(net, li, i, -FD_STEP), x, targets);
            record(a, (up - down) / (2.0 * FD_STEP));
        }
    }
    let gx = grads.input.unwrap();
    for r in 0..x.nrows() {
        for c in 0..x.ncols() {
            let mut up: Array2<f64> = x.to_owned();
            up[[r, c]] += FD_STEP;
            let mut down: Array2<f64> = x.to_owned();
            down[[r, c]] -= FD_STEP;
            let n = (loss(net, up.view(), targets) - loss(net, down.view(), targets)) / (2.0 * FD_STEP);
            record(gx[[r, c]], n);
        }
    }
    (worst, failures)
}

/// `$LSROBUST_DATA_DIR/mnist`, else `<workspace>/data/mnist`.
pub fn mnist_dir() -> PathBuf {
    match std::env::var_os(data::DATA_DIR_ENV) {
        Some(_) => data::default_mnist_dir(),
        None => PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"),
    }
}

pub fn load_mnist(split: Split) -> Dataset {
    let dir = mnist_dir();
    data::load_mnist_dir(&dir, split).unwrap_or_else(|e| {
        panic!(
            "MNIST not available in {} ({e}); run scripts/fetch_mnist.sh or set {}",
            dir.display(),
            data::DATA_DIR_ENV
        )
    })
}

pub fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}
