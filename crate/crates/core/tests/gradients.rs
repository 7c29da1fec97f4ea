mod common;

use common::{finite_difference_check, FD_STEP};
use lsrobust::nn::{DenseNetwork, LossGrad, Tape};
use lsrobust::smoothing::{smooth_batch, Method, SmoothingConfig};
use lsrobust::Error;
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_batch(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((n, d), || rng.random_range(-1.0..1.0))
}

#[test]
fn parameter_and_input_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..20 {
        let d = rng.random_range(1..6);
        let k = rng.random_range(2..6);
        let hidden: Vec<usize> = (0..rng.random_range(0..3)).map(|_| rng.random_range(1..7)).collect();
        let net = common::random_mlp(&mut rng, d, &hidden, k);
        let x = random_batch(&mut rng, 3, d);
        let labels: Vec<usize> = (0..3).map(|_| rng.random_range(0..k)).collect();
        let targets = smooth_batch(None, &labels, net.logits(x.view()).unwrap().view()).unwrap();
        let (worst, failures) = finite_difference_check(&net, x.view(), targets.view(), 1e-5, 1e-8);
        assert_eq!(failures, 0, "trial {trial}: worst relative error {worst}");
    }
}

#[test]
fn smoothed_targets_treated_as_constants() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for method in Method::ALL {
        let cfg = SmoothingConfig::new(method, 0.3).unwrap().with_temperature(0.5).unwrap();
        let net = DenseNetwork::mlp(4, &[5], 4, 7).unwrap();
        let x = random_batch(&mut rng, 4, 4);
        let labels = vec![0, 1, 2, 3];
        let targets = smooth_batch(Some(&cfg), &labels, net.logits(x.view()).unwrap().view()).unwrap();
        let (worst, failures) = finite_difference_check(&net, x.view(), targets.view(), 1e-5, 1e-8);
        assert_eq!(failures, 0, "{method}: worst relative error {worst}");
    }
}

#[test]
fn jacobian_rows_match_finite_differences() {
    let net = DenseNetwork::mlp(3, &[6, 4], 3, 5).unwrap();
    let x = Array1::from(vec![0.2, -0.4, 0.7]);
    let jac = net.input_jacobian(x.view()).unwrap();
    for c in 0..3 {
        let mut up = x.clone();
        up[c] += FD_STEP;
        let mut down = x.clone();
        down[c] -= FD_STEP;
        let dz = (net.forward(up.view()).unwrap().logits - net.forward(down.view()).unwrap().logits) / (2.0 * FD_STEP);
        for k in 0..3 {
            assert!((jac[[k, c]] - dz[k]).abs() < 1e-7, "d z_{k} / d x_{c}");
        }
    }
}

#[test]
fn backward_without_forward_is_an_error() {
    let net = DenseNetwork::linear(2, 2, 0).unwrap();
    let err = Tape::new()
        .backward(&net, &LossGrad::new(0.0, Array2::zeros((1, 2))), false)
        .unwrap_err();
    assert!(matches!(err, Error::NoForwardPass));
}

#[test]
fn linear_model_gradient_is_outer_product() {
    // d/dW of mean CE for a linear model is (p - e_y) x^T / n.
    let net = DenseNetwork::linear(2, 2, 3).unwrap();
    let x = Array2::from_shape_vec((1, 2), vec![0.5, -1.5]).unwrap();
    let mut tape = Tape::new();
    let z = tape.forward(&net, x.view()).unwrap();
    let targets = smooth_batch(None, &[1], z.view()).unwrap();
    let lg = lsrobust::smoothing::smooth_ce_batch(targets.view(), z.view()).unwrap();
    let g = tape.backward(&net, &lg, false).unwrap();
    let p = lsrobust::nn::softmax(z.row(0));
    let expected = ndarray::arr2(&[[p[0] * 0.5, p[0] * -1.5], [(p[1] - 1.0) * 0.5, (p[1] - 1.0) * -1.5]]);
    let diff = &g.layers[0].weight - &expected;
    assert!(diff.iter().all(|v| v.abs() < 1e-15), "{diff}");
    assert!(g.input.is_none());
}
