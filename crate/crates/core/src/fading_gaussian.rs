//! The fading-Gaussian binary problem and its closed-form robustness
//! analysis.
//!
//! `Y` is uniform on `{-1, +1}` and the features are independent,
//! `X_j | Y = y ~ N(y mu_j, sigma_j^2)`. A linear classifier predicts
//! `sign(w^T x)`; its standard and l-inf adversarial accuracies have closed
//! forms in terms of the Gaussian CDF, and so does the most robust linear
//! classifier when the covariance is diagonal.

use ndarray::{Array1, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Standard Gaussian CDF.
pub fn normal_cdf(t: f64) -> f64 {
    0.5 * libm::erfc(-t / std::f64::consts::SQRT_2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianProblem {
    mu: Array1<f64>,
    sigma: Array1<f64>,
}

impl GaussianProblem {
    pub fn new(mu: Array1<f64>, sigma: Array1<f64>) -> Result<Self> {
        if mu.is_empty() || mu.len() != sigma.len() {
            return Err(Error::shape("gaussian problem", mu.len(), sigma.len()));
        }
        if !sigma.iter().all(|s| *s > 0.0 && s.is_finite()) || !mu.iter().all(|m| m.is_finite()) {
            return Err(Error::InvalidArgument("sigma must be positive and all parameters finite".into()));
        }
        Ok(Self { mu, sigma })
    }

    /// `sigma_i = 1 - (i - 1) / d` and `mu_i = sigma_i^2` for `i = 1..=d`.
    pub fn fading_schedule(d: usize) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidArgument("dimension must be >= 1".into()));
        }
        let sigma = Array1::from_iter((0..d).map(|i| 1.0 - i as f64 / d as f64));
        let mu = sigma.mapv(|s| s * s);
        Self::new(mu, sigma)
    }

    pub fn mu(&self) -> ArrayView1<'_, f64> {
        self.mu.view()
    }

    pub fn sigma(&self) -> ArrayView1<'_, f64> {
        self.sigma.view()
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// `Delta(eps) = sum_j sigma_j^-2 ((|mu_j| - eps)_+)^2`.
    pub fn robust_signal(&self, eps: f64) -> f64 {
        self.mu
            .iter()
            .zip(&self.sigma)
            .map(|(m, s)| {
                let r = (m.abs() - eps).max(0.0);
                r * r / (s * s)
            })
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearClassifier {
    pub w: Array1<f64>,
}

impl LinearClassifier {
    pub fn new(w: Array1<f64>) -> Result<Self> {
        if !w.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("classifier weights"));
        }
        Ok(Self { w })
    }

    pub fn is_zero(&self) -> bool {
        self.w.iter().all(|&v| v == 0.0)
    }
}

fn check(p: &GaussianProblem, c: &LinearClassifier) -> Result<()> {
    if c.w.len() != p.dim() {
        return Err(Error::shape("classifier", p.dim(), c.w.len()));
    }
    if c.is_zero() {
        return Err(Error::ZeroWeights);
    }
    Ok(())
}

/// `Psi(w^T mu / sqrt(sum_j w_j^2 sigma_j^2))`.
pub fn standard_accuracy(p: &GaussianProblem, c: &LinearClassifier) -> Result<f64> {
    adversarial_accuracy(p, c, 0.0)
}

/// `Psi((w^T mu - eps |w|_1) / sqrt(sum_j w_j^2 sigma_j^2))`.
pub fn adversarial_accuracy(p: &GaussianProblem, c: &LinearClassifier, eps: f64) -> Result<f64> {
    check(p, c)?;
    if !(eps >= 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon must be >= 0, got {eps}")));
    }
    let signal = c.w.dot(&p.mu);
    let l1: f64 = c.w.iter().map(|v| v.abs()).sum();
    let spread = c
        .w
        .iter()
        .zip(&p.sigma)
        .map(|(w, s)| w * w * s * s)
        .sum::<f64>()
        .sqrt();
    Ok(normal_cdf((signal - eps * l1) / spread))
}

/// Bayes-optimal weights `w_j = mu_j / sigma_j^2`.
pub fn bayes_weights(p: &GaussianProblem) -> LinearClassifier {
    LinearClassifier {
        w: p.mu.iter().zip(&p.sigma).map(|(m, s)| m / (s * s)).collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobustWeights {
    pub classifier: LinearClassifier,
    /// Every weight vanished (`eps >= |mu|_inf`); no linear rule beats chance.
    pub degenerate: bool,
}

/// Most robust linear classifier for a diagonal covariance,
/// `w_j = sigma_j^-2 sign(mu_j) (|mu_j| - eps)_+`.
pub fn optimal_robust_weights(p: &GaussianProblem, eps: f64) -> Result<RobustWeights> {
    if !(eps >= 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon must be >= 0, got {eps}")));
    }
    let w: Array1<f64> = p
        .mu
        .iter()
        .zip(&p.sigma)
        .map(|(m, s)| m.signum() * (m.abs() - eps).max(0.0) / (s * s))
        .collect();
    let degenerate = w.iter().all(|&v| v == 0.0);
    Ok(RobustWeights {
        classifier: LinearClassifier { w },
        degenerate,
    })
}

/// Best adversarial accuracy over all linear classifiers,
/// `Psi(sqrt(Delta(eps)))`; `0.5` in the degenerate case.
pub fn optimal_adv_accuracy(p: &GaussianProblem, eps: f64) -> Result<f64> {
    if !(eps >= 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon must be >= 0, got {eps}")));
    }
    Ok(normal_cdf(p.robust_signal(eps).sqrt()))
}

/// Bracket on the dual value `min_{|w|_Sigma <= 1} eps |w|_1 - w^T a`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualBounds {
    pub lower: f64,
    pub upper: f64,
}

fn shrunk_energy(a: ArrayView1<f64>, eps: f64) -> f64 {
    a.iter()
        .map(|v| {
            let r = (v.abs() - eps).max(0.0);
            r * r
        })
        .sum()
}

/// Bounds for a general covariance from its extreme eigenvalues:
/// `-sqrt(gamma / lambda_min) <= value <= -sqrt(gamma / lambda_max)` with
/// `gamma = sum_j ((|a_j| - eps)_+)^2`.
pub fn general_sigma_bounds(a: ArrayView1<f64>, min_eigenvalue: f64, max_eigenvalue: f64, eps: f64) -> Result<DualBounds> {
    if !(min_eigenvalue > 0.0 && min_eigenvalue <= max_eigenvalue) {
        return Err(Error::InvalidArgument(format!(
            "need 0 < min eigenvalue <= max eigenvalue, got ({min_eigenvalue}, {max_eigenvalue})"
        )));
    }
    let gamma = shrunk_energy(a, eps);
    Ok(DualBounds {
        lower: -(gamma / min_eigenvalue).sqrt(),
        upper: -(gamma / max_eigenvalue).sqrt(),
    })
}

/// Exact dual value for `Sigma = diag(sigma^2)`:
/// `-sqrt(sum_j sigma_j^-2 ((|a_j| - eps)_+)^2)`.
pub fn diagonal_dual_value(a: ArrayView1<f64>, sigma: ArrayView1<f64>, eps: f64) -> Result<f64> {
    if a.len() != sigma.len() {
        return Err(Error::shape("diagonal_dual_value", a.len(), sigma.len()));
    }
    let total: f64 = a
        .iter()
        .zip(sigma.iter())
        .map(|(v, s)| {
            let r = (v.abs() - eps).max(0.0);
            r * r / (s * s)
        })
        .sum();
    Ok(-total.sqrt())
}

/// Draws from the problem. Labels are `+1` / `-1`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSample {
    pub x: Array2<f64>,
    pub y: Vec<i8>,
}

fn draw(p: &GaussianProblem, rng: &mut ChaCha8Rng, out: &mut [f64]) -> i8 {
    let y: i8 = if rng.random::<bool>() { 1 } else { -1 };
    for ((o, m), s) in out.iter_mut().zip(&p.mu).zip(&p.sigma) {
        let z: f64 = rng.sample(StandardNormal);
        *o = f64::from(y) * m + s * z;
    }
    y
}

pub fn sample(p: &GaussianProblem, n: usize, seed: u64) -> Result<GaussianSample> {
    if n == 0 {
        return Err(Error::InvalidArgument("sample size must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Array2::zeros((n, p.dim()));
    let y = x
        .rows_mut()
        .into_iter()
        .map(|mut row| draw(p, &mut rng, row.as_slice_mut().expect("standard layout")))
        .collect();
    Ok(GaussianSample { x, y })
}

const MC_CHUNK: usize = 1 << 16;

/// Monte-Carlo estimate of the accuracy of `c` under the worst-case l-inf
/// perturbation `x - eps * y * sign(w)`. Chunk `i` uses ChaCha stream `i`,
/// so the estimate does not depend on the thread count.
pub fn monte_carlo_accuracy(p: &GaussianProblem, c: &LinearClassifier, eps: f64, n: usize, seed: u64) -> Result<f64> {
    check(p, c)?;
    if n == 0 {
        return Err(Error::InvalidArgument("sample size must be >= 1".into()));
    }
    let shift: Array1<f64> = c.w.mapv(|w| eps * w.signum());
    let chunks = n.div_ceil(MC_CHUNK);
    let correct: usize = (0..chunks)
        .into_par_iter()
        .map(|chunk| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(chunk as u64);
            let count = MC_CHUNK.min(n - chunk * MC_CHUNK);
            let mut x = vec![0.0; p.dim()];
            (0..count)
                .filter(|_| {
                    let y = f64::from(draw(p, &mut rng, &mut x));
                    let score: f64 = x
                        .iter()
                        .zip(&c.w)
                        .zip(&shift)
                        .map(|((xi, wi), si)| wi * (xi - y * si))
                        .sum();
                    y * score > 0.0
                })
                .count()
        })
        .sum();
    Ok(correct as f64 / n as f64)
}

/// Gradient-descent settings for [`train_als_linear`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlsLinearConfig {
    pub alpha: f64,
    pub n: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for AlsLinearConfig {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            n: 20_000,
            epochs: 50,
            lr: 0.1,
            seed: 0,
        }
    }
}

/// Fits `w` by full-batch gradient descent from zero on the binary ALS
/// loss over a fresh sample. A sample the current `w` classifies correctly
/// (`y w^T x > 0`) gets target `(1 - alpha, alpha)`; a misclassified one
/// keeps its hard label, since the worst logit is then its own class.
pub fn train_als_linear(p: &GaussianProblem, cfg: &AlsLinearConfig) -> Result<LinearClassifier> {
    if !(0.0..=1.0).contains(&cfg.alpha) {
        return Err(Error::InvalidArgument(format!("alpha must lie in [0, 1], got {}", cfg.alpha)));
    }
    if !(cfg.lr > 0.0) || cfg.epochs == 0 {
        return Err(Error::InvalidArgument("need lr > 0 and at least one epoch".into()));
    }
    let data = sample(p, cfg.n, cfg.seed)?;
    let labels: Array1<f64> = data.y.iter().map(|&y| f64::from(y)).collect();
    let mut w = Array1::<f64>::zeros(p.dim());
    for epoch in 0..cfg.epochs {
        let margins = data.x.dot(&w) * &labels;
        // d/dm of -(t ln s(m) + (1 - t) ln s(-m)) is s(m) - t
        let mut loss = 0.0;
        let coeff: Array1<f64> = margins
            .iter()
            .zip(&labels)
            .map(|(&m, &y)| {
                let target = if m > 0.0 { 1.0 - cfg.alpha } else { 1.0 };
                loss += target * softplus(-m) + (1.0 - target) * softplus(m);
                (sigmoid(m) - target) * y
            })
            .collect();
        let grad = data.x.t().dot(&coeff) / cfg.n as f64;
        w.scaled_add(-cfg.lr, &grad);
        if !w.iter().all(|v| v.is_finite()) || !loss.is_finite() {
            return Err(Error::Divergence {
                epoch,
                loss: loss / cfg.n as f64,
            });
        }
    }
    LinearClassifier::new(w)
}

fn sigmoid(m: f64) -> f64 {
    if m >= 0.0 {
        1.0 / (1.0 + (-m).exp())
    } else {
        let e = m.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^m)`.
fn softplus(m: f64) -> f64 {
    m.max(0.0) + (-m.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn two_feature() -> GaussianProblem {
        GaussianProblem::new(array![1.0, 0.25], array![1.0, 0.5]).unwrap()
    }

    #[test]
    fn normal_cdf_values() {
        assert_eq!(normal_cdf(0.0), 0.5);
        for t in [0.3, 1.7, 4.2] {
            assert!((normal_cdf(t) + normal_cdf(-t) - 1.0).abs() < 1e-15);
        }
        // mpmath.ncdf(1.118034)
        assert!((normal_cdf(1.118034) - 0.868_223_763_760_843).abs() < 1e-12);
    }

    #[test]
    fn accuracy_examples() {
        let p = two_feature();
        let w = LinearClassifier::new(array![1.0, 1.0]).unwrap();
        // mpmath.ncdf(sqrt(1.25)), mpmath.ncdf(0.75 / sqrt(1.25))
        assert!((standard_accuracy(&p, &w).unwrap() - 0.868_223_761_358_514).abs() < 1e-12);
        assert!((adversarial_accuracy(&p, &w, 0.25).unwrap() - 0.748_832_522_819_749).abs() < 1e-12);
        assert_eq!(adversarial_accuracy(&p, &w, 0.0).unwrap(), standard_accuracy(&p, &w).unwrap());

        let scaled = LinearClassifier::new(array![7.5, 7.5]).unwrap();
        assert!((standard_accuracy(&p, &scaled).unwrap() - standard_accuracy(&p, &w).unwrap()).abs() < 1e-12);

        let centred = GaussianProblem::new(array![0.0, 0.0], array![1.0, 0.5]).unwrap();
        assert_eq!(standard_accuracy(&centred, &w).unwrap(), 0.5);

        let zero = LinearClassifier::new(array![0.0, 0.0]).unwrap();
        assert!(matches!(standard_accuracy(&p, &zero), Err(Error::ZeroWeights)));
    }

    #[test]
    fn adversarial_accuracy_decreases_with_budget() {
        let p = GaussianProblem::fading_schedule(6).unwrap();
        let w = bayes_weights(&p);
        let accs: Vec<f64> = (0..=20).map(|i| adversarial_accuracy(&p, &w, i as f64 * 0.05).unwrap()).collect();
        assert!(accs.windows(2).all(|a| a[1] <= a[0]));
    }

    #[test]
    fn bayes_weights_examples() {
        let p = GaussianProblem::fading_schedule(10).unwrap();
        for w in bayes_weights(&p).w.iter() {
            assert!((w - 1.0).abs() < 1e-12);
        }
        let p = GaussianProblem::new(array![2.0, -1.0], array![1.0, 2.0]).unwrap();
        assert_eq!(bayes_weights(&p).w, array![2.0, -0.25]);
    }

    #[test]
    fn robust_weights_examples() {
        let p = two_feature();
        assert_eq!(optimal_robust_weights(&p, 0.0).unwrap().classifier, bayes_weights(&p));
        let r = optimal_robust_weights(&p, 0.25).unwrap();
        assert_eq!(r.classifier.w, array![0.75, 0.0]);
        assert!(!r.degenerate);
        assert!(optimal_robust_weights(&p, 1.0).unwrap().degenerate);
    }

    #[test]
    fn optimal_accuracy_examples() {
        let p = two_feature();
        assert!((optimal_adv_accuracy(&p, 0.0).unwrap() - 0.868_223_761_358_514).abs() < 1e-12);
        assert_eq!(optimal_adv_accuracy(&p, 1.0).unwrap(), 0.5);
        assert_eq!(optimal_adv_accuracy(&p, 3.0).unwrap(), 0.5);
        let r = optimal_robust_weights(&p, 0.1).unwrap();
        let a = adversarial_accuracy(&p, &r.classifier, 0.1).unwrap();
        assert!((a - optimal_adv_accuracy(&p, 0.1).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn schedule_examples() {
        let p = GaussianProblem::fading_schedule(2).unwrap();
        assert_eq!(p.sigma(), array![1.0, 0.5]);
        assert_eq!(p.mu(), array![1.0, 0.25]);
        let p = GaussianProblem::fading_schedule(1).unwrap();
        assert_eq!((p.mu()[0], p.sigma()[0]), (1.0, 1.0));
        let p = GaussianProblem::fading_schedule(10).unwrap();
        assert!((p.sigma()[9] - 0.1).abs() < 1e-15 && (p.mu()[9] - 0.01).abs() < 1e-15);
        assert!(GaussianProblem::fading_schedule(0).is_err());
    }

    #[test]
    fn bounds_examples() {
        let a = array![0.1, -0.2, 0.05];
        assert_eq!(general_sigma_bounds(a.view(), 0.5, 2.0, 0.2).unwrap(), DualBounds { lower: 0.0, upper: 0.0 });
        let a = array![1.0, -0.7, 0.3];
        let b = general_sigma_bounds(a.view(), 0.64, 0.64, 0.2).unwrap();
        assert_eq!(b.lower, b.upper);
        let exact = diagonal_dual_value(a.view(), array![0.8, 0.8, 0.8].view(), 0.2).unwrap();
        assert!((exact - b.lower).abs() < 1e-15);
        assert!(general_sigma_bounds(a.view(), 2.0, 1.0, 0.2).is_err());
    }

    #[test]
    fn dual_value_squares_to_robust_signal() {
        let p = GaussianProblem::fading_schedule(7).unwrap();
        let v = diagonal_dual_value(p.mu(), p.sigma(), 0.15).unwrap();
        assert!((v * v - p.robust_signal(0.15)).abs() < 1e-14);
    }

    #[test]
    fn sampling_is_seeded() {
        let p = two_feature();
        assert_eq!(sample(&p, 100, 4).unwrap(), sample(&p, 100, 4).unwrap());
        assert_ne!(sample(&p, 100, 4).unwrap(), sample(&p, 100, 5).unwrap());
        assert!(sample(&p, 0, 4).is_err());
    }

    #[test]
    fn zero_alpha_is_logistic_regression() {
        // plain logistic gradient descent, written out independently
        let p = two_feature();
        let cfg = AlsLinearConfig { alpha: 0.0, n: 500, epochs: 20, lr: 0.5, seed: 3 };
        let w = train_als_linear(&p, &cfg).unwrap().w;
        let data = sample(&p, 500, 3).unwrap();
        let mut v = Array1::<f64>::zeros(2);
        for _ in 0..20 {
            let mut grad = Array1::<f64>::zeros(2);
            for (x, &y) in data.x.rows().into_iter().zip(&data.y) {
                let y = f64::from(y);
                let m = y * x.dot(&v);
                grad = grad + &x * (-(y) / (1.0 + m.exp()));
            }
            v = v - grad * (0.5 / 500.0);
        }
        for (a, b) in w.iter().zip(v.iter()) {
            assert!((a - b).abs() < 1e-12, "{w} vs {v}");
        }
    }
}
