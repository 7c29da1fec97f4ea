//! Smoothed labels and the smoothed cross-entropy.
//!
//! Every method keeps mass `1 - alpha` on the true class and hands the
//! remaining `alpha` to a distribution `q'` over the classes:
//!
//! * `Sls`: uniform over the `K - 1` wrong classes,
//! * `Als`: all of it on the class with the smallest logit,
//! * `Bls`: soft-min (Boltzmann at temperature `T`) over the wrong classes,
//! * `Sbls`: all of it on the wrong class with the largest logit.
//!
//! Arg-min / arg-max ties go to the lowest class index.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{argmax, argmin, log_softmax, softmax, LossGrad};

/// Smallest temperature used by the Boltzmann soft-min.
pub const MIN_TEMPERATURE: f64 = 1e-12;

const SIMPLEX_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Sls,
    Als,
    Bls,
    Sbls,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Sls, Method::Als, Method::Bls, Method::Sbls];

    pub fn name(self) -> &'static str {
        match self {
            Method::Sls => "sls",
            Method::Als => "als",
            Method::Bls => "bls",
            Method::Sbls => "sbls",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sls" => Ok(Method::Sls),
            "als" => Ok(Method::Als),
            "bls" => Ok(Method::Bls),
            "sbls" => Ok(Method::Sbls),
            other => Err(Error::InvalidArgument(format!("unknown smoothing method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSmoothing")]
pub struct SmoothingConfig {
    method: Method,
    alpha: f64,
    temperature: f64,
}

#[derive(Deserialize)]
struct RawSmoothing {
    method: Method,
    alpha: f64,
    #[serde(default = "default_temperature")]
    temperature: f64,
}

/// BLS temperature used when none is given.
pub const DEFAULT_TEMPERATURE: f64 = 0.001;

fn default_temperature() -> f64 {
    DEFAULT_TEMPERATURE
}

impl TryFrom<RawSmoothing> for SmoothingConfig {
    type Error = Error;

    fn try_from(raw: RawSmoothing) -> Result<Self> {
        SmoothingConfig::new(raw.method, raw.alpha)?.with_temperature(raw.temperature)
    }
}

impl SmoothingConfig {
    pub fn new(method: Method, alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        Ok(Self {
            method,
            alpha,
            temperature: DEFAULT_TEMPERATURE,
        })
    }

    pub fn with_temperature(mut self, temperature: f64) -> Result<Self> {
        if !(temperature > 0.0) {
            return Err(Error::InvalidArgument(format!("temperature must be > 0, got {temperature}")));
        }
        self.temperature = temperature;
        Ok(self)
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    Ok(())
}

/// A point of the probability simplex.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LabelDistribution(Vec<f64>);

impl LabelDistribution {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidArgument("empty label distribution".into()));
        }
        if weights.iter().any(|w| !(*w >= -SIMPLEX_TOL) || !w.is_finite()) {
            return Err(Error::InvalidArgument(format!("negative or non-finite label weight in {weights:?}")));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("label weights sum to {total}, not 1")));
        }
        Ok(Self(weights))
    }

    pub fn one_hot(class: usize, class_count: usize) -> Result<Self> {
        check_class(class, class_count)?;
        let mut w = vec![0.0; class_count];
        w[class] = 1.0;
        Ok(Self(w))
    }

    pub fn uniform(class_count: usize) -> Self {
        Self(vec![1.0 / class_count as f64; class_count])
    }

    pub fn weights(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

fn check_class(class: usize, class_count: usize) -> Result<()> {
    if class >= class_count {
        return Err(Error::InvalidArgument(format!("class {class} out of range for {class_count} classes")));
    }
    Ok(())
}

fn check_len(context: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::shape(context, a, b));
    }
    Ok(())
}

/// Total-variation distance `0.5 * |a - b|_1`.
pub fn tv_distance(a: &LabelDistribution, b: &LabelDistribution) -> Result<f64> {
    check_len("tv_distance", a.len(), b.len())?;
    Ok(0.5 * a.0.iter().zip(&b.0).map(|(x, y)| (x - y).abs()).sum::<f64>())
}

/// The redistribution target `q'` of a method, before mixing with the
/// one-hot label.
pub fn redistribution(method: Method, temperature: f64, y: usize, logits: ArrayView1<f64>) -> Result<Vec<f64>> {
    let k = logits.len();
    if k < 2 {
        return Err(Error::InvalidArgument(format!("need at least two classes, got {k}")));
    }
    check_class(y, k)?;
    if !logits.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("logits"));
    }
    let mut q = vec![0.0; k];
    match method {
        Method::Sls => {
            let share = 1.0 / (k - 1) as f64;
            for (i, w) in q.iter_mut().enumerate() {
                if i != y {
                    *w = share;
                }
            }
        }
        Method::Als => q[argmin(logits)] = 1.0,
        Method::Sbls => {
            let mut best: Option<usize> = None;
            for (i, &z) in logits.iter().enumerate() {
                if i != y && best.is_none_or(|b| z > logits[b]) {
                    best = Some(i);
                }
            }
            q[best.expect("k >= 2")] = 1.0;
        }
        Method::Bls => {
            let t = temperature.max(MIN_TEMPERATURE);
            let wrong: Vec<usize> = (0..k).filter(|&i| i != y).collect();
            let energies = ndarray::Array1::from_iter(wrong.iter().map(|&i| -logits[i] / t));
            for (&i, p) in wrong.iter().zip(softmax(energies.view())) {
                q[i] = p;
            }
        }
    }
    Ok(q)
}

/// `(1 - alpha) e_y + alpha q'` for the configured method.
pub fn smooth_labels(cfg: &SmoothingConfig, y: usize, logits: ArrayView1<f64>) -> Result<LabelDistribution> {
    let q_prime = redistribution(cfg.method, cfg.temperature, y, logits)?;
    Ok(LabelDistribution(mix(y, cfg.alpha, &q_prime)))
}

fn mix(y: usize, alpha: f64, q_prime: &[f64]) -> Vec<f64> {
    q_prime
        .iter()
        .enumerate()
        .map(|(i, &w)| if i == y { (1.0 - alpha) + alpha * w } else { alpha * w })
        .collect()
}

/// Smoothed targets for a batch; with `cfg = None` the rows are one-hot.
pub fn smooth_batch(cfg: Option<&SmoothingConfig>, labels: &[usize], logits: ArrayView2<f64>) -> Result<Array2<f64>> {
    check_len("smooth_batch labels", logits.nrows(), labels.len())?;
    let k = logits.ncols();
    let mut q = Array2::zeros((labels.len(), k));
    for (i, (&y, z)) in labels.iter().zip(logits.rows()).enumerate() {
        check_class(y, k)?;
        match cfg {
            Some(cfg) => {
                let row = smooth_labels(cfg, y, z)?;
                q.row_mut(i).assign(&ArrayView1::from(row.weights()));
            }
            None => q[[i, y]] = 1.0,
        }
    }
    Ok(q)
}

/// `-sum_k q_k log softmax(z)_k`.
pub fn smooth_ce(q: &LabelDistribution, logits: ArrayView1<f64>) -> Result<f64> {
    check_len("smooth_ce", q.len(), logits.len())?;
    let ls = log_softmax(logits);
    Ok(-q.0.iter().zip(ls.iter()).map(|(w, l)| w * l).sum::<f64>())
}

/// Standard cross-entropy `-log p_y`.
pub fn cross_entropy(y: usize, logits: ArrayView1<f64>) -> Result<f64> {
    check_class(y, logits.len())?;
    Ok(-log_softmax(logits)[y])
}

/// Mean smoothed cross-entropy over a batch and its gradient with respect
/// to the logits, `(softmax(z) - q) / batch`.
pub fn smooth_ce_batch(targets: ArrayView2<f64>, logits: ArrayView2<f64>) -> Result<LossGrad> {
    if targets.dim() != logits.dim() {
        return Err(Error::shape(
            "smooth_ce_batch",
            format!("{:?}", logits.dim()),
            format!("{:?}", targets.dim()),
        ));
    }
    let n = logits.nrows().max(1) as f64;
    let mut value = 0.0;
    let mut cotangent = Array2::zeros(logits.dim());
    for ((q, z), mut g) in targets.rows().into_iter().zip(logits.rows()).zip(cotangent.rows_mut()) {
        let ls = log_softmax(z);
        value -= q.dot(&ls);
        let p = ls.mapv(f64::exp);
        g.assign(&((&p - &q) / n));
    }
    Ok(LossGrad::new(value / n, cotangent))
}

/// The logit penalty `(e_y - q')^T z` induced by smoothing.
pub fn logit_penalty(y: usize, q_prime: &LabelDistribution, logits: ArrayView1<f64>) -> Result<f64> {
    check_len("logit_penalty", q_prime.len(), logits.len())?;
    check_class(y, logits.len())?;
    Ok(logits[y] - q_prime.0.iter().zip(logits.iter()).map(|(w, z)| w * z).sum::<f64>())
}

/// Maximiser of `q^T g` over the simplex subject to `q_t >= 1 - alpha`:
/// `(1 - alpha) e_t + alpha e_{argmax g}`.
pub fn solve_inner_max(g: ArrayView1<f64>, t: usize, alpha: f64) -> Result<LabelDistribution> {
    check_alpha(alpha)?;
    check_class(t, g.len())?;
    let mut q = vec![0.0; g.len()];
    q[t] += 1.0 - alpha;
    q[argmax(g)] += alpha;
    Ok(LabelDistribution(q))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < tol)
    }

    #[test]
    fn tv_distance_examples() {
        let e0 = LabelDistribution::one_hot(0, 3).unwrap();
        let e1 = LabelDistribution::one_hot(1, 3).unwrap();
        assert_eq!(tv_distance(&e0, &e0).unwrap(), 0.0);
        assert_eq!(tv_distance(&e0, &e1).unwrap(), 1.0);
        let q = LabelDistribution::new(vec![0.8, 0.2, 0.0]).unwrap();
        assert!((tv_distance(&q, &e0).unwrap() - 0.2).abs() < 1e-15);
        assert!(tv_distance(&q, &LabelDistribution::uniform(2)).is_err());
    }

    #[test]
    fn sls_spreads_mass_uniformly() {
        let cfg = SmoothingConfig::new(Method::Sls, 0.3).unwrap();
        let q = smooth_labels(&cfg, 1, array![0.0, 0.0, 0.0, 0.0].view()).unwrap();
        assert!(close(q.weights(), &[0.1, 0.7, 0.1, 0.1], 1e-15));
    }

    #[test]
    fn als_and_sbls_pick_worst_and_second_best() {
        let z = array![2.0, -1.0, 0.5];
        let als = smooth_labels(&SmoothingConfig::new(Method::Als, 0.2).unwrap(), 0, z.view()).unwrap();
        assert!(close(als.weights(), &[0.8, 0.2, 0.0], 1e-15));
        let sbls = smooth_labels(&SmoothingConfig::new(Method::Sbls, 0.2).unwrap(), 0, z.view()).unwrap();
        assert!(close(sbls.weights(), &[0.8, 0.0, 0.2], 1e-15));
    }

    #[test]
    fn bls_is_a_soft_min_over_wrong_classes() {
        let cfg = SmoothingConfig::new(Method::Bls, 0.2).unwrap().with_temperature(1.0).unwrap();
        let q = smooth_labels(&cfg, 0, array![2.0, -1.0, 0.5].view()).unwrap();
        assert!(close(q.weights(), &[0.8, 0.163_514_9, 0.036_485_1], 1e-7), "{q:?}");
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let z = array![1.0, 0.0, 0.0, 1.0];
        let als = redistribution(Method::Als, 1.0, 3, z.view()).unwrap();
        assert_eq!(als, vec![0.0, 1.0, 0.0, 0.0]);
        let sbls = redistribution(Method::Sbls, 1.0, 1, z.view()).unwrap();
        assert_eq!(sbls, vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(SmoothingConfig::new(Method::Als, 1.5).is_err());
        assert!(SmoothingConfig::new(Method::Als, -0.1).is_err());
        assert!(SmoothingConfig::new(Method::Bls, 0.1).unwrap().with_temperature(0.0).is_err());
        let cfg = SmoothingConfig::new(Method::Sls, 0.1).unwrap();
        assert!(smooth_labels(&cfg, 0, array![1.0].view()).is_err());
        assert!(smooth_labels(&cfg, 3, array![1.0, 2.0].view()).is_err());
    }

    #[test]
    fn tiny_temperature_is_clamped() {
        let cfg = SmoothingConfig::new(Method::Bls, 0.5).unwrap().with_temperature(1e-300).unwrap();
        let q = smooth_labels(&cfg, 0, array![0.0, 3.0, -2.0].view()).unwrap();
        assert!(close(q.weights(), &[0.5, 0.0, 0.5], 1e-15));
    }

    #[test]
    fn smooth_ce_examples() {
        let z = array![1.0, -0.5, 2.0];
        let e2 = LabelDistribution::one_hot(2, 3).unwrap();
        assert!((smooth_ce(&e2, z.view()).unwrap() - cross_entropy(2, z.view()).unwrap()).abs() < 1e-15);

        // logits ln(p) give p = (0.5, 0.25, 0.25)
        let z = array![0.5f64.ln(), 0.25f64.ln(), 0.25f64.ln()];
        let q = LabelDistribution::new(vec![0.8, 0.2, 0.0]).unwrap();
        assert!((smooth_ce(&q, z.view()).unwrap() - 0.831_776_616_671_934_3).abs() < 1e-12);

        let flat = array![4.0, 4.0, 4.0, 4.0, 4.0];
        let u = LabelDistribution::uniform(5);
        assert!((smooth_ce(&u, flat.view()).unwrap() - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn logit_penalty_examples() {
        let z = array![2.0, -1.0, 0.5];
        let e0 = LabelDistribution::one_hot(0, 3).unwrap();
        assert_eq!(logit_penalty(0, &e0, z.view()).unwrap(), 0.0);
        let worst = LabelDistribution(redistribution(Method::Als, 1.0, 0, z.view()).unwrap());
        assert_eq!(logit_penalty(0, &worst, z.view()).unwrap(), 3.0);
        let sb = LabelDistribution(redistribution(Method::Sbls, 1.0, 0, z.view()).unwrap());
        assert_eq!(logit_penalty(0, &sb, z.view()).unwrap(), 1.5);
    }

    #[test]
    fn inner_max_examples() {
        let g = array![3.0, 1.0, 2.0];
        assert_eq!(solve_inner_max(g.view(), 1, 0.0).unwrap().weights(), &[0.0, 1.0, 0.0]);
        assert_eq!(solve_inner_max(g.view(), 1, 1.0).unwrap().weights(), &[1.0, 0.0, 0.0]);
        let q = solve_inner_max(g.view(), 1, 0.4).unwrap();
        assert!(close(q.weights(), &[0.4, 0.6, 0.0], 1e-15));
        let objective: f64 = q.weights().iter().zip(g.iter()).map(|(a, b)| a * b).sum();
        assert!((objective - 1.8).abs() < 1e-12);
        assert!(solve_inner_max(g.view(), 1, 1.2).is_err());
    }

    #[test]
    fn batch_loss_gradient_is_p_minus_q() {
        let z = array![[1.0, 2.0, 0.0], [0.0, 0.0, 0.0]];
        let q = smooth_batch(None, &[1, 2], z.view()).unwrap();
        assert_eq!(q, array![[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        let lg = smooth_ce_batch(q.view(), z.view()).unwrap();
        let expected = (cross_entropy(1, z.row(0)).unwrap() + cross_entropy(2, z.row(1)).unwrap()) / 2.0;
        assert!((lg.value - expected).abs() < 1e-14);
        let p = softmax(z.row(1));
        assert!((lg.cotangent[[1, 2]] - (p[2] - 1.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("xls".parse::<Method>().is_err());
    }
}
