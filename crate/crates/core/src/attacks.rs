//! White-box l-inf evasion attacks.
//!
//! FGSM, BIM and PGD ascend the standard one-hot cross-entropy of the
//! attacked model, whatever loss it was trained with. `sign(0) = 0`, so
//! coordinates with a zero gradient are left alone. DeepFool steps towards
//! the nearest linearised decision boundary in l-inf geometry.
//!
//! The batched entry points treat every row independently; the
//! single-example functions are thin wrappers around them.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{softmax_rows, DenseNetwork, LossGrad, Tape};

pub const DEFAULT_OVERSHOOT: f64 = 0.02;
pub const DEFAULT_DEEPFOOL_STEPS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    Fgsm,
    Bim,
    Pgd,
    #[serde(rename = "deepfool")]
    DeepFool,
}

impl AttackKind {
    pub fn name(self) -> &'static str {
        match self {
            AttackKind::Fgsm => "fgsm",
            AttackKind::Bim => "bim",
            AttackKind::Pgd => "pgd",
            AttackKind::DeepFool => "deepfool",
        }
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fgsm" => Ok(AttackKind::Fgsm),
            "bim" => Ok(AttackKind::Bim),
            "pgd" => Ok(AttackKind::Pgd),
            "deepfool" => Ok(AttackKind::DeepFool),
            other => Err(Error::InvalidArgument(format!("unknown attack {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub kind: AttackKind,
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
    pub clip_min: f64,
    pub clip_max: f64,
    /// PGD only: start from a uniform draw in the epsilon ball.
    pub random_start: bool,
    pub seed: u64,
    /// DeepFool only.
    pub overshoot: f64,
}

impl AttackConfig {
    pub fn fgsm(epsilon: f64) -> Self {
        Self {
            kind: AttackKind::Fgsm,
            epsilon,
            steps: 1,
            step_size: epsilon,
            clip_min: 0.0,
            clip_max: 1.0,
            random_start: false,
            seed: 0,
            overshoot: DEFAULT_OVERSHOOT,
        }
    }

    pub fn bim(epsilon: f64, steps: usize, step_size: f64) -> Self {
        Self {
            kind: AttackKind::Bim,
            steps,
            step_size,
            ..Self::fgsm(epsilon)
        }
    }

    pub fn pgd(epsilon: f64, steps: usize, step_size: f64, seed: u64) -> Self {
        Self {
            kind: AttackKind::Pgd,
            steps,
            step_size,
            random_start: true,
            seed,
            ..Self::fgsm(epsilon)
        }
    }

    /// DeepFool searches without a budget; [`perturb_batch`] discards
    /// perturbations larger than `epsilon`.
    pub fn deepfool(epsilon: f64) -> Self {
        Self {
            kind: AttackKind::DeepFool,
            steps: DEFAULT_DEEPFOOL_STEPS,
            ..Self::fgsm(epsilon)
        }
    }

    pub fn with_clip(mut self, clip_min: f64, clip_max: f64) -> Self {
        self.clip_min = clip_min;
        self.clip_max = clip_max;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || self.epsilon.is_infinite() {
            return Err(Error::InvalidArgument(format!("epsilon must be finite and >= 0, got {}", self.epsilon)));
        }
        if self.steps == 0 {
            return Err(Error::InvalidArgument("attack needs at least one step".into()));
        }
        if self.kind != AttackKind::Fgsm && !(self.step_size > 0.0 || self.epsilon == 0.0) {
            return Err(Error::InvalidArgument(format!("step size must be > 0, got {}", self.step_size)));
        }
        if !(self.clip_min < self.clip_max) {
            return Err(Error::InvalidArgument(format!(
                "empty clip box [{}, {}]",
                self.clip_min, self.clip_max
            )));
        }
        if !(self.overshoot >= 0.0) {
            return Err(Error::InvalidArgument(format!("overshoot must be >= 0, got {}", self.overshoot)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialExample {
    pub x_adv: Array1<f64>,
    pub delta: Array1<f64>,
    /// The attacked prediction differs from `query_class`.
    pub success: bool,
    /// Prediction on the clean input.
    pub query_class: usize,
    pub epsilon: f64,
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_batch(net: &DenseNetwork, x: ArrayView2<f64>, y: &[usize]) -> Result<()> {
    if x.nrows() != y.len() {
        return Err(Error::shape("attack labels", x.nrows(), y.len()));
    }
    if let Some(&bad) = y.iter().find(|&&c| c >= net.class_count()) {
        return Err(Error::InvalidArgument(format!("label {bad} out of range")));
    }
    Ok(())
}

/// Gradient of the summed one-hot cross-entropy with respect to each row.
pub fn ce_input_gradient(net: &DenseNetwork, x: ArrayView2<f64>, y: &[usize]) -> Result<Array2<f64>> {
    check_batch(net, x, y)?;
    let mut tape = Tape::new();
    let logits = tape.forward(net, x)?;
    let mut cotangent = softmax_rows(logits.view());
    for (i, &c) in y.iter().enumerate() {
        cotangent[[i, c]] -= 1.0;
    }
    let grads = tape.backward(net, &LossGrad::new(0.0, cotangent), true)?;
    let g = grads.input.expect("input gradient requested");
    if !g.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("input gradient"));
    }
    Ok(g)
}

/// `clip(x + eps * sign(grad CE))`.
pub fn fgsm_batch(net: &DenseNetwork, x: ArrayView2<f64>, y: &[usize], cfg: &AttackConfig) -> Result<Array2<f64>> {
    cfg.validate()?;
    let g = ce_input_gradient(net, x, y)?;
    let mut adv = x.to_owned();
    Zip::from(&mut adv).and(&g).for_each(|a, &gi| {
        *a = (*a + cfg.epsilon * sign(gi)).clamp(cfg.clip_min, cfg.clip_max);
    });
    Ok(adv)
}

fn iterate(
    net: &DenseNetwork,
    origin: ArrayView2<f64>,
    mut current: Array2<f64>,
    y: &[usize],
    cfg: &AttackConfig,
) -> Result<Array2<f64>> {
    for _ in 0..cfg.steps {
        let g = ce_input_gradient(net, current.view(), y)?;
        Zip::from(&mut current).and(&g).and(origin).for_each(|c, &gi, &x0| {
            let stepped = *c + cfg.step_size * sign(gi);
            *c = stepped
                .clamp(x0 - cfg.epsilon, x0 + cfg.epsilon)
                .clamp(cfg.clip_min, cfg.clip_max);
        });
    }
    Ok(current)
}

/// Iterated FGSM, projected back onto the epsilon ball and the box after
/// every step.
pub fn bim_batch(net: &DenseNetwork, x: ArrayView2<f64>, y: &[usize], cfg: &AttackConfig) -> Result<Array2<f64>> {
    cfg.validate()?;
    check_batch(net, x, y)?;
    iterate(net, x, x.to_owned(), y, cfg)
}

/// BIM from a uniform random start in the epsilon ball. Row `i` draws its
/// start from the ChaCha stream `first_index + i` of `cfg.seed`.
pub fn pgd_batch(
    net: &DenseNetwork,
    x: ArrayView2<f64>,
    y: &[usize],
    cfg: &AttackConfig,
    first_index: u64,
) -> Result<Array2<f64>> {
    cfg.validate()?;
    check_batch(net, x, y)?;
    let mut start = x.to_owned();
    if cfg.random_start {
        for (i, mut row) in start.rows_mut().into_iter().enumerate() {
            let mut rng = example_rng(cfg.seed, first_index + i as u64);
            for v in row.iter_mut() {
                let u: f64 = rng.random_range(-cfg.epsilon..=cfg.epsilon);
                *v = (*v + u).clamp(cfg.clip_min, cfg.clip_max);
            }
        }
    }
    iterate(net, x, start, y, cfg)
}

fn example_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Runs any attack kind over a batch and returns the perturbed inputs.
/// A DeepFool row whose perturbation exceeds `cfg.epsilon` in l-inf, or
/// whose search finds no direction to move in, is returned unperturbed.
pub fn perturb_batch(
    net: &DenseNetwork,
    x: ArrayView2<f64>,
    y: &[usize],
    cfg: &AttackConfig,
    first_index: u64,
) -> Result<Array2<f64>> {
    match cfg.kind {
        AttackKind::Fgsm => fgsm_batch(net, x, y, cfg),
        AttackKind::Bim => bim_batch(net, x, y, cfg),
        AttackKind::Pgd => pgd_batch(net, x, y, cfg, first_index),
        AttackKind::DeepFool => {
            cfg.validate()?;
            check_batch(net, x, y)?;
            let rows: Vec<Array1<f64>> = (0..x.nrows())
                .into_par_iter()
                .map(|i| {
                    Ok(match deepfool_linf(net, x.row(i), y[i], cfg) {
                        Ok(adv) if linf_distance(adv.x_adv.view(), x.row(i)) <= cfg.epsilon => adv.x_adv,
                        Ok(_) | Err(Error::Convergence(_)) => x.row(i).to_owned(),
                        Err(e) => return Err(e),
                    })
                })
                .collect::<Result<_>>()?;
            let mut out = Array2::zeros(x.dim());
            for (mut dst, src) in out.rows_mut().into_iter().zip(rows) {
                dst.assign(&src);
            }
            Ok(out)
        }
    }
}

fn single(
    net: &DenseNetwork,
    x: ArrayView1<f64>,
    y: usize,
    cfg: &AttackConfig,
    attack: impl FnOnce(ArrayView2<f64>, &[usize]) -> Result<Array2<f64>>,
) -> Result<AdversarialExample> {
    let batch = x.insert_axis(Axis(0));
    let query_class = net.predict(batch)?[0];
    let adv = attack(batch, &[y])?;
    let attacked = net.predict(adv.view())?[0];
    let x_adv = adv.row(0).to_owned();
    Ok(AdversarialExample {
        delta: &x_adv - &x,
        x_adv,
        success: attacked != query_class,
        query_class,
        epsilon: cfg.epsilon,
    })
}

pub fn fgsm(net: &DenseNetwork, x: ArrayView1<f64>, y: usize, cfg: &AttackConfig) -> Result<AdversarialExample> {
    single(net, x, y, cfg, |b, l| fgsm_batch(net, b, l, cfg))
}

pub fn bim(net: &DenseNetwork, x: ArrayView1<f64>, y: usize, cfg: &AttackConfig) -> Result<AdversarialExample> {
    single(net, x, y, cfg, |b, l| bim_batch(net, b, l, cfg))
}

pub fn pgd(net: &DenseNetwork, x: ArrayView1<f64>, y: usize, cfg: &AttackConfig) -> Result<AdversarialExample> {
    single(net, x, y, cfg, |b, l| pgd_batch(net, b, l, cfg, 0))
}

/// l-inf DeepFool. Each step linearises `f_k = z_k - z_pred` around the
/// current point, picks the class with the smallest `|f_k| / |grad f_k|_1`
/// and accumulates `|f_k| / |grad f_k|_1 * sign(grad f_k)`; the candidate
/// point is `clip(x + (1 + overshoot) * r_total)`. Stops when the label
/// flips or `cfg.steps` is exhausted.
///
/// Coordinates pinned at a box face with the gradient pointing outwards are
/// left out of both the norm and the step, and `r_total` keeps only the
/// part of the perturbation that survived clipping. Without this the
/// search stalls on images whose pixels mostly sit at the box faces.
///
/// An input already misclassified with respect to `y` is returned
/// unperturbed and counts as a success.
pub fn deepfool_linf(net: &DenseNetwork, x: ArrayView1<f64>, y: usize, cfg: &AttackConfig) -> Result<AdversarialExample> {
    cfg.validate()?;
    if y >= net.class_count() {
        return Err(Error::InvalidArgument(format!("label {y} out of range")));
    }
    let query_class = net.predict(x.insert_axis(Axis(0)))?[0];
    let unchanged = |success| AdversarialExample {
        x_adv: x.to_owned(),
        delta: Array1::zeros(x.len()),
        success,
        query_class,
        epsilon: cfg.epsilon,
    };
    if query_class != y {
        return Ok(unchanged(true));
    }

    let mut total = Array1::<f64>::zeros(x.len());
    let mut current = x.to_owned();
    let mut label = query_class;
    for _ in 0..cfg.steps {
        if label != query_class {
            break;
        }
        let jac = net.input_jacobian(current.view())?;
        let z = net.forward(current.view())?.logits;
        let mut best: Option<(f64, Array1<f64>)> = None;
        for k in (0..net.class_count()).filter(|&k| k != query_class) {
            let mut w = &jac.row(k) - &jac.row(query_class);
            // f_k <= 0 here, so the step moves each coordinate along sign(w)
            Zip::from(&mut w).and(&current).for_each(|wi, &c| {
                if (*wi > 0.0 && c >= cfg.clip_max) || (*wi < 0.0 && c <= cfg.clip_min) {
                    *wi = 0.0;
                }
            });
            let norm = w.iter().map(|v| v.abs()).sum::<f64>();
            if norm < 1e-12 {
                continue;
            }
            let distance = (z[k] - z[query_class]).abs() / norm;
            if best.as_ref().is_none_or(|(d, _)| distance < *d) {
                best = Some((distance, w));
            }
        }
        let Some((distance, w)) = best else {
            return Err(Error::Convergence("all logit-difference gradients vanish".into()));
        };
        total.zip_mut_with(&w, |t, &wi| *t += distance * sign(wi));
        current = &x + &(&total * (1.0 + cfg.overshoot));
        current.mapv_inplace(|v| v.clamp(cfg.clip_min, cfg.clip_max));
        total = (&current - &x) / (1.0 + cfg.overshoot);
        label = net.predict(current.view().insert_axis(Axis(0)))?[0];
    }
    Ok(AdversarialExample {
        delta: &current - &x,
        x_adv: current,
        success: label != query_class,
        query_class,
        epsilon: cfg.epsilon,
    })
}

/// Smallest l-inf budget that fools the linearised model:
/// `min_{j != y} 1 / |grad z_y - grad z_j|_1`, `+inf` when every gap is zero.
pub fn min_fooling_epsilon(net: &DenseNetwork, x: ArrayView1<f64>, y: usize) -> Result<f64> {
    if y >= net.class_count() {
        return Err(Error::InvalidArgument(format!("label {y} out of range")));
    }
    let jac = net.input_jacobian(x)?;
    let widest = (0..net.class_count())
        .filter(|&j| j != y)
        .map(|j| (&jac.row(y) - &jac.row(j)).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    Ok(if widest > 0.0 { 1.0 / widest } else { f64::INFINITY })
}

/// Margin-aware version of [`min_fooling_epsilon`]:
/// `min_{j != y} (z_y - z_j)_+ / |grad z_y - grad z_j|_1`, the budget at
/// which the linearised logit gap closes. Zero when `y` is not the
/// prediction; `+inf` when every gradient gap is zero.
pub fn linearized_fooling_epsilon(net: &DenseNetwork, x: ArrayView1<f64>, y: usize) -> Result<f64> {
    if y >= net.class_count() {
        return Err(Error::InvalidArgument(format!("label {y} out of range")));
    }
    let jac = net.input_jacobian(x)?;
    let z = net.forward(x)?.logits;
    let mut best = f64::INFINITY;
    for j in (0..net.class_count()).filter(|&j| j != y) {
        let margin = (z[y] - z[j]).max(0.0);
        let gap: f64 = (&jac.row(y) - &jac.row(j)).iter().map(|v| v.abs()).sum();
        let eps = if gap > 0.0 {
            margin / gap
        } else if margin == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        best = best.min(eps);
    }
    Ok(best)
}

/// Largest coordinate of `a - b`, in absolute value.
pub fn linf_distance(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
