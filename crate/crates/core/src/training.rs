//! Mini-batch SGD training with smoothed labels, a PGD adversarial-training
//! baseline, and clean/adversarial evaluation.

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{self, AttackConfig, AttackKind};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{argmax, DenseNetwork, Tape};
use crate::smoothing::{smooth_batch, smooth_ce_batch, SmoothingConfig};

pub const DEFAULT_LR: f64 = 0.1;
pub const DEFAULT_BATCH_SIZE: usize = 64;
pub const DEFAULT_EPOCHS: usize = 5;

/// Rows per chunk when evaluating in parallel.
const EVAL_CHUNK: usize = 128;

/// PGD settings used to craft training batches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PgdTraining {
    pub epsilon: f64,
    pub step: f64,
    pub iters: usize,
    #[serde(default = "zero")]
    pub clip_min: f64,
    #[serde(default = "one")]
    pub clip_max: f64,
}

fn zero() -> f64 {
    0.0
}

fn one() -> f64 {
    1.0
}

impl PgdTraining {
    /// Box `[0, 1]`.
    pub fn new(epsilon: f64, step: f64, iters: usize) -> Self {
        Self {
            epsilon,
            step,
            iters,
            clip_min: 0.0,
            clip_max: 1.0,
        }
    }

    fn attack(&self, seed: u64) -> AttackConfig {
        AttackConfig::pgd(self.epsilon, self.iters, self.step, seed).with_clip(self.clip_min, self.clip_max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// `None` trains on one-hot labels.
    #[serde(default)]
    pub smoothing: Option<SmoothingConfig>,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub adversarial: Option<PgdTraining>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            smoothing: None,
            lr: DEFAULT_LR,
            epochs: DEFAULT_EPOCHS,
            batch_size: DEFAULT_BATCH_SIZE,
            seed: 0,
            adversarial: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("lr must be positive, got {}", self.lr)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("epochs and batch_size must be positive".into()));
        }
        if let Some(adv) = &self.adversarial {
            // epsilon = 0 is accepted: it degenerates to natural training.
            adv.attack(0).validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    /// Mean training loss of every epoch, in order.
    pub epoch_losses: Vec<f64>,
}

impl TrainingLog {
    pub fn final_loss(&self) -> f64 {
        *self.epoch_losses.last().unwrap_or(&f64::NAN)
    }
}

fn gather(x: ArrayView2<f64>, labels: &[usize], idx: &[usize]) -> (Array2<f64>, Vec<usize>) {
    (x.select(Axis(0), idx), idx.iter().map(|&i| labels[i]).collect())
}

fn run(net: &mut DenseNetwork, ds: &Dataset, cfg: &TrainConfig, adversarial: Option<&PgdTraining>) -> Result<TrainingLog> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    if ds.dim() != net.input_dim() || ds.class_count() != net.class_count() {
        return Err(Error::shape(
            "training data",
            format!("{} features, {} classes", net.input_dim(), net.class_count()),
            format!("{} features, {} classes", ds.dim(), ds.class_count()),
        ));
    }
    let n = ds.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = TrainingLog {
        epoch_losses: Vec::with_capacity(cfg.epochs),
    };
    let mut tape = Tape::new();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let diverged = |loss| Error::Divergence { epoch, loss };
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let (mut x, y) = gather(ds.inputs(), ds.labels(), idx);
            if let Some(adv) = adversarial {
                let first = (epoch * n + b * cfg.batch_size) as u64;
                x = attacks::pgd_batch(net, x.view(), &y, &adv.attack(cfg.seed), first)?;
            }
            let logits = tape.forward(net, x.view()).map_err(|_| diverged(f64::NAN))?;
            let targets = smooth_batch(cfg.smoothing.as_ref(), &y, logits.view())?;
            let loss = smooth_ce_batch(targets.view(), logits.view())?;
            if !loss.value.is_finite() {
                return Err(diverged(loss.value));
            }
            total += loss.value * idx.len() as f64;
            let grads = tape.backward(net, &loss, false)?;
            net.sgd_step(&grads, cfg.lr).map_err(|e| match e {
                Error::NonFinite(_) => diverged(loss.value),
                other => other,
            })?;
        }
        let mean = total / n as f64;
        if !mean.is_finite() {
            return Err(diverged(mean));
        }
        log.epoch_losses.push(mean);
    }
    Ok(log)
}

/// Label-smoothing training. Every mini-batch is smoothed against the
/// logits of its own forward pass, then one SGD step is taken on the mean
/// smoothed cross-entropy. Batches are reshuffled each epoch from the
/// `cfg.seed` stream.
pub fn train_ls(net: &mut DenseNetwork, ds: &Dataset, cfg: &TrainConfig) -> Result<TrainingLog> {
    run(net, ds, cfg, None)
}

/// Adversarial training: every mini-batch is replaced by its PGD version
/// against the current model before the step. Requires `cfg.adversarial`.
pub fn train_pgd_adversarial(net: &mut DenseNetwork, ds: &Dataset, cfg: &TrainConfig) -> Result<TrainingLog> {
    let adv = cfg
        .adversarial
        .ok_or_else(|| Error::InvalidArgument("adversarial training needs PGD settings".into()))?;
    run(net, ds, cfg, Some(&adv))
}

/// Accuracy under one attack at one budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackAccuracy {
    pub attack: AttackKind,
    pub epsilon: f64,
    pub accuracy: f64,
    /// Below the `1/K` accuracy of random guessing.
    pub below_chance: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub examples: usize,
    pub class_count: usize,
    pub standard_accuracy: f64,
    pub adversarial: Vec<AttackAccuracy>,
    /// Mean linearised fooling budget over correctly classified points;
    /// `None` when no point is classified correctly.
    pub mean_min_fooling_eps: Option<f64>,
}

impl EvalReport {
    pub fn accuracy(&self, attack: AttackKind, epsilon: f64) -> Option<f64> {
        self.adversarial
            .iter()
            .find(|a| a.attack == attack && a.epsilon == epsilon)
            .map(|a| a.accuracy)
    }
}

fn correct_mask(net: &DenseNetwork, x: ArrayView2<f64>, y: &[usize]) -> Result<Vec<bool>> {
    Ok(net.predict(x)?.iter().zip(y).map(|(p, t)| p == t).collect())
}

/// Whether each example is classified correctly both before and after the
/// attack.
pub fn robust_mask(net: &DenseNetwork, ds: &Dataset, attack: &AttackConfig) -> Result<Vec<bool>> {
    attack.validate()?;
    let chunks: Vec<Vec<bool>> = (0..ds.len())
        .step_by(EVAL_CHUNK)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|start| {
            let part = ds.slice(start, start + EVAL_CHUNK);
            let clean = correct_mask(net, part.inputs(), part.labels())?;
            let adv = attacks::perturb_batch(net, part.inputs(), part.labels(), attack, start as u64)?;
            let attacked = correct_mask(net, adv.view(), part.labels())?;
            Ok(clean.iter().zip(&attacked).map(|(a, b)| *a && *b).collect())
        })
        .collect::<Result<_>>()?;
    Ok(chunks.concat())
}

fn fraction(mask: &[bool]) -> f64 {
    mask.iter().filter(|&&m| m).count() as f64 / mask.len() as f64
}

/// l-inf size of the unconstrained DeepFool perturbation of every row,
/// `+inf` where it does not flip the prediction. Misclassified rows get 0.
fn deepfool_distances(net: &DenseNetwork, ds: &Dataset, attack: &AttackConfig) -> Result<Vec<f64>> {
    let inputs = ds.inputs();
    (0..ds.len())
        .into_par_iter()
        .map(|i| {
            let x = inputs.row(i);
            // a point with no usable gradient direction cannot be fooled
            Ok(match attacks::deepfool_linf(net, x, ds.labels()[i], attack) {
                Ok(adv) if adv.success => attacks::linf_distance(adv.x_adv.view(), x),
                Ok(_) | Err(Error::Convergence(_)) => f64::INFINITY,
                Err(e) => return Err(e),
            })
        })
        .collect()
}

/// Standard accuracy, accuracy under every attack in `attack_cfgs`, and the
/// mean minimal fooling budget over correctly classified points. DeepFool
/// searches once per distinct setting; each budget then keeps the
/// perturbations no larger than itself.
pub fn evaluate(net: &DenseNetwork, ds: &Dataset, attack_cfgs: &[AttackConfig]) -> Result<EvalReport> {
    if ds.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation set".into()));
    }
    let clean = correct_mask(net, ds.inputs(), ds.labels())?;
    let chance = 1.0 / ds.class_count() as f64;
    let mut deepfool: Vec<(AttackConfig, Vec<f64>)> = Vec::new();
    let mut adversarial = Vec::with_capacity(attack_cfgs.len());
    for cfg in attack_cfgs {
        let mask = if cfg.kind == AttackKind::DeepFool {
            cfg.validate()?;
            let key = AttackConfig { epsilon: 0.0, ..*cfg };
            let pos = match deepfool.iter().position(|(k, _)| *k == key) {
                Some(pos) => pos,
                None => {
                    deepfool.push((key, deepfool_distances(net, ds, cfg)?));
                    deepfool.len() - 1
                }
            };
            clean
                .iter()
                .zip(&deepfool[pos].1)
                .map(|(&c, &dist)| c && dist > cfg.epsilon)
                .collect()
        } else {
            robust_mask(net, ds, cfg)?
        };
        let accuracy = fraction(&mask);
        adversarial.push(AttackAccuracy {
            attack: cfg.kind,
            epsilon: cfg.epsilon,
            accuracy,
            below_chance: accuracy < chance,
        });
    }
    Ok(EvalReport {
        examples: ds.len(),
        class_count: ds.class_count(),
        standard_accuracy: fraction(&clean),
        adversarial,
        mean_min_fooling_eps: mean_min_fooling_epsilon(net, ds, None)?,
    })
}

/// Mean of `min_fooling_epsilon` over the first `limit` correctly
/// classified points (all of them when `limit` is `None`).
pub fn mean_min_fooling_epsilon(net: &DenseNetwork, ds: &Dataset, limit: Option<usize>) -> Result<Option<f64>> {
    let clean = correct_mask(net, ds.inputs(), ds.labels())?;
    let rows: Vec<usize> = clean
        .iter()
        .enumerate()
        .filter_map(|(i, &c)| c.then_some(i))
        .take(limit.unwrap_or(usize::MAX))
        .collect();
    if rows.is_empty() {
        return Ok(None);
    }
    let values: Vec<f64> = rows
        .par_iter()
        .map(|&i| attacks::min_fooling_epsilon(net, ds.inputs().row(i), ds.labels()[i]))
        .collect::<Result<_>>()?;
    Ok(Some(values.iter().sum::<f64>() / values.len() as f64))
}

/// Mean of `z_y - min_k z_k`, the gap between the true logit and the
/// worst class that adversarial smoothing penalises.
pub fn mean_logit_gap(net: &DenseNetwork, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let z = net.logits(ds.inputs())?;
    let total: f64 = z
        .rows()
        .into_iter()
        .zip(ds.labels())
        .map(|(row, &y)| row[y] - row.fold(f64::INFINITY, |m, &v| m.min(v)))
        .sum();
    Ok(total / ds.len() as f64)
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy(net: &DenseNetwork, ds: &Dataset) -> Result<f64> {
    let z = net.logits(ds.inputs())?;
    let hits = z
        .rows()
        .into_iter()
        .zip(ds.labels())
        .filter(|(row, &y)| argmax(*row) == y)
        .count();
    Ok(hits as f64 / ds.len().max(1) as f64)
}
