//! Experiment configuration, the batch runner and report writers.
//!
//! A run is described by one TOML document. It trains one model per entry of
//! `defenses` from the same initialisation, evaluates each against the
//! attack grid and writes `results.csv`, `report.json`, one table per attack,
//! the trained models and a `manifest.json` into `output_dir`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array1;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::{AttackConfig, AttackKind};
use crate::data::{self, Dataset, Split};
use crate::error::{Error, Result};
use crate::fading_gaussian::{self, AlsLinearConfig, GaussianProblem, LinearClassifier};
use crate::nn::DenseNetwork;
use crate::smoothing::{Method, SmoothingConfig, DEFAULT_TEMPERATURE};
use crate::training::{self, EvalReport, PgdTraining, TrainConfig, TrainingLog};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub const DEFAULT_MNIST_TRAIN: usize = 10_000;
pub const DEFAULT_MNIST_TEST: usize = 2_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSpec {
    Mnist {
        /// Directory with the four IDX files; defaults to
        /// [`data::default_mnist_dir`].
        #[serde(default, skip_serializing_if = "Option::is_none")]
        dir: Option<PathBuf>,
        #[serde(default = "default_mnist_train")]
        train: usize,
        #[serde(default = "default_mnist_test")]
        test: usize,
    },
    Gaussian {
        d: usize,
        #[serde(default = "default_gaussian_train")]
        train: usize,
        #[serde(default = "default_gaussian_test")]
        test: usize,
    },
    Moons {
        n: usize,
        noise: f64,
        #[serde(default = "default_moons_test")]
        test: usize,
    },
}

fn default_mnist_train() -> usize {
    DEFAULT_MNIST_TRAIN
}

fn default_mnist_test() -> usize {
    DEFAULT_MNIST_TEST
}

fn default_gaussian_train() -> usize {
    20_000
}

fn default_gaussian_test() -> usize {
    10_000
}

fn default_moons_test() -> usize {
    1_000
}

impl DatasetSpec {
    /// Inputs of MNIST live in `[0, 1]`; the synthetic sets are unbounded.
    pub fn clip_box(&self) -> (f64, f64) {
        match self {
            DatasetSpec::Mnist { .. } => (0.0, 1.0),
            _ => (f64::NEG_INFINITY, f64::INFINITY),
        }
    }

    /// `(train, test)` splits. Subsampling and synthetic draws use `seed`;
    /// the test split uses an independent stream.
    pub fn load(&self, seed: u64) -> Result<(Dataset, Dataset)> {
        match self {
            DatasetSpec::Mnist { dir, train, test } => {
                let dir = dir.clone().unwrap_or_else(data::default_mnist_dir);
                let full_train = data::load_mnist_dir(&dir, Split::Train)?;
                let full_test = data::load_mnist_dir(&dir, Split::Test)?;
                Ok((
                    data::subset(&full_train, *train, seed)?,
                    data::subset(&full_test, *test, seed.wrapping_add(1))?,
                ))
            }
            DatasetSpec::Gaussian { d, train, test } => {
                let p = GaussianProblem::fading_schedule(*d)?;
                Ok((
                    data::gaussian_dataset(&p, *train, seed)?,
                    data::gaussian_dataset(&p, *test, seed.wrapping_add(1))?,
                ))
            }
            DatasetSpec::Moons { n, noise, test } => Ok((
                data::two_moons(*n, *noise, seed)?,
                data::two_moons(*test, *noise, seed.wrapping_add(1))?,
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ModelSpec {
    Linear,
    Mlp { hidden: Vec<usize> },
}

impl ModelSpec {
    pub fn build(&self, input_dim: usize, class_count: usize, seed: u64) -> Result<DenseNetwork> {
        match self {
            ModelSpec::Linear => DenseNetwork::linear(input_dim, class_count, seed),
            ModelSpec::Mlp { hidden } => DenseNetwork::mlp(input_dim, hidden, class_count, seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DefenseSpec {
    None,
    Ls {
        method: Method,
        alpha: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        temperature: Option<f64>,
    },
    Pgd {
        epsilon: f64,
        step: f64,
        iters: usize,
    },
}

impl DefenseSpec {
    /// Row label in tables: `natural`, the smoothing method, or `pgd`.
    pub fn name(&self) -> String {
        match self {
            DefenseSpec::None => "natural".into(),
            DefenseSpec::Ls { method, .. } => method.name().into(),
            DefenseSpec::Pgd { .. } => "pgd".into(),
        }
    }

    /// Smoothing strength for LS defenses, the PGD budget for PGD, zero for
    /// natural training.
    pub fn alpha(&self) -> f64 {
        match self {
            DefenseSpec::None => 0.0,
            DefenseSpec::Ls { alpha, .. } => *alpha,
            DefenseSpec::Pgd { epsilon, .. } => *epsilon,
        }
    }

    /// File-name friendly identifier, unique within a grid of distinct
    /// defenses.
    pub fn slug(&self) -> String {
        match self {
            DefenseSpec::None => "natural".into(),
            DefenseSpec::Ls {
                method,
                alpha,
                temperature,
            } => match temperature {
                Some(t) => format!("{method}-{alpha}-t{t}"),
                None => format!("{method}-{alpha}"),
            },
            DefenseSpec::Pgd { epsilon, step, iters } => format!("pgd-{epsilon}-{step}-{iters}"),
        }
    }

    fn smoothing(&self) -> Result<Option<SmoothingConfig>> {
        match self {
            DefenseSpec::Ls {
                method,
                alpha,
                temperature,
            } => SmoothingConfig::new(*method, *alpha)?
                .with_temperature(temperature.unwrap_or(DEFAULT_TEMPERATURE))
                .map(Some),
            _ => Ok(None),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSpec {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
}

fn default_lr() -> f64 {
    training::DEFAULT_LR
}

fn default_epochs() -> usize {
    training::DEFAULT_EPOCHS
}

fn default_batch_size() -> usize {
    training::DEFAULT_BATCH_SIZE
}

impl Default for TrainingSpec {
    fn default() -> Self {
        Self {
            lr: default_lr(),
            epochs: default_epochs(),
            batch_size: default_batch_size(),
        }
    }
}

impl TrainingSpec {
    pub fn train_config(&self, defense: &DefenseSpec, seed: u64, clip: (f64, f64)) -> Result<TrainConfig> {
        let adversarial = match defense {
            DefenseSpec::Pgd { epsilon, step, iters } => Some(PgdTraining {
                clip_min: clip.0,
                clip_max: clip.1,
                ..PgdTraining::new(*epsilon, *step, *iters)
            }),
            _ => None,
        };
        let cfg = TrainConfig {
            smoothing: defense.smoothing()?,
            lr: self.lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed,
            adversarial,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One attack swept over several budgets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackGrid {
    pub kind: AttackKind,
    pub epsilons: Vec<f64>,
    /// Iterations for BIM/PGD, step cap for DeepFool.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    /// BIM/PGD step size as a fraction of epsilon.
    #[serde(default = "default_step_fraction")]
    pub step_fraction: f64,
}

pub const DEFAULT_ITERATIVE_STEPS: usize = 10;

fn default_step_fraction() -> f64 {
    0.25
}

impl AttackGrid {
    pub fn expand(&self, clip: (f64, f64), seed: u64) -> Result<Vec<AttackConfig>> {
        if self.epsilons.is_empty() {
            return Err(Error::Config(format!("attack {} has no epsilons", self.kind)));
        }
        self.epsilons
            .iter()
            .map(|&eps| {
                let steps = self.steps.unwrap_or(match self.kind {
                    AttackKind::DeepFool => crate::attacks::DEFAULT_DEEPFOOL_STEPS,
                    _ => DEFAULT_ITERATIVE_STEPS,
                });
                let step = eps * self.step_fraction;
                let cfg = match self.kind {
                    AttackKind::Fgsm => AttackConfig::fgsm(eps),
                    AttackKind::Bim => AttackConfig::bim(eps, steps, step),
                    AttackKind::Pgd => AttackConfig::pgd(eps, steps, step, seed),
                    AttackKind::DeepFool => AttackConfig {
                        steps,
                        ..AttackConfig::deepfool(eps)
                    },
                }
                .with_clip(clip.0, clip.1);
                cfg.validate()?;
                Ok(cfg)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    #[serde(default)]
    pub training: TrainingSpec,
    pub defenses: Vec<DefenseSpec>,
    #[serde(default)]
    pub attacks: Vec<AttackGrid>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Canonical TOML rendering; comments and key order of the source do
    /// not survive.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the canonical rendering.
    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(self.to_toml()?.as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.defenses.is_empty() {
            return Err(Error::Config("at least one defense is required".into()));
        }
        let clip = self.dataset.clip_box();
        let mut slugs = Vec::new();
        for defense in &self.defenses {
            self.training
                .train_config(defense, self.seed, clip)
                .map_err(|e| Error::Config(format!("defense {}: {e}", defense.slug())))?;
            let slug = defense.slug();
            if slugs.contains(&slug) {
                return Err(Error::Config(format!("duplicate defense {slug}")));
            }
            slugs.push(slug);
        }
        for grid in &self.attacks {
            grid.expand(clip, self.seed)
                .map_err(|e| Error::Config(format!("attack {}: {e}", grid.kind)))?;
        }
        if let ModelSpec::Mlp { hidden } = &self.model {
            if hidden.contains(&0) {
                return Err(Error::Config("hidden widths must be positive".into()));
            }
        }
        match &self.dataset {
            DatasetSpec::Mnist { train, test, .. } | DatasetSpec::Gaussian { train, test, .. } => {
                if *train == 0 || *test == 0 {
                    return Err(Error::Config("train and test sizes must be positive".into()));
                }
            }
            DatasetSpec::Moons { n, noise, test } => {
                if *n < 2 || *test < 2 || !(*noise >= 0.0) {
                    return Err(Error::Config("moons needs n, test >= 2 and noise >= 0".into()));
                }
            }
        }
        Ok(())
    }

    pub fn attack_configs(&self) -> Result<Vec<AttackConfig>> {
        let clip = self.dataset.clip_box();
        let mut out = Vec::new();
        for grid in &self.attacks {
            out.extend(grid.expand(clip, self.seed)?);
        }
        Ok(out)
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Trains one model for `defense` from the initialisation given by `seed`.
pub fn train_defense(
    cfg: &ExperimentConfig,
    defense: &DefenseSpec,
    train: &Dataset,
) -> Result<(DenseNetwork, TrainingLog)> {
    let mut net = cfg.model.build(train.dim(), train.class_count(), cfg.seed)?;
    let tc = cfg.training.train_config(defense, cfg.seed, cfg.dataset.clip_box())?;
    let log = match defense {
        DefenseSpec::Pgd { .. } => training::train_pgd_adversarial(&mut net, train, &tc)?,
        _ => training::train_ls(&mut net, train, &tc)?,
    };
    Ok((net, log))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefenseReport {
    pub defense: DefenseSpec,
    pub final_train_loss: f64,
    pub eval: EvalReport,
}

#[derive(Debug, Serialize)]
struct ResultRow<'a> {
    defense: String,
    alpha: f64,
    attack: &'a str,
    epsilon: f64,
    accuracy: f64,
    standard_accuracy: f64,
    below_chance: bool,
    class_count: usize,
    mean_min_fooling_eps: Option<f64>,
}

/// One CSV row per (defense, attack, epsilon).
pub fn results_csv(reports: &[DefenseReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in reports {
        for a in &r.eval.adversarial {
            w.serialize(ResultRow {
                defense: r.defense.slug(),
                alpha: r.defense.alpha(),
                attack: a.attack.name(),
                epsilon: a.epsilon,
                accuracy: a.accuracy,
                standard_accuracy: r.eval.standard_accuracy,
                below_chance: a.below_chance,
                class_count: r.eval.class_count,
                mean_min_fooling_eps: r.eval.mean_min_fooling_eps,
            })?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(format!("csv buffer: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Marks the best value of a column.
pub const BEST_MARK: &str = "*";
/// Marks a value below the `1/K` accuracy of random guessing.
pub const CHANCE_MARK: &str = "!";

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub attack: AttackKind,
    pub csv: String,
}

/// One table per attack: rows `(defense, alpha)`, columns epsilon. The
/// largest value of each column is suffixed with [`BEST_MARK`] (shared on
/// exact ties, never given to sub-chance values) and values below `1/K`
/// with [`CHANCE_MARK`]. Cells for (defense, attack, epsilon) combinations
/// that were not evaluated stay empty.
pub fn make_table(reports: &[DefenseReport]) -> Result<Vec<Table>> {
    let first = reports
        .first()
        .ok_or_else(|| Error::InvalidArgument("make_table needs at least one report".into()))?;
    let k = first.eval.class_count;
    if let Some(other) = reports.iter().find(|r| r.eval.class_count != k) {
        return Err(Error::InvalidArgument(format!(
            "reports mix class counts {k} and {}",
            other.eval.class_count
        )));
    }
    let mut by_attack: BTreeMap<AttackKind, Vec<f64>> = BTreeMap::new();
    for r in reports {
        for a in &r.eval.adversarial {
            by_attack.entry(a.attack).or_default().push(a.epsilon);
        }
    }
    let mut tables = Vec::new();
    for (attack, mut epsilons) in by_attack {
        epsilons.sort_by(f64::total_cmp);
        epsilons.dedup();
        let cells: Vec<Vec<Option<(f64, bool)>>> = reports
            .iter()
            .map(|r| {
                epsilons
                    .iter()
                    .map(|&eps| {
                        r.eval
                            .adversarial
                            .iter()
                            .find(|a| a.attack == attack && a.epsilon == eps)
                            .map(|a| (a.accuracy, a.below_chance))
                    })
                    .collect()
            })
            .collect();
        let best: Vec<Option<f64>> = (0..epsilons.len())
            .map(|c| {
                cells
                    .iter()
                    .filter_map(|row| row[c])
                    .filter(|(_, low)| !low)
                    .map(|(v, _)| v)
                    .max_by(f64::total_cmp)
            })
            .collect();
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["defense".to_string(), "alpha".to_string()];
        header.extend(epsilons.iter().map(|e| format!("eps={e}")));
        w.write_record(&header)?;
        for (r, row) in reports.iter().zip(&cells) {
            let mut record = vec![r.defense.name(), r.defense.alpha().to_string()];
            for (c, cell) in row.iter().enumerate() {
                record.push(match cell {
                    None => String::new(),
                    Some((v, low)) => {
                        let mut s = format!("{v:.4}");
                        if best[c] == Some(*v) && !low {
                            s.push_str(BEST_MARK);
                        }
                        if *low {
                            s.push_str(CHANCE_MARK);
                        }
                        s
                    }
                });
            }
            w.write_record(&record)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Config(format!("csv buffer: {e}")))?;
        tables.push(Table {
            attack,
            csv: String::from_utf8(bytes).expect("csv output is utf-8"),
        });
    }
    Ok(tables)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestFile {
    pub name: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_sha256: String,
    pub seed: u64,
    pub version: String,
    pub wall_clock_seconds: f64,
    pub files: Vec<ManifestFile>,
}

fn write_file(dir: &Path, name: &str, contents: &[u8], files: &mut Vec<ManifestFile>) -> Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
    files.push(ManifestFile {
        name: name.to_string(),
        sha256: sha256_hex(contents),
    });
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<()> {
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(manifest)?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Writes the per-attack tables as `table-<attack>.csv`.
pub fn write_tables(dir: &Path, reports: &[DefenseReport]) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    for t in make_table(reports)? {
        let path = dir.join(format!("table-{}.csv", t.attack));
        std::fs::write(&path, &t.csv).map_err(|e| Error::io(&path, e))?;
        paths.push(path);
    }
    Ok(paths)
}

/// Runs the whole grid and writes every artifact into `cfg.output_dir`.
/// Apart from the wall-clock field of `manifest.json`, every byte written
/// is a function of the configuration.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<DefenseReport>> {
    cfg.validate()?;
    let started = Instant::now();
    let (train, test) = cfg.dataset.load(cfg.seed)?;
    let attacks = cfg.attack_configs()?;
    let dir = cfg.output_dir.as_path();
    create_dir(dir)?;
    let mut files = Vec::new();
    write_file(dir, "config.toml", cfg.to_toml()?.as_bytes(), &mut files)?;

    let mut reports = Vec::with_capacity(cfg.defenses.len());
    for defense in &cfg.defenses {
        let (net, log) = train_defense(cfg, defense, &train)?;
        let eval = training::evaluate(&net, &test, &attacks)?;
        let model = serde_json::to_string(&net)?;
        write_file(dir, &format!("model-{}.json", defense.slug()), model.as_bytes(), &mut files)?;
        reports.push(DefenseReport {
            defense: defense.clone(),
            final_train_loss: log.final_loss(),
            eval,
        });
    }

    write_file(dir, "results.csv", results_csv(&reports)?.as_bytes(), &mut files)?;
    write_file(dir, "report.json", serde_json::to_string_pretty(&reports)?.as_bytes(), &mut files)?;
    if !attacks.is_empty() {
        for t in make_table(&reports)? {
            write_file(dir, &format!("table-{}.csv", t.attack), t.csv.as_bytes(), &mut files)?;
        }
    }
    write_manifest(
        dir,
        &Manifest {
            config_sha256: cfg.hash()?,
            seed: cfg.seed,
            version: VERSION.to_string(),
            wall_clock_seconds: started.elapsed().as_secs_f64(),
            files,
        },
    )?;
    Ok(reports)
}

/// Settings of the fading-Gaussian study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianStudyConfig {
    pub d: usize,
    pub alphas: Vec<f64>,
    pub eps_grid: Vec<f64>,
    pub seed: u64,
    /// Training-set size, epochs and learning rate of the ALS fits.
    pub train_size: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Points per class in the two-dimensional sample cloud.
    pub cloud_size: usize,
}

impl GaussianStudyConfig {
    pub fn new(d: usize, alphas: Vec<f64>, eps_grid: Vec<f64>, seed: u64) -> Self {
        let als = AlsLinearConfig::default();
        Self {
            d,
            alphas,
            eps_grid,
            seed,
            train_size: als.n,
            epochs: als.epochs,
            lr: als.lr,
            cloud_size: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlsCurve {
    pub alpha: f64,
    pub weights: Array1<f64>,
    pub curve: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianStudy {
    pub bayes: Vec<(f64, f64)>,
    pub optimal: Vec<(f64, f64)>,
    pub als: Vec<AlsCurve>,
}

/// Boundaries drawn over the two-dimensional sample cloud.
pub const CLOUD_BOUNDARIES: [[f64; 2]; 2] = [[1.0, 1.0], [4.0, 1.0]];

fn curve_text(points: &[(f64, f64)]) -> String {
    points.iter().map(|(x, y)| format!("{x} {y}\n")).collect()
}

fn accuracy_curve(p: &GaussianProblem, c: &LinearClassifier, eps_grid: &[f64]) -> Result<Vec<(f64, f64)>> {
    eps_grid
        .iter()
        .map(|&e| Ok((e, fading_gaussian::adversarial_accuracy(p, c, e)?)))
        .collect()
}

/// Closed-form accuracy curves of the Bayes classifier, the most robust
/// linear classifier at each budget and an ALS-trained classifier per
/// alpha on the `d`-dimensional schedule. Writes into `out_dir`:
///
/// - `curve-bayes.txt`, `curve-optimal.txt`, `curve-als-<alpha>.txt`:
///   `epsilon accuracy` lines;
/// - `weights.csv`: feature index, Bayes weight and each ALS weight;
/// - `cloud-pos.txt`, `cloud-neg.txt`: `x1 x2` draws from the `d = 2`
///   schedule, and `boundary-<w1>-<w2>.txt`: two points on each line
///   `w^T x = 0` of [`CLOUD_BOUNDARIES`];
/// - `manifest.json`.
pub fn run_gaussian_study(cfg: &GaussianStudyConfig, out_dir: &Path) -> Result<GaussianStudy> {
    if cfg.eps_grid.is_empty() {
        return Err(Error::Config("eps grid is empty".into()));
    }
    let started = Instant::now();
    let p = GaussianProblem::fading_schedule(cfg.d)?;
    let bayes_w = fading_gaussian::bayes_weights(&p);
    let bayes = accuracy_curve(&p, &bayes_w, &cfg.eps_grid)?;
    let optimal = cfg
        .eps_grid
        .iter()
        .map(|&e| Ok((e, fading_gaussian::optimal_adv_accuracy(&p, e)?)))
        .collect::<Result<Vec<_>>>()?;
    let als = cfg
        .alphas
        .iter()
        .map(|&alpha| {
            let c = fading_gaussian::train_als_linear(
                &p,
                &AlsLinearConfig {
                    alpha,
                    n: cfg.train_size,
                    epochs: cfg.epochs,
                    lr: cfg.lr,
                    seed: cfg.seed,
                },
            )?;
            Ok(AlsCurve {
                alpha,
                curve: accuracy_curve(&p, &c, &cfg.eps_grid)?,
                weights: c.w,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    create_dir(out_dir)?;
    let mut files = Vec::new();
    write_file(out_dir, "curve-bayes.txt", curve_text(&bayes).as_bytes(), &mut files)?;
    write_file(out_dir, "curve-optimal.txt", curve_text(&optimal).as_bytes(), &mut files)?;
    for a in &als {
        write_file(out_dir, &format!("curve-als-{}.txt", a.alpha), curve_text(&a.curve).as_bytes(), &mut files)?;
    }

    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["feature".to_string(), "bayes".to_string()];
    header.extend(als.iter().map(|a| format!("als_{}", a.alpha)));
    w.write_record(&header)?;
    for j in 0..cfg.d {
        let mut row = vec![j.to_string(), bayes_w.w[j].to_string()];
        row.extend(als.iter().map(|a| a.weights[j].to_string()));
        w.write_record(&row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(format!("csv buffer: {e}")))?;
    write_file(out_dir, "weights.csv", &bytes, &mut files)?;

    let plane = GaussianProblem::fading_schedule(2)?;
    let cloud = fading_gaussian::sample(&plane, 2 * cfg.cloud_size.max(1), cfg.seed)?;
    let (mut pos, mut neg) = (String::new(), String::new());
    for (x, &y) in cloud.x.rows().into_iter().zip(&cloud.y) {
        let line = format!("{} {}\n", x[0], x[1]);
        if y > 0 {
            pos.push_str(&line);
        } else {
            neg.push_str(&line);
        }
    }
    write_file(out_dir, "cloud-pos.txt", pos.as_bytes(), &mut files)?;
    write_file(out_dir, "cloud-neg.txt", neg.as_bytes(), &mut files)?;
    for [w1, w2] in CLOUD_BOUNDARIES {
        let line: Vec<(f64, f64)> = [-3.0, 3.0].iter().map(|&x| (x, -w1 * x / w2)).collect();
        write_file(out_dir, &format!("boundary-{w1}-{w2}.txt"), curve_text(&line).as_bytes(), &mut files)?;
    }

    let canonical = serde_json::to_string(cfg)?;
    write_manifest(
        out_dir,
        &Manifest {
            config_sha256: sha256_hex(canonical.as_bytes()),
            seed: cfg.seed,
            version: VERSION.to_string(),
            wall_clock_seconds: started.elapsed().as_secs_f64(),
            files,
        },
    )?;
    Ok(GaussianStudy { bayes, optimal, als })
}
