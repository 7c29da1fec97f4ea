//! Python bindings. Matrices cross the boundary as lists of rows.

use ::lsrobust as core;
use core::attacks::{self, AttackConfig, AttackKind};
use core::data;
use core::fading_gaussian::{self, AlsLinearConfig, GaussianProblem, LinearClassifier};
use core::nn::DenseNetwork;
use core::smoothing::{self, LabelDistribution, Method, SmoothingConfig};
use core::training::{self, PgdTraining, TrainConfig};
use ndarray::{Array1, Array2};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn err(e: core::Error) -> PyErr {
    match e {
        core::Error::Io { .. } | core::Error::Divergence { .. } | core::Error::Convergence(_) => {
            PyRuntimeError::new_err(e.to_string())
        }
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("rows have different lengths"));
    }
    Ok(Array2::from_shape_vec((n, d), rows.into_iter().flatten().collect()).expect("rectangular"))
}

fn rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn parse<T: std::str::FromStr<Err = core::Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(err)
}

fn smoothing_config(method: &str, alpha: f64, temperature: Option<f64>) -> PyResult<SmoothingConfig> {
    let cfg = SmoothingConfig::new(parse::<Method>(method)?, alpha).map_err(err)?;
    match temperature {
        Some(t) => cfg.with_temperature(t).map_err(err),
        None => Ok(cfg),
    }
}

/// Smoothed label for class `y` given the logits.
#[pyfunction]
#[pyo3(signature = (method, alpha, y, logits, temperature = None))]
fn smooth_labels(method: &str, alpha: f64, y: usize, logits: Vec<f64>, temperature: Option<f64>) -> PyResult<Vec<f64>> {
    let cfg = smoothing_config(method, alpha, temperature)?;
    Ok(smoothing::smooth_labels(&cfg, y, Array1::from(logits).view())
        .map_err(err)?
        .into_vec())
}

/// `-sum_k q_k log softmax(z)_k`.
#[pyfunction]
fn smooth_ce(q: Vec<f64>, logits: Vec<f64>) -> PyResult<f64> {
    let q = LabelDistribution::new(q).map_err(err)?;
    smoothing::smooth_ce(&q, Array1::from(logits).view()).map_err(err)
}

#[pyfunction]
fn solve_inner_max(g: Vec<f64>, t: usize, alpha: f64) -> PyResult<Vec<f64>> {
    Ok(smoothing::solve_inner_max(Array1::from(g).view(), t, alpha)
        .map_err(err)?
        .into_vec())
}

#[pyclass(name = "Dataset", module = "lsrobust")]
struct PyDataset {
    inner: data::Dataset,
}

#[pymethods]
impl PyDataset {
    #[new]
    fn new(inputs: Vec<Vec<f64>>, labels: Vec<usize>, class_count: usize) -> PyResult<Self> {
        Ok(Self {
            inner: data::Dataset::new(matrix(inputs)?, labels, class_count).map_err(err)?,
        })
    }

    #[staticmethod]
    fn two_moons(n: usize, noise: f64, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: data::two_moons(n, noise, seed).map_err(err)?,
        })
    }

    /// `split` is `"train"` or `"test"`.
    #[staticmethod]
    fn load_mnist(dir: &str, split: &str) -> PyResult<Self> {
        let split = match split {
            "train" => data::Split::Train,
            "test" => data::Split::Test,
            other => return Err(PyValueError::new_err(format!("unknown split {other:?}"))),
        };
        Ok(Self {
            inner: data::load_mnist_dir(dir, split).map_err(err)?,
        })
    }

    fn subset(&self, n: usize, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: data::subset(&self.inner, n, seed).map_err(err)?,
        })
    }

    #[getter]
    fn inputs(&self) -> Vec<Vec<f64>> {
        rows(&self.inner.inputs().to_owned())
    }

    #[getter]
    fn labels(&self) -> Vec<usize> {
        self.inner.labels().to_vec()
    }

    #[getter]
    fn class_count(&self) -> usize {
        self.inner.class_count()
    }

    fn class_counts(&self) -> Vec<usize> {
        self.inner.class_counts()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

fn attack_config(kind: &str, epsilon: f64, steps: Option<usize>, step_size: Option<f64>, seed: u64, clip: (f64, f64)) -> PyResult<AttackConfig> {
    let kind = parse::<AttackKind>(kind)?;
    let steps_or = |d| steps.unwrap_or(d);
    let step = step_size.unwrap_or(epsilon / 4.0);
    let cfg = match kind {
        AttackKind::Fgsm => AttackConfig::fgsm(epsilon),
        AttackKind::Bim => AttackConfig::bim(epsilon, steps_or(10), step),
        AttackKind::Pgd => AttackConfig::pgd(epsilon, steps_or(10), step, seed),
        AttackKind::DeepFool => AttackConfig {
            steps: steps_or(attacks::DEFAULT_DEEPFOOL_STEPS),
            ..AttackConfig::deepfool(epsilon)
        },
    }
    .with_clip(clip.0, clip.1);
    cfg.validate().map_err(err)?;
    Ok(cfg)
}

#[pyclass(name = "Network", module = "lsrobust")]
struct PyNetwork {
    inner: DenseNetwork,
}

#[pymethods]
impl PyNetwork {
    #[staticmethod]
    fn linear(input_dim: usize, class_count: usize, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: DenseNetwork::linear(input_dim, class_count, seed).map_err(err)?,
        })
    }

    #[staticmethod]
    fn mlp(input_dim: usize, hidden: Vec<usize>, class_count: usize, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: DenseNetwork::mlp(input_dim, &hidden, class_count, seed).map_err(err)?,
        })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?,
        })
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.inner.parameter_count()
    }

    fn logits(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&self.inner.logits(matrix(x)?.view()).map_err(err)?))
    }

    fn predict(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<usize>> {
        self.inner.predict(matrix(x)?.view()).map_err(err)
    }

    /// Trains in place and returns the mean loss of each epoch. `method`
    /// selects label smoothing; `pgd = (epsilon, step, iters)` switches to
    /// PGD adversarial training.
    #[pyo3(signature = (dataset, lr = 0.1, epochs = 5, batch_size = 64, seed = 0, method = None, alpha = 0.0, temperature = None, pgd = None))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        &mut self,
        dataset: PyRef<'_, PyDataset>,
        lr: f64,
        epochs: usize,
        batch_size: usize,
        seed: u64,
        method: Option<&str>,
        alpha: f64,
        temperature: Option<f64>,
        pgd: Option<(f64, f64, usize)>,
    ) -> PyResult<Vec<f64>> {
        let smoothing = method.map(|m| smoothing_config(m, alpha, temperature)).transpose()?;
        let cfg = TrainConfig {
            smoothing,
            lr,
            epochs,
            batch_size,
            seed,
            adversarial: pgd.map(|(e, s, i)| PgdTraining::new(e, s, i)),
        };
        let log = if cfg.adversarial.is_some() {
            training::train_pgd_adversarial(&mut self.inner, &dataset.inner, &cfg)
        } else {
            training::train_ls(&mut self.inner, &dataset.inner, &cfg)
        }
        .map_err(err)?;
        Ok(log.epoch_losses)
    }

    /// Perturbed copies of the rows of `x`.
    #[pyo3(signature = (kind, x, y, epsilon, steps = None, step_size = None, seed = 0, clip = (0.0, 1.0)))]
    #[allow(clippy::too_many_arguments)]
    fn attack(
        &self,
        kind: &str,
        x: Vec<Vec<f64>>,
        y: Vec<usize>,
        epsilon: f64,
        steps: Option<usize>,
        step_size: Option<f64>,
        seed: u64,
        clip: (f64, f64),
    ) -> PyResult<Vec<Vec<f64>>> {
        let cfg = attack_config(kind, epsilon, steps, step_size, seed, clip)?;
        let x = matrix(x)?;
        Ok(rows(&attacks::perturb_batch(&self.inner, x.view(), &y, &cfg, 0).map_err(err)?))
    }

    /// Standard accuracy, accuracy under each `(kind, epsilon)` attack and
    /// the mean minimal fooling budget, as a dict.
    #[pyo3(signature = (dataset, attacks = Vec::new(), clip = (0.0, 1.0)))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        dataset: PyRef<'_, PyDataset>,
        attacks: Vec<(String, f64)>,
        clip: (f64, f64),
    ) -> PyResult<Bound<'py, pyo3::types::PyDict>> {
        let cfgs = attacks
            .iter()
            .map(|(k, e)| attack_config(k, *e, None, None, 0, clip))
            .collect::<PyResult<Vec<_>>>()?;
        let report = training::evaluate(&self.inner, &dataset.inner, &cfgs).map_err(err)?;
        let out = pyo3::types::PyDict::new(py);
        out.set_item("standard_accuracy", report.standard_accuracy)?;
        out.set_item("mean_min_fooling_eps", report.mean_min_fooling_eps)?;
        let adv: Vec<(String, f64, f64)> = report
            .adversarial
            .iter()
            .map(|a| (a.attack.name().to_string(), a.epsilon, a.accuracy))
            .collect();
        out.set_item("adversarial", adv)?;
        Ok(out)
    }

    fn min_fooling_epsilon(&self, x: Vec<f64>, y: usize) -> PyResult<f64> {
        attacks::min_fooling_epsilon(&self.inner, Array1::from(x).view(), y).map_err(err)
    }
}

#[pyclass(name = "GaussianProblem", module = "lsrobust")]
struct PyGaussianProblem {
    inner: GaussianProblem,
}

fn classifier(w: Vec<f64>) -> PyResult<LinearClassifier> {
    LinearClassifier::new(Array1::from(w)).map_err(err)
}

#[pymethods]
impl PyGaussianProblem {
    #[new]
    fn new(mu: Vec<f64>, sigma: Vec<f64>) -> PyResult<Self> {
        Ok(Self {
            inner: GaussianProblem::new(Array1::from(mu), Array1::from(sigma)).map_err(err)?,
        })
    }

    /// `sigma_i = 1 - (i - 1) / d`, `mu_i = sigma_i^2`.
    #[staticmethod]
    fn fading(d: usize) -> PyResult<Self> {
        Ok(Self {
            inner: GaussianProblem::fading_schedule(d).map_err(err)?,
        })
    }

    fn bayes_weights(&self) -> Vec<f64> {
        fading_gaussian::bayes_weights(&self.inner).w.to_vec()
    }

    fn optimal_robust_weights(&self, epsilon: f64) -> PyResult<Vec<f64>> {
        Ok(fading_gaussian::optimal_robust_weights(&self.inner, epsilon)
            .map_err(err)?
            .classifier
            .w
            .to_vec())
    }

    fn adversarial_accuracy(&self, w: Vec<f64>, epsilon: f64) -> PyResult<f64> {
        fading_gaussian::adversarial_accuracy(&self.inner, &classifier(w)?, epsilon).map_err(err)
    }

    fn optimal_adv_accuracy(&self, epsilon: f64) -> PyResult<f64> {
        fading_gaussian::optimal_adv_accuracy(&self.inner, epsilon).map_err(err)
    }

    fn monte_carlo_accuracy(&self, w: Vec<f64>, epsilon: f64, n: usize, seed: u64) -> PyResult<f64> {
        fading_gaussian::monte_carlo_accuracy(&self.inner, &classifier(w)?, epsilon, n, seed).map_err(err)
    }

    #[pyo3(signature = (alpha, n = 20_000, epochs = 50, lr = 0.1, seed = 0))]
    fn train_als_linear(&self, alpha: f64, n: usize, epochs: usize, lr: f64, seed: u64) -> PyResult<Vec<f64>> {
        let cfg = AlsLinearConfig {
            alpha,
            n,
            epochs,
            lr,
            seed,
        };
        Ok(fading_gaussian::train_als_linear(&self.inner, &cfg).map_err(err)?.w.to_vec())
    }
}

#[pymodule(name = "lsrobust")]
fn lsrobust_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(smooth_labels, m)?)?;
    m.add_function(wrap_pyfunction!(smooth_ce, m)?)?;
    m.add_function(wrap_pyfunction!(solve_inner_max, m)?)?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyNetwork>()?;
    m.add_class::<PyGaussianProblem>()?;
    Ok(())
}
