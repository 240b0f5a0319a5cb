//! Python bindings for the normalized density models of `probe_core`.
//!
//! Configurations are passed as JSON text in the same format the CLI reads.
//! Validation errors raise `ValueError`, numeric failures `ArithmeticError`.

use probe_core::flow1d::{self, MonotoneCheckpoint, MonotoneNet};
use probe_core::flownd::{self, ConditionalFlowNet, FlowCheckpoint, TriangularFlowNet};
use probe_core::heads::{self, FamilyKind, GaussianRegressionHead, SoftmaxClassifier};
use probe_core::numeric::{seeded_rng, streams};
use probe_core::timeevo::{self, InputAssignment, NonlinearTimeModel};
use probe_core::{Column, Dataset, TrainConfig};
use pyo3::exceptions::{PyArithmeticError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: probe_core::Error) -> PyErr {
    if e.is_validation() {
        PyValueError::new_err(e.to_string())
    } else {
        PyArithmeticError::new_err(e.to_string())
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for probe_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

fn parse_config(config: &str) -> PyResult<TrainConfig> {
    TrainConfig::from_json(config).py()
}

fn to_json<T: serde::Serialize>(value: &T) -> PyResult<String> {
    serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn from_json<T: serde::de::DeserializeOwned>(text: &str) -> PyResult<T> {
    serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn default_names(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

fn width(rows: &[Vec<f64>]) -> PyResult<usize> {
    rows.first()
        .map(Vec::len)
        .ok_or_else(|| PyValueError::new_err("no rows"))
}

/// Training summary: per-epoch losses and post-training checks.
#[pyclass(module = "probe_py", frozen)]
pub struct Report {
    inner: probe_core::RunReport,
}

#[pymethods]
impl Report {
    #[getter]
    fn epoch_loss(&self) -> Vec<f64> {
        self.inner.epoch_loss.clone()
    }

    #[getter]
    fn initial_loss(&self) -> f64 {
        self.inner.initial_loss
    }

    #[getter]
    fn final_loss(&self) -> f64 {
        self.inner.final_loss()
    }

    #[getter]
    fn clamp_count(&self) -> u64 {
        self.inner.clamp_count
    }

    /// `(check, value, tolerance, pass)` per check.
    #[getter]
    fn checks(&self) -> Vec<(String, f64, f64, bool)> {
        self.inner
            .checks
            .iter()
            .map(|c| (c.check.clone(), c.value, c.tolerance, c.pass))
            .collect()
    }

    fn all_checks_pass(&self) -> bool {
        self.inner.all_checks_pass()
    }

    fn metrics_jsonl(&self) -> String {
        self.inner.metrics_jsonl()
    }

    fn to_json(&self) -> PyResult<String> {
        to_json(&self.inner)
    }
}

fn report(inner: probe_core::RunReport) -> Report {
    Report { inner }
}

/// Monotone-network density of one variable.
#[pyclass(module = "probe_py", frozen)]
pub struct Flow1d {
    net: MonotoneNet,
}

#[pymethods]
impl Flow1d {
    #[staticmethod]
    #[pyo3(signature = (xs, config = "{}"))]
    fn fit(xs: Vec<f64>, config: &str) -> PyResult<(Flow1d, Report)> {
        let (net, r) = flow1d::train_1d_values(&xs, &parse_config(config)?).py()?;
        Ok((Flow1d { net }, report(r)))
    }

    fn density(&self, x: f64) -> PyResult<f64> {
        Ok(self.net.forward_cdf(x).py()?.1)
    }

    fn cdf(&self, x: f64) -> PyResult<f64> {
        Ok(self.net.forward_cdf(x).py()?.0)
    }

    fn log_density(&self, x: f64) -> PyResult<f64> {
        self.net.log_density(x).py()
    }

    /// `(grid, phi, cdf)` on `n` evenly spaced points.
    fn density_grid(&self, lo: f64, hi: f64, n: usize) -> PyResult<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let g = flow1d::density_grid(&self.net, lo, hi, n).py()?;
        Ok((g.grid, g.phi, g.cdf))
    }

    /// `(cdf(hi) - cdf(lo), quadrature of the density)`.
    fn normalization(&self, lo: f64, hi: f64) -> PyResult<(f64, f64)> {
        flow1d::normalization(&self.net, lo, hi).py()
    }

    #[pyo3(signature = (n, seed = 0))]
    fn sample(&self, n: usize, seed: u64) -> PyResult<Vec<f64>> {
        self.net
            .sample(n, &mut seeded_rng(seed, streams::SAMPLING))
            .py()
    }

    fn to_json(&self) -> PyResult<String> {
        to_json(&self.net.to_checkpoint())
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Flow1d> {
        let c: MonotoneCheckpoint = from_json(text)?;
        Ok(Flow1d {
            net: MonotoneNet::from_checkpoint(&c).py()?,
        })
    }
}

/// Triangular flow density of several variables.
#[pyclass(module = "probe_py", frozen)]
pub struct FlowNd {
    net: TriangularFlowNet,
}

#[pymethods]
impl FlowNd {
    #[staticmethod]
    #[pyo3(signature = (rows, config = "{}"))]
    fn fit(rows: Vec<Vec<f64>>, config: &str) -> PyResult<(FlowNd, Report)> {
        let names = default_names("a", width(&rows)?);
        let (net, r) = flownd::train_nd_rows(&rows, &names, &parse_config(config)?).py()?;
        Ok((FlowNd { net }, report(r)))
    }

    #[getter]
    fn dim(&self) -> usize {
        self.net.n()
    }

    fn density(&self, a: Vec<f64>) -> PyResult<f64> {
        self.net.density(&a).py()
    }

    fn nll(&self, a: Vec<f64>) -> PyResult<f64> {
        self.net.nll(&a).py()
    }

    /// `-ln` of every diagonal derivative, one row per layer.
    fn local_losses(&self, a: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
        Ok(self.net.local_losses(&a).py()?.entries)
    }

    fn to_json(&self) -> PyResult<String> {
        to_json(&self.net.to_checkpoint())
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<FlowNd> {
        let c: FlowCheckpoint = from_json(text)?;
        Ok(FlowNd {
            net: TriangularFlowNet::from_checkpoint(&c).py()?,
        })
    }
}

/// Conditional density `Φ(t | x)`.
#[pyclass(module = "probe_py", frozen)]
pub struct ConditionalFlow {
    net: ConditionalFlowNet,
}

#[pymethods]
impl ConditionalFlow {
    #[staticmethod]
    #[pyo3(signature = (xs, ts, config = "{}"))]
    fn fit(
        xs: Vec<Vec<f64>>,
        ts: Vec<Vec<f64>>,
        config: &str,
    ) -> PyResult<(ConditionalFlow, Report)> {
        let x_names = default_names("x", width(&xs)?);
        let t_names = default_names("t", width(&ts)?);
        let (net, r) =
            flownd::train_conditional_rows(&xs, &ts, &x_names, &t_names, &parse_config(config)?)
                .py()?;
        Ok((ConditionalFlow { net }, report(r)))
    }

    fn density(&self, x: Vec<f64>, t: Vec<f64>) -> PyResult<f64> {
        self.net.density(&x, &t).py()
    }

    #[pyo3(signature = (x, lo, hi, n_panels = 2000))]
    fn conditional_mean(&self, x: Vec<f64>, lo: f64, hi: f64, n_panels: usize) -> PyResult<f64> {
        self.net.conditional_mean(&x, lo, hi, n_panels).py()
    }

    #[pyo3(signature = (x, lo, hi, n_panels = 2000))]
    fn conditional_mass(&self, x: Vec<f64>, lo: f64, hi: f64, n_panels: usize) -> PyResult<f64> {
        self.net.conditional_mass(&x, lo, hi, n_panels).py()
    }

    fn to_json(&self) -> PyResult<String> {
        to_json(&self.net.to_checkpoint())
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<ConditionalFlow> {
        let c: FlowCheckpoint = from_json(text)?;
        Ok(ConditionalFlow {
            net: ConditionalFlowNet::from_checkpoint(&c).py()?,
        })
    }
}

/// Softmax classifier over string labels.
#[pyclass(module = "probe_py", frozen)]
pub struct Classifier {
    head: SoftmaxClassifier,
}

#[pymethods]
impl Classifier {
    #[staticmethod]
    #[pyo3(signature = (xs, labels, config = "{}"))]
    fn fit(xs: Vec<Vec<f64>>, labels: Vec<String>, config: &str) -> PyResult<(Classifier, Report)> {
        let names = default_names("x", width(&xs)?);
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let data = Dataset::from_rows(&refs, &xs)
            .and_then(|d| d.with_column("label", Column::Categorical(labels)))
            .py()?;
        let mut config = parse_config(config)?;
        config.columns.label = Some("label".into());
        config.columns.x = names;
        let (head, r) = heads::train_classifier(&data, &config).py()?;
        Ok((Classifier { head }, report(r)))
    }

    #[getter]
    fn labels(&self) -> Vec<String> {
        self.head.labels.clone()
    }

    /// Probabilities in the order of `labels`.
    fn probabilities(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.head.probabilities(&x).py()
    }

    fn prob(&self, x: Vec<f64>, label: &str) -> PyResult<f64> {
        self.head.prob(&x, label).py()
    }

    fn to_json(&self) -> PyResult<String> {
        to_json(&self.head)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Classifier> {
        Ok(Classifier {
            head: from_json(text)?,
        })
    }
}

/// Gaussian regression head `P(t | x) = N(μ(x), Σ(x))`.
#[pyclass(module = "probe_py", frozen)]
pub struct GaussianHead {
    head: GaussianRegressionHead,
}

#[pymethods]
impl GaussianHead {
    #[staticmethod]
    #[pyo3(signature = (xs, ts, config = "{}"))]
    fn fit(xs: Vec<Vec<f64>>, ts: Vec<Vec<f64>>, config: &str) -> PyResult<(GaussianHead, Report)> {
        let x_names = default_names("x", width(&xs)?);
        let t_names = default_names("t", width(&ts)?);
        let (head, r) =
            heads::train_regression_rows(&xs, &ts, &x_names, &t_names, &parse_config(config)?)
                .py()?;
        Ok((GaussianHead { head }, report(r)))
    }

    /// `(mean, marginal standard deviations)`.
    fn predict(&self, x: Vec<f64>) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let out = self.head.predict(&x).py()?;
        let sd = out.std_devs();
        Ok((out.mu, sd))
    }

    fn nll(&self, x: Vec<f64>, t: Vec<f64>) -> PyResult<f64> {
        self.head.nll(&x, &t).py()
    }

    fn to_json(&self) -> PyResult<String> {
        to_json(&self.head)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<GaussianHead> {
        Ok(GaussianHead {
            head: from_json(text)?,
        })
    }
}

/// Streaming Gaussian estimate: `(mean, variance, batch_mean, batch_variance)`.
#[pyfunction]
#[pyo3(signature = (xs, config = "{}"))]
fn estimate_gaussian(xs: Vec<f64>, config: &str) -> PyResult<(f64, f64, f64, f64)> {
    let (est, _) =
        heads::estimate_params_values(&xs, FamilyKind::Gaussian1d, &parse_config(config)?).py()?;
    Ok((
        est.family.mean(),
        est.family.variance(),
        est.batch.mean(),
        est.batch.variance(),
    ))
}

/// Time-evolution density model.
#[pyclass(module = "probe_py", frozen)]
pub struct TimeModel {
    model: NonlinearTimeModel,
}

#[pymethods]
impl TimeModel {
    #[staticmethod]
    #[pyo3(signature = (rows, config = "{}"))]
    fn fit(rows: Vec<Vec<f64>>, config: &str) -> PyResult<(TimeModel, Report)> {
        let names = default_names("x", width(&rows)?);
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let data = Dataset::from_rows(&refs, &rows).py()?;
        let (model, r) = timeevo::train_time_model(&data, &parse_config(config)?).py()?;
        Ok((TimeModel { model }, report(r)))
    }

    /// Density at raw points, averaging `draws` auxiliary assignments.
    #[pyo3(signature = (xs, draws = 64, seed = 0))]
    fn density(&self, xs: Vec<Vec<f64>>, draws: usize, seed: u64) -> PyResult<Vec<f64>> {
        let mut rng = seeded_rng(seed, streams::SAMPLING);
        timeevo::recover_input_density(&self.model, &xs, draws, &mut rng).py()
    }

    /// `(times, states)` of the rollout from a raw point.
    #[pyo3(signature = (x, seed = 0))]
    fn rollout(&self, x: Vec<f64>, seed: u64) -> PyResult<(Vec<f64>, Vec<Vec<f64>>)> {
        let mut rng = seeded_rng(seed, streams::AUXILIARY);
        let u = self.model.to_model_units(&x);
        let a = InputAssignment::sample(&u, self.model.n, &mut rng).py()?;
        let traj = timeevo::evolve_nonlinear(&self.model, &a).py()?;
        Ok((traj.times, traj.states))
    }

    fn to_json(&self) -> PyResult<String> {
        to_json(&self.model)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<TimeModel> {
        let model: NonlinearTimeModel = from_json(text)?;
        model.validate().py()?;
        Ok(TimeModel { model })
    }
}

#[pymodule]
fn probe_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Report>()?;
    m.add_class::<Flow1d>()?;
    m.add_class::<FlowNd>()?;
    m.add_class::<ConditionalFlow>()?;
    m.add_class::<Classifier>()?;
    m.add_class::<GaussianHead>()?;
    m.add_class::<TimeModel>()?;
    m.add_function(wrap_pyfunction!(estimate_gaussian, m)?)?;
    Ok(())
}
