//! Python bindings: datasets, k-means, task distributions, models, CL metrics
//! and config-driven experiment runs. Images cross the boundary as flat
//! lists of floats in `N×C×H×W` order.

use std::path::PathBuf;

use fusion_core::bench::{compute_metrics as cl_metrics, CLRunRecord};
use fusion_core::cluster::{self, BalanceMode, DistributionConfig, EmbeddingSet};
use fusion_core::data::{self, SyntheticConfig};
use fusion_core::experiment::{self, ExperimentConfig};
use fusion_core::meml::{self, attention_aggregate, Architecture};
use fusion_core::tensor::Tensor;
use fusion_core::FusionError;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(e: FusionError) -> PyErr {
    match e {
        FusionError::Io { .. } => PyIOError::new_err(e.to_string()),
        FusionError::Divergence { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

#[pyclass(name = "Dataset", module = "fusion_py")]
struct PyDataset(data::Dataset);

#[pymethods]
impl PyDataset {
    fn __len__(&self) -> usize {
        self.0.len()
    }

    #[getter]
    fn image_shape(&self) -> (usize, usize, usize) {
        let [c, h, w] = self.0.image_shape();
        (c, h, w)
    }

    #[getter]
    fn labels(&self) -> Vec<usize> {
        self.0.labels().to_vec()
    }

    #[getter]
    fn class_count(&self) -> usize {
        self.0.class_count()
    }

    fn image(&self, i: usize) -> PyResult<Vec<f64>> {
        if i >= self.0.len() {
            return Err(PyValueError::new_err(format!("index {i} out of range")));
        }
        Ok(self.0.image(i).to_vec())
    }

    fn class_sizes(&self) -> Vec<usize> {
        self.0.class_sizes()
    }

    fn __repr__(&self) -> String {
        format!("Dataset({:?}, n={}, classes={})", self.0.name(), self.0.len(), self.0.class_count())
    }
}

/// Returns `(train, test)` from a directory of MNIST IDX files.
#[pyfunction]
fn load_mnist(dir: PathBuf) -> PyResult<(PyDataset, PyDataset)> {
    let (train, test) = data::load_mnist_dir(dir).map_err(to_py)?;
    Ok((PyDataset(train), PyDataset(test)))
}

#[pyfunction]
#[pyo3(signature = (num_classes=30, samples_min=10, samples_max=30, image_size=16, noise_sigma=0.0, seed=0))]
fn make_synthetic(
    num_classes: usize,
    samples_min: usize,
    samples_max: usize,
    image_size: usize,
    noise_sigma: f64,
    seed: u64,
) -> PyResult<PyDataset> {
    let cfg = SyntheticConfig { num_classes, samples_per_class: (samples_min, samples_max), image_size, noise_sigma, seed };
    data::make_synthetic_fewshot(&cfg).map(PyDataset).map_err(to_py)
}

/// k-means++ then Lloyd iterations. Returns `(labels, centroids, inertia)`.
#[pyfunction]
#[pyo3(signature = (rows, k, max_iters=100, seed=0))]
fn kmeans(rows: Vec<Vec<f64>>, k: usize, max_iters: usize, seed: u64) -> PyResult<(Vec<usize>, Vec<Vec<f64>>, f64)> {
    let z = EmbeddingSet::from_rows(&rows).map_err(to_py)?;
    let res = cluster::kmeans(&z, k, max_iters, seed).map_err(to_py)?;
    Ok((res.labels.clone(), res.centroids.clone(), res.inertia()))
}

#[pyclass(name = "TaskDistribution", module = "fusion_py")]
struct PyTaskDistribution(cluster::TaskDistribution);

#[pymethods]
impl PyTaskDistribution {
    #[new]
    #[pyo3(signature = (pseudo_labels, mode="off", min_cluster_size=3, query_random_count=10, target_size=None, seed=0))]
    fn new(
        pseudo_labels: Vec<usize>,
        mode: &str,
        min_cluster_size: usize,
        query_random_count: usize,
        target_size: Option<usize>,
        seed: u64,
    ) -> PyResult<Self> {
        let mode = match mode {
            "off" => BalanceMode::Off,
            "threshold" => BalanceMode::Threshold,
            "augment" => BalanceMode::Augment,
            other => return Err(PyValueError::new_err(format!("unknown balance mode {other:?}"))),
        };
        let cfg = DistributionConfig { min_cluster_size, query_random_count, mode, target_size, seed };
        cluster::build_task_distribution(&pseudo_labels, &cfg).map(Self).map_err(to_py)
    }

    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        cluster::TaskDistribution::read(path).map(Self).map_err(to_py)
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        self.0.write(path).map_err(to_py)
    }

    fn cluster_sizes(&self) -> Vec<usize> {
        self.0.cluster_sizes()
    }

    #[getter]
    fn target_size(&self) -> usize {
        self.0.target_size()
    }

    #[getter]
    fn pseudo_labels(&self) -> Vec<usize> {
        self.0.pseudo_labels().to_vec()
    }

    fn __len__(&self) -> usize {
        self.0.clusters().len()
    }
}

#[pyclass(name = "Model", module = "fusion_py")]
struct PyModel(meml::Model);

fn image_tensor(model: &meml::Model, images: Vec<f64>) -> PyResult<Tensor> {
    let per = model.arch.input_len();
    if per == 0 || !images.len().is_multiple_of(per) {
        return Err(PyValueError::new_err(format!("{} values is not a whole number of {per}-value images", images.len())));
    }
    let shape = match &model.arch.backbone {
        meml::Backbone::Conv { channels, height, width, .. } => vec![images.len() / per, *channels, *height, *width],
        meml::Backbone::Mlp { input, .. } => vec![images.len() / per, 1, 1, *input],
    };
    Tensor::new(shape, images).map_err(to_py)
}

#[pymethods]
impl PyModel {
    /// Four-layer conv feature network for `channels×height×width` images.
    #[staticmethod]
    #[pyo3(signature = (channels, height, width, classes, seed=0))]
    fn conv(channels: usize, height: usize, width: usize, classes: usize, seed: u64) -> PyResult<Self> {
        meml::Model::new(Architecture::conv_default([channels, height, width], classes), seed).map(Self).map_err(to_py)
    }

    #[staticmethod]
    #[pyo3(signature = (input, classes, seed=0))]
    fn mlp(input: usize, classes: usize, seed: u64) -> PyResult<Self> {
        meml::Model::new(Architecture::mlp_default(input, classes), seed).map(Self).map_err(to_py)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        meml::read_checkpoint(path).map(Self).map_err(to_py)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        meml::write_checkpoint(&self.0, path).map_err(to_py)
    }

    #[getter]
    fn numel(&self) -> usize {
        self.0.numel()
    }

    #[getter]
    fn feature_dim(&self) -> usize {
        self.0.feature_dim()
    }

    fn predict(&self, images: Vec<f64>) -> PyResult<Vec<usize>> {
        let x = image_tensor(&self.0, images)?;
        self.0.predict(&x).map_err(to_py)
    }

    /// Feature rows of a batch of images.
    fn features(&self, images: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
        let x = image_tensor(&self.0, images)?;
        let f = meml::forward_fen(&self.0, &x).map_err(to_py)?;
        Ok(f.data().chunks(self.0.feature_dim()).map(<[f64]>::to_vec).collect())
    }

    /// Attention weights and the aggregated meta-example for feature rows.
    fn meta_example(&self, rows: Vec<Vec<f64>>) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let d = self.0.feature_dim();
        if rows.iter().any(|r| r.len() != d) {
            return Err(PyValueError::new_err(format!("feature rows must have length {d}")));
        }
        let r = Tensor::new(vec![rows.len(), d], rows.concat()).map_err(to_py)?;
        let me = attention_aggregate(&self.0, &r).map_err(to_py)?;
        Ok((me.coefficients, me.aggregate))
    }
}

/// FWT, BWT and forgetting for an accuracy matrix (row = after task, column = task).
#[pyfunction]
fn compute_metrics<'py>(py: Python<'py>, acc_matrix: Vec<Vec<f64>>, random_init_acc: Vec<f64>) -> PyResult<Bound<'py, PyDict>> {
    let final_acc = acc_matrix.last().map(|r| r.iter().sum::<f64>() / r.len() as f64).unwrap_or(0.0);
    let rec = CLRunRecord { acc_matrix, random_init_acc, final_acc, inner_steps: 0, outer_steps: 0 };
    let m = cl_metrics(&rec).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("final_acc", m.final_acc)?;
    d.set_item("fwt", m.fwt)?;
    d.set_item("bwt", m.bwt)?;
    d.set_item("forgetting", m.forgetting)?;
    Ok(d)
}

fn load_config(path: PathBuf, seeds: Option<Vec<u64>>, out_dir: Option<String>) -> PyResult<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_path(path).map_err(to_py)?;
    if let Some(s) = seeds {
        cfg.seeds = s;
    }
    if let Some(d) = out_dir {
        cfg.out_dir = d;
    }
    cfg.validate().map_err(to_py)?;
    Ok(cfg)
}

/// Parses a config and checks its resources. Returns the report lines.
#[pyfunction]
#[pyo3(signature = (path, seeds=None, out_dir=None))]
fn validate_config(path: PathBuf, seeds: Option<Vec<u64>>, out_dir: Option<String>) -> PyResult<Vec<String>> {
    let cfg = load_config(path, seeds, out_dir)?;
    experiment::validate_resources(&cfg).map_err(to_py)
}

/// Runs an experiment config and returns the aggregate as a JSON string.
#[pyfunction]
#[pyo3(signature = (path, seeds=None, out_dir=None))]
fn run_experiment(path: PathBuf, seeds: Option<Vec<u64>>, out_dir: Option<String>) -> PyResult<String> {
    let cfg = load_config(path, seeds, out_dir)?;
    let out = experiment::run_experiment(&cfg, &mut |_| {}).map_err(to_py)?;
    serde_json::to_string(&out.aggregate).map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pymodule]
fn fusion_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyTaskDistribution>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(load_mnist, m)?)?;
    m.add_function(wrap_pyfunction!(make_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(kmeans, m)?)?;
    m.add_function(wrap_pyfunction!(compute_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(validate_config, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add("DATA_DIR_ENV", experiment::DATA_DIR_ENV)?;
    Ok(())
}
