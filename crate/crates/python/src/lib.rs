//! Python bindings: datasets, the network, profiles, transforms and the
//! two-sample statistics.

use std::path::PathBuf;

use compprof_core::dataset::{self, Category, Image, LabeledDataset};
use compprof_core::network::{self, LayerSpec, NetworkModel, TrainingConfig};
use compprof_core::pipeline::{self, ExperimentConfig};
use compprof_core::profiles::{self, Normalization, ProfileModelSet, ProfileOptions, StdMode};
use compprof_core::{stats, transforms, Error};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::Divergence { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn category(name: &str) -> PyResult<Category> {
    name.parse().map_err(py_err)
}

/// Images with optional class labels and stable ids.
#[pyclass(module = "compprof", name = "Dataset", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: LabeledDataset,
}

#[pymethods]
impl PyDataset {
    /// Builds a dataset from rows of 784 pixels in [0, 1].
    #[new]
    #[pyo3(signature = (images, labels=None, category="train"))]
    fn new(images: Vec<Vec<f64>>, labels: Option<Vec<u8>>, category: &str) -> PyResult<Self> {
        let cat = self::category(category)?;
        let images = images.into_iter().map(Image::new).collect::<Result<Vec<_>, _>>().map_err(py_err)?;
        let n = images.len();
        let labels = match labels {
            Some(l) => l.into_iter().map(Some).collect(),
            None => vec![None; n],
        };
        let inner = LabeledDataset::new(images, labels, (0..n as u64).collect(), cat).map_err(py_err)?;
        Ok(PyDataset { inner })
    }

    /// Loads IDX image and label files (gzip or plain).
    #[staticmethod]
    #[pyo3(signature = (images, labels, category="train"))]
    fn load(images: PathBuf, labels: PathBuf, category: &str) -> PyResult<Self> {
        let inner = dataset::load_labeled(images, labels, self::category(category)?).map_err(py_err)?;
        Ok(PyDataset { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (images, category="random"))]
    fn load_unlabeled(images: PathBuf, category: &str) -> PyResult<Self> {
        let inner = dataset::load_unlabeled(images, self::category(category)?).map_err(py_err)?;
        Ok(PyDataset { inner })
    }

    /// Uniform random-pixel images from one seeded stream.
    #[staticmethod]
    fn random(count: usize, seed: u64) -> Self {
        PyDataset { inner: dataset::generate_random_images(count, seed) }
    }

    fn save_images(&self, path: PathBuf) -> PyResult<()> {
        dataset::write_idx_images(path, self.inner.images()).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn category(&self) -> String {
        self.inner.category().to_string()
    }

    fn labels(&self) -> Vec<Option<u8>> {
        self.inner.labels().to_vec()
    }

    fn ids(&self) -> Vec<u64> {
        self.inner.ids().to_vec()
    }

    fn image(&self, index: usize) -> PyResult<Vec<f64>> {
        self.inner
            .images()
            .get(index)
            .map(|i| i.pixels().to_vec())
            .ok_or_else(|| PyValueError::new_err(format!("index {index} out of range")))
    }

    /// The first `per_class` images of every class.
    fn stratified_prefix(&self, per_class: usize) -> Self {
        PyDataset { inner: self.inner.stratified_prefix(per_class) }
    }

    fn __repr__(&self) -> String {
        format!("Dataset(category={}, len={})", self.inner.category(), self.inner.len())
    }
}

/// Fully connected RELU network with a softmax output.
#[pyclass(module = "compprof", name = "Network", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyNetwork {
    inner: NetworkModel,
}

#[pymethods]
impl PyNetwork {
    /// He-uniform initialization; `sizes` runs from input to output.
    #[new]
    #[pyo3(signature = (sizes=vec![784, 256, 64, 10], seed=0))]
    fn new(sizes: Vec<usize>, seed: u64) -> PyResult<Self> {
        let inner = network::init_model(&LayerSpec::chain(&sizes), seed).map_err(py_err)?;
        Ok(PyNetwork { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyNetwork { inner: network::load_model(path).map_err(py_err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        network::save_model(&self.inner, path).map_err(py_err)
    }

    /// Returns the trained network and per-epoch (loss, train accuracy).
    #[pyo3(signature = (data, epochs=10, batch_size=64, learning_rate=0.05, seed=0))]
    fn train(
        &self,
        py: Python<'_>,
        data: &PyDataset,
        epochs: usize,
        batch_size: usize,
        learning_rate: f32,
        seed: u64,
    ) -> PyResult<(Self, Vec<(f64, f64)>)> {
        let cfg = TrainingConfig { epochs, batch_size, learning_rate, master_seed: seed };
        let model = self.inner.clone();
        let (model, log) = py.detach(|| network::train(model, &data.inner, &cfg)).map_err(py_err)?;
        Ok((PyNetwork { inner: model }, log.iter().map(|s| (s.mean_loss, s.train_accuracy)).collect()))
    }

    fn predict(&self, data: &PyDataset) -> PyResult<Vec<usize>> {
        self.inner.predict_all(data.inner.images()).map_err(py_err)
    }

    /// Softmax probabilities of one 784-pixel image.
    fn probabilities(&self, pixels: Vec<f64>) -> PyResult<Vec<f64>> {
        let image = Image::new(pixels).map_err(py_err)?;
        Ok(self.inner.forward(&image).map_err(py_err)?.0.probabilities)
    }

    fn accuracy(&self, data: &PyDataset) -> PyResult<f64> {
        Ok(network::evaluate(&self.inner, &data.inner).map_err(py_err)?.accuracy)
    }

    /// Best classes and the activations of 1-based layer `layer`.
    fn layer_activations(&self, data: &PyDataset, layer: usize) -> PyResult<(Vec<usize>, Vec<Vec<f32>>)> {
        let (best, acts) = self.inner.predict_with_layer(data.inner.images(), layer).map_err(py_err)?;
        Ok((best, acts.rows().into_iter().map(|r| r.to_vec()).collect()))
    }

    #[getter]
    fn sizes(&self) -> Vec<usize> {
        let arch = self.inner.architecture();
        std::iter::once(arch[0].input_size).chain(arch.iter().map(|l| l.output_size)).collect()
    }

    fn digest(&self) -> String {
        self.inner.digest()
    }
}

/// Per-class neuron histograms of one layer.
#[pyclass(module = "compprof", name = "Profiles", frozen)]
struct PyProfiles {
    inner: ProfileModelSet,
}

#[pymethods]
impl PyProfiles {
    #[staticmethod]
    #[pyo3(signature = (network, data, c=1.0, layer=None, paper_literal_std=false, per_class_norm=false, floor_count=0.5))]
    fn fit(
        py: Python<'_>,
        network: &PyNetwork,
        data: &PyDataset,
        c: f64,
        layer: Option<usize>,
        paper_literal_std: bool,
        per_class_norm: bool,
        floor_count: f64,
    ) -> PyResult<Self> {
        let options = ProfileOptions {
            c,
            layer,
            std_mode: if paper_literal_std { StdMode::PaperLiteral } else { StdMode::Population },
            normalization: if per_class_norm { Normalization::PerClass } else { Normalization::Verbatim },
            floor_count,
        };
        let inner = py.detach(|| profiles::fit_profiles(&network.inner, &data.inner, &options)).map_err(py_err)?;
        Ok(PyProfiles { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyProfiles { inner: profiles::load_profiles(path).map_err(py_err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        profiles::save_profiles(&self.inner, path).map_err(py_err)
    }

    #[getter]
    fn layer(&self) -> usize {
        self.inner.layer
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes
    }

    fn class_counts(&self) -> Vec<u64> {
        self.inner.classes.iter().map(|c| c.class_sample_count).collect()
    }

    fn floor_probability(&self, class_id: usize) -> PyResult<f64> {
        self.inner.floor_probability(class_id).map_err(py_err)
    }

    fn bin_probability(&self, class_id: usize, neuron: usize, bin: i64) -> PyResult<f64> {
        self.inner.bin_probability(class_id, neuron, bin).map_err(py_err)
    }

    /// Distance in nats of a layer activation vector under `class_id`.
    fn distance(&self, activations: Vec<f32>, class_id: usize) -> PyResult<f64> {
        self.inner.distance_of(&activations, class_id).map_err(py_err)
    }

    /// `(id, predicted_class, distance)` for every input, under its best class.
    fn score(&self, py: Python<'_>, network: &PyNetwork, data: &PyDataset) -> PyResult<Vec<(u64, usize, f64)>> {
        let cat = data.inner.category();
        let records = py
            .detach(|| profiles::score_dataset(&network.inner, &self.inner, &data.inner, cat))
            .map_err(py_err)?;
        Ok(records.iter().map(|r| (r.input_id, r.predicted_class, r.distance)).collect())
    }

    fn digest(&self) -> String {
        self.inner.digest()
    }
}

/// Rotates 784 pixels counter-clockwise about the image center.
#[pyfunction]
fn rotate(pixels: Vec<f64>, degrees: f64) -> PyResult<Vec<f64>> {
    let image = Image::new(pixels).map_err(py_err)?;
    Ok(transforms::rotate(&image, degrees).pixels().to_vec())
}

/// Rotation search over a labeled set. Returns the rotation dataset and
/// `(source_id, original_label, predicted_class, angle, steps)` rows.
#[pyfunction]
#[pyo3(signature = (network, data, step=5.0, max_angle=40.0))]
fn build_rotation_set(
    py: Python<'_>,
    network: &PyNetwork,
    data: &PyDataset,
    step: f64,
    max_angle: f64,
) -> PyResult<(PyDataset, Vec<(u64, usize, usize, f64, usize)>)> {
    let (set, outcomes) = py
        .detach(|| transforms::build_rotation_set(&network.inner, &data.inner, step, max_angle))
        .map_err(py_err)?;
    let rows = outcomes
        .iter()
        .map(|o| (o.source_id, o.original_label, o.predicted_class, o.applied_angle, o.steps_taken))
        .collect();
    Ok((PyDataset { inner: set }, rows))
}

/// `(statistic, p_value)` of the Epps-Singleton test.
#[pyfunction]
#[pyo3(signature = (a, b, t=vec![0.4, 0.8]))]
fn epps_singleton(a: Vec<f64>, b: Vec<f64>, t: Vec<f64>) -> PyResult<(f64, f64)> {
    let r = stats::epps_singleton(&a, &b, &t).map_err(py_err)?;
    Ok((r.statistic, r.p_value))
}

/// `(delta, magnitude)`.
#[pyfunction]
fn cliffs_delta(a: Vec<f64>, b: Vec<f64>) -> PyResult<(f64, String)> {
    let e = stats::cliffs_delta(&a, &b).map_err(py_err)?;
    Ok((e.delta, e.magnitude.to_string()))
}

#[pyfunction]
fn cohens_d(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    stats::cohens_d(&a, &b).map_err(py_err)
}

/// `(z, p_value)`.
#[pyfunction]
fn rank_sum_test(a: Vec<f64>, b: Vec<f64>) -> PyResult<(f64, f64)> {
    let r = stats::rank_sum_test(&a, &b).map_err(py_err)?;
    Ok((r.statistic, r.p_value))
}

/// `(D, p_value)`.
#[pyfunction]
fn ks_test(a: Vec<f64>, b: Vec<f64>) -> PyResult<(f64, f64)> {
    let r = stats::ks_test(&a, &b).map_err(py_err)?;
    Ok((r.statistic, r.p_value))
}

#[pyfunction]
#[pyo3(signature = (p_values, alpha=stats::DEFAULT_ALPHA))]
fn benjamini_hochberg(p_values: Vec<f64>, alpha: f64) -> PyResult<Vec<bool>> {
    stats::benjamini_hochberg(&p_values, alpha).map_err(py_err)
}

/// Runs one pipeline stage (`train`, `fit`, `derive`, `score`, `report` or
/// `full`). `settings` holds configuration keys applied after `config`.
#[pyfunction]
#[pyo3(signature = (command, config=None, settings=None))]
fn run(
    py: Python<'_>,
    command: &str,
    config: Option<PathBuf>,
    settings: Option<Vec<(String, String)>>,
) -> PyResult<()> {
    let mut cfg = match config {
        Some(p) => ExperimentConfig::from_file(p).map_err(py_err)?,
        None => ExperimentConfig::default(),
    };
    for (k, v) in settings.unwrap_or_default() {
        cfg.set(&k, &v).map_err(py_err)?;
    }
    cfg.validate().map_err(py_err)?;
    let result = py.detach(|| match command {
        "train" => pipeline::cmd_train(&cfg).map(drop),
        "fit" => pipeline::cmd_fit(&cfg).map(drop),
        "derive" => pipeline::cmd_derive(&cfg).map(drop),
        "score" => pipeline::cmd_score(&cfg).map(drop),
        "report" => pipeline::cmd_report(&cfg).map(drop),
        "full" => pipeline::cmd_full(&cfg).map(drop),
        other => Err(Error::Config(format!("unknown command {other:?}"))),
    });
    result.map_err(py_err)
}

#[pymodule]
fn compprof(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", pipeline::VERSION)?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyNetwork>()?;
    m.add_class::<PyProfiles>()?;
    m.add_function(wrap_pyfunction!(rotate, m)?)?;
    m.add_function(wrap_pyfunction!(build_rotation_set, m)?)?;
    m.add_function(wrap_pyfunction!(epps_singleton, m)?)?;
    m.add_function(wrap_pyfunction!(cliffs_delta, m)?)?;
    m.add_function(wrap_pyfunction!(cohens_d, m)?)?;
    m.add_function(wrap_pyfunction!(rank_sum_test, m)?)?;
    m.add_function(wrap_pyfunction!(ks_test, m)?)?;
    m.add_function(wrap_pyfunction!(benjamini_hochberg, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    Ok(())
}
