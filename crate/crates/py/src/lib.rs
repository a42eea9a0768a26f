//! Python bindings: hypervolume tools, the synthetic benchmark, training,
//! evaluation and run bundles.

use std::path::PathBuf;

use modir::bundle::{decode_dvf, encode_dvf, read_bundle as read_run_bundle, write_run_bundle, RunArtifacts, RunBundle};
use modir::metrics::{evaluate_solution, folding_percent as folding, set_report, tre};
use modir::model::{predict, ModelParams};
use modir::pair::{Dvf as CoreDvf, RegistrationPair};
use modir::synth::{Dataset as CoreDataset, SynthConfig};
use modir::train::{self, split, GenmedConfig, TrainConfig, TrainTrace, WeightMode};
use modir::{Error, Tensor};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyIOError, PyIndexError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

create_exception!(modir_py, ModirError, PyException, "Base class of registration toolkit errors.");
create_exception!(modir_py, IntegrityError, ModirError, "A bundle file is missing, truncated or fails its checksum.");
create_exception!(modir_py, VersionError, ModirError, "A bundle has an unsupported schema version.");
create_exception!(modir_py, NonFiniteError, ModirError, "Training produced a NaN or infinite value.");

fn to_py(err: Error) -> PyErr {
    let msg = err.to_string();
    match err {
        Error::Shape(_) | Error::Config(_) | Error::Contract(_) => PyValueError::new_err(msg),
        Error::Integrity { .. } => IntegrityError::new_err(msg),
        Error::Version { .. } => VersionError::new_err(msg),
        Error::NonFinite { .. } => NonFiniteError::new_err(msg),
        Error::Io { .. } => PyIOError::new_err(msg),
        Error::Json { .. } | Error::Png { .. } => ModirError::new_err(msg),
    }
}

/// Converts any serializable value to plain Python objects.
fn to_object<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| ModirError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn rows(data: &[f64], height: usize, width: usize) -> Vec<Vec<f64>> {
    (0..height).map(|y| data[y * width..(y + 1) * width].to_vec()).collect()
}

fn flatten(grid: &[Vec<f64>]) -> PyResult<(usize, usize, Vec<f64>)> {
    let height = grid.len();
    let width = grid.first().map_or(0, Vec::len);
    if height == 0 || width == 0 || grid.iter().any(|r| r.len() != width) {
        return Err(PyValueError::new_err("expected a non-empty rectangular grid"));
    }
    Ok((height, width, grid.concat()))
}

/// Channels of a `[1,C,H,W]` tensor as nested lists.
fn channels(t: &Tensor) -> Vec<Vec<Vec<f64>>> {
    let (h, w) = (t.shape()[2], t.shape()[3]);
    t.data().chunks(h * w).map(|c| rows(c, h, w)).collect()
}

/// Exact hypervolume dominated by `points` and bounded by `reference`.
#[pyfunction]
fn hypervolume(points: Vec<Vec<f64>>, reference: Vec<f64>) -> f64 {
    modir::hv::hypervolume(&points, &reference)
}

/// Partial derivatives of the hypervolume with respect to every coordinate.
#[pyfunction]
fn hv_gradient(points: Vec<Vec<f64>>, reference: Vec<f64>) -> Vec<Vec<f64>> {
    modir::hv::hv_gradient(&points, &reference)
}

/// Per-solution loss weights derived from the hypervolume gradient.
#[pyfunction]
fn dynamic_weights(points: Vec<Vec<f64>>, reference: Vec<f64>) -> Vec<Vec<f64>> {
    modir::hv::dynamic_weights(&points, &reference)
}

/// Indices grouped into successive non-dominated fronts.
#[pyfunction]
fn nondominated_sort(points: Vec<Vec<f64>>) -> Vec<Vec<usize>> {
    modir::hv::nondominated_sort(&points).fronts
}

#[pyfunction]
fn genmed_eval(x: Vec<f64>) -> Vec<f64> {
    modir::genmed::genmed_eval(&x)
}

/// Distance from a decision vector to the GenMED Pareto set.
#[pyfunction]
fn front_distance(x: Vec<f64>) -> PyResult<f64> {
    modir::genmed::front_distance(&x).map_err(to_py)
}

/// The fixed weight triples of the grid-search baseline, unnormalized.
#[pyfunction]
fn enumerate_grid_weights() -> PyResult<Vec<[f64; 3]>> {
    train::enumerate_grid_weights().map_err(to_py)
}

/// Runs the GenMED benchmark once per reference point and returns the
/// traces as dictionaries.
#[pyfunction]
#[pyo3(signature = (p=25, iterations=3000, lr=0.01, references=None, seed=0))]
fn train_genmed(
    py: Python<'_>,
    p: usize,
    iterations: usize,
    lr: f64,
    references: Option<Vec<Vec<f64>>>,
    seed: u64,
) -> PyResult<Py<PyAny>> {
    let defaults = GenmedConfig::default();
    let config = GenmedConfig {
        p,
        iterations,
        lr,
        references: references.unwrap_or(defaults.references),
        seed,
        ..defaults
    };
    let traces = py.detach(|| train::train_genmed(&config)).map_err(to_py)?;
    to_object(py, &traces)
}

/// A dense 2D displacement field in voxel units.
#[pyclass(module = "modir_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct Dvf {
    inner: CoreDvf,
}

#[pymethods]
impl Dvf {
    /// Builds a field from `H x W` nested lists of x and y displacements.
    #[new]
    fn new(ux: Vec<Vec<f64>>, uy: Vec<Vec<f64>>) -> PyResult<Self> {
        let (h, w, mut data) = flatten(&ux)?;
        let (hy, wy, y) = flatten(&uy)?;
        if (h, w) != (hy, wy) {
            return Err(PyValueError::new_err("x and y components differ in shape"));
        }
        data.extend(y);
        let tensor = Tensor::new(&[1, 2, h, w], data).map_err(to_py)?;
        Ok(Dvf { inner: CoreDvf::new(tensor).map_err(to_py)? })
    }

    #[staticmethod]
    fn zeros(height: usize, width: usize) -> Self {
        Dvf { inner: CoreDvf::zeros(height, width) }
    }

    /// Parses a binary displacement raster.
    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        let inner = decode_dvf(data, &PathBuf::from("<bytes>")).map_err(to_py)?;
        Ok(Dvf { inner })
    }

    fn to_bytes(&self) -> Vec<u8> {
        encode_dvf(&self.inner)
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    #[getter]
    fn ux(&self) -> Vec<Vec<f64>> {
        rows(self.inner.ux(), self.inner.height(), self.inner.width())
    }

    #[getter]
    fn uy(&self) -> Vec<Vec<f64>> {
        rows(self.inner.uy(), self.inner.height(), self.inner.width())
    }

    /// Bilinear displacement at `(x, y)`, or `None` outside the image.
    fn sample(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        self.inner.sample(x, y)
    }

    fn max_magnitude(&self) -> f64 {
        self.inner.max_magnitude()
    }

    /// Percentage of sites with a non-positive Jacobian determinant.
    fn folding_percent(&self) -> f64 {
        folding(&self.inner)
    }

    fn __repr__(&self) -> String {
        format!("Dvf(height={}, width={})", self.inner.height(), self.inner.width())
    }
}

/// Percentage of sites of `dvf` with a non-positive Jacobian determinant.
#[pyfunction]
fn folding_percent(dvf: &Dvf) -> f64 {
    folding(&dvf.inner)
}

/// One registration pair: images, organ masks, landmarks and, for
/// synthetic data, the true field.
#[pyclass(module = "modir_py", frozen)]
struct Pair {
    inner: RegistrationPair,
}

#[pymethods]
impl Pair {
    #[getter]
    fn source_image(&self) -> Vec<Vec<f64>> {
        channels(&self.inner.source_image).remove(0)
    }

    #[getter]
    fn target_image(&self) -> Vec<Vec<f64>> {
        channels(&self.inner.target_image).remove(0)
    }

    /// One `H x W` binary mask per organ.
    #[getter]
    fn source_mask(&self) -> Vec<Vec<Vec<f64>>> {
        channels(&self.inner.source_mask)
    }

    #[getter]
    fn target_mask(&self) -> Vec<Vec<Vec<f64>>> {
        channels(&self.inner.target_mask)
    }

    /// `(target_xy, source_xy)` correspondences.
    #[getter]
    fn landmarks(&self) -> Vec<([f64; 2], [f64; 2])> {
        self.inner.landmarks.iter().map(|l| (l.target, l.source)).collect()
    }

    #[getter]
    fn gt_dvf(&self) -> Option<Dvf> {
        self.inner.gt_dvf.clone().map(|inner| Dvf { inner })
    }

    /// Mean landmark registration error of `dvf`.
    fn tre(&self, dvf: &Dvf) -> f64 {
        tre(&dvf.inner, &self.inner.landmarks).mean
    }

    /// Losses, TRE, folding and Dice of `dvf` on this pair.
    #[pyo3(signature = (dvf, guidance=true))]
    fn evaluate(&self, py: Python<'_>, dvf: &Dvf, guidance: bool) -> PyResult<Py<PyAny>> {
        let metrics = evaluate_solution(&self.inner, &dvf.inner, guidance).map_err(to_py)?;
        to_object(py, &metrics)
    }
}

/// The deterministic synthetic benchmark. The first `train` pairs form the
/// training split, the rest the evaluation split.
#[pyclass(module = "modir_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct Dataset {
    inner: CoreDataset,
}

#[pymethods]
impl Dataset {
    #[new]
    #[pyo3(signature = (seed=0, count=modir::synth::DEFAULT_PAIRS, train=modir::synth::DEFAULT_TRAIN_PAIRS, size=64))]
    fn new(seed: u64, count: usize, train: usize, size: usize) -> PyResult<Self> {
        let config = SynthConfig { seed, size, ..SynthConfig::default() };
        Ok(Dataset { inner: CoreDataset::new(config, count, train).map_err(to_py)? })
    }

    fn __len__(&self) -> usize {
        self.inner.count
    }

    fn pair(&self, index: usize) -> PyResult<Pair> {
        if index >= self.inner.count {
            return Err(PyIndexError::new_err(format!("pair {index} of {}", self.inner.count)));
        }
        Ok(Pair { inner: self.inner.pair(index).map_err(to_py)? })
    }

    #[getter]
    fn train_indices(&self) -> Vec<usize> {
        self.inner.train_indices().collect()
    }

    #[getter]
    fn eval_indices(&self) -> Vec<usize> {
        self.inner.eval_indices().collect()
    }
}

/// A trained multi-head registration model and its training trace.
#[pyclass(module = "modir_py", frozen)]
struct Model {
    params: ModelParams,
    trace: TrainTrace,
}

impl Model {
    fn grid_weights(&self) -> PyResult<Option<Vec<[f64; 3]>>> {
        match self.trace.mode {
            WeightMode::Fixed(_) => Ok(Some(train::enumerate_grid_weights().map_err(to_py)?)),
            WeightMode::Dynamic => Ok(None),
        }
    }
}

#[pymethods]
impl Model {
    /// Number of solutions (decoder heads).
    #[getter]
    fn p(&self) -> usize {
        self.params.heads.len()
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.params.parameter_count()
    }

    /// Evaluation records of the run as dictionaries.
    #[getter]
    fn trace(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_object(py, &self.trace)
    }

    /// One displacement field per head.
    fn predict(&self, pair: &Pair) -> PyResult<Vec<Dvf>> {
        let fields = predict(&self.params, &pair.inner).map_err(to_py)?;
        Ok(fields.into_iter().map(|inner| Dvf { inner }).collect())
    }

    /// Per-pair and averaged approximation sets on the evaluation split.
    fn report(&self, py: Python<'_>, dataset: &Dataset) -> PyResult<Py<PyAny>> {
        let config = &self.trace.config;
        let report = py
            .detach(|| {
                let (_, eval) = split(&dataset.inner)?;
                set_report(&self.params, &eval, &config.reference, config.guidance)
            })
            .map_err(to_py)?;
        to_object(py, &report)
    }

    /// Writes a run bundle and returns its manifest.
    #[pyo3(signature = (out, dataset, export_pairs=2))]
    fn save(&self, py: Python<'_>, out: PathBuf, dataset: &Dataset, export_pairs: usize) -> PyResult<Py<PyAny>> {
        let grid_weights = self.grid_weights()?;
        let kind = if grid_weights.is_some() { "train-grid" } else { "train-mo" };
        let run = RunArtifacts {
            kind,
            trace: &self.trace,
            params: &self.params,
            data: &dataset.inner,
            export_pairs,
            grid_weights,
        };
        let (manifest, _) = py.detach(|| write_run_bundle(&run, out)).map_err(to_py)?;
        to_object(py, &manifest)
    }
}

#[allow(clippy::too_many_arguments)]
fn train_config(
    p: usize,
    iterations: usize,
    lr: f64,
    reference: Option<Vec<f64>>,
    guidance: bool,
    share_encoder: bool,
    seed: u64,
    eval_every: usize,
) -> TrainConfig {
    let objectives = if guidance { 3 } else { 2 };
    TrainConfig {
        p,
        iterations,
        lr,
        reference: reference.unwrap_or_else(|| vec![1.0; objectives]),
        guidance,
        share_encoder,
        seed,
        eval_every,
        ..TrainConfig::default()
    }
}

/// Trains `p` heads with hypervolume-derived dynamic loss weights.
#[pyfunction]
#[pyo3(signature = (dataset, p=27, iterations=2000, lr=1e-4, reference=None, guidance=true, share_encoder=true, seed=0, eval_every=250))]
#[allow(clippy::too_many_arguments)]
fn train_mo(
    py: Python<'_>,
    dataset: &Dataset,
    p: usize,
    iterations: usize,
    lr: f64,
    reference: Option<Vec<f64>>,
    guidance: bool,
    share_encoder: bool,
    seed: u64,
    eval_every: usize,
) -> PyResult<Model> {
    let config = train_config(p, iterations, lr, reference, guidance, share_encoder, seed, eval_every);
    let trained = py.detach(|| train::train_mo(&config, &dataset.inner)).map_err(to_py)?;
    Ok(Model { params: trained.params, trace: trained.trace })
}

/// Trains one head per grid weight triple; `p` must equal the grid size.
#[pyfunction]
#[pyo3(signature = (dataset, p=27, iterations=2000, lr=1e-4, reference=None, guidance=true, share_encoder=true, seed=0, eval_every=250))]
#[allow(clippy::too_many_arguments)]
fn train_grid(
    py: Python<'_>,
    dataset: &Dataset,
    p: usize,
    iterations: usize,
    lr: f64,
    reference: Option<Vec<f64>>,
    guidance: bool,
    share_encoder: bool,
    seed: u64,
    eval_every: usize,
) -> PyResult<Model> {
    let config = train_config(p, iterations, lr, reference, guidance, share_encoder, seed, eval_every);
    let trained = py.detach(|| train::train_grid(&config, &dataset.inner)).map_err(to_py)?;
    Ok(Model { params: trained.params, trace: trained.trace })
}

/// A verified run bundle on disk.
#[pyclass(module = "modir_py", frozen)]
struct Bundle {
    inner: RunBundle,
}

#[pymethods]
impl Bundle {
    #[getter]
    fn manifest(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_object(py, &self.inner.manifest)
    }

    #[getter]
    fn kind(&self) -> String {
        self.inner.manifest.kind.clone()
    }

    /// Any JSON file listed in the manifest, checksum-verified.
    fn json(&self, py: Python<'_>, path: &str) -> PyResult<Py<PyAny>> {
        let value: serde_json::Value = self.inner.json(path).map_err(to_py)?;
        to_object(py, &value)
    }

    fn dvf(&self, path: &str) -> PyResult<Dvf> {
        Ok(Dvf { inner: self.inner.dvf(path).map_err(to_py)? })
    }

    fn dataset(&self) -> PyResult<Dataset> {
        Ok(Dataset { inner: self.inner.dataset().map_err(to_py)? })
    }

    fn model(&self) -> PyResult<Model> {
        Ok(Model {
            params: self.inner.params().map_err(to_py)?,
            trace: self.inner.trace().map_err(to_py)?,
        })
    }
}

/// Opens a bundle directory, verifying its schema version and checksums.
#[pyfunction]
fn read_bundle(path: PathBuf) -> PyResult<Bundle> {
    Ok(Bundle { inner: read_run_bundle(path).map_err(to_py)? })
}

#[pymodule]
fn modir_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    let py = m.py();
    m.add("ModirError", py.get_type::<ModirError>())?;
    m.add("IntegrityError", py.get_type::<IntegrityError>())?;
    m.add("VersionError", py.get_type::<VersionError>())?;
    m.add("NonFiniteError", py.get_type::<NonFiniteError>())?;
    m.add_class::<Dvf>()?;
    m.add_class::<Pair>()?;
    m.add_class::<Dataset>()?;
    m.add_class::<Model>()?;
    m.add_class::<Bundle>()?;
    m.add_function(wrap_pyfunction!(hypervolume, m)?)?;
    m.add_function(wrap_pyfunction!(hv_gradient, m)?)?;
    m.add_function(wrap_pyfunction!(dynamic_weights, m)?)?;
    m.add_function(wrap_pyfunction!(nondominated_sort, m)?)?;
    m.add_function(wrap_pyfunction!(genmed_eval, m)?)?;
    m.add_function(wrap_pyfunction!(front_distance, m)?)?;
    m.add_function(wrap_pyfunction!(enumerate_grid_weights, m)?)?;
    m.add_function(wrap_pyfunction!(train_genmed, m)?)?;
    m.add_function(wrap_pyfunction!(folding_percent, m)?)?;
    m.add_function(wrap_pyfunction!(train_mo, m)?)?;
    m.add_function(wrap_pyfunction!(train_grid, m)?)?;
    m.add_function(wrap_pyfunction!(read_bundle, m)?)?;
    Ok(())
}
