//! Python bindings: scenes, targets, metrics, and the HistoNet-mini model.

use std::path::PathBuf;

use histonet::cellularity::{concordance as concordance_index, synth_score};
use histonet::metrics;
use histonet::scenegen::{self, read_dataset, write_dataset, Dataset, GenConfig, ImagePatch};
use histonet::targets::{build_count_map, build_histograms, BinWeights};
use histonet::train::{LrSchedule, TrainConfig};
use histonet::{check, Error, ModelConfig};
use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::Data { .. } => PyIOError::new_err(e.to_string()),
        Error::Numeric(_) => PyArithmeticError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn gen_config(preset: &str) -> PyResult<GenConfig> {
    match preset {
        "desk" => Ok(GenConfig::desk()),
        "table3" => Ok(GenConfig::table3(scenegen::PAPER_SIDE)),
        other => Err(PyValueError::new_err(format!("unknown preset '{other}', expected desk or table3"))),
    }
}

fn image_from_rows(rows: Vec<Vec<f64>>) -> PyResult<ImagePatch> {
    let height = rows.len();
    let width = rows.first().map_or(0, Vec::len);
    if height == 0 || rows.iter().any(|r| r.len() != width) {
        return Err(PyValueError::new_err("image must be a non-empty rectangular list of rows"));
    }
    Ok(ImagePatch { width, height, data: rows.into_iter().flatten().collect() })
}

fn image_rows(img: &ImagePatch) -> Vec<Vec<f64>> {
    img.data.chunks(img.width).map(<[f64]>::to_vec).collect()
}

/// Annotated synthetic scene.
#[pyclass(name = "Scene", module = "histonet_py", skip_from_py_object)]
#[derive(Clone)]
pub struct PyScene {
    inner: scenegen::Scene,
}

#[pymethods]
impl PyScene {
    #[getter]
    fn width(&self) -> usize {
        self.inner.width
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn count(&self) -> usize {
        self.inner.instances.len()
    }

    #[getter]
    fn areas(&self) -> Vec<u32> {
        self.inner.areas().collect()
    }

    /// Instances as `(cx, cy, a, b, theta, area_px)` tuples.
    #[getter]
    fn instances(&self) -> Vec<(f64, f64, f64, f64, f64, u32)> {
        self.inner.instances.iter().map(|i| (i.cx, i.cy, i.a, i.b, i.theta, i.area_px)).collect()
    }

    /// Grayscale rendering as a list of rows in `[0, 1]`.
    fn rasterize(&self) -> Vec<Vec<f64>> {
        image_rows(&scenegen::rasterize(&self.inner))
    }

    /// Redundant count map for receptive field `r`, as a list of rows.
    fn count_map(&self, r: usize) -> PyResult<Vec<Vec<f64>>> {
        let map = build_count_map(&self.inner, r).map_err(to_py)?;
        Ok(map.grid.chunks(map.cols).map(<[f64]>::to_vec).collect())
    }

    /// Size histogram with `bins` ∈ {2, 4, 8, 16} over `[0, s_max)`.
    fn histogram(&self, s_max: f64, bins: usize) -> PyResult<Vec<f64>> {
        let ladder = build_histograms(&self.inner, s_max).map_err(to_py)?;
        Ok(ladder.level(bins).map_err(to_py)?.to_vec())
    }

    /// Synthetic cellularity score against reference area `a_ref`.
    fn score(&self, a_ref: f64) -> PyResult<f64> {
        synth_score(&self.inner, a_ref).map_err(to_py)
    }

    fn to_json(&self) -> String {
        serde_json::to_string(&self.inner).expect("serializable scene")
    }

    fn __repr__(&self) -> String {
        format!("Scene({}x{}, {} instances, seed={})", self.inner.width, self.inner.height, self.count(), self.inner.seed)
    }
}

#[pyfunction]
#[pyo3(signature = (seed, preset = "desk"))]
fn sample_scene(seed: u64, preset: &str) -> PyResult<PyScene> {
    let inner = scenegen::sample_scene(&gen_config(preset)?, seed).map_err(to_py)?;
    Ok(PyScene { inner })
}

#[pyfunction]
#[pyo3(signature = (n, seed, preset = "desk"))]
fn sample_scenes(n: usize, seed: u64, preset: &str) -> PyResult<Vec<PyScene>> {
    let scenes = scenegen::sample_scenes(&gen_config(preset)?, seed, n).map_err(to_py)?;
    Ok(scenes.into_iter().map(|inner| PyScene { inner }).collect())
}

/// Writes a dataset directory of `n` scenes. `size`, `count`, and `area`
/// (as `(mean, std)`) override the preset.
#[pyfunction]
#[pyo3(signature = (path, n, seed, preset = "desk", size = None, count = None, area = None))]
fn generate_dataset(
    path: PathBuf,
    n: usize,
    seed: u64,
    preset: &str,
    size: Option<usize>,
    count: Option<(f64, f64)>,
    area: Option<(f64, f64)>,
) -> PyResult<usize> {
    let base = gen_config(preset)?;
    let cfg = GenConfig::with_moments(
        size.unwrap_or(base.width),
        count.unwrap_or((base.count.mean, base.count.std)),
        area.unwrap_or((base.area.mean, base.area.std)),
    );
    let data = Dataset::generate(&cfg, seed, n).map_err(to_py)?;
    write_dataset(&path, &cfg, &data.scenes, &data.images).map_err(to_py)?;
    Ok(data.len())
}

/// Default histogram range of a generator preset.
#[pyfunction]
#[pyo3(signature = (preset = "desk"))]
fn default_s_max(preset: &str) -> PyResult<f64> {
    Ok(gen_config(preset)?.default_s_max())
}

#[pyfunction]
fn count_from_map(grid: Vec<Vec<f64>>, r: usize) -> f64 {
    let flat: Vec<f64> = grid.into_iter().flatten().collect();
    histonet::targets::count_from_map(&flat, r)
}

#[pyfunction]
fn mae(pred: Vec<f64>, truth: Vec<f64>) -> PyResult<f64> {
    metrics::mae(&pred, &truth).map_err(to_py)
}

#[pyfunction]
fn kld(pred: Vec<f64>, target: Vec<f64>) -> PyResult<f64> {
    metrics::kld(&pred, &target).map_err(to_py)
}

#[pyfunction]
fn chi2(pred: Vec<f64>, target: Vec<f64>) -> PyResult<f64> {
    metrics::chi2(&pred, &target).map_err(to_py)
}

#[pyfunction]
fn isec(pred: Vec<f64>, target: Vec<f64>) -> PyResult<f64> {
    metrics::isec(&pred, &target).map_err(to_py)
}

#[pyfunction]
fn bhatt(pred: Vec<f64>, target: Vec<f64>) -> PyResult<f64> {
    metrics::bhatt(&pred, &target).map_err(to_py)
}

#[pyfunction]
fn corr(pred: Vec<f64>, target: Vec<f64>) -> PyResult<f64> {
    metrics::corr(&pred, &target).map_err(to_py)
}

#[pyfunction]
fn wt_l1(pred: Vec<f64>, target: Vec<f64>, weights: Vec<f64>) -> PyResult<f64> {
    metrics::wt_l1(&pred, &target, &BinWeights(weights)).map_err(to_py)
}

#[pyfunction]
fn spearman(x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
    metrics::spearman(&x, &y).map_err(to_py)
}

#[pyfunction]
fn concordance(pred: Vec<f64>, truth: Vec<f64>) -> PyResult<f64> {
    concordance_index(&pred, &truth).map_err(to_py)
}

/// HistoNet-mini network.
#[pyclass(name = "Model", module = "histonet_py", skip_from_py_object)]
#[derive(Clone)]
pub struct PyModel {
    inner: histonet::Model,
}

#[pymethods]
impl PyModel {
    /// Fresh model. `arch` is one of tiny (16 px), desk (64 px), paper (256 px).
    #[new]
    #[pyo3(signature = (arch = "desk", bins = 8, dsn = false, seed = 0, s_max = None))]
    fn new(arch: &str, bins: usize, dsn: bool, seed: u64, s_max: Option<f64>) -> PyResult<Self> {
        let mut cfg = match arch {
            "tiny" => ModelConfig::tiny(dsn),
            "desk" => ModelConfig::desk(bins, dsn),
            "paper" => ModelConfig::paper(bins, dsn),
            other => return Err(PyValueError::new_err(format!("unknown arch '{other}'"))),
        };
        cfg.bins = bins;
        if let Some(s) = s_max {
            cfg.s_max = s;
        }
        Ok(Self { inner: histonet::Model::build(cfg, seed).map_err(to_py)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: histonet::Model::load(&path).map_err(to_py)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py)
    }

    #[getter]
    fn bins(&self) -> usize {
        self.inner.config().bins
    }

    #[getter]
    fn input_side(&self) -> usize {
        self.inner.config().input_side
    }

    #[getter]
    fn s_max(&self) -> f64 {
        self.inner.config().s_max
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    /// Count and histogram for one image given as a list of rows. Returns a
    /// dict with `count`, `hist`, and for deep-supervised models `hist2`/`hist4`.
    fn predict(&self, py: Python<'_>, image: Vec<Vec<f64>>) -> PyResult<Py<PyAny>> {
        let out = self.inner.predict(&image_from_rows(image)?).map_err(to_py)?;
        let dict = pyo3::types::PyDict::new(py);
        dict.set_item("count", out.count)?;
        dict.set_item("hist", out.hist)?;
        if let Some(h) = out.hist2 {
            dict.set_item("hist2", h)?;
        }
        if let Some(h) = out.hist4 {
            dict.set_item("hist4", h)?;
        }
        Ok(dict.into_any().unbind())
    }

    /// Trains in place on a dataset directory; returns per-epoch total loss.
    #[pyo3(signature = (data_dir, epochs = 1, lr = 1e-3, batch = 4, seed = 0, augment = true, cosine = false))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        &mut self,
        data_dir: PathBuf,
        epochs: usize,
        lr: f64,
        batch: usize,
        seed: u64,
        augment: bool,
        cosine: bool,
    ) -> PyResult<Vec<f64>> {
        let data = read_dataset(&data_dir).map_err(to_py)?;
        let mut cfg = TrainConfig::new(self.inner.config().s_max, seed);
        cfg.epochs = epochs;
        cfg.lr = lr;
        cfg.batch_size = batch;
        cfg.augment = augment;
        cfg.schedule = if cosine { LrSchedule::Cosine } else { LrSchedule::Constant };
        let (model, logs) = histonet::train::train(self.inner.clone(), &data, cfg, None).map_err(to_py)?;
        self.inner = model;
        Ok(logs.iter().map(|l| l.train.l_total).collect())
    }

    fn __repr__(&self) -> String {
        let c = self.inner.config();
        format!("Model({}px, {} bins, dsn={}, {} parameters)", c.input_side, c.bins, c.dsn, self.inner.param_count())
    }
}

/// Runs the finite-difference suite; returns `(name, max_rel_error, passed)`.
#[pyfunction]
#[pyo3(signature = (seed = 0))]
fn gradcheck(seed: u64) -> PyResult<Vec<(String, f64, bool)>> {
    let results = check::full_suite(seed).map_err(to_py)?;
    Ok(results.iter().map(|r| (r.name.clone(), r.max_rel_error, r.passed())).collect())
}

#[pymodule]
fn histonet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyScene>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(sample_scene, m)?)?;
    m.add_function(wrap_pyfunction!(sample_scenes, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(default_s_max, m)?)?;
    m.add_function(wrap_pyfunction!(count_from_map, m)?)?;
    m.add_function(wrap_pyfunction!(mae, m)?)?;
    m.add_function(wrap_pyfunction!(kld, m)?)?;
    m.add_function(wrap_pyfunction!(chi2, m)?)?;
    m.add_function(wrap_pyfunction!(isec, m)?)?;
    m.add_function(wrap_pyfunction!(bhatt, m)?)?;
    m.add_function(wrap_pyfunction!(corr, m)?)?;
    m.add_function(wrap_pyfunction!(wt_l1, m)?)?;
    m.add_function(wrap_pyfunction!(spearman, m)?)?;
    m.add_function(wrap_pyfunction!(concordance, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
