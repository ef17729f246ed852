//! Python module `promptdet_py`.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use promptdet::config::Config;
use promptdet::detector::Detection;
use promptdet::evalkit;
use promptdet::model::{Mode, PromptDetModel};
use promptdet::scene::{Box3D, Scene, WorldSpec};
use promptdet::voxelizer::GridSpec;
use promptdet::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Mode(_) | Error::NotEmpty(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn box_dict<'py>(py: Python<'py>, b: &Box3D) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("center", b.center.to_vec())?;
    d.set_item("size", b.size.to_vec())?;
    d.set_item("yaw", b.yaw)?;
    d.set_item("class_id", b.class_id)?;
    Ok(d)
}

#[pyclass(name = "Scene", module = "promptdet_py")]
struct PyScene {
    inner: Scene,
}

#[pymethods]
impl PyScene {
    #[getter]
    fn scene_id(&self) -> u64 {
        self.inner.scene_id
    }

    #[getter]
    fn n_points(&self) -> usize {
        self.inner.points.len()
    }

    #[getter]
    fn n_views(&self) -> usize {
        self.inner.views.len()
    }

    /// Ground-truth boxes as dicts.
    fn boxes<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        self.inner.boxes.iter().map(|b| box_dict(py, b)).collect()
    }

    /// `(x, y, z, intensity)` rows.
    fn points(&self) -> Vec<[f32; 4]> {
        self.inner.points.clone()
    }

    /// Copy of the scene with every point moved by `(dx, dy, dz)`.
    fn with_shifted_points(&self, dx: f32, dy: f32, dz: f32) -> PyScene {
        let mut inner = self.inner.clone();
        for p in &mut inner.points {
            p[0] += dx;
            p[1] += dy;
            p[2] += dz;
        }
        PyScene { inner }
    }

    fn __repr__(&self) -> String {
        format!("Scene(id={}, boxes={}, points={}, views={})", self.inner.scene_id, self.inner.boxes.len(), self.inner.points.len(), self.inner.views.len())
    }
}

/// Scene of the default world from a seed.
#[pyfunction]
fn generate_scene(seed: u64) -> PyResult<PyScene> {
    let inner = promptdet::scene::generate_scene(&WorldSpec::default(), seed).map_err(py_err)?;
    Ok(PyScene { inner })
}

#[pyfunction]
fn load_scene(dir: PathBuf) -> PyResult<PyScene> {
    Ok(PyScene { inner: promptdet::dataset::load_scene(&dir).map_err(py_err)? })
}

#[pyclass(name = "Model", module = "promptdet_py")]
struct PyModel {
    inner: PromptDetModel,
}

fn detections<'py>(py: Python<'py>, dets: &[Detection]) -> PyResult<Vec<Bound<'py, PyDict>>> {
    dets.iter()
        .map(|d| {
            let dict = box_dict(py, &d.bbox)?;
            dict.set_item("score", d.score)?;
            Ok(dict)
        })
        .collect()
}

#[pymethods]
impl PyModel {
    /// Freshly initialized model on the default world and grid.
    #[new]
    #[pyo3(signature = (mode = "promptdet", seed = 0))]
    fn new(mode: &str, seed: u64) -> PyResult<Self> {
        let mode = Mode::parse(mode).map_err(py_err)?;
        let world = WorldSpec::default();
        let grid = GridSpec::from_world(&world, [1.0; 3], 8).map_err(py_err)?;
        Ok(Self { inner: PromptDetModel::new(mode, grid, world.n_classes(), seed) })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: promptdet::checkpoint::load(&path).map_err(py_err)?.model })
    }

    #[getter]
    fn mode(&self) -> &'static str {
        self.inner.mode.name()
    }

    fn param_report<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let r = evalkit::param_report(&self.inner);
        let d = PyDict::new(py);
        d.set_item("base_count", r.base_count)?;
        d.set_item("prompter_count", r.prompter_count)?;
        d.set_item("total", r.total)?;
        d.set_item("ratio", r.ratio)?;
        Ok(d)
    }

    #[pyo3(signature = (scene, use_lidar = false, score_thresh = 0.05, max_dets = 50))]
    fn predict<'py>(&self, py: Python<'py>, scene: &PyScene, use_lidar: bool, score_thresh: f64, max_dets: usize) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let dets = self.inner.predict(&scene.inner, use_lidar, score_thresh, max_dets).map_err(py_err)?;
        detections(py, &dets)
    }

    /// Weighted loss components of one training forward pass (no update).
    fn losses<'py>(&self, py: Python<'py>, scene: &PyScene) -> PyResult<Bound<'py, PyDict>> {
        let graph = promptdet::Graph::new();
        let p = promptdet::nn::Binding::new(&graph, &self.inner.store);
        let out = self.inner.forward_train(&p, &scene.inner, &Default::default()).map_err(py_err)?;
        let d = PyDict::new(py);
        let c = out.components;
        for (name, v) in promptdet::model::LossComponents::NAMES.iter().zip(c.as_array()) {
            d.set_item(*name, v)?;
        }
        d.set_item("total", out.loss.item())?;
        Ok(d)
    }
}

/// Writes a dataset; returns the manifest path.
#[pyfunction]
#[pyo3(signature = (config_path, out_dir, seed = None, force = false))]
fn synth(config_path: PathBuf, out_dir: PathBuf, seed: Option<u64>, force: bool) -> PyResult<String> {
    let config = Config::load(&config_path).map_err(py_err)?;
    promptdet::dataset::build_dataset(&config.world, config.dataset.n_scenes, seed.unwrap_or(config.seed), &out_dir, force).map_err(py_err)?;
    Ok(out_dir.join(promptdet::dataset::MANIFEST_FILE).display().to_string())
}

/// Trains per the config; returns `(checkpoint_path, per-epoch total losses)`.
#[pyfunction]
fn train(config_path: PathBuf, data_dir: PathBuf, out_dir: PathBuf) -> PyResult<(String, Vec<f64>)> {
    let config = Config::load(&config_path).map_err(py_err)?;
    let tc = config.train_config().map_err(py_err)?;
    let out = promptdet::trainer::fit(&tc, &data_dir, &out_dir).map_err(py_err)?;
    let path = out.checkpoint.map(|p| p.display().to_string()).unwrap_or_default();
    Ok((path, out.history.iter().map(|r| r.total).collect()))
}

/// Center-distance mAP of `(x, y, class_id, score)` predictions against
/// `(x, y, class_id)` ground truth, one list per scene.
#[pyfunction]
#[pyo3(signature = (preds, gts, thresholds = vec![0.25, 0.5, 1.0, 2.0], n_classes = 3))]
fn match_and_ap(preds: Vec<Vec<(f64, f64, usize, f64)>>, gts: Vec<Vec<(f64, f64, usize)>>, thresholds: Vec<f64>, n_classes: usize) -> PyResult<f64> {
    if preds.len() != gts.len() {
        return Err(PyValueError::new_err("preds and gts need one list per scene"));
    }
    if thresholds.windows(2).any(|w| w[0] >= w[1]) {
        return Err(PyValueError::new_err("thresholds must ascend"));
    }
    let bx = |x: f64, y: f64, class_id: usize| Box3D { center: [x, y, 0.0], size: [1.0; 3], yaw: 0.0, class_id };
    let preds: Vec<Vec<Detection>> =
        preds.iter().map(|s| s.iter().map(|&(x, y, c, score)| Detection { bbox: bx(x, y, c), score }).collect()).collect();
    let gts: Vec<Vec<Box3D>> = gts.iter().map(|s| s.iter().map(|&(x, y, c)| bx(x, y, c)).collect()).collect();
    let names: Vec<String> = (0..n_classes).map(|i| format!("class{i}")).collect();
    Ok(evalkit::match_and_ap(&preds, &gts, &thresholds, &names).map)
}

#[pymodule]
fn promptdet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyScene>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate_scene, m)?)?;
    m.add_function(wrap_pyfunction!(load_scene, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(match_and_ap, m)?)?;
    Ok(())
}
