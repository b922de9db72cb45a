//! Python bindings: meshes, metrics, the simulator, partial observations,
//! dataset generation, trained models and the planner tasks.
//!
//! Points cross the boundary as lists of `(x, y, z)` tuples and configs as
//! JSON strings with the same schema as the CLI.

use std::path::PathBuf;

use clothdiff_core::clothsim::{make_grid_cloth, ActionStep, ClothState, SimParams, Simulator};
use clothdiff_core::diffusion::{NoiseSchedule, ScheduleConfig};
use clothdiff_core::geometry::{self, parse_obj, write_obj, PointCloud, Vec3};
use clothdiff_core::io::{load_ddm, load_dpm};
use clothdiff_core::observation::AugmentParams;
use clothdiff_core::pipeline::{self, GenDataConfig, GradScope, RenderConfig};
use clothdiff_core::planner::{self, EpisodeConfig, PlannerConfig, SimDynamics, StateSource};
use clothdiff_core::Error;
use pyo3::exceptions::{PyArithmeticError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn py_err(e: Error) -> PyErr {
    if e.is_numerical() {
        PyArithmeticError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn config<T: serde::de::DeserializeOwned + Default>(json: Option<&str>) -> PyResult<T> {
    json.map_or_else(
        || Ok(T::default()),
        |s| serde_json::from_str(s).map_err(json_err),
    )
}

/// Triangle mesh with the template's connectivity.
#[pyclass(name = "ClothMesh", module = "clothdiff", frozen, from_py_object)]
#[derive(Clone)]
pub struct PyClothMesh {
    inner: geometry::ClothMesh,
}

#[pymethods]
impl PyClothMesh {
    /// Flat `rows x cols` grid at `height`.
    #[staticmethod]
    #[pyo3(signature = (rows = 8, cols = 8, spacing = 0.05, height = 0.0))]
    fn grid(rows: usize, cols: usize, spacing: f64, height: f64) -> PyResult<Self> {
        Ok(Self {
            inner: make_grid_cloth(rows, cols, spacing, height).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn from_obj(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: parse_obj(text).map_err(py_err)?,
        })
    }

    fn to_obj(&self) -> String {
        write_obj(&self.inner)
    }

    #[getter]
    fn vertices(&self) -> Vec<Vec3> {
        self.inner.vertices().to_vec()
    }

    #[getter]
    fn faces(&self) -> Vec<[usize; 3]> {
        self.inner.faces().to_vec()
    }

    #[getter]
    fn n_vertices(&self) -> usize {
        self.inner.n_vertices()
    }

    /// Same connectivity, new positions.
    fn with_vertices(&self, vertices: Vec<Vec3>) -> PyResult<Self> {
        Ok(Self {
            inner: self.inner.with_vertices(vertices).map_err(py_err)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.n_vertices()
    }

    fn __repr__(&self) -> String {
        format!(
            "ClothMesh(n_vertices={}, n_faces={})",
            self.inner.n_vertices(),
            self.inner.faces().len()
        )
    }
}

#[pyfunction]
fn chamfer(a: Vec<Vec3>, b: Vec<Vec3>) -> PyResult<f64> {
    geometry::chamfer(&a, &b).map_err(py_err)
}

#[pyfunction]
fn emd(a: Vec<Vec3>, b: Vec<Vec3>) -> PyResult<f64> {
    geometry::emd(&a, &b).map_err(py_err)
}

#[pyfunction]
fn mse(a: &PyClothMesh, b: &PyClothMesh) -> PyResult<f64> {
    geometry::mse(&a.inner, &b.inner).map_err(py_err)
}

/// Mass-spring cloth simulator.
#[pyclass(name = "Simulator", module = "clothdiff", frozen)]
pub struct PySimulator {
    inner: Simulator,
}

#[pymethods]
impl PySimulator {
    /// `params` is a JSON object of simulator parameters; defaults otherwise.
    #[new]
    #[pyo3(signature = (mesh, params = None))]
    fn new(mesh: &PyClothMesh, params: Option<&str>) -> PyResult<Self> {
        let p: SimParams = config(params)?;
        Ok(Self {
            inner: Simulator::new(&mesh.inner, p).map_err(py_err)?,
        })
    }

    /// Applies `(grasp_index, (dx, dy, dz))` steps from rest and returns the
    /// mesh after each step.
    fn rollout(
        &self,
        mesh: &PyClothMesh,
        actions: Vec<(usize, Vec3)>,
    ) -> PyResult<Vec<PyClothMesh>> {
        let steps: Vec<ActionStep> = actions
            .into_iter()
            .map(|(grasp_index, delta)| ActionStep { grasp_index, delta })
            .collect();
        let states = self
            .inner
            .rollout(&ClothState::at_rest(mesh.inner.clone()), &steps)
            .map_err(py_err)?;
        Ok(states
            .into_iter()
            .map(|s| PyClothMesh { inner: s.mesh })
            .collect())
    }
}

/// Partial point cloud seen by random cameras around the mesh.
#[pyfunction]
#[pyo3(signature = (mesh, seed = 0, n_cameras = 4, n_points = 384))]
fn observe(
    mesh: &PyClothMesh,
    seed: u64,
    n_cameras: usize,
    n_points: usize,
) -> PyResult<Vec<Vec3>> {
    let render = RenderConfig {
        n_cameras,
        cloud_points: n_points,
        ..RenderConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cloud = pipeline::observe(&mesh.inner, &render, &AugmentParams::none(), &mut rng)
        .map_err(py_err)?;
    Ok(cloud.points().to_vec())
}

/// Writes a dataset and returns its manifest as JSON.
#[pyfunction]
#[pyo3(signature = (out_dir, config = None))]
fn gen_data(out_dir: PathBuf, config: Option<&str>) -> PyResult<String> {
    let cfg: GenDataConfig = self::config(config)?;
    let m = pipeline::gen_data(&cfg, &out_dir).map_err(py_err)?;
    serde_json::to_string(&m).map_err(json_err)
}

/// Linear-β diffusion schedule.
#[pyclass(name = "NoiseSchedule", module = "clothdiff", frozen)]
pub struct PyNoiseSchedule {
    inner: NoiseSchedule,
}

#[pymethods]
impl PyNoiseSchedule {
    #[new]
    #[pyo3(signature = (steps = 100, beta_start = 1e-3, beta_end = 0.2))]
    fn new(steps: usize, beta_start: f64, beta_end: f64) -> PyResult<Self> {
        let inner = NoiseSchedule::try_from(ScheduleConfig {
            steps,
            beta_start,
            beta_end,
        })
        .map_err(py_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn steps(&self) -> usize {
        self.inner.steps()
    }

    fn beta(&self, k: usize) -> PyResult<f64> {
        self.check(k)?;
        Ok(self.inner.beta(k))
    }

    fn alpha_bar(&self, k: usize) -> PyResult<f64> {
        self.check(k)?;
        Ok(self.inner.alpha_bar(k))
    }
}

impl PyNoiseSchedule {
    fn check(&self, k: usize) -> PyResult<()> {
        if k == 0 || k > self.inner.steps() {
            return Err(PyValueError::new_err(format!(
                "step {k} outside 1..={}",
                self.inner.steps()
            )));
        }
        Ok(())
    }
}

/// Trained perception model loaded from a checkpoint directory.
#[pyclass(name = "DpmModel", module = "clothdiff", frozen)]
pub struct PyDpmModel {
    inner: clothdiff_core::perception::DpmModel,
}

#[pymethods]
impl PyDpmModel {
    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: load_dpm(&dir).map_err(py_err)?.0,
        })
    }

    #[getter]
    fn canonical(&self) -> PyClothMesh {
        PyClothMesh {
            inner: self.inner.canonical.clone(),
        }
    }

    /// Full mesh estimate from a partial cloud.
    #[pyo3(signature = (cloud, seed = 0, n_samples = 1))]
    fn estimate(&self, cloud: Vec<Vec3>, seed: u64, n_samples: usize) -> PyResult<PyClothMesh> {
        let cloud = PointCloud::new(cloud).map_err(py_err)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mesh = self
            .inner
            .estimate(&self.inner.canonical, &cloud, &mut rng, n_samples.max(1))
            .map_err(py_err)?;
        Ok(PyClothMesh { inner: mesh })
    }
}

/// Trained dynamics model loaded from a checkpoint directory.
#[pyclass(name = "DdmModel", module = "clothdiff", frozen)]
pub struct PyDdmModel {
    inner: clothdiff_core::dynamics::DdmModel,
}

#[pymethods]
impl PyDdmModel {
    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: load_ddm(&dir).map_err(py_err)?.0,
        })
    }

    #[getter]
    fn history_len(&self) -> usize {
        self.inner.history_len()
    }

    #[getter]
    fn future_len(&self) -> usize {
        self.inner.future_len()
    }

    /// One mesh per `(grasp_index, delta)` step, predicted autoregressively.
    #[pyo3(signature = (history, actions, seed = 0))]
    fn rollout(
        &self,
        history: Vec<PyClothMesh>,
        actions: Vec<(usize, Vec3)>,
        seed: u64,
    ) -> PyResult<Vec<PyClothMesh>> {
        let hist: Vec<_> = history.into_iter().map(|m| m.inner).collect();
        let steps: Vec<ActionStep> = actions
            .into_iter()
            .map(|(grasp_index, delta)| ActionStep { grasp_index, delta })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = self
            .inner
            .rollout(&hist, &steps, &mut rng)
            .map_err(py_err)?;
        Ok(out.into_iter().map(|inner| PyClothMesh { inner }).collect())
    }
}

/// Point-mass planner check; returns the final distance to `goal`.
#[pyfunction]
#[pyo3(signature = (goal = (0.3, 0.0, 0.0), chunks = 6, seed = 0))]
fn point_mass(goal: (f64, f64, f64), chunks: usize, seed: u64) -> PyResult<f64> {
    let run = planner::point_mass_mpc(
        &planner::point_mass_config(),
        [goal.0, goal.1, goal.2],
        chunks,
        &mut ChaCha8Rng::seed_from_u64(seed),
    )
    .map_err(py_err)?;
    Ok(run.distance)
}

/// Diagonal fold with simulator dynamics and the true state. Returns the EMD
/// to the target before the first MPC step and after each one.
#[pyfunction]
#[pyo3(signature = (rows = 8, cols = 8, max_steps = 20, seed = 0, planner = None))]
fn fold_episode(
    rows: usize,
    cols: usize,
    max_steps: usize,
    seed: u64,
    planner: Option<&str>,
) -> PyResult<Vec<f64>> {
    let cfg: PlannerConfig = config(planner)?;
    let canonical = make_grid_cloth(rows, cols, 0.05, 0.0).map_err(py_err)?;
    let sim = Simulator::new(&canonical, SimParams::default()).map_err(py_err)?;
    let (init, target) = planner::diagonal_fold_task(&sim, &canonical).map_err(py_err)?;
    let ecfg = EpisodeConfig {
        max_steps,
        ..EpisodeConfig::default()
    };
    let mut dynamics = SimDynamics {
        sim: &sim,
        settle_steps: ecfg.settle_steps,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ep = planner::mpc_episode(
        &sim,
        &mut dynamics,
        &StateSource::Oracle,
        &init,
        &target,
        &cfg,
        &ecfg,
        &mut rng,
    )
    .map_err(py_err)?;
    Ok(ep.emd)
}

/// `(name, max_relative_error, passed)` for every checked case.
#[pyfunction]
#[pyo3(signature = (scope = "ops"))]
fn gradcheck(scope: &str) -> PyResult<Vec<(String, f64, bool)>> {
    let scope = match scope {
        "ops" => GradScope::Ops,
        "dpm" => GradScope::Dpm,
        "ddm" => GradScope::Ddm,
        "all" => GradScope::All,
        s => return Err(PyValueError::new_err(format!("unknown scope {s:?}"))),
    };
    let r = pipeline::run_gradcheck(scope, 0).map_err(py_err)?;
    Ok(r.into_iter()
        .map(|c| (c.name, c.max_rel_error, c.passed))
        .collect())
}

#[pymodule]
fn clothdiff(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyClothMesh>()?;
    m.add_class::<PySimulator>()?;
    m.add_class::<PyNoiseSchedule>()?;
    m.add_class::<PyDpmModel>()?;
    m.add_class::<PyDdmModel>()?;
    m.add_function(wrap_pyfunction!(chamfer, m)?)?;
    m.add_function(wrap_pyfunction!(emd, m)?)?;
    m.add_function(wrap_pyfunction!(mse, m)?)?;
    m.add_function(wrap_pyfunction!(observe, m)?)?;
    m.add_function(wrap_pyfunction!(gen_data, m)?)?;
    m.add_function(wrap_pyfunction!(point_mass, m)?)?;
    m.add_function(wrap_pyfunction!(fold_episode, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
