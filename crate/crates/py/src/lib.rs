use deblursplat::events::{bin_events, edi_decouple, simulate_events, Event, EventBins, EventStream};
use deblursplat::geometry::{se3_exp, se3_log, CameraIntrinsics, RigidTransform, Twist};
use deblursplat::io::{self, PlyFormat};
use deblursplat::metrics::{ate, AteAlignment, TimedPose};
use deblursplat::pipeline::{run_experiment, InitConfig};
use deblursplat::sampling::{confidence_balanced_sample, random_sample, ConfidencePointCloud, SamplingPlan};
use deblursplat::splat::{rasterize, Scene};
use deblursplat::synthetic::{generate_synthetic_dataset, load_dataset, SyntheticDatasetSpec};
use deblursplat::training::TrainConfig;
use nalgebra::{Matrix3, Vector3};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(e: deblursplat::Error) -> PyErr {
    match e {
        deblursplat::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for deblursplat::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(to_py)
    }
}

/// Rigid camera-to-world transform.
#[pyclass(name = "Pose", module = "deblursplat_py", from_py_object)]
#[derive(Clone, Copy)]
struct PyPose(RigidTransform);

#[pymethods]
impl PyPose {
    #[new]
    #[pyo3(signature = (rotation=None, translation=None))]
    fn new(rotation: Option<[[f64; 3]; 3]>, translation: Option<[f64; 3]>) -> Self {
        let r = rotation.map_or_else(Matrix3::identity, |m| Matrix3::from_fn(|i, j| m[i][j]));
        let t = translation.map_or_else(Vector3::zeros, Vector3::from);
        PyPose(RigidTransform::new(r, t))
    }

    /// `Exp` of the twist `(rho, phi)`.
    #[staticmethod]
    fn exp(rho: [f64; 3], phi: [f64; 3]) -> Self {
        PyPose(se3_exp(&Twist::new(Vector3::from(rho), Vector3::from(phi))))
    }

    /// Twist `(rho, phi)` with `Exp(rho, phi) == self`.
    fn log(&self) -> PyResult<([f64; 3], [f64; 3])> {
        let xi = se3_log(&self.0).py()?;
        Ok((xi.rho.into(), xi.phi.into()))
    }

    #[getter]
    fn rotation(&self) -> [[f64; 3]; 3] {
        std::array::from_fn(|i| std::array::from_fn(|j| self.0.rotation[(i, j)]))
    }

    #[getter]
    fn translation(&self) -> [f64; 3] {
        self.0.translation.into()
    }

    /// Unit quaternion `(w, x, y, z)`.
    fn quaternion(&self) -> (f64, f64, f64, f64) {
        let q = self.0.quaternion();
        (q.w, q.x, q.y, q.z)
    }

    fn inverse(&self) -> Self {
        PyPose(self.0.inverse())
    }

    fn transform_point(&self, p: [f64; 3]) -> [f64; 3] {
        self.0.transform_point(&Vector3::from(p)).into()
    }

    fn __mul__(&self, other: &PyPose) -> Self {
        PyPose(self.0.compose(&other.0))
    }

    fn __repr__(&self) -> String {
        format!("Pose(translation={:?}, quaternion={:?})", self.translation(), self.quaternion())
    }
}

/// Row-major float raster with 1 or 3 channels.
#[pyclass(name = "Image", module = "deblursplat_py", from_py_object)]
#[derive(Clone)]
struct PyImage(deblursplat::Image);

#[pymethods]
impl PyImage {
    #[new]
    fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> PyResult<Self> {
        deblursplat::Image::from_vec(width, height, channels, data).py().map(PyImage)
    }

    #[staticmethod]
    fn filled(width: usize, height: usize, channels: usize, value: f64) -> PyResult<Self> {
        deblursplat::Image::filled(width, height, channels, value).py().map(PyImage)
    }

    /// Reads a PFM or PNG file (PNG bytes map to [0, 1]).
    #[staticmethod]
    fn read(path: &str) -> PyResult<Self> {
        let img = if path.to_ascii_lowercase().ends_with(".png") { io::read_png(path) } else { io::read_pfm(path) };
        img.py().map(PyImage)
    }

    fn write_pfm(&self, path: &str) -> PyResult<()> {
        io::write_pfm(path, &self.0).py()
    }

    /// `(height, width, channels)`.
    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        (self.0.height(), self.0.width(), self.0.channels())
    }

    #[getter]
    fn data(&self) -> Vec<f64> {
        self.0.data().to_vec()
    }

    fn get(&self, x: usize, y: usize, c: usize) -> PyResult<f64> {
        if x >= self.0.width() || y >= self.0.height() || c >= self.0.channels() {
            return Err(PyValueError::new_err("pixel index out of range"));
        }
        Ok(self.0.get(x, y, c))
    }
}

/// Polarity events over one exposure.
#[pyclass(name = "EventStream", module = "deblursplat_py", from_py_object)]
#[derive(Clone)]
struct PyEventStream(EventStream);

#[pymethods]
impl PyEventStream {
    #[new]
    fn new(width: usize, height: usize, t_start: u64, t_end: u64, events: Vec<(u16, u16, u64, i8)>) -> PyResult<Self> {
        let events = events.into_iter().map(|(x, y, t_us, polarity)| Event { x, y, t_us, polarity }).collect();
        EventStream::new(width, height, t_start, t_end, events).py().map(PyEventStream)
    }

    /// Reads a binary `EVT1` file covering `[t_start, t_end]`.
    #[staticmethod]
    fn read(path: &str, t_start: u64, t_end: u64) -> PyResult<Self> {
        let f = io::read_events_bin(path).py()?;
        EventStream::new(f.width as usize, f.height as usize, t_start, t_end, f.events).py().map(PyEventStream)
    }

    fn write(&self, path: &str) -> PyResult<()> {
        io::write_events_bin(path, self.0.width as u16, self.0.height as u16, &self.0.events).py()
    }

    /// `(x, y, t_us, polarity)` tuples.
    #[getter]
    fn events(&self) -> Vec<(u16, u16, u64, i8)> {
        self.0.events.iter().map(|e| (e.x, e.y, e.t_us, e.polarity)).collect()
    }

    fn polarity_sum(&self) -> i64 {
        self.0.polarity_sum()
    }

    fn __len__(&self) -> usize {
        self.0.events.len()
    }

    /// Per-pixel polarity sums over `u` equal sub-intervals.
    fn bin(&self, u: usize) -> PyResult<PyEventBins> {
        bin_events(&self.0, u).py().map(PyEventBins)
    }
}

#[pyclass(name = "EventBins", module = "deblursplat_py", from_py_object)]
#[derive(Clone)]
struct PyEventBins(EventBins);

#[pymethods]
impl PyEventBins {
    #[getter]
    fn u(&self) -> usize {
        self.0.u()
    }

    /// Row-major polarity sums of bin `k` (0-based).
    fn bin(&self, k: usize) -> PyResult<Vec<i32>> {
        self.0.bins.get(k).cloned().ok_or_else(|| PyValueError::new_err("bin index out of range"))
    }

    fn total(&self) -> i64 {
        self.0.total()
    }
}

/// Points with per-point confidence and optional colors.
#[pyclass(name = "PointCloud", module = "deblursplat_py", from_py_object)]
#[derive(Clone)]
struct PyPointCloud(ConfidencePointCloud);

#[pymethods]
impl PyPointCloud {
    #[new]
    fn new(positions: Vec<[f64; 3]>, confidence: Vec<f64>) -> PyResult<Self> {
        ConfidencePointCloud::new(positions.into_iter().map(Vector3::from).collect(), None, confidence).py().map(PyPointCloud)
    }

    #[staticmethod]
    fn read(path: &str) -> PyResult<Self> {
        io::read_point_cloud_ply(path).py().map(PyPointCloud)
    }

    #[pyo3(signature = (path, ascii=false))]
    fn write(&self, path: &str, ascii: bool) -> PyResult<()> {
        let format = if ascii { PlyFormat::Ascii } else { PlyFormat::BinaryLittleEndian };
        io::write_point_cloud_ply(path, &self.0, format).py()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    #[getter]
    fn confidence(&self) -> Vec<f64> {
        self.0.confidence.clone()
    }

    #[getter]
    fn positions(&self) -> Vec<[f64; 3]> {
        self.0.positions.iter().map(|p| (*p).into()).collect()
    }

    /// Confidence-balanced sample of `target` indices over `intervals` confidence bands.
    #[pyo3(signature = (target, intervals=40, seed=0))]
    fn confidence_balanced_sample(&self, target: usize, intervals: usize, seed: u64) -> PyResult<Vec<usize>> {
        let plan = SamplingPlan::new(target, intervals, seed).py()?;
        confidence_balanced_sample(&self.0, &plan).py()
    }

    #[pyo3(signature = (target, seed=0))]
    fn random_sample(&self, target: usize, seed: u64) -> PyResult<Vec<usize>> {
        random_sample(&self.0, target, seed).py()
    }
}

/// Gaussian splat scene.
#[pyclass(name = "Scene", module = "deblursplat_py", from_py_object)]
#[derive(Clone)]
struct PyScene(Scene);

#[pymethods]
impl PyScene {
    #[staticmethod]
    fn read(path: &str) -> PyResult<Self> {
        io::read_scene_ply(path).py().map(PyScene)
    }

    #[pyo3(signature = (path, ascii=false))]
    fn write(&self, path: &str, ascii: bool) -> PyResult<()> {
        let format = if ascii { PlyFormat::Ascii } else { PlyFormat::BinaryLittleEndian };
        io::write_scene_ply(path, &self.0, format).py()
    }

    fn __len__(&self) -> usize {
        self.0.gaussians.len()
    }

    /// Renders the scene from `pose` through a pinhole with principal point at the image center.
    fn render(&self, pose: &PyPose, focal: f64, width: usize, height: usize) -> PyResult<PyImage> {
        let intr = CameraIntrinsics::new(focal, width, height).py()?;
        Ok(PyImage(rasterize(&self.0, &pose.0, &intr).py()?.color))
    }
}

/// Events from a frame sequence sampled at `timestamps` (microseconds).
#[pyfunction]
#[pyo3(signature = (frames, timestamps, theta, log_eps=deblursplat::events::DEFAULT_LOG_EPS))]
fn simulate(frames: Vec<PyImage>, timestamps: Vec<u64>, theta: f64, log_eps: f64) -> PyResult<PyEventStream> {
    let frames: Vec<_> = frames.into_iter().map(|f| f.0).collect();
    simulate_events(&frames, &timestamps, theta, log_eps).py().map(PyEventStream)
}

/// Latent frames `I_0..I_u` recovered from a blur and binned events.
#[pyfunction]
fn decouple(blur: &PyImage, bins: &PyEventBins, theta: f64) -> PyResult<Vec<PyImage>> {
    Ok(edi_decouple(&blur.0, &bins.0, theta).py()?.all_frames().into_iter().map(PyImage).collect())
}

#[pyfunction]
fn psnr(a: &PyImage, b: &PyImage) -> PyResult<f64> {
    deblursplat::metrics::psnr_capped(&a.0, &b.0, 1.0).py()
}

#[pyfunction]
fn ssim(a: &PyImage, b: &PyImage) -> PyResult<f64> {
    deblursplat::metrics::ssim(&a.0, &b.0, 1.0).py()
}

/// Translational RMSE between `(timestamp, Pose)` lists after `alignment`
/// ("similarity", "rigid" or "none").
#[pyfunction]
#[pyo3(signature = (estimate, reference, alignment="similarity"))]
fn trajectory_error(estimate: Vec<(f64, PyPose)>, reference: Vec<(f64, PyPose)>, alignment: &str) -> PyResult<f64> {
    let align = match alignment {
        "similarity" => AteAlignment::Similarity,
        "rigid" => AteAlignment::Rigid,
        "none" => AteAlignment::None,
        other => return Err(PyValueError::new_err(format!("unknown alignment {other:?}"))),
    };
    let conv = |v: Vec<(f64, PyPose)>| v.into_iter().map(|(timestamp, p)| TimedPose { timestamp, pose: p.0 }).collect::<Vec<_>>();
    ate(&conv(estimate), &conv(reference), align).py()
}

#[pyfunction]
fn read_trajectory(path: &str) -> PyResult<Vec<(f64, PyPose)>> {
    Ok(io::read_tum(path).py()?.into_iter().map(|p| (p.timestamp, PyPose(p.pose))).collect())
}

#[pyfunction]
fn write_trajectory(path: &str, poses: Vec<(f64, PyPose)>) -> PyResult<()> {
    let poses: Vec<TimedPose> = poses.into_iter().map(|(timestamp, p)| TimedPose { timestamp, pose: p.0 }).collect();
    io::write_tum(path, &poses).py()
}

/// Writes a synthetic dataset below `root`. `spec` uses the `key = value`
/// dataset format; omitted keys keep their defaults.
#[pyfunction]
#[pyo3(signature = (root, spec=""))]
fn generate_dataset(root: &str, spec: &str) -> PyResult<String> {
    let spec = SyntheticDatasetSpec::parse(spec).py()?;
    generate_synthetic_dataset(&spec, root).py()?;
    Ok(spec.to_text())
}

/// Seeds, trains and evaluates on a dataset directory. Returns the metrics
/// and writes nothing.
#[pyfunction]
#[pyo3(signature = (root, config="", points=500, seed=0))]
fn run(py: Python<'_>, root: &str, config: &str, points: usize, seed: u64) -> PyResult<Py<PyDict>> {
    let data = load_dataset(root).py()?;
    let cfg = TrainConfig::parse(config).py()?;
    let init = InitConfig { points, seed, ..Default::default() };
    let outcome = py.detach(|| run_experiment("python", &data, &init, &cfg)).py()?;
    let d = PyDict::new(py);
    d.set_item("psnr", outcome.report.psnr)?;
    d.set_item("ssim", outcome.report.ssim)?;
    d.set_item("ate", outcome.report.ate_rmse)?;
    d.set_item("initial_ate", outcome.initial_ate)?;
    d.set_item("seconds", outcome.seconds)?;
    d.set_item("loss", outcome.output.history.iter().map(|l| l.total).collect::<Vec<_>>())?;
    Ok(d.unbind())
}

#[pymodule]
fn deblursplat_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPose>()?;
    m.add_class::<PyImage>()?;
    m.add_class::<PyEventStream>()?;
    m.add_class::<PyEventBins>()?;
    m.add_class::<PyPointCloud>()?;
    m.add_class::<PyScene>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(decouple, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(trajectory_error, m)?)?;
    m.add_function(wrap_pyfunction!(read_trajectory, m)?)?;
    m.add_function(wrap_pyfunction!(write_trajectory, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    Ok(())
}
