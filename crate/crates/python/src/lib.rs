//! Python bindings: boxes and IoU/NMS, BEV rasterization, synthetic scenes,
//! RANSAC ground fitting, detector inference and AP evaluation.

use std::path::PathBuf;

use hdnetbev::bevgrid::{self, PointCloud};
use hdnetbev::detector::Detector as CoreDetector;
use hdnetbev::evalkit::{self, FrameEval};
use hdnetbev::geom;
use hdnetbev::mapdata::{self, rasterize_road_mask, GroundQuery, HdMap};
use hdnetbev::synthworld::{generate_scene, LidarSpec, SceneSpec};
use hdnetbev::Error;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::ShapeMismatch(_) | Error::DegenerateInput(_) => PyValueError::new_err(e.to_string()),
        Error::Io { .. } | Error::Parse { .. } | Error::Version { .. } | Error::Weights(_) => {
            PyIOError::new_err(e.to_string())
        }
        e => PyRuntimeError::new_err(e.to_string()),
    }
}

/// Rotated BEV box: center, length along the heading, width, heading.
#[pyclass(name = "OrientedBox", from_py_object)]
#[derive(Clone)]
struct PyBox {
    inner: geom::OrientedBox,
}

#[pymethods]
impl PyBox {
    #[new]
    #[pyo3(signature = (cx, cy, l, w, theta, score=None))]
    fn new(cx: f64, cy: f64, l: f64, w: f64, theta: f64, score: Option<f64>) -> PyResult<Self> {
        if !([cx, cy, l, w, theta].iter().all(|v| v.is_finite()) && l > 0.0 && w > 0.0) {
            return Err(PyValueError::new_err(format!("box needs finite values and positive l, w, got l={l} w={w}")));
        }
        let b = geom::OrientedBox::new(cx, cy, l, w, theta);
        Ok(PyBox {
            inner: score.map_or(b, |s| b.with_score(s)),
        })
    }

    #[getter]
    fn cx(&self) -> f64 {
        self.inner.cx
    }
    #[getter]
    fn cy(&self) -> f64 {
        self.inner.cy
    }
    #[getter]
    fn l(&self) -> f64 {
        self.inner.l
    }
    #[getter]
    fn w(&self) -> f64 {
        self.inner.w
    }
    #[getter]
    fn theta(&self) -> f64 {
        self.inner.theta
    }
    #[getter]
    fn score(&self) -> Option<f64> {
        self.inner.score
    }

    fn area(&self) -> f64 {
        self.inner.area()
    }

    fn corners(&self) -> Vec<(f64, f64)> {
        self.inner.corners().to_vec()
    }

    fn iou(&self, other: &PyBox) -> f64 {
        geom::rotated_iou(&self.inner, &other.inner)
    }

    fn __repr__(&self) -> String {
        let b = &self.inner;
        format!(
            "OrientedBox(cx={:.3}, cy={:.3}, l={:.3}, w={:.3}, theta={:.4}, score={:?})",
            b.cx, b.cy, b.l, b.w, b.theta, b.score
        )
    }
}

fn unwrap_boxes(boxes: &[PyBox]) -> Vec<geom::OrientedBox> {
    boxes.iter().map(|b| b.inner).collect()
}

fn wrap_boxes(boxes: Vec<geom::OrientedBox>) -> Vec<PyBox> {
    boxes.into_iter().map(|inner| PyBox { inner }).collect()
}

#[pyfunction]
fn rotated_iou(a: &PyBox, b: &PyBox) -> f64 {
    geom::rotated_iou(&a.inner, &b.inner)
}

/// Greedy NMS by descending score.
#[pyfunction]
#[pyo3(signature = (boxes, iou_thresh=0.1))]
fn nms(boxes: Vec<PyBox>, iou_thresh: f64) -> Vec<PyBox> {
    wrap_boxes(geom::nms(&unwrap_boxes(&boxes), iou_thresh))
}

#[pyclass(name = "BevConfig", from_py_object)]
#[derive(Clone)]
struct PyBevConfig {
    inner: bevgrid::BevConfig,
}

#[pymethods]
impl PyBevConfig {
    #[new]
    fn new(x_range: (f64, f64), y_range: (f64, f64), z_range: (f64, f64), d_l: f64, d_w: f64, d_h: f64) -> PyResult<Self> {
        let inner = bevgrid::BevConfig::new(x_range, y_range, z_range, d_l, d_w, d_h).map_err(to_py)?;
        Ok(PyBevConfig { inner })
    }

    #[staticmethod]
    fn kitti() -> Self {
        PyBevConfig {
            inner: bevgrid::BevConfig::kitti(),
        }
    }

    #[staticmethod]
    fn tor4d() -> Self {
        PyBevConfig {
            inner: bevgrid::BevConfig::tor4d(),
        }
    }

    /// (channels, rows, cols); rows run along x.
    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        (self.inner.channels(), self.inner.rows(), self.inner.cols())
    }

    fn __repr__(&self) -> String {
        let c = &self.inner;
        format!(
            "BevConfig(x={:?}, y={:?}, z={:?}, d=({}, {}, {}))",
            c.x_range, c.y_range, c.z_range, c.d_l, c.d_w, c.d_h
        )
    }
}

fn cloud_from(points: Vec<(f32, f32, f32)>, intensity: Vec<f32>) -> PyResult<PointCloud> {
    if points.len() != intensity.len() {
        return Err(PyValueError::new_err(format!(
            "{} points but {} intensities",
            points.len(),
            intensity.len()
        )));
    }
    Ok(PointCloud::new(points.into_iter().map(|(x, y, z)| [x, y, z]).collect(), intensity))
}

fn f32_bytes<'py>(py: Python<'py>, data: &[f32]) -> Bound<'py, PyBytes> {
    let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
    PyBytes::new(py, &bytes)
}

/// Plane z = a x + b y + c.
#[pyclass(name = "GroundPlane", from_py_object)]
#[derive(Clone)]
struct PyGroundPlane {
    #[pyo3(get)]
    a: f64,
    #[pyo3(get)]
    b: f64,
    #[pyo3(get)]
    c: f64,
}

#[pymethods]
impl PyGroundPlane {
    #[new]
    fn new(a: f64, b: f64, c: f64) -> Self {
        PyGroundPlane { a, b, c }
    }

    fn height(&self, x: f64, y: f64) -> f64 {
        self.core().ground_height(x, y)
    }

    fn __repr__(&self) -> String {
        format!("GroundPlane(a={}, b={}, c={})", self.a, self.b, self.c)
    }
}

impl PyGroundPlane {
    fn core(&self) -> mapdata::GroundPlane {
        mapdata::GroundPlane {
            a: self.a,
            b: self.b,
            c: self.c,
        }
    }
}

/// BEV tensor as `(shape, little-endian float32 bytes)`, e.g. for
/// `numpy.frombuffer(data, "<f4").reshape(shape)`. With a ground plane,
/// heights are taken relative to it.
#[pyfunction]
#[pyo3(signature = (points, intensity, bev, ground=None))]
fn rasterize<'py>(
    py: Python<'py>,
    points: Vec<(f32, f32, f32)>,
    intensity: Vec<f32>,
    bev: &PyBevConfig,
    ground: Option<&PyGroundPlane>,
) -> PyResult<((usize, usize, usize), Bound<'py, PyBytes>)> {
    let cloud = cloud_from(points, intensity)?;
    let plane = ground.map(PyGroundPlane::core);
    let t = bevgrid::rasterize_parallel(&cloud, &bev.inner, plane.as_ref().map(|p| p as &dyn GroundQuery));
    Ok(((t.channels, t.height, t.width), f32_bytes(py, &t.data)))
}

#[pyfunction]
#[pyo3(signature = (points, intensity, iterations=200, inlier_thresh=0.15, seed=0))]
fn fit_ground_plane(
    points: Vec<(f32, f32, f32)>,
    intensity: Vec<f32>,
    iterations: usize,
    inlier_thresh: f64,
    seed: u64,
) -> PyResult<PyGroundPlane> {
    let cloud = cloud_from(points, intensity)?;
    let p = mapdata::fit_ground_plane(&cloud, iterations, inlier_thresh, seed).map_err(to_py)?;
    Ok(PyGroundPlane { a: p.a, b: p.b, c: p.c })
}

/// A synthetic sweep: dict with `points`, `intensity`, `labels` and the
/// `map_json` of its HD map. The ground tilts by `slope_deg` along +x.
#[pyfunction]
#[pyo3(signature = (seed, slope_deg=0.0, n_vehicles=6))]
fn synth_scene<'py>(py: Python<'py>, seed: u64, slope_deg: f64, n_vehicles: usize) -> PyResult<Bound<'py, PyDict>> {
    let spec = SceneSpec::new(seed, slope_deg, 3.5, 0.0, n_vehicles, LidarSpec::hdl64());
    let scene = generate_scene(&spec).map_err(to_py)?;
    let d = PyDict::new(py);
    let pts: Vec<(f32, f32, f32)> = scene.cloud.points.iter().map(|p| (p[0], p[1], p[2])).collect();
    d.set_item("points", pts)?;
    d.set_item("intensity", scene.cloud.intensity.clone())?;
    d.set_item("labels", wrap_boxes(scene.labels()))?;
    d.set_item("map_json", scene.map.to_json())?;
    Ok(d)
}

/// A trained detector loaded from its weights file and JSON sidecar.
#[pyclass(name = "Detector")]
struct PyDetector {
    inner: CoreDetector,
}

#[pymethods]
impl PyDetector {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyDetector {
            inner: CoreDetector::load(&path).map_err(to_py)?,
        })
    }

    #[getter]
    fn bev(&self) -> PyBevConfig {
        PyBevConfig { inner: self.inner.bev }
    }

    /// Whether the detector needs a map (ground and/or road) at inference.
    #[getter]
    fn uses_map(&self) -> bool {
        self.inner.config.ground_prior || self.inner.config.road_fusion != hdnetbev::detector::RoadFusion::None
    }

    /// Detections for one sweep. `map_json` supplies the ground and road
    /// priors for map-aware detectors.
    #[pyo3(signature = (points, intensity, map_json=None))]
    fn detect(&self, points: Vec<(f32, f32, f32)>, intensity: Vec<f32>, map_json: Option<&str>) -> PyResult<Vec<PyBox>> {
        let cloud = cloud_from(points, intensity)?;
        let map = map_json
            .map(|t| HdMap::from_json(t, std::path::Path::new("<map_json>")))
            .transpose()
            .map_err(to_py)?;
        let road = map.as_ref().map(|m| rasterize_road_mask(&m.road, &self.inner.bev));
        let ground = map.as_ref().map(|m| &m.ground as &dyn GroundQuery);
        let dets = self.inner.detect_cloud(&cloud, ground, road.as_ref()).map_err(to_py)?;
        Ok(wrap_boxes(dets))
    }
}

/// AP at `iou_thresh` over frames of (detections, ground truth), in
/// percent: dict with `ap_interp40`, `ap_continuous`, `n_gt`, `n_det`.
#[pyfunction]
#[pyo3(signature = (detections, ground_truth, iou_thresh=0.7))]
fn average_precision<'py>(
    py: Python<'py>,
    detections: Vec<Vec<PyBox>>,
    ground_truth: Vec<Vec<PyBox>>,
    iou_thresh: f64,
) -> PyResult<Bound<'py, PyDict>> {
    if detections.len() != ground_truth.len() {
        return Err(PyValueError::new_err("detections and ground_truth need one entry per frame"));
    }
    let frames: Vec<FrameEval> = detections
        .iter()
        .zip(&ground_truth)
        .map(|(d, g)| FrameEval {
            dets: unwrap_boxes(d),
            gts: unwrap_boxes(g),
        })
        .collect();
    let s = evalkit::evaluate(&frames, iou_thresh).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("ap_interp40", 100.0 * s.ap_interp40)?;
    d.set_item("ap_continuous", 100.0 * s.ap_continuous)?;
    d.set_item("n_gt", s.n_gt)?;
    d.set_item("n_det", s.n_det)?;
    Ok(d)
}

#[pymodule]
#[pyo3(name = "hdnetbev")]
fn hdnetbev_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyBox>()?;
    m.add_class::<PyBevConfig>()?;
    m.add_class::<PyGroundPlane>()?;
    m.add_class::<PyDetector>()?;
    m.add_function(wrap_pyfunction!(rotated_iou, m)?)?;
    m.add_function(wrap_pyfunction!(nms, m)?)?;
    m.add_function(wrap_pyfunction!(rasterize, m)?)?;
    m.add_function(wrap_pyfunction!(fit_ground_plane, m)?)?;
    m.add_function(wrap_pyfunction!(synth_scene, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision, m)?)?;
    Ok(())
}
