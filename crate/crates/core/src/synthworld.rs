//! Deterministic synthetic driving scenes: rolling terrain, a curved road
//! ribbon, box-shaped vehicles and a ray-cast spinning LiDAR.
//!
//! Randomness comes from ChaCha8 seeded with the scene seed, with one
//! stream per purpose (layout, placement, sensor noise) so that changing
//! the vehicle count never perturbs the terrain or the noise draws.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bevgrid::PointCloud;
use crate::error::{Error, Result};
use crate::geom::{box_to_polygon, convex_intersection_area, OrientedBox};
use crate::mapdata::{GroundQuery, GroundRaster, HdMap, RoadMap};

pub const VEHICLE_INTENSITY: f32 = 0.8;
pub const INTENSITY_NOISE: f64 = 0.05;
const PLACEMENT_ATTEMPTS: usize = 1000;

const STREAM_LAYOUT: u64 = 0;
const STREAM_PLACEMENT: u64 = 1;
const STREAM_SENSOR: u64 = 2;

fn stream(seed: u64, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "camelCase")]
pub struct LidarSpec {
    /// Degrees.
    pub azimuth_step: f64,
    /// Degrees, ascending.
    pub elevation_angles: Vec<f64>,
    pub range_noise_sigma: f64,
    pub max_range: f64,
    /// Swept azimuth interval in degrees, 0 = +x, counter-clockwise.
    #[serde(default = "full_sweep")]
    pub azimuth_range: (f64, f64),
    #[serde(default = "sensor_height")]
    pub sensor_height: f64,
}

fn full_sweep() -> (f64, f64) {
    (-180.0, 180.0)
}

fn sensor_height() -> f64 {
    1.8
}

impl LidarSpec {
    /// 64 channels evenly spaced over -24..+2 degrees, 0.2 degree azimuth
    /// step, full sweep.
    pub fn hdl64() -> Self {
        LidarSpec {
            azimuth_step: 0.2,
            elevation_angles: (0..64).map(|i| -24.0 + 26.0 * i as f64 / 63.0).collect(),
            range_noise_sigma: 0.02,
            max_range: 100.0,
            azimuth_range: full_sweep(),
            sensor_height: sensor_height(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("lidar: {m}")));
        if !(self.azimuth_step > 0.0) {
            return bad("azimuthStep must be positive");
        }
        if self.elevation_angles.is_empty() || self.elevation_angles.windows(2).any(|w| !(w[0] < w[1])) {
            return bad("elevationAngles must be non-empty and strictly ascending");
        }
        if self.elevation_angles.iter().any(|e| !(e.abs() < 90.0)) {
            return bad("elevation angles must lie in (-90, 90) degrees");
        }
        if !(self.range_noise_sigma >= 0.0) || !(self.max_range > 0.0) || !(self.sensor_height > 0.0) {
            return bad("rangeNoiseSigma >= 0, maxRange > 0 and sensorHeight > 0 required");
        }
        if !(self.azimuth_range.0 < self.azimuth_range.1) || self.azimuth_range.1 - self.azimuth_range.0 > 360.0 {
            return bad("azimuthRange must be an increasing interval of at most 360 degrees");
        }
        Ok(())
    }

    pub fn azimuths(&self) -> Vec<f64> {
        let (a0, a1) = self.azimuth_range;
        let n = ((a1 - a0) / self.azimuth_step + 1e-9).floor() as usize;
        // a full circle would repeat its first azimuth
        let n = if (a1 - a0 - 360.0).abs() < 1e-9 { n } else { n + 1 };
        (0..n).map(|i| a0 + i as f64 * self.azimuth_step).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "camelCase")]
pub struct SceneSpec {
    pub seed: u64,
    /// Ground tilt along +x, degrees.
    pub slope: f64,
    pub road_half_width: f64,
    /// Centerline curvature, 1/m.
    pub curvature: f64,
    pub n_vehicles: usize,
    pub lidar: LidarSpec,
    /// Peak amplitude of the band-limited terrain undulation, meters.
    #[serde(default = "terrain_amplitude")]
    pub terrain_amplitude: f64,
    /// Flip the slope sign per scene (50/50).
    #[serde(default)]
    pub random_slope_sign: bool,
    /// Draw the curvature uniformly from `[-curvature, curvature]`.
    #[serde(default)]
    pub random_curvature: bool,
    /// Interval of x in which object centers are placed.
    #[serde(default = "placement_x")]
    pub placement_x: (f64, f64),
    /// Labeled vehicles parked on the shoulder, just outside the road.
    #[serde(default)]
    pub n_parked: usize,
    /// Unlabeled vehicle-sized structures well away from the road.
    #[serde(default)]
    pub n_clutter: usize,
    #[serde(default = "ground_intensity")]
    pub road_intensity: f64,
    #[serde(default = "ground_intensity")]
    pub offroad_intensity: f64,
}

fn terrain_amplitude() -> f64 {
    0.3
}

fn placement_x() -> (f64, f64) {
    (4.0, 70.0)
}

fn ground_intensity() -> f64 {
    0.3
}

impl SceneSpec {
    pub fn new(seed: u64, slope: f64, road_half_width: f64, curvature: f64, n_vehicles: usize, lidar: LidarSpec) -> Self {
        SceneSpec {
            seed,
            slope,
            road_half_width,
            curvature,
            n_vehicles,
            lidar,
            terrain_amplitude: terrain_amplitude(),
            random_slope_sign: false,
            random_curvature: false,
            placement_x: placement_x(),
            n_parked: 0,
            n_clutter: 0,
            road_intensity: ground_intensity(),
            offroad_intensity: ground_intensity(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.lidar.validate()?;
        let bad = |m: String| Err(Error::Config(format!("scene: {m}")));
        if !(self.slope.abs() <= 3.0) {
            return bad(format!("slope {} exceeds 3 degrees", self.slope));
        }
        if !(self.road_half_width > 1.5) {
            return bad(format!("roadHalfWidth {} must exceed 1.5 m", self.road_half_width));
        }
        if !(self.curvature.abs() <= 0.01) {
            return bad(format!("curvature {} must be within +-0.01 1/m", self.curvature));
        }
        if !(0.0..=0.3).contains(&self.terrain_amplitude) {
            return bad(format!("terrainAmplitude {} must be in [0, 0.3]", self.terrain_amplitude));
        }
        if !(self.placement_x.0 < self.placement_x.1) {
            return bad("placementX must be increasing".into());
        }
        for (name, v) in [("roadIntensity", self.road_intensity), ("offroadIntensity", self.offroad_intensity)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} {v} must be in [0, 1]"));
            }
        }
        Ok(())
    }
}

/// Ground surface `z = tan(slope) x + A n(x, y)` where `n` is a normalized
/// sum of plane waves with wavelengths of 15 to 60 m, `|n| <= 1` and
/// `n(0, 0) = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Terrain {
    pub slope_tan: f64,
    pub amplitude: f64,
    waves: Vec<[f64; 4]>,
}

impl Terrain {
    fn sample(slope_deg: f64, amplitude: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut waves = Vec::new();
        let mut total = 0.0;
        for _ in 0..4 {
            let wavelength = rng.random_range(15.0..60.0);
            let dir = rng.random_range(0.0..2.0 * PI);
            let k = 2.0 * PI / wavelength;
            let weight: f64 = rng.random_range(0.5..1.0);
            total += weight;
            waves.push([k * dir.cos(), k * dir.sin(), rng.random_range(0.0..2.0 * PI), weight]);
        }
        for w in &mut waves {
            // sin(a) - sin(b) spans at most 2
            w[3] /= 2.0 * total;
        }
        Terrain {
            slope_tan: slope_deg.to_radians().tan(),
            amplitude,
            waves,
        }
    }

    pub fn flat() -> Self {
        Terrain {
            slope_tan: 0.0,
            amplitude: 0.0,
            waves: vec![],
        }
    }

    pub fn height(&self, x: f64, y: f64) -> f64 {
        let mut n = 0.0;
        for [kx, ky, phase, weight] in &self.waves {
            n += weight * ((kx * x + ky * y + phase).sin() - phase.sin());
        }
        self.slope_tan * x + self.amplitude * n
    }

    /// Upper bound on the horizontal gradient magnitude.
    pub fn lipschitz(&self) -> f64 {
        self.slope_tan.abs()
            + self.amplitude
                * self
                    .waves
                    .iter()
                    .map(|[kx, ky, _, w]| w * kx.hypot(*ky))
                    .sum::<f64>()
    }
}

impl GroundQuery for Terrain {
    fn ground_height(&self, x: f64, y: f64) -> f64 {
        self.height(x, y)
    }
}

/// Road centerline `y = y0 + k x^2 / 2`; its curvature never exceeds `|k|`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Centerline {
    pub y0: f64,
    pub k: f64,
}

impl Centerline {
    pub fn point(&self, x: f64) -> (f64, f64) {
        (x, self.y0 + 0.5 * self.k * x * x)
    }

    pub fn heading(&self, x: f64) -> f64 {
        (self.k * x).atan()
    }

    /// Unit left normal at `x`.
    pub fn normal(&self, x: f64) -> (f64, f64) {
        let (s, c) = self.heading(x).sin_cos();
        (-s, c)
    }

    pub fn offset(&self, x: f64, lateral: f64) -> (f64, f64) {
        let (px, py) = self.point(x);
        let (nx, ny) = self.normal(x);
        (px + lateral * nx, py + lateral * ny)
    }

    fn ribbon(&self, half_width: f64, x0: f64, x1: f64) -> Vec<(f64, f64)> {
        let n = ((x1 - x0) / 1.0).ceil() as usize;
        let xs: Vec<f64> = (0..=n).map(|i| x0 + (x1 - x0) * i as f64 / n as f64).collect();
        let mut ring: Vec<(f64, f64)> = xs.iter().map(|&x| self.offset(x, -half_width)).collect();
        ring.extend(xs.iter().rev().map(|&x| self.offset(x, half_width)));
        ring
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Vehicle {
    pub bbox: OrientedBox,
    pub height: f64,
    /// Ground height under the box center; the box spans
    /// `[base_z, base_z + height]`.
    pub base_z: f64,
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub spec: SceneSpec,
    pub terrain: Terrain,
    pub centerline: Centerline,
    pub map: HdMap,
    /// Labeled vehicles: on-road first, then parked.
    pub vehicles: Vec<Vehicle>,
    /// Unlabeled structures.
    pub clutter: Vec<Vehicle>,
    pub cloud: PointCloud,
}

impl Scene {
    pub fn labels(&self) -> Vec<OrientedBox> {
        self.vehicles.iter().map(|v| v.bbox).collect()
    }
}

/// Extent of the ground raster and road polygon stored in scene maps.
pub const MAP_X: (f64, f64) = (-20.0, 110.0);
pub const MAP_Y: (f64, f64) = (-50.0, 50.0);
pub const MAP_RES: f64 = 1.0;

fn footprint_overlaps(candidate: &OrientedBox, placed: &[Vehicle]) -> bool {
    // keep a small gap between objects
    let grow = |b: &OrientedBox| OrientedBox::new(b.cx, b.cy, b.l + 0.6, b.w + 0.4, b.theta);
    let cp = box_to_polygon(&grow(candidate));
    let ca = candidate.aabb();
    placed.iter().any(|v| {
        let pa = v.bbox.aabb();
        if ca.2 + 1.0 < pa.0 || pa.2 + 1.0 < ca.0 || ca.3 + 1.0 < pa.1 || pa.3 + 1.0 < ca.1 {
            return false;
        }
        convex_intersection_area(&cp, &box_to_polygon(&grow(&v.bbox))) > 0.0
    })
}

struct Dims {
    l: Normal<f64>,
    w: Normal<f64>,
    h: Normal<f64>,
    heading: Normal<f64>,
}

impl Dims {
    fn car() -> Self {
        Dims {
            l: Normal::new(4.5, 0.3).unwrap(),
            w: Normal::new(1.8, 0.1).unwrap(),
            h: Normal::new(1.55, 0.1).unwrap(),
            heading: Normal::new(0.0, 5f64.to_radians()).unwrap(),
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> (f64, f64, f64, f64) {
        let l = self.l.sample(rng).clamp(3.5, 5.5);
        let w = self.w.sample(rng).clamp(1.5, 2.1);
        let h = self.h.sample(rng).clamp(1.3, 1.9);
        let dtheta = self.heading.sample(rng);
        (l, w, h, dtheta)
    }
}

/// Lateral placement rule for one object class.
enum Lateral {
    OnRoad,
    Shoulder,
    Far,
}

#[allow(clippy::too_many_arguments)]
fn place(
    count: usize,
    lateral: Lateral,
    spec: &SceneSpec,
    line: &Centerline,
    terrain: &Terrain,
    rng: &mut ChaCha8Rng,
    placed: &mut Vec<Vehicle>,
) -> Result<Vec<Vehicle>> {
    let dims = Dims::car();
    let hw = spec.road_half_width;
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0;
    while out.len() < count {
        if attempts == PLACEMENT_ATTEMPTS {
            return Err(Error::PlacementFailure {
                wanted: count,
                placed: out.len(),
            });
        }
        attempts += 1;
        let (l, w, h, dtheta) = dims.sample(rng);
        let x = rng.random_range(spec.placement_x.0..spec.placement_x.1);
        let side = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let off = match lateral {
            Lateral::OnRoad => {
                let m = (hw - w / 2.0 - 0.2).max(0.0);
                rng.random_range(-m..=m)
            }
            Lateral::Shoulder => side * (hw + w / 2.0 + rng.random_range(0.3..1.2)),
            Lateral::Far => side * (hw + rng.random_range(4.0..14.0)),
        };
        let flip = if rng.random::<bool>() { PI } else { 0.0 };
        let (cx, cy) = line.offset(x, off);
        let bbox = OrientedBox::new(cx, cy, l, w, line.heading(x) + dtheta + flip);
        if footprint_overlaps(&bbox, placed) {
            continue;
        }
        let v = Vehicle {
            bbox,
            height: h,
            base_z: terrain.height(cx, cy),
        };
        placed.push(v);
        out.push(v);
    }
    Ok(out)
}

/// Builds the scene layout and casts the LiDAR.
pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut layout = stream(spec.seed, STREAM_LAYOUT);
    let slope = if spec.random_slope_sign && layout.random::<bool>() {
        -spec.slope
    } else {
        spec.slope
    };
    let curvature = if spec.random_curvature {
        layout.random_range(-1.0..=1.0) * spec.curvature
    } else {
        spec.curvature
    };
    let terrain = Terrain::sample(slope, spec.terrain_amplitude, &mut layout);
    let y0 = layout.random_range(-0.5..=0.5) * spec.road_half_width;
    let centerline = Centerline { y0, k: curvature };
    let road = RoadMap::new(vec![centerline.ribbon(spec.road_half_width, MAP_X.0, MAP_X.1)])?;
    let cols = ((MAP_X.1 - MAP_X.0) / MAP_RES).round() as usize;
    let rows = ((MAP_Y.1 - MAP_Y.0) / MAP_RES).round() as usize;
    let ground = GroundRaster::from_fn((MAP_X.0, MAP_Y.0), MAP_RES, rows, cols, |x, y| terrain.height(x, y));
    let map = HdMap {
        frame: "lidar".into(),
        ground,
        road,
    };

    let mut placement = stream(spec.seed, STREAM_PLACEMENT);
    let mut placed = Vec::new();
    let mut vehicles = place(spec.n_vehicles, Lateral::OnRoad, spec, &centerline, &terrain, &mut placement, &mut placed)?;
    vehicles.extend(place(spec.n_parked, Lateral::Shoulder, spec, &centerline, &terrain, &mut placement, &mut placed)?);
    let clutter = place(spec.n_clutter, Lateral::Far, spec, &centerline, &terrain, &mut placement, &mut placed)?;

    let mut sensor = stream(spec.seed, STREAM_SENSOR);
    let world = World {
        terrain: &terrain,
        road: &map.road,
        objects: &placed,
        road_intensity: spec.road_intensity,
        offroad_intensity: spec.offroad_intensity,
    };
    let cloud = simulate_lidar(&world, &spec.lidar, &mut sensor);
    Ok(Scene {
        spec: spec.clone(),
        terrain,
        centerline,
        map,
        vehicles,
        clutter,
        cloud,
    })
}

/// Geometry seen by the simulated sensor.
pub struct World<'a> {
    pub terrain: &'a Terrain,
    pub road: &'a RoadMap,
    pub objects: &'a [Vehicle],
    pub road_intensity: f64,
    pub offroad_intensity: f64,
}

/// Entry distance of a ray into a vehicle box, if any.
fn ray_box(o: [f64; 3], d: [f64; 3], v: &Vehicle) -> Option<f64> {
    let b = &v.bbox;
    let (s, c) = b.theta.sin_cos();
    let (px, py) = (o[0] - b.cx, o[1] - b.cy);
    // into the box frame
    let lo = [c * px + s * py, -s * px + c * py, o[2]];
    let ld = [c * d[0] + s * d[1], -s * d[0] + c * d[1], d[2]];
    let bounds = [(-b.l / 2.0, b.l / 2.0), (-b.w / 2.0, b.w / 2.0), (v.base_z, v.base_z + v.height)];
    let mut t0 = 0.0f64;
    let mut t1 = f64::INFINITY;
    for axis in 0..3 {
        let (a, bnd) = (ld[axis], bounds[axis]);
        if a.abs() < 1e-12 {
            if lo[axis] < bnd.0 || lo[axis] > bnd.1 {
                return None;
            }
            continue;
        }
        let (mut ta, mut tb) = ((bnd.0 - lo[axis]) / a, (bnd.1 - lo[axis]) / a);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
        if t0 > t1 {
            return None;
        }
    }
    (t0 > 0.0).then_some(t0)
}

/// First crossing of the ray with the terrain, by sphere tracing with the
/// terrain's Lipschitz bound (never steps past the first root).
fn ray_ground(o: [f64; 3], d: [f64; 3], terrain: &Terrain, lipschitz: f64, max_t: f64) -> Option<f64> {
    let horiz = d[0].hypot(d[1]);
    let rate = d[2].abs() + lipschitz * horiz;
    let mut t = 0.0;
    for _ in 0..100_000 {
        let gap = o[2] + t * d[2] - terrain.height(o[0] + t * d[0], o[1] + t * d[1]);
        if gap < 1e-5 {
            return Some(t);
        }
        t += (gap / rate).max(1e-5);
        if t > max_t {
            return None;
        }
    }
    None
}

/// Casts every (azimuth, elevation) ray from `(0, 0, sensorHeight)`.
pub fn simulate_lidar(world: &World, lidar: &LidarSpec, rng: &mut ChaCha8Rng) -> PointCloud {
    let origin = [0.0, 0.0, lidar.sensor_height];
    let lipschitz = world.terrain.lipschitz();
    let range_noise = Normal::new(0.0, lidar.range_noise_sigma.max(1e-300)).unwrap();
    let inten_noise = Normal::new(0.0, INTENSITY_NOISE).unwrap();
    let mut cloud = PointCloud::default();
    for az in lidar.azimuths() {
        let (sa, ca) = az.to_radians().sin_cos();
        for el in &lidar.elevation_angles {
            let (se, ce) = el.to_radians().sin_cos();
            let d = [ce * ca, ce * sa, se];
            let mut hit = ray_ground(origin, d, world.terrain, lipschitz, lidar.max_range).map(|t| (t, false));
            for v in world.objects {
                if let Some(t) = ray_box(origin, d, v) {
                    if t <= lidar.max_range && hit.is_none_or(|(best, _)| t < best) {
                        hit = Some((t, true));
                    }
                }
            }
            // noise is drawn for every ray so the stream stays aligned
            let dr = if lidar.range_noise_sigma > 0.0 {
                range_noise.sample(rng)
            } else {
                0.0
            };
            let di = inten_noise.sample(rng);
            let Some((t, object)) = hit else { continue };
            let r = t + dr;
            let p = [origin[0] + r * d[0], origin[1] + r * d[1], origin[2] + r * d[2]];
            let base = match object {
                true => VEHICLE_INTENSITY as f64,
                false if world.road.contains(p[0], p[1]) => world.road_intensity,
                false => world.offroad_intensity,
            };
            cloud.push([p[0] as f32, p[1] as f32, p[2] as f32], (base + di).clamp(0.0, 1.0) as f32);
        }
    }
    cloud
}

/// Per-scene specs of a dataset: scene `i` uses seed `base_seed + i`.
pub fn dataset_specs(n: usize, base_seed: u64, template: &SceneSpec) -> Vec<SceneSpec> {
    (0..n)
        .map(|i| SceneSpec {
            seed: base_seed.wrapping_add(i as u64),
            ..template.clone()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::rotated_iou;

    fn small_lidar() -> LidarSpec {
        LidarSpec {
            azimuth_step: 1.0,
            elevation_angles: (0..16).map(|i| -24.0 + 26.0 * i as f64 / 15.0).collect(),
            range_noise_sigma: 0.0,
            max_range: 80.0,
            azimuth_range: (-90.0, 90.0),
            sensor_height: 1.8,
        }
    }

    fn flat_spec(n: usize) -> SceneSpec {
        let mut s = SceneSpec::new(7, 0.0, 5.0, 0.0, n, small_lidar());
        s.terrain_amplitude = 0.0;
        s
    }

    #[test]
    fn flat_ground_hit_range() {
        let terrain = Terrain::flat();
        let road = RoadMap::new(vec![vec![(0.0, -1.0), (1.0, -1.0), (1.0, 1.0)]]).unwrap();
        let world = World {
            terrain: &terrain,
            road: &road,
            objects: &[],
            road_intensity: 0.3,
            offroad_intensity: 0.3,
        };
        let lidar = LidarSpec {
            azimuth_step: 1.0,
            elevation_angles: vec![-10.0],
            range_noise_sigma: 0.0,
            max_range: 100.0,
            azimuth_range: (0.0, 0.5),
            sensor_height: 1.8,
        };
        let cloud = simulate_lidar(&world, &lidar, &mut stream(0, 0));
        assert_eq!(cloud.len(), 1);
        let p = cloud.points[0];
        let range = ((p[0] as f64).powi(2) + (p[2] as f64 - 1.8).powi(2)).sqrt();
        assert!((range - 1.8 / 10f64.to_radians().sin()).abs() < 1e-3);
        assert!((p[0] as f64 - 10.21).abs() < 0.01);
        assert!(p[2].abs() < 1e-4);
    }

    #[test]
    fn one_degree_slope_at_70m() {
        let mut s = SceneSpec::new(1, 1.0, 5.0, 0.0, 0, small_lidar());
        s.terrain_amplitude = 0.0;
        let scene = generate_scene(&s).unwrap();
        let dz = scene.terrain.height(70.0, 0.0) - scene.terrain.height(0.0, 0.0);
        assert!((dz - 1.22).abs() < 0.005, "{dz}");
    }

    #[test]
    fn terrain_bounded_and_zero_at_origin() {
        let mut rng = stream(3, 0);
        let t = Terrain::sample(0.0, 0.3, &mut rng);
        assert_eq!(t.height(0.0, 0.0), 0.0);
        let mut worst = 0f64;
        for i in 0..200 {
            for j in 0..200 {
                worst = worst.max(t.height(i as f64 - 100.0, j as f64 - 100.0).abs());
            }
        }
        assert!(worst <= 0.3 + 1e-12);
    }

    #[test]
    fn deterministic_per_seed() {
        let mut s = flat_spec(5);
        s.terrain_amplitude = 0.3;
        s.slope = 2.0;
        s.lidar.range_noise_sigma = 0.02;
        let a = generate_scene(&s).unwrap();
        let b = generate_scene(&s).unwrap();
        assert_eq!(a.cloud, b.cloud);
        assert_eq!(a.labels(), b.labels());
        assert_eq!(a.map, b.map);
    }

    #[test]
    fn no_vehicles_ground_only() {
        let scene = generate_scene(&flat_spec(0)).unwrap();
        assert!(scene.vehicles.is_empty());
        assert!(scene.cloud.points.iter().all(|p| p[2].abs() < 1e-3));
        assert!(scene.cloud.intensity.iter().all(|&i| (i - 0.3).abs() <= 0.3));
    }

    #[test]
    fn vehicle_stream_does_not_perturb_terrain() {
        let mut s = flat_spec(0);
        s.terrain_amplitude = 0.3;
        let a = generate_scene(&s).unwrap();
        s.n_vehicles = 4;
        let b = generate_scene(&s).unwrap();
        assert_eq!(a.map, b.map);
    }

    #[test]
    fn vehicles_valid_on_road_and_disjoint() {
        let mut s = flat_spec(12);
        s.curvature = 0.004;
        let scene = generate_scene(&s).unwrap();
        for (i, v) in scene.vehicles.iter().enumerate() {
            assert!(v.bbox.is_valid());
            assert!(scene.map.road.contains(v.bbox.cx, v.bbox.cy));
            for u in &scene.vehicles[i + 1..] {
                assert_eq!(rotated_iou(&v.bbox, &u.bbox), 0.0);
            }
        }
    }

    #[test]
    fn parked_and_clutter_outside_road() {
        let mut s = flat_spec(3);
        s.n_parked = 3;
        s.n_clutter = 3;
        let scene = generate_scene(&s).unwrap();
        assert_eq!(scene.vehicles.len(), 6);
        for v in &scene.vehicles[3..] {
            assert!(!scene.map.road.contains(v.bbox.cx, v.bbox.cy));
        }
        for v in &scene.clutter {
            assert!(!scene.map.road.contains(v.bbox.cx, v.bbox.cy));
        }
        assert_eq!(scene.labels().len(), 6);
    }

    #[test]
    fn placement_failure_reported() {
        let mut s = flat_spec(200);
        s.placement_x = (5.0, 15.0);
        assert!(matches!(generate_scene(&s), Err(Error::PlacementFailure { wanted: 200, .. })));
    }

    #[test]
    fn density_decreases_with_range_on_flat_ground() {
        let mut s = flat_spec(0);
        // 0.05 degree beam spacing so every 10 m annulus out to 70 m holds
        // several rings
        s.lidar.elevation_angles = (0..=480).map(|i| -24.0 + 0.05 * i as f64).collect();
        s.lidar.azimuth_range = (-30.0, 30.0);
        let scene = generate_scene(&s).unwrap();
        let mut bins = [0usize; 7];
        for p in &scene.cloud.points {
            let r = (p[0] as f64).hypot(p[1] as f64);
            if r < 70.0 {
                bins[(r / 10.0) as usize] += 1;
            }
        }
        let density: Vec<f64> = (0..7)
            .map(|i| bins[i] as f64 / (((i + 1) * (i + 1) - i * i) as f64 * 100.0))
            .collect();
        for w in density.windows(2) {
            assert!(w[0] > w[1], "{bins:?}");
        }
    }

    #[test]
    fn vehicle_casts_shadow() {
        let mut s = flat_spec(1);
        s.placement_x = (20.0, 20.5);
        s.lidar.azimuth_step = 0.2;
        s.lidar.elevation_angles = (0..40).map(|i| -10.0 + 0.25 * i as f64).collect();
        let scene = generate_scene(&s).unwrap();
        let v = scene.vehicles[0].bbox;
        let bearing = v.cy.atan2(v.cx);
        let r0 = v.cx.hypot(v.cy) + v.l;
        let shadow = scene.cloud.points.iter().filter(|p| {
            let (x, y, z) = (p[0] as f64, p[1] as f64, p[2] as f64);
            let r = x.hypot(y);
            z.abs() < 0.05 && (y.atan2(x) - bearing).abs() < 0.5f64.to_radians() && r > r0 && r < r0 + 10.0
        });
        assert_eq!(shadow.count(), 0);
        let on_vehicle = scene.cloud.points.iter().filter(|p| v.contains(p[0] as f64, p[1] as f64)).count();
        assert!(on_vehicle > 0);
    }

    #[test]
    fn ground_points_consistent_with_map() {
        let mut s = flat_spec(3);
        s.slope = 2.0;
        s.terrain_amplitude = 0.3;
        s.lidar.range_noise_sigma = 0.02;
        let scene = generate_scene(&s).unwrap();
        let mut checked = 0;
        for p in &scene.cloud.points {
            let (x, y, z) = (p[0] as f64, p[1] as f64, p[2] as f64);
            // side hits can land just outside the footprint after range noise
            let near_vehicle = scene.vehicles.iter().any(|v| {
                let b = v.bbox;
                OrientedBox::new(b.cx, b.cy, b.l + 0.5, b.w + 0.5, b.theta).contains(x, y)
            });
            if near_vehicle {
                continue;
            }
            let (g, inside) = scene.map.ground.query(x, y);
            if !inside {
                continue;
            }
            // 4 sigma of range noise projected on z plus bilinear error
            assert!((z - g).abs() <= 4.0 * 0.02 + 0.01, "{z} vs {g}");
            checked += 1;
        }
        assert!(checked > 1000);
    }

    #[test]
    fn spec_json_defaults() {
        let text = r#"{"seed":3,"slope":1.0,"roadHalfWidth":5.0,"curvature":0.0,"nVehicles":2,
            "lidar":{"azimuthStep":0.2,"elevationAngles":[-10.0,-5.0],"rangeNoiseSigma":0.02,"maxRange":80.0}}"#;
        let s: SceneSpec = serde_json::from_str(text).unwrap();
        assert_eq!(s.terrain_amplitude, 0.3);
        assert_eq!(s.lidar.sensor_height, 1.8);
        assert!(serde_json::from_str::<SceneSpec>(&text.replace("\"seed\"", "\"sead\"")).is_err());
    }

    #[test]
    fn dataset_seeds_are_consecutive_and_clouds_differ() {
        let specs = dataset_specs(3, 100, &flat_spec(2));
        assert_eq!(specs.iter().map(|s| s.seed).collect::<Vec<_>>(), vec![100, 101, 102]);
        let clouds: Vec<_> = specs.iter().map(|s| generate_scene(s).unwrap().cloud).collect();
        assert_ne!(clouds[0], clouds[1]);
        assert_ne!(clouds[1], clouds[2]);
    }
}
