//! HD-map model: a ground-height raster and road polygons.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bevgrid::{BevConfig, Mask, PointCloud};
use crate::error::{Error, Result};
use crate::geom::signed_area;

pub const MAP_FORMAT_VERSION: u32 = 1;

/// Anything that can answer "how high is the ground at (x, y)".
pub trait GroundQuery: Sync {
    fn ground_height(&self, x: f64, y: f64) -> f64;
}

/// Ground heights sampled at cell centers. Row index runs along y, column
/// index along x.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundRaster {
    pub origin: (f64, f64),
    pub res: f64,
    pub n_rows: usize,
    pub n_cols: usize,
    pub heights: Vec<f32>,
}

impl GroundRaster {
    pub fn new(origin: (f64, f64), res: f64, n_rows: usize, n_cols: usize, heights: Vec<f32>) -> Result<Self> {
        if !(res > 0.0) || n_rows == 0 || n_cols == 0 {
            return Err(Error::Config(format!(
                "ground raster needs positive resolution and size, got res={res} shape=[{n_rows},{n_cols}]"
            )));
        }
        if heights.len() != n_rows * n_cols {
            return Err(Error::ShapeMismatch(format!(
                "{} heights for a {n_rows}x{n_cols} raster",
                heights.len()
            )));
        }
        if heights.iter().any(|h| !h.is_finite()) {
            return Err(Error::NonFinite("ground raster heights".into()));
        }
        Ok(GroundRaster {
            origin,
            res,
            n_rows,
            n_cols,
            heights,
        })
    }

    pub fn flat(origin: (f64, f64), res: f64, n_rows: usize, n_cols: usize, z: f64) -> Self {
        Self::new(origin, res, n_rows, n_cols, vec![z as f32; n_rows * n_cols]).unwrap()
    }

    /// Samples `f` at every cell center.
    pub fn from_fn(
        origin: (f64, f64),
        res: f64,
        n_rows: usize,
        n_cols: usize,
        f: impl Fn(f64, f64) -> f64,
    ) -> Self {
        let mut heights = Vec::with_capacity(n_rows * n_cols);
        for r in 0..n_rows {
            let y = origin.1 + (r as f64 + 0.5) * res;
            for c in 0..n_cols {
                let x = origin.0 + (c as f64 + 0.5) * res;
                heights.push(f(x, y) as f32);
            }
        }
        Self::new(origin, res, n_rows, n_cols, heights).unwrap()
    }

    #[inline]
    fn at(&self, r: usize, c: usize) -> f64 {
        self.heights[r * self.n_cols + c] as f64
    }

    pub fn covers(&self, x: f64, y: f64) -> bool {
        x >= self.origin.0
            && x < self.origin.0 + self.n_cols as f64 * self.res
            && y >= self.origin.1
            && y < self.origin.1 + self.n_rows as f64 * self.res
    }

    /// Bilinear interpolation between cell centers. Outside the raster the
    /// query clamps to the nearest edge cell; the flag is false there.
    pub fn query(&self, x: f64, y: f64) -> (f64, bool) {
        let fx = ((x - self.origin.0) / self.res - 0.5).clamp(0.0, (self.n_cols - 1) as f64);
        let fy = ((y - self.origin.1) / self.res - 0.5).clamp(0.0, (self.n_rows - 1) as f64);
        let c0 = fx.floor() as usize;
        let r0 = fy.floor() as usize;
        let c1 = (c0 + 1).min(self.n_cols - 1);
        let r1 = (r0 + 1).min(self.n_rows - 1);
        let tx = fx - c0 as f64;
        let ty = fy - r0 as f64;
        let top = self.at(r0, c0) * (1.0 - tx) + self.at(r0, c1) * tx;
        let bottom = self.at(r1, c0) * (1.0 - tx) + self.at(r1, c1) * tx;
        (top * (1.0 - ty) + bottom * ty, self.covers(x, y))
    }
}

impl GroundQuery for GroundRaster {
    fn ground_height(&self, x: f64, y: f64) -> f64 {
        self.query(x, y).0
    }
}

/// Plane `z = a x + b y + c`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundPlane {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl GroundQuery for GroundPlane {
    fn ground_height(&self, x: f64, y: f64) -> f64 {
        self.a * x + self.b * y + self.c
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RoadMap {
    polygons: Vec<Vec<(f64, f64)>>,
}

fn segments_cross(p1: (f64, f64), p2: (f64, f64), q1: (f64, f64), q2: (f64, f64)) -> bool {
    let orient = |a: (f64, f64), b: (f64, f64), c: (f64, f64)| {
        (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0)
    };
    let d1 = orient(q1, q2, p1);
    let d2 = orient(q1, q2, p2);
    let d3 = orient(p1, p2, q1);
    let d4 = orient(p1, p2, q2);
    (d1 > 0.0) != (d2 > 0.0) && (d3 > 0.0) != (d4 > 0.0) && d1 != 0.0 && d2 != 0.0 && d3 != 0.0 && d4 != 0.0
}

fn is_simple(ring: &[(f64, f64)]) -> bool {
    let n = ring.len();
    for i in 0..n {
        for j in i + 1..n {
            // skip adjacent edges
            if j == i + 1 || (i == 0 && j == n - 1) {
                continue;
            }
            if segments_cross(ring[i], ring[(i + 1) % n], ring[j], ring[(j + 1) % n]) {
                return false;
            }
        }
    }
    true
}

impl RoadMap {
    /// Validates each ring (at least three vertices, no self-crossings) and
    /// reorients it counter-clockwise.
    pub fn new(polygons: Vec<Vec<(f64, f64)>>) -> Result<Self> {
        let mut out = Vec::with_capacity(polygons.len());
        for (i, mut ring) in polygons.into_iter().enumerate() {
            if ring.len() < 3 {
                return Err(Error::DegenerateInput(format!(
                    "road polygon {i} has {} vertices",
                    ring.len()
                )));
            }
            if !is_simple(&ring) {
                return Err(Error::DegenerateInput(format!(
                    "road polygon {i} self-intersects"
                )));
            }
            if signed_area(&ring) < 0.0 {
                ring.reverse();
            }
            out.push(ring);
        }
        Ok(RoadMap { polygons: out })
    }

    pub fn polygons(&self) -> &[Vec<(f64, f64)>] {
        &self.polygons
    }

    /// Even-odd containment test against each ring; true if inside any.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        self.polygons.iter().any(|ring| {
            let mut inside = false;
            let n = ring.len();
            for i in 0..n {
                let (x0, y0) = ring[i];
                let (x1, y1) = ring[(i + 1) % n];
                if (x0 > x) != (x1 > x) {
                    let yc = y0 + (x - x0) / (x1 - x0) * (y1 - y0);
                    if yc > y {
                        inside = !inside;
                    }
                }
            }
            inside
        })
    }
}

/// Rasterizes road polygons onto an arbitrary axis-aligned grid whose cell
/// `(r, c)` has center `(x0 + (r + 0.5) dx, y0 + (c + 0.5) dy)`.
pub fn rasterize_polygons(road: &RoadMap, origin: (f64, f64), dx: f64, dy: f64, rows: usize, cols: usize) -> Mask {
    let mut mask = Mask::filled(rows, cols, 0);
    let mut crossings: Vec<f64> = Vec::new();
    for r in 0..rows {
        let x = origin.0 + (r as f64 + 0.5) * dx;
        for ring in road.polygons() {
            crossings.clear();
            let n = ring.len();
            for i in 0..n {
                let (x0, y0) = ring[i];
                let (x1, y1) = ring[(i + 1) % n];
                if (x0 > x) != (x1 > x) {
                    crossings.push(y0 + (x - x0) / (x1 - x0) * (y1 - y0));
                }
            }
            crossings.sort_by(f64::total_cmp);
            for pair in crossings.chunks_exact(2) {
                // center y is inside iff an odd number of crossings lie above it,
                // i.e. lo <= y < hi; the float estimate is widened by one column
                // and then checked exactly
                let first = ((pair[0] - origin.1) / dy - 0.5).ceil() - 1.0;
                let last = ((pair[1] - origin.1) / dy - 0.5).ceil() + 1.0;
                let c0 = first.clamp(0.0, cols as f64) as usize;
                let c1 = last.clamp(0.0, cols as f64) as usize;
                for c in c0..c1 {
                    let yc = origin.1 + (c as f64 + 0.5) * dy;
                    if yc >= pair[0] && yc < pair[1] {
                        mask.set(r, c, 1);
                    }
                }
            }
        }
    }
    mask
}

/// Road mask at the LiDAR BEV resolution: a cell is set iff its center lies
/// inside a road polygon.
pub fn rasterize_road_mask(road: &RoadMap, cfg: &BevConfig) -> Mask {
    rasterize_polygons(
        road,
        (cfg.x_range.0, cfg.y_range.0),
        cfg.d_l,
        cfg.d_w,
        cfg.rows(),
        cfg.cols(),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct HdMap {
    pub frame: String,
    pub ground: GroundRaster,
    pub road: RoadMap,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MapFile {
    version: u32,
    frame: String,
    ground: GroundFile,
    road: RoadFile,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GroundFile {
    origin: [f64; 2],
    res: f64,
    shape: [usize; 2],
    heights: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RoadFile {
    polygons: Vec<Vec<[f64; 2]>>,
}

impl HdMap {
    /// JSON text of the map. Heights are written with nine significant
    /// digits, enough to round-trip any f32 exactly.
    pub fn to_json(&self) -> String {
        let g = &self.ground;
        let mut s = String::with_capacity(32 + 16 * g.heights.len());
        s.push_str("{\"version\":");
        write!(s, "{MAP_FORMAT_VERSION}").unwrap();
        s.push_str(",\"frame\":");
        s.push_str(&serde_json::to_string(&self.frame).unwrap());
        write!(
            s,
            ",\"ground\":{{\"origin\":{},\"res\":{},\"shape\":[{},{}],\"heights\":[",
            serde_json::to_string(&[g.origin.0, g.origin.1]).unwrap(),
            serde_json::to_string(&g.res).unwrap(),
            g.n_rows,
            g.n_cols
        )
        .unwrap();
        for (i, h) in g.heights.iter().enumerate() {
            if i > 0 {
                s.push(',');
            }
            write!(s, "{h:.8e}").unwrap();
        }
        s.push_str("]},\"road\":{\"polygons\":");
        let polys: Vec<Vec<[f64; 2]>> = self
            .road
            .polygons()
            .iter()
            .map(|r| r.iter().map(|&(x, y)| [x, y]).collect())
            .collect();
        s.push_str(&serde_json::to_string(&polys).unwrap());
        s.push_str("}}");
        s
    }

    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::parse(path, e))?;
        let version = value
            .get("version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::parse(path, "missing integer field `version`"))?;
        if version != MAP_FORMAT_VERSION as u64 {
            return Err(Error::Version {
                path: path.to_path_buf(),
                found: version as u32,
                expected: MAP_FORMAT_VERSION,
            });
        }
        let file: MapFile = serde_json::from_value(value).map_err(|e| Error::parse(path, e))?;
        debug_assert_eq!(file.version, MAP_FORMAT_VERSION);
        let [rows, cols] = file.ground.shape;
        let ground = GroundRaster::new(
            (file.ground.origin[0], file.ground.origin[1]),
            file.ground.res,
            rows,
            cols,
            file.ground.heights.iter().map(|&h| h as f32).collect(),
        )
        .map_err(|e| Error::parse(path, e))?;
        let road = RoadMap::new(
            file.road
                .polygons
                .into_iter()
                .map(|r| r.into_iter().map(|[x, y]| (x, y)).collect())
                .collect(),
        )
        .map_err(|e| Error::parse(path, e))?;
        Ok(HdMap {
            frame: file.frame,
            ground,
            road,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }
}

fn solve3(m: [[f64; 3]; 3], rhs: [f64; 3]) -> Option<[f64; 3]> {
    let det = |m: &[[f64; 3]; 3]| {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    };
    let d = det(&m);
    let scale = m.iter().flatten().fold(0.0f64, |a, v| a.max(v.abs()));
    if !d.is_finite() || d.abs() <= 1e-12 * scale.powi(3).max(1e-300) {
        return None;
    }
    let mut out = [0.0; 3];
    for (k, o) in out.iter_mut().enumerate() {
        let mut mk = m;
        for r in 0..3 {
            mk[r][k] = rhs[r];
        }
        *o = det(&mk) / d;
    }
    Some(out)
}

/// Least-squares plane through the selected points.
fn fit_plane_lsq(pts: &[[f64; 3]]) -> Option<GroundPlane> {
    if pts.len() < 3 {
        return None;
    }
    // center for conditioning
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p[0]).sum::<f64>() / n;
    let my = pts.iter().map(|p| p[1]).sum::<f64>() / n;
    let mut ata = [[0.0; 3]; 3];
    let mut atb = [0.0; 3];
    for p in pts {
        let row = [p[0] - mx, p[1] - my, 1.0];
        for i in 0..3 {
            for j in 0..3 {
                ata[i][j] += row[i] * row[j];
            }
            atb[i] += row[i] * p[2];
        }
    }
    let [a, b, c0] = solve3(ata, atb)?;
    Some(GroundPlane {
        a,
        b,
        c: c0 - a * mx - b * my,
    })
}

/// RANSAC over 3-point samples followed by a least-squares refit on the
/// consensus set. Deterministic per seed.
pub fn fit_ground_plane(
    cloud: &PointCloud,
    iterations: usize,
    inlier_thresh: f64,
    seed: u64,
) -> Result<GroundPlane> {
    let pts: Vec<[f64; 3]> = cloud
        .points
        .iter()
        .map(|p| [p[0] as f64, p[1] as f64, p[2] as f64])
        .collect();
    if pts.len() < 3 {
        return Err(Error::DegenerateInput(format!(
            "plane fit needs at least 3 points, got {}",
            pts.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(usize, GroundPlane)> = None;
    for _ in 0..iterations.max(1) {
        let i = rng.random_range(0..pts.len());
        let j = rng.random_range(0..pts.len());
        let k = rng.random_range(0..pts.len());
        let (p, q, r) = (pts[i], pts[j], pts[k]);
        let ux = q[0] - p[0];
        let uy = q[1] - p[1];
        let vx = r[0] - p[0];
        let vy = r[1] - p[1];
        let det = ux * vy - uy * vx;
        if det.abs() < 1e-9 {
            continue;
        }
        let uz = q[2] - p[2];
        let vz = r[2] - p[2];
        let a = (uz * vy - uy * vz) / det;
        let b = (ux * vz - uz * vx) / det;
        let plane = GroundPlane {
            a,
            b,
            c: p[2] - a * p[0] - b * p[1],
        };
        let count = pts
            .iter()
            .filter(|s| (s[2] - plane.ground_height(s[0], s[1])).abs() <= inlier_thresh)
            .count();
        if best.is_none_or(|(n, _)| count > n) {
            best = Some((count, plane));
        }
    }
    let inliers: Vec<[f64; 3]> = match best {
        Some((_, plane)) => pts
            .iter()
            .copied()
            .filter(|s| (s[2] - plane.ground_height(s[0], s[1])).abs() <= inlier_thresh)
            .collect(),
        // every sample was degenerate; fall back to all points
        None => pts.clone(),
    };
    fit_plane_lsq(&inliers)
        .or_else(|| fit_plane_lsq(&pts))
        .ok_or_else(|| Error::DegenerateInput("points are collinear in the XY plane".into()))
}

/// Inlier flags of `cloud` against `plane`.
pub fn plane_inliers(cloud: &PointCloud, plane: &GroundPlane, thresh: f64) -> Vec<bool> {
    cloud
        .points
        .iter()
        .map(|p| (p[2] as f64 - plane.ground_height(p[0] as f64, p[1] as f64)).abs() <= thresh)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn ramp() -> GroundRaster {
        // heights 0, 1 on adjacent centers along x
        GroundRaster::new((0.0, 0.0), 1.0, 1, 2, vec![0.0, 1.0]).unwrap()
    }

    #[test]
    fn flat_raster_query() {
        let g = GroundRaster::flat((-10.0, -10.0), 0.5, 40, 40, 0.2);
        for (x, y) in [(0.0, 0.0), (3.3, -7.1), (-9.99, 9.9)] {
            assert!((g.query(x, y).0 - 0.2).abs() < 1e-7);
        }
    }

    #[test]
    fn query_at_cell_center() {
        let g = GroundRaster::from_fn((0.0, 0.0), 0.5, 4, 6, |x, y| x * 0.3 - y);
        for r in 0..4 {
            for c in 0..6 {
                let (x, y) = (0.25 + c as f64 * 0.5, 0.25 + r as f64 * 0.5);
                assert_eq!(g.query(x, y).0, g.heights[r * 6 + c] as f64);
            }
        }
    }

    #[test]
    fn bilinear_midpoint() {
        let (z, inside) = ramp().query(1.0, 0.5);
        assert!((z - 0.5).abs() < 1e-12);
        assert!(inside);
    }

    #[test]
    fn out_of_coverage_clamps_and_flags() {
        let g = ramp();
        let (z, inside) = g.query(-5.0, 0.5);
        assert_eq!((z, inside), (0.0, false));
        let (z, inside) = g.query(50.0, 9.0);
        assert_eq!((z, inside), (1.0, false));
    }

    #[test]
    fn road_mask_examples() {
        let cfg = BevConfig::kitti();
        let full = RoadMap::new(vec![vec![(-1.0, -50.0), (80.0, -50.0), (80.0, 50.0), (-1.0, 50.0)]]).unwrap();
        assert_eq!(rasterize_road_mask(&full, &cfg).count_ones(), cfg.rows() * cfg.cols());
        assert_eq!(rasterize_road_mask(&RoadMap::default(), &cfg).count_ones(), 0);

        let strip = RoadMap::new(vec![vec![(-1.0, -3.0), (80.0, -3.0), (80.0, 3.0), (-1.0, 3.0)]]).unwrap();
        let m = rasterize_road_mask(&strip, &cfg);
        for r in 0..m.rows {
            let n = (0..m.cols).filter(|&c| m.get(r, c) == 1).count();
            assert_eq!(n, 60, "row {r}");
        }
    }

    #[test]
    fn road_mask_matches_point_test() {
        let cfg = BevConfig::new((0.0, 20.0), (-10.0, 10.0), (-1.0, 1.0), 0.4, 0.4, 0.5).unwrap();
        let road = RoadMap::new(vec![
            vec![(2.0, -3.0), (18.0, 1.0), (9.0, 8.5), (5.0, 2.0)],
            vec![(1.0, -9.0), (4.0, -9.5), (3.0, -5.0)],
        ])
        .unwrap();
        let m = rasterize_road_mask(&road, &cfg);
        for r in 0..m.rows {
            for c in 0..m.cols {
                let (x, y) = cfg.cell_center(r, c);
                assert_eq!(m.get(r, c) == 1, road.contains(x, y), "cell {r},{c}");
            }
        }
    }

    #[test]
    fn road_polygons_are_validated() {
        assert!(RoadMap::new(vec![vec![(0.0, 0.0), (1.0, 0.0)]]).is_err());
        let bowtie = vec![(0.0, 0.0), (1.0, 1.0), (1.0, 0.0), (0.0, 1.0)];
        assert!(RoadMap::new(vec![bowtie]).is_err());
        let cw = vec![(0.0, 0.0), (0.0, 1.0), (1.0, 1.0), (1.0, 0.0)];
        let road = RoadMap::new(vec![cw]).unwrap();
        assert!(signed_area(&road.polygons()[0]) > 0.0);
    }

    fn plane_cloud(a: f64, b: f64, c: f64, n: usize, noise: f64, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, noise.max(1e-300)).unwrap();
        let mut cloud = PointCloud::default();
        for _ in 0..n {
            let x: f64 = rng.random_range(0.0..70.0);
            let y: f64 = rng.random_range(-20.0..20.0);
            let e = if noise > 0.0 { normal.sample(&mut rng) } else { 0.0 };
            cloud.push([x as f32, y as f32, (a * x + b * y + c + e) as f32], 0.3);
        }
        cloud
    }

    #[test]
    fn ransac_noiseless_plane() {
        let cloud = plane_cloud(0.01, 0.0, 0.5, 500, 0.0, 1);
        let p = fit_ground_plane(&cloud, 50, 0.01, 3).unwrap();
        assert!((p.a - 0.01).abs() < 1e-6 && p.b.abs() < 1e-6 && (p.c - 0.5).abs() < 1e-6, "{p:?}");
    }

    #[test]
    fn ransac_rejects_outliers() {
        let mut cloud = plane_cloud(0.01, 0.0, 0.5, 900, 0.0, 2);
        let lifted: Vec<[f32; 3]> = cloud.points[..100].iter().map(|p| [p[0], p[1], p[2] + 5.0]).collect();
        for p in lifted {
            cloud.push(p, 0.8);
        }
        let p = fit_ground_plane(&cloud, 100, 0.05, 9).unwrap();
        assert!((p.a - 0.01).abs() < 1e-6 && (p.c - 0.5).abs() < 1e-5);
        let flags = plane_inliers(&cloud, &p, 0.05);
        assert!(flags[..900].iter().all(|&f| f));
        assert!(flags[900..].iter().all(|&f| !f));
    }

    #[test]
    fn ransac_degenerate_inputs() {
        let few = PointCloud::new(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]], vec![0.0; 2]);
        assert!(matches!(fit_ground_plane(&few, 10, 0.1, 0), Err(Error::DegenerateInput(_))));
        let line = PointCloud::new((0..20).map(|i| [i as f32, 2.0 * i as f32, 0.1]).collect(), vec![0.0; 20]);
        assert!(matches!(fit_ground_plane(&line, 10, 0.1, 0), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn ransac_recovers_gentle_slope() {
        for (i, deg) in [0.5f64, 1.0, 2.0].into_iter().enumerate() {
            let slope = deg.to_radians().tan();
            let cloud = plane_cloud(slope, 0.0, -1.7, 3000, 0.02, 10 + i as u64);
            let p = fit_ground_plane(&cloud, 200, 0.06, 5).unwrap();
            let err_deg = (p.a.atan().to_degrees() - deg).abs();
            assert!(err_deg < 0.1, "slope {deg}: error {err_deg}");
        }
    }

    fn sample_map() -> HdMap {
        let ground = GroundRaster::from_fn((-4.0, -8.0), 0.5, 6, 9, |x, y| 0.1 * x - 0.013 * y + (x * y).sin() / 3.0);
        let road = RoadMap::new(vec![vec![(0.1, -1.0), (10.3, -1.2), (10.0, 2.7), (0.0, 1.0 / 3.0)]]).unwrap();
        HdMap {
            frame: "ego".into(),
            ground,
            road,
        }
    }

    #[test]
    fn map_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.json");
        let map = sample_map();
        map.save(&path).unwrap();
        let back = HdMap::load(&path).unwrap();
        assert_eq!(back, map);
        let bits = |m: &HdMap| m.ground.heights.iter().map(|h| h.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&map));
    }

    #[test]
    fn map_version_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.json");
        let text = sample_map().to_json().replacen("\"version\":1", "\"version\":2", 1);
        std::fs::write(&path, &text).unwrap();
        assert!(matches!(HdMap::load(&path), Err(Error::Version { found: 2, .. })));

        let full = sample_map().to_json();
        std::fs::write(&path, &full[..full.len() / 2]).unwrap();
        assert!(matches!(HdMap::load(&path), Err(Error::Parse { .. })));

        let missing = dir.path().join("nope.json");
        let err = HdMap::load(&missing).unwrap_err();
        assert!(err.to_string().contains("nope.json"));
    }

    proptest! {
        #[test]
        fn bilinear_is_continuous(x in -3.0..5.0f64, y in -7.0..-5.5f64) {
            let map = sample_map();
            let g = &map.ground;
            let max_grad = g.heights.windows(2).map(|w| (w[1] - w[0]).abs() as f64).fold(0.0, f64::max)
                .max((0..g.n_cols).map(|c| (g.heights[g.n_cols + c] - g.heights[c]).abs() as f64).fold(0.0, f64::max));
            let (z0, _) = g.query(x, y);
            let (z1, _) = g.query(x + 1e-6, y + 1e-6);
            prop_assert!((z1 - z0).abs() <= 2.0 * 1e-6 / g.res * max_grad * 4.0 + 1e-12);
        }

        #[test]
        fn road_mask_is_monotone(
            cx in 2.0..18.0f64, cy in -8.0..8.0f64, r in 0.5..6.0f64,
        ) {
            let cfg = BevConfig::new((0.0, 20.0), (-10.0, 10.0), (-1.0, 1.0), 0.4, 0.4, 0.5).unwrap();
            let base = sample_map().road;
            let hexagon: Vec<(f64, f64)> = (0..6)
                .map(|k| {
                    let a = k as f64 * std::f64::consts::PI / 3.0;
                    (cx + r * a.cos(), cy + r * a.sin())
                })
                .collect();
            let mut polys = base.polygons().to_vec();
            polys.push(hexagon);
            let bigger = RoadMap::new(polys).unwrap();
            let m0 = rasterize_road_mask(&base, &cfg);
            let m1 = rasterize_road_mask(&bigger, &cfg);
            prop_assert!(m0.data.iter().zip(&m1.data).all(|(a, b)| *a <= *b));
        }
    }
}
