//! LiDAR to bird's-eye-view discretization.
//!
//! Channel layout of a rasterized tensor with `nz = H / dH` height slices:
//!
//! | channels          | content                                   |
//! |-------------------|-------------------------------------------|
//! | `0 .. nz`         | binary occupancy per height slice         |
//! | `nz`              | occupancy of points below the height range|
//! | `nz + 1`          | occupancy of points at/above the range    |
//! | `nz + 2`          | mean intensity of the column              |
//! | `nz + 3` (opt.)   | road mask, when concatenated              |
//!
//! Rows run along x and columns along y; cell `(r, c)` covers
//! `[xmin + r dL, xmin + (r+1) dL) x [ymin + c dW, ymin + (c+1) dW)`.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::OrientedBox;
use crate::mapdata::GroundQuery;

/// Spatial stride of the detector output relative to the input grid.
pub const OUTPUT_STRIDE: usize = 4;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f32; 3]>,
    pub intensity: Vec<f32>,
}

impl PointCloud {
    pub fn new(points: Vec<[f32; 3]>, intensity: Vec<f32>) -> Self {
        assert_eq!(points.len(), intensity.len(), "one intensity per point");
        PointCloud { points, intensity }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn push(&mut self, p: [f32; 3], intensity: f32) {
        self.points.push(p);
        self.intensity.push(intensity);
    }
}

/// Reads a KITTI velodyne scan: little-endian f32 quadruples `(x, y, z, r)`.
pub fn read_velodyne(path: &Path) -> Result<PointCloud> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 16 != 0 {
        return Err(Error::parse(
            path,
            format!("{} bytes is not a multiple of 16", bytes.len()),
        ));
    }
    let mut cloud = PointCloud::default();
    for rec in bytes.chunks_exact(16) {
        let f = |i: usize| f32::from_le_bytes(rec[4 * i..4 * i + 4].try_into().unwrap());
        cloud.push([f(0), f(1), f(2)], f(3));
    }
    Ok(cloud)
}

pub fn write_velodyne(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut buf = Vec::with_capacity(cloud.len() * 16);
    for (p, i) in cloud.points.iter().zip(&cloud.intensity) {
        for v in [p[0], p[1], p[2], *i] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "camelCase")]
pub struct BevConfig {
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub z_range: (f64, f64),
    pub d_l: f64,
    pub d_w: f64,
    pub d_h: f64,
}

fn cell_count(lo: f64, hi: f64, step: f64, axis: &str) -> Result<usize> {
    if !(hi > lo) || !(step > 0.0) {
        return Err(Error::Config(format!(
            "{axis}: need max > min and positive step, got [{lo}, {hi}) / {step}"
        )));
    }
    let n = (hi - lo) / step;
    let r = n.round();
    if (n - r).abs() > 1e-6 || r < 1.0 {
        return Err(Error::Config(format!(
            "{axis}: extent {} is not a whole multiple of {step}",
            hi - lo
        )));
    }
    Ok(r as usize)
}

impl BevConfig {
    pub fn new(
        x_range: (f64, f64),
        y_range: (f64, f64),
        z_range: (f64, f64),
        d_l: f64,
        d_w: f64,
        d_h: f64,
    ) -> Result<Self> {
        let cfg = BevConfig {
            x_range,
            y_range,
            z_range,
            d_l,
            d_w,
            d_h,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// `[0, 70.4] x [-40, 40] x [-3, 1]` at `0.1 x 0.1 x 0.2` m.
    pub fn kitti() -> Self {
        BevConfig::new((0.0, 70.4), (-40.0, 40.0), (-3.0, 1.0), 0.1, 0.1, 0.2).unwrap()
    }

    /// `[-70.4, 70.4] x [-40, 40] x [-2, 3.4]` at 0.2 m in every axis.
    pub fn tor4d() -> Self {
        BevConfig::new((-70.4, 70.4), (-40.0, 40.0), (-2.0, 3.4), 0.2, 0.2, 0.2).unwrap()
    }

    pub fn validate(&self) -> Result<()> {
        cell_count(self.x_range.0, self.x_range.1, self.d_l, "x")?;
        cell_count(self.y_range.0, self.y_range.1, self.d_w, "y")?;
        cell_count(self.z_range.0, self.z_range.1, self.d_h, "z")?;
        Ok(())
    }

    pub fn rows(&self) -> usize {
        ((self.x_range.1 - self.x_range.0) / self.d_l).round() as usize
    }

    pub fn cols(&self) -> usize {
        ((self.y_range.1 - self.y_range.0) / self.d_w).round() as usize
    }

    pub fn height_slices(&self) -> usize {
        ((self.z_range.1 - self.z_range.0) / self.d_h).round() as usize
    }

    /// Occupancy slices plus below/above-range slices plus intensity.
    pub fn channels(&self) -> usize {
        self.height_slices() + 3
    }

    pub fn below_channel(&self) -> usize {
        self.height_slices()
    }

    pub fn above_channel(&self) -> usize {
        self.height_slices() + 1
    }

    pub fn intensity_channel(&self) -> usize {
        self.height_slices() + 2
    }

    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.x_range.0 + (row as f64 + 0.5) * self.d_l,
            self.y_range.0 + (col as f64 + 0.5) * self.d_w,
        )
    }

    /// Cell containing `(x, y)`, or `None` outside the half-open extent.
    #[inline]
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let (x0, x1) = self.x_range;
        let (y0, y1) = self.y_range;
        if !(x >= x0 && x < x1 && y >= y0 && y < y1) {
            return None;
        }
        let rows = self.rows();
        let cols = self.cols();
        let r = (((x - x0) * (rows as f64 / (x1 - x0))) as usize).min(rows - 1);
        let c = (((y - y0) * (cols as f64 / (y1 - y0))) as usize).min(cols - 1);
        Some((r, c))
    }

    /// Occupancy channel for a (possibly ground-relative) height.
    #[inline]
    pub fn z_channel(&self, z: f64) -> usize {
        let (z0, z1) = self.z_range;
        let nz = self.height_slices();
        if z < z0 {
            nz
        } else if z >= z1 {
            nz + 1
        } else {
            (((z - z0) * (nz as f64 / (z1 - z0))) as usize).min(nz - 1)
        }
    }

    /// Output grid dimensions after two stride-2 poolings with padding.
    pub fn output_dims(&self) -> (usize, usize) {
        let half = |n: usize| n.div_ceil(2);
        (half(half(self.rows())), half(half(self.cols())))
    }

    pub fn output_cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        let s = OUTPUT_STRIDE as f64;
        (
            self.x_range.0 + (row as f64 + 0.5) * s * self.d_l,
            self.y_range.0 + (col as f64 + 0.5) * s * self.d_w,
        )
    }
}

/// Dense `rows x cols` grid, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid2<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Copy> Grid2<T> {
    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Grid2 {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn same_shape<U>(&self, other: &Grid2<U>) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }
}

/// Binary mask, one byte per cell.
pub type Mask = Grid2<u8>;

impl Mask {
    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BevTensor {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl BevTensor {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        BevTensor {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    #[inline]
    pub fn index(&self, c: usize, r: usize, col: usize) -> usize {
        (c * self.height + r) * self.width + col
    }

    #[inline]
    pub fn get(&self, c: usize, r: usize, col: usize) -> f32 {
        self.data[self.index(c, r, col)]
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }
}

/// Bins one point. Returns the flat column index and occupancy channel.
#[inline]
fn bin_point(
    cfg: &BevConfig,
    p: &[f32; 3],
    ground: Option<&dyn GroundQuery>,
) -> Option<(u32, u16)> {
    let x = p[0] as f64;
    let y = p[1] as f64;
    let (r, c) = cfg.cell_of(x, y)?;
    let z = match ground {
        Some(g) => p[2] as f64 - g.ground_height(x, y),
        None => p[2] as f64,
    };
    Some(((r * cfg.cols() + c) as u32, cfg.z_channel(z) as u16))
}

fn scatter(cfg: &BevConfig, cloud: &PointCloud, bins: &[Option<(u32, u16)>]) -> BevTensor {
    let rows = cfg.rows();
    let cols = cfg.cols();
    let plane = rows * cols;
    let mut out = BevTensor::zeros(cfg.channels(), rows, cols);
    let mut sum = vec![0f64; plane];
    let mut count = vec![0u32; plane];
    for (bin, &inten) in bins.iter().zip(&cloud.intensity) {
        if let Some((cell, ch)) = *bin {
            let cell = cell as usize;
            out.data[ch as usize * plane + cell] = 1.0;
            sum[cell] += inten as f64;
            count[cell] += 1;
        }
    }
    let ic = cfg.intensity_channel();
    let dst = out.channel_mut(ic);
    for ((d, s), n) in dst.iter_mut().zip(&sum).zip(&count) {
        if *n > 0 {
            *d = (*s / *n as f64) as f32;
        }
    }
    out
}

/// Rasterizes a point cloud. With a ground source, heights are taken relative
/// to the ground before z-binning.
pub fn rasterize(
    cloud: &PointCloud,
    cfg: &BevConfig,
    ground: Option<&dyn GroundQuery>,
) -> BevTensor {
    let bins: Vec<_> = cloud
        .points
        .iter()
        .map(|p| bin_point(cfg, p, ground))
        .collect();
    scatter(cfg, cloud, &bins)
}

/// Same result as [`rasterize`], bit for bit. Binning is sharded across the
/// current rayon pool; accumulation runs in point order.
pub fn rasterize_parallel(
    cloud: &PointCloud,
    cfg: &BevConfig,
    ground: Option<&dyn GroundQuery>,
) -> BevTensor {
    let bins: Vec<_> = cloud
        .points
        .par_iter()
        .with_min_len(4096)
        .map(|p| bin_point(cfg, p, ground))
        .collect();
    scatter(cfg, cloud, &bins)
}

/// Columns that received at least one in-range point.
pub fn occupied_columns(cloud: &PointCloud, cfg: &BevConfig) -> Mask {
    let mut mask = Mask::filled(cfg.rows(), cfg.cols(), 0);
    for p in &cloud.points {
        if let Some((r, c)) = cfg.cell_of(p[0] as f64, p[1] as f64) {
            mask.set(r, c, 1);
        }
    }
    mask
}

/// Appends a road mask as the last channel.
pub fn concat_road_channel(bev: &BevTensor, road: &Mask) -> Result<BevTensor> {
    if road.rows != bev.height || road.cols != bev.width {
        return Err(Error::ShapeMismatch(format!(
            "road mask {}x{} vs BEV grid {}x{}",
            road.rows, road.cols, bev.height, bev.width
        )));
    }
    let mut data = Vec::with_capacity(bev.data.len() + road.data.len());
    data.extend_from_slice(&bev.data);
    data.extend(road.data.iter().map(|&v| if v != 0 { 1.0f32 } else { 0.0 }));
    Ok(BevTensor {
        channels: bev.channels + 1,
        height: bev.height,
        width: bev.width,
        data,
    })
}

/// Camera field-of-view mask on the output grid: a cell is set when the
/// bearing from `apex` to its center is within `half_angle` of +x.
pub fn fov_mask(cfg: &BevConfig, half_angle: f64, apex: (f64, f64)) -> Mask {
    assert!(half_angle > 0.0 && half_angle < PI, "half angle must be in (0, pi)");
    let (rows, cols) = cfg.output_dims();
    let mut mask = Mask::filled(rows, cols, 0);
    for r in 0..rows {
        for c in 0..cols {
            let (x, y) = cfg.output_cell_center(r, c);
            let bearing = (y - apex.1).atan2(x - apex.0);
            if bearing.abs() <= half_angle {
                mask.set(r, c, 1);
            }
        }
    }
    mask
}

/// Similarity transform applied jointly to a cloud and its labels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub scale: f64,
    pub tx: f64,
    pub ty: f64,
    /// Rotation about +z, radians.
    pub rotz: f64,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams {
        scale: 1.0,
        tx: 0.0,
        ty: 0.0,
        rotz: 0.0,
    };

    /// Scale in `[0.9, 1.1]`, translation in `[-5, 5]` m, rotation in `[-5, 5]` degrees.
    pub fn sample(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AugmentParams {
            scale: rng.random_range(0.9..=1.1),
            tx: rng.random_range(-5.0..=5.0),
            ty: rng.random_range(-5.0..=5.0),
            rotz: rng.random_range(-5.0f64..=5.0).to_radians(),
        }
    }

    #[inline]
    fn apply_xy(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.rotz.sin_cos();
        (
            self.scale * (c * x - s * y) + self.tx,
            self.scale * (s * x + c * y) + self.ty,
        )
    }
}

/// Applies `params` (or parameters sampled from `seed` when `None`).
pub fn augment(
    cloud: &PointCloud,
    labels: &[OrientedBox],
    params: Option<AugmentParams>,
    seed: u64,
) -> (PointCloud, Vec<OrientedBox>, AugmentParams) {
    let params = params.unwrap_or_else(|| AugmentParams::sample(seed));
    if params == AugmentParams::IDENTITY {
        return (cloud.clone(), labels.to_vec(), params);
    }
    let points = cloud
        .points
        .iter()
        .map(|p| {
            let (x, y) = params.apply_xy(p[0] as f64, p[1] as f64);
            [x as f32, y as f32, (params.scale * p[2] as f64) as f32]
        })
        .collect();
    let boxes = labels
        .iter()
        .map(|b| {
            let (cx, cy) = params.apply_xy(b.cx, b.cy);
            let mut out = OrientedBox::new(
                cx,
                cy,
                b.l * params.scale,
                b.w * params.scale,
                b.theta + params.rotz,
            );
            out.score = b.score;
            out
        })
        .collect();
    (
        PointCloud::new(points, cloud.intensity.clone()),
        boxes,
        params,
    )
}
