//! Online map estimation from a single sweep: U-Nets for ground height and
//! road segmentation, and the glue that turns their outputs into detector
//! priors.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bevgrid::{occupied_columns, rasterize, BevConfig, BevTensor, Grid2, Mask, PointCloud};
use crate::detector::{sidecar_path, stack_inputs, Detector, TrainHyper};
use crate::error::{Error, Result};
use crate::geom::OrientedBox;
use crate::mapdata::{GroundQuery, GroundRaster, HdMap, RoadMap};
use crate::tensor::{bce_loss, load_weights, save_weights, NetSpec, Network, Real, Adam, Tensor};

pub const ROAD_THRESHOLD: f32 = 0.5;
pub const SIDECAR_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MapTask {
    /// Ground height in meters, no output activation.
    Ground,
    /// Road probability.
    Road,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "camelCase")]
pub struct UNetConfig {
    /// Channels per resolution, finest first.
    pub stages: Vec<usize>,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            stages: vec![32, 64, 128, 256],
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() || self.stages.contains(&0) {
            return Err(Error::Config(format!("U-Net stages must be non-empty and positive, got {:?}", self.stages)));
        }
        Ok(())
    }
}

/// Encoder of two conv-BN-ReLU per stage with max pooling between stages;
/// decoder resizes bilinearly to the skip's size, concatenates the skip and
/// applies two conv-BN-ReLU; a 1x1 conv gives one channel at input
/// resolution.
pub fn build_unet(cfg: &UNetConfig, in_channels: usize, task: MapTask) -> Result<NetSpec> {
    cfg.validate()?;
    if in_channels == 0 {
        return Err(Error::Config("U-Net needs at least one input channel".into()));
    }
    let mut s = NetSpec::new();
    let mut h = s.input(in_channels);
    let n = cfg.stages.len();
    let mut skips = Vec::new();
    for (k, &c) in cfg.stages.iter().enumerate() {
        if k > 0 {
            h = s.maxpool(h);
        }
        h = s.conv_bn_relu(&format!("enc{k}.0"), h, c);
        h = s.conv_bn_relu(&format!("enc{k}.1"), h, c);
        skips.push(h);
    }
    for k in (0..n - 1).rev() {
        let up = s.resize_like(h, skips[k]);
        let cat = s.concat(&[up, skips[k]]);
        h = s.conv_bn_relu(&format!("dec{k}.0"), cat, cfg.stages[k]);
        h = s.conv_bn_relu(&format!("dec{k}.1"), h, cfg.stages[k]);
    }
    let out = s.conv("out", h, 1, 1, true);
    if task == MapTask::Road {
        s.sigmoid(out, vec![0]);
    }
    Ok(s)
}

/// Raw-z rasterization for the map nets and the mask of columns holding at
/// least one point.
pub fn map_input_rasterize(cloud: &PointCloud, cfg: &BevConfig) -> (BevTensor, Mask) {
    (rasterize(cloud, cfg, None), occupied_columns(cloud, cfg))
}

/// Ground truth ground height at every BEV cell center.
pub fn ground_truth_grid(ground: &dyn GroundQuery, cfg: &BevConfig) -> Grid2<f32> {
    let mut g = Grid2::filled(cfg.rows(), cfg.cols(), 0f32);
    for r in 0..cfg.rows() {
        for c in 0..cfg.cols() {
            let (x, y) = cfg.cell_center(r, c);
            g.set(r, c, ground.ground_height(x, y) as f32);
        }
    }
    g
}

/// Sum of squared errors over masked pixels, and its gradient.
pub fn ground_loss<T: Real>(pred: &[T], gt: &[f32], mask: &[u8]) -> Result<(f64, Vec<T>)> {
    if pred.len() != gt.len() || pred.len() != mask.len() {
        return Err(Error::ShapeMismatch(format!(
            "ground loss: {} predictions, {} targets, {} mask cells",
            pred.len(),
            gt.len(),
            mask.len()
        )));
    }
    let mut loss = 0.0;
    let mut grad = vec![T::ZERO; pred.len()];
    for i in 0..pred.len() {
        if mask[i] != 0 {
            let d = pred[i].to_f64() - gt[i] as f64;
            loss += d * d;
            grad[i] = T::from_f64(2.0 * d);
        }
    }
    Ok((loss, grad))
}

/// Binary cross-entropy summed over every pixel.
pub fn road_loss<T: Real>(pred: &[T], gt: &[f32]) -> Result<(f64, Vec<T>)> {
    bce_loss(pred, gt, None)
}

/// One training frame for a map net.
#[derive(Debug, Clone)]
pub struct MapSample {
    pub input: BevTensor,
    /// Ground heights or 0/1 road labels, row-major over the BEV grid.
    pub target: Vec<f32>,
    /// Point mask for the ground loss; unused for road.
    pub mask: Vec<u8>,
}

/// Training sample from a cloud and its map.
pub fn map_sample(cloud: &PointCloud, map: &HdMap, cfg: &BevConfig, task: MapTask) -> MapSample {
    let (input, mask) = map_input_rasterize(cloud, cfg);
    let target = match task {
        MapTask::Ground => ground_truth_grid(&map.ground, cfg).data,
        MapTask::Road => crate::mapdata::rasterize_road_mask(&map.road, cfg)
            .data
            .iter()
            .map(|&v| f32::from(v))
            .collect(),
    };
    MapSample {
        input,
        target,
        mask: mask.data,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapLogRow {
    pub epoch: usize,
    pub step: usize,
    /// Per-frame mean over the batch.
    pub loss: f64,
    pub lr: f64,
}

fn task_loss<T: Real>(task: MapTask, out: &Tensor<T>, samples: &[&MapSample]) -> Result<(f64, Tensor<T>)> {
    let (b, c, h, w) = out.dims4();
    if c != 1 || b != samples.len() {
        return Err(Error::ShapeMismatch(format!("map net output {:?} for {} frames", out.shape, samples.len())));
    }
    let hw = h * w;
    let mut grad = Tensor::zeros(&out.shape);
    let mut total = 0.0;
    for (f, s) in samples.iter().enumerate() {
        let p = &out.data[f * hw..(f + 1) * hw];
        let (l, g) = match task {
            MapTask::Ground => ground_loss(p, &s.target, &s.mask)?,
            MapTask::Road => road_loss(p, &s.target)?,
        };
        total += l;
        grad.data[f * hw..(f + 1) * hw].copy_from_slice(&g);
    }
    Ok((total, grad))
}

/// Adam on the batch mean of per-frame loss sums, with the step-decay
/// schedule of `hyper`. Momentum, dropout and augmentation settings are not
/// used.
pub fn train_mapnet(
    mut net: Network<f32>,
    task: MapTask,
    data: &[MapSample],
    hyper: &TrainHyper,
) -> Result<(Network<f32>, Vec<MapLogRow>)> {
    hyper.validate()?;
    if data.is_empty() {
        return Err(Error::DegenerateInput("training set is empty".into()));
    }
    let mut order_rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    order_rng.set_stream(1);
    let mut opt = Adam::new(hyper.lr);
    let mut log = Vec::new();
    let mut step = 0;
    for epoch in 0..hyper.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut order_rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(hyper.batch) {
            let samples: Vec<&MapSample> = chunk.iter().map(|&i| &data[i]).collect();
            let inputs: Vec<&BevTensor> = samples.iter().map(|s| &s.input).collect();
            let x = stack_inputs::<f32>(&inputs)?;
            let diverged = |e: Error| match e {
                Error::NonFinite(what) => Error::Divergence(format!("epoch {epoch} step {step}: non-finite values in {what}")),
                e => e,
            };
            opt.lr = hyper.lr_at_step(epoch, step);
            let cache = net.forward(&x, true).map_err(diverged)?;
            let (loss, mut d_out) = task_loss(task, cache.output(net.spec.output), &samples)?;
            let b = chunk.len() as f64;
            if !loss.is_finite() {
                return Err(Error::Divergence(format!("epoch {epoch} step {step}: loss {loss} at lr {}", opt.lr)));
            }
            d_out.scale(1.0 / b as f32);
            let grads = net.backward(&cache, &d_out, false).map_err(diverged)?;
            opt.step(&mut net, &grads)?;
            net.update_running_stats(&cache);
            log.push(MapLogRow {
                epoch,
                step,
                loss: loss / b,
                lr: opt.lr,
            });
            epoch_loss += loss / b;
            step += 1;
        }
        log::info!(
            "{task:?} net epoch {epoch}: loss {:.4}",
            epoch_loss / order.len().div_ceil(hyper.batch) as f64
        );
    }
    Ok((net, log))
}

pub fn write_map_log(path: &Path, rows: &[MapLogRow]) -> Result<()> {
    let mut s = String::from("epoch,step,loss,lr\n");
    for r in rows {
        writeln!(s, "{},{},{},{}", r.epoch, r.step, r.loss, r.lr).expect("string write");
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "camelCase")]
pub struct MapNetSidecar {
    pub version: u32,
    pub task: MapTask,
    pub unet: UNetConfig,
    pub bev: BevConfig,
}

/// A trained map net.
pub struct MapNet {
    pub task: MapTask,
    pub unet: UNetConfig,
    /// Raster of the map-net input; its x/y grid is the detector's.
    pub bev: BevConfig,
    pub net: Network<f32>,
}

impl MapNet {
    pub fn new(task: MapTask, unet: UNetConfig, bev: BevConfig, seed: u64) -> Result<Self> {
        bev.validate()?;
        let net = Network::new(build_unet(&unet, bev.channels(), task)?, seed);
        Ok(MapNet { task, unet, bev, net })
    }

    pub fn save(&self, weights: &Path) -> Result<()> {
        save_weights(weights, &self.net)?;
        let side = MapNetSidecar {
            version: SIDECAR_VERSION,
            task: self.task,
            unet: self.unet.clone(),
            bev: self.bev,
        };
        let path = sidecar_path(weights);
        fs::write(&path, serde_json::to_string_pretty(&side).expect("sidecar serializes")).map_err(|e| Error::io(&path, e))
    }

    pub fn load(weights: &Path) -> Result<Self> {
        let path = sidecar_path(weights);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let side: MapNetSidecar = serde_json::from_str(&text).map_err(|e| Error::parse(&path, e))?;
        if side.version != SIDECAR_VERSION {
            return Err(Error::Version {
                path,
                found: side.version,
                expected: SIDECAR_VERSION,
            });
        }
        let mut m = MapNet::new(side.task, side.unet, side.bev, 0)?;
        load_weights(weights, &mut m.net)?;
        Ok(m)
    }

    /// One output grid per input frame: meters for ground, probabilities for
    /// road.
    pub fn predict(&self, inputs: &[&BevTensor]) -> Result<Vec<Grid2<f32>>> {
        let out = self.net.infer(&stack_inputs(inputs)?)?;
        let (b, _, h, w) = out.dims4();
        Ok((0..b)
            .map(|f| Grid2 {
                rows: h,
                cols: w,
                data: out.data[f * h * w..(f + 1) * h * w].to_vec(),
            })
            .collect())
    }
}

/// Map priors for one sweep, in the form the detector consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct Priors {
    /// Ground heights at BEV cell centers.
    pub ground: Option<GroundRaster>,
    pub road_prob: Option<Grid2<f32>>,
    /// `road_prob >= 0.5`.
    pub road: Option<Mask>,
}

/// BEV grid (rows along x, columns along y) to a ground raster (rows along
/// y, columns along x) with samples at the same cell centers.
pub fn grid_to_raster(grid: &Grid2<f32>, bev: &BevConfig) -> Result<GroundRaster> {
    if (bev.d_l - bev.d_w).abs() > 1e-12 {
        return Err(Error::Config(format!(
            "ground raster needs square cells, grid has {} x {}",
            bev.d_l, bev.d_w
        )));
    }
    if grid.rows != bev.rows() || grid.cols != bev.cols() {
        return Err(Error::ShapeMismatch(format!(
            "ground grid {}x{} vs BEV {}x{}",
            grid.rows,
            grid.cols,
            bev.rows(),
            bev.cols()
        )));
    }
    let mut heights = Vec::with_capacity(grid.data.len());
    for c in 0..grid.cols {
        for r in 0..grid.rows {
            heights.push(grid.get(r, c));
        }
    }
    GroundRaster::new((bev.x_range.0, bev.y_range.0), bev.d_l, grid.cols, grid.rows, heights)
}

pub fn binarize(prob: &Grid2<f32>) -> Mask {
    Mask {
        rows: prob.rows,
        cols: prob.cols,
        data: prob.data.iter().map(|&p| u8::from(p >= ROAD_THRESHOLD)).collect(),
    }
}

/// Runs whichever map nets are given on the sweep.
pub fn estimate_priors(cloud: &PointCloud, ground: Option<&MapNet>, road: Option<&MapNet>) -> Result<Priors> {
    let run = |m: &MapNet, task: MapTask| -> Result<Grid2<f32>> {
        if m.task != task {
            return Err(Error::Config(format!("expected a {task:?} net, got {:?}", m.task)));
        }
        let (input, _) = map_input_rasterize(cloud, &m.bev);
        Ok(m.predict(&[&input])?.remove(0))
    };
    let ground = match ground {
        Some(m) => Some(grid_to_raster(&run(m, MapTask::Ground)?, &m.bev)?),
        None => None,
    };
    let road_prob = road.map(|m| run(m, MapTask::Road)).transpose()?;
    let road = road_prob.as_ref().map(binarize);
    Ok(Priors { ground, road_prob, road })
}

/// Detects with given priors; the shared last stage of the offline and
/// online pipelines.
pub fn detect_with_priors(cloud: &PointCloud, det: &Detector, priors: &Priors) -> Result<Vec<OrientedBox>> {
    det.detect_cloud(
        cloud,
        priors.ground.as_ref().map(|g| g as &dyn GroundQuery),
        priors.road.as_ref(),
    )
}

/// Priors from an HD map, for the offline pipeline.
pub fn map_priors(map: &HdMap, bev: &BevConfig) -> Priors {
    Priors {
        ground: Some(map.ground.clone()),
        road_prob: None,
        road: Some(crate::mapdata::rasterize_road_mask(&map.road, bev)),
    }
}

/// Estimates priors from the sweep itself, then detects with them.
pub fn online_detect(
    cloud: &PointCloud,
    det: &Detector,
    ground: Option<&MapNet>,
    road: Option<&MapNet>,
) -> Result<(Vec<OrientedBox>, Priors)> {
    let priors = estimate_priors(cloud, ground, road)?;
    Ok((detect_with_priors(cloud, det, &priors)?, priors))
}

/// Ground prior as map JSON (no road polygons).
pub fn write_ground_prior(path: &Path, frame: &str, ground: &GroundRaster) -> Result<()> {
    let map = HdMap {
        frame: frame.to_string(),
        ground: ground.clone(),
        road: RoadMap::default(),
    };
    map.save(path)
}

/// Binary PGM (P5, maxval 1); image rows follow mask rows.
pub fn write_road_pgm(path: &Path, mask: &Mask) -> Result<()> {
    let mut bytes = format!("P5\n{} {}\n1\n", mask.cols, mask.rows).into_bytes();
    bytes.extend(mask.data.iter().map(|&v| u8::from(v != 0)));
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_road_pgm(path: &Path) -> Result<Mask> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(Error::parse(path, "truncated PGM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    i += 1;
    if fields[0] != "P5" || fields[3] != "1" {
        return Err(Error::parse(path, "expected a P5 PGM with maxval 1"));
    }
    let cols: usize = fields[1].parse().map_err(|_| Error::parse(path, "bad width"))?;
    let rows: usize = fields[2].parse().map_err(|_| Error::parse(path, "bad height"))?;
    let data = bytes.get(i..).unwrap_or_default().to_vec();
    if data.len() != rows * cols || data.iter().any(|&v| v > 1) {
        return Err(Error::parse(path, "PGM pixel data does not match header"));
    }
    Ok(Mask { rows, cols, data })
}

/// Predictions for many frames, in parallel, in input order.
pub fn predict_many(net: &MapNet, clouds: &[&PointCloud]) -> Result<Vec<Grid2<f32>>> {
    clouds
        .par_iter()
        .map(|c| {
            let (input, _) = map_input_rasterize(c, &net.bev);
            Ok(net.predict(&[&input])?.remove(0))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{new_detector, DetectorConfig, NormStats, RoadFusion};
    use crate::mapdata::GroundPlane;
    use crate::synthworld::{generate_scene, LidarSpec, SceneSpec};

    fn bev() -> BevConfig {
        BevConfig::new((0.0, 12.8), (-6.4, 6.4), (-3.0, 1.0), 0.4, 0.4, 0.25).unwrap()
    }

    fn tiny_unet() -> UNetConfig {
        UNetConfig { stages: vec![8, 8, 12, 12] }
    }

    #[test]
    fn unet_preserves_resolution() {
        let spec = build_unet(&UNetConfig::default(), 19, MapTask::Ground).unwrap();
        assert_eq!(spec.infer_shape(19, 176, 80).unwrap(), (1, 176, 80));
        assert_eq!(spec.infer_shape(19, 37, 21).unwrap(), (1, 37, 21));
        assert!(build_unet(&UNetConfig { stages: vec![] }, 3, MapTask::Road).is_err());
    }

    #[test]
    fn road_output_is_probability() {
        let m = MapNet::new(MapTask::Road, tiny_unet(), bev(), 2).unwrap();
        let mut x = BevTensor::zeros(bev().channels(), 32, 32);
        x.data.iter_mut().enumerate().for_each(|(i, v)| *v = ((i * 7919) % 13) as f32 * 0.3);
        let p = m.predict(&[&x]).unwrap().remove(0);
        assert!(p.data.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn input_rasterization() {
        let cfg = bev();
        let mut cloud = PointCloud::default();
        let (t, m) = map_input_rasterize(&cloud, &cfg);
        assert!(t.data.iter().all(|&v| v == 0.0));
        assert_eq!(m.count_ones(), 0);
        for z in [-1.0, -0.5, 0.2] {
            cloud.push([4.1, 1.1, z], 0.3);
        }
        cloud.push([9.0, -3.0, -1.7], 0.5);
        let (t, m) = map_input_rasterize(&cloud, &cfg);
        assert_eq!(t, rasterize(&cloud, &cfg, None));
        let (r, c) = cfg.cell_of(4.1, 1.1).unwrap();
        assert_eq!(m.get(r, c), 1);
        assert_eq!(m.count_ones(), 2);
    }

    #[test]
    fn loss_examples() {
        let gt = vec![1.0f32, 2.0, 3.0];
        assert_eq!(ground_loss(&[1.0f64, 2.0, 3.0], &gt, &[1, 1, 1]).unwrap().0, 0.0);
        let (l, g) = ground_loss(&[1.1f64, 7.0, -3.0], &gt, &[1, 0, 0]).unwrap();
        assert!((l - 0.01).abs() < 1e-12);
        assert_eq!((g[1], g[2]), (0.0, 0.0));
        assert!(ground_loss(&[1.0f64], &gt, &[1]).is_err());

        let (h, w) = (5, 7);
        let (l, g) = road_loss(&vec![0.5f64; h * w], &vec![0.0; h * w]).unwrap();
        assert!((l - (h * w) as f64 * std::f64::consts::LN_2).abs() < 1e-9);
        assert!(g.iter().all(|&v| v > 0.0));
        let (l, _) = road_loss(&[1e-12f64, 1.0 - 1e-12], &[0.0, 1.0]).unwrap();
        assert!(l < 1e-6);
    }

    #[test]
    fn ground_grid_and_raster_agree() {
        let cfg = bev();
        let plane = GroundPlane { a: 0.03, b: -0.01, c: -1.8 };
        let g = ground_truth_grid(&plane, &cfg);
        let raster = grid_to_raster(&g, &cfg).unwrap();
        for r in 0..cfg.rows() {
            for c in 0..cfg.cols() {
                let (x, y) = cfg.cell_center(r, c);
                assert!((raster.ground_height(x, y) - g.get(r, c) as f64).abs() < 1e-6);
                assert!((raster.ground_height(x, y) - plane.ground_height(x, y)).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = Mask::filled(3, 5, 0);
        m.set(1, 4, 1);
        m.set(2, 0, 1);
        let p = dir.path().join("road.pgm");
        write_road_pgm(&p, &m).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"P5\n5 3\n1\n"));
        assert_eq!(read_road_pgm(&p).unwrap(), m);
    }

    fn plane_frame(cfg: &BevConfig) -> (PointCloud, GroundPlane) {
        let plane = GroundPlane { a: 0.035, b: 0.0, c: -1.8 };
        let mut cloud = PointCloud::default();
        for i in 0..cfg.rows() * 3 {
            for j in 0..cfg.cols() * 3 {
                if (i * 31 + j * 17) % 5 == 0 {
                    continue;
                }
                let x = (i as f64 + 0.5) * cfg.d_l / 3.0;
                let y = cfg.y_range.0 + (j as f64 + 0.5) * cfg.d_w / 3.0;
                cloud.push([x as f32, y as f32, plane.ground_height(x, y) as f32], 0.3);
            }
        }
        (cloud, plane)
    }

    #[test]
    fn overfit_plane_ground() {
        let cfg = bev();
        let (cloud, plane) = plane_frame(&cfg);
        let map = HdMap {
            frame: "plane".into(),
            ground: GroundRaster::from_fn((-1.0, -8.0), 0.4, 45, 40, |x, y| plane.ground_height(x, y)),
            road: RoadMap::default(),
        };
        let sample = map_sample(&cloud, &map, &cfg, MapTask::Ground);
        let m = MapNet::new(MapTask::Ground, tiny_unet(), cfg, 3).unwrap();
        let hyper = TrainHyper {
            lr: 0.01,
            batch: 1,
            epochs: 800,
            decay_epochs: vec![600],
            ..TrainHyper::default()
        };
        let (net, log) = train_mapnet(m.net, MapTask::Ground, std::slice::from_ref(&sample), &hyper).unwrap();
        assert!(log.last().unwrap().loss < log[0].loss);
        let m = MapNet { net, ..MapNet::new(MapTask::Ground, tiny_unet(), cfg, 3).unwrap() };
        let priors = estimate_priors(&cloud, Some(&m), None).unwrap();
        let pred = priors.ground.unwrap();
        let mask = occupied_columns(&cloud, &cfg);
        let mut err = 0.0;
        let mut n = 0;
        for r in 0..cfg.rows() {
            for c in 0..cfg.cols() {
                if mask.get(r, c) != 0 {
                    let (x, y) = cfg.cell_center(r, c);
                    err += (pred.ground_height(x, y) - plane.ground_height(x, y)).abs();
                    n += 1;
                }
            }
        }
        let l1 = err / n as f64;
        assert!(l1 < 0.02, "masked L1 {l1}");
    }

    #[test]
    fn priors_deterministic_and_empty_cloud_ok() {
        let cfg = bev();
        let g = MapNet::new(MapTask::Ground, tiny_unet(), cfg, 1).unwrap();
        let r = MapNet::new(MapTask::Road, tiny_unet(), cfg, 2).unwrap();
        let (cloud, _) = plane_frame(&cfg);
        let a = estimate_priors(&cloud, Some(&g), Some(&r)).unwrap();
        let b = estimate_priors(&cloud, Some(&g), Some(&r)).unwrap();
        assert_eq!(a, b);
        let e = estimate_priors(&PointCloud::default(), Some(&g), Some(&r)).unwrap();
        assert!(e.ground.unwrap().heights.iter().all(|h| h.is_finite()));
        assert!(matches!(estimate_priors(&cloud, Some(&r), None), Err(Error::Config(_))));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = MapNet::new(MapTask::Road, tiny_unet(), bev(), 5).unwrap();
        let p = dir.path().join("road.bin");
        m.save(&p).unwrap();
        let back = MapNet::load(&p).unwrap();
        assert_eq!(back.task, MapTask::Road);
        assert_eq!(back.net.params, m.net.params);
    }

    #[test]
    fn online_with_oracle_priors_matches_offline() {
        let lidar = LidarSpec {
            azimuth_step: 0.5,
            elevation_angles: (0..12).map(|i| -14.0 + i as f64).collect(),
            range_noise_sigma: 0.02,
            max_range: 30.0,
            azimuth_range: (-60.0, 60.0),
            sensor_height: 1.8,
        };
        let mut spec = SceneSpec::new(4, 2.0, 5.0, 0.002, 3, lidar);
        spec.placement_x = (4.0, 12.0);
        let scene = generate_scene(&spec).unwrap();
        let cfg = bev();
        let dcfg = DetectorConfig {
            blocks: [1, 1, 1, 1],
            filters: [8, 8, 8, 8],
            header_layers: 1,
            header_filters: 8,
            score_thresh: 0.005,
            ground_prior: true,
            road_fusion: RoadFusion::InputFusion,
            ..DetectorConfig::default()
        };
        let det = Detector {
            net: new_detector(&dcfg, dcfg.in_channels(&cfg), 1).unwrap(),
            config: dcfg,
            stats: NormStats::IDENTITY,
            bev: cfg,
        };
        let oracle = map_priors(&scene.map, &cfg);
        let online = detect_with_priors(&scene.cloud, &det, &oracle).unwrap();
        let road = crate::mapdata::rasterize_road_mask(&scene.map.road, &cfg);
        let offline = det.detect_cloud(&scene.cloud, Some(&scene.map.ground), Some(&road)).unwrap();
        assert_eq!(online, offline);
        assert!(!online.is_empty());

        let g = MapNet::new(MapTask::Ground, tiny_unet(), cfg, 1).unwrap();
        let r = MapNet::new(MapTask::Road, tiny_unet(), cfg, 2).unwrap();
        let (dets, priors) = online_detect(&scene.cloud, &det, Some(&g), Some(&r)).unwrap();
        assert!(priors.ground.is_some() && priors.road.is_some());
        assert!(dets.iter().all(|d| d.is_valid()));
    }
}
