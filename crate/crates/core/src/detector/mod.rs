//! Single-stage BEV vehicle detector: backbone and header graph, dense
//! targets, decoding, training and the road-prior fusion variants.

mod targets;
mod train;

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use targets::{
    assign_targets, compute_norm_stats, data_dropout, decode_box, detection_loss, encode_box, FrameTargets, LossParts,
    NormStats, TargetMaps, STD_FLOOR,
};
pub use train::{
    train_detector, write_epoch_log, write_train_log, EpochSummary, LogRow, SampleSource, TrainHyper, TrainOutcome,
    TrainSample,
};

use crate::bevgrid::{concat_road_channel, rasterize_parallel, BevConfig, BevTensor, Mask, PointCloud};
use crate::error::{Error, Result};
use crate::geom::{nms, OrientedBox};
use crate::mapdata::{rasterize_polygons, GroundQuery, RoadMap};
use crate::tensor::gradcheck::{check_network, separated_input};
use crate::tensor::{load_weights, save_weights, NetSpec, Network, Real, Tensor};

pub const OUTPUT_CHANNELS: usize = 7;
pub const REG_CHANNELS: usize = 6;
pub const SIDECAR_VERSION: u32 = 1;

/// How the road prior enters the detector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RoadFusion {
    #[default]
    None,
    /// Road mask appended as an input channel.
    InputFusion,
    /// Extra road-segmentation head trained with BCE; input unchanged.
    MultiTask,
    /// Detections (and training pixels) off the road are discarded.
    OutputMasking,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "camelCase")]
pub struct DetectorConfig {
    pub blocks: [usize; 4],
    pub filters: [usize; 4],
    pub header_layers: usize,
    pub header_filters: usize,
    /// Weight of the regression term.
    pub loss_weight: f64,
    /// Weight of the multi-task road term, a BCE averaged over output cells.
    #[serde(default = "unit_weight")]
    pub road_loss_weight: f64,
    pub score_thresh: f64,
    pub nms_iou: f64,
    /// Positive radius as a fraction of `min(w, l)`.
    pub pos_radius: f64,
    pub ignore_radius: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    /// Initial probability of the classification output.
    pub prior_prob: f64,
    /// Heights are rasterized relative to a ground prior.
    #[serde(default)]
    pub ground_prior: bool,
    pub road_fusion: RoadFusion,
}

fn unit_weight() -> f64 {
    1.0
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            blocks: [2, 2, 3, 6],
            filters: [32, 64, 128, 256],
            header_layers: 5,
            header_filters: 256,
            loss_weight: 1.0,
            road_loss_weight: 1.0,
            score_thresh: 0.2,
            nms_iou: 0.1,
            pos_radius: 0.3,
            ignore_radius: 0.7,
            focal_alpha: 0.75,
            focal_gamma: 0.5,
            prior_prob: 0.01,
            ground_prior: false,
            road_fusion: RoadFusion::None,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.blocks.contains(&0) || self.filters.contains(&0) || self.header_filters == 0 {
            return bad(format!(
                "blocks {:?}, filters {:?} and headerFilters {} must be positive",
                self.blocks, self.filters, self.header_filters
            ));
        }
        if !(self.loss_weight >= 0.0) {
            return bad(format!("lossWeight must be >= 0, got {}", self.loss_weight));
        }
        if !(self.road_loss_weight >= 0.0) {
            return bad(format!("roadLossWeight must be >= 0, got {}", self.road_loss_weight));
        }
        if !(self.score_thresh > 0.0 && self.score_thresh < 1.0) {
            return bad(format!("scoreThresh must be in (0, 1), got {}", self.score_thresh));
        }
        if !(self.nms_iou > 0.0 && self.nms_iou <= 1.0) {
            return bad(format!("nmsIou must be in (0, 1], got {}", self.nms_iou));
        }
        if !(self.pos_radius > 0.0 && self.ignore_radius >= self.pos_radius) {
            return bad(format!(
                "need 0 < posRadius <= ignoreRadius, got {} / {}",
                self.pos_radius, self.ignore_radius
            ));
        }
        if !(self.prior_prob > 0.0 && self.prior_prob < 1.0) {
            return bad(format!("priorProb must be in (0, 1), got {}", self.prior_prob));
        }
        crate::tensor::FocalLossParams::new(self.focal_alpha, self.focal_gamma)?;
        Ok(())
    }

    /// Network input channels for a BEV grid under this config's fusion.
    pub fn in_channels(&self, bev: &BevConfig) -> usize {
        bev.channels() + usize::from(self.road_fusion == RoadFusion::InputFusion)
    }

    pub fn output_channels(&self) -> usize {
        OUTPUT_CHANNELS + usize::from(self.road_fusion == RoadFusion::MultiTask)
    }
}

/// Four conv blocks with 2x2 max pooling after the first three; blocks 2-4
/// resized to the block-3 (stride 4) grid and concatenated; a header of 3x3
/// convs and a final 3x3 conv to 7 channels, sigmoid on channel 0. The
/// multi-task variant adds a 1-channel road head on the fused features,
/// appended as channel 7 with its own sigmoid.
pub fn build_detector(cfg: &DetectorConfig, in_channels: usize) -> Result<NetSpec> {
    cfg.validate()?;
    if in_channels == 0 {
        return Err(Error::Config("detector needs at least one input channel".into()));
    }
    let mut s = NetSpec::new();
    let mut h = s.input(in_channels);
    let mut taps = Vec::new();
    for b in 0..4 {
        for l in 0..cfg.blocks[b] {
            h = s.conv_bn_relu(&format!("block{}.{}", b + 1, l), h, cfg.filters[b]);
        }
        taps.push(h);
        if b < 3 {
            h = s.maxpool(h);
        }
    }
    let b2 = s.resize_like(taps[1], taps[2]);
    let b4 = s.resize_like(taps[3], taps[2]);
    let fused = s.concat(&[b2, taps[2], b4]);
    let mut h = fused;
    for l in 0..cfg.header_layers {
        h = s.conv_bn_relu(&format!("header.{l}"), h, cfg.header_filters);
    }
    let det = s.conv("header.out", h, OUTPUT_CHANNELS, 3, true);
    if cfg.road_fusion == RoadFusion::MultiTask {
        let road = s.conv("road.out", fused, 1, 3, true);
        let both = s.concat(&[det, road]);
        s.sigmoid(both, vec![0, OUTPUT_CHANNELS]);
    } else {
        s.sigmoid(det, vec![0]);
    }
    Ok(s)
}

/// Learnable parameter count from the layer list alone.
pub fn analytic_param_count(cfg: &DetectorConfig, in_channels: usize) -> usize {
    let conv = |cin: usize, cout: usize, bias: bool| cin * cout * 9 + if bias { cout } else { 0 };
    let bn = |c: usize| 2 * c;
    let mut n = 0;
    let mut c = in_channels;
    for b in 0..4 {
        for _ in 0..cfg.blocks[b] {
            n += conv(c, cfg.filters[b], false) + bn(cfg.filters[b]);
            c = cfg.filters[b];
        }
    }
    let fused = cfg.filters[1] + cfg.filters[2] + cfg.filters[3];
    c = fused;
    for _ in 0..cfg.header_layers {
        n += conv(c, cfg.header_filters, false) + bn(cfg.header_filters);
        c = cfg.header_filters;
    }
    n += conv(c, OUTPUT_CHANNELS, true);
    if cfg.road_fusion == RoadFusion::MultiTask {
        n += conv(fused, 1, true);
    }
    n
}

/// Builds and initializes a detector network. The classification bias
/// starts at `logit(prior_prob)`.
pub fn new_detector<T: Real>(cfg: &DetectorConfig, in_channels: usize, seed: u64) -> Result<Network<T>> {
    let spec = build_detector(cfg, in_channels)?;
    let mut net = Network::new(spec, seed);
    let i = net.param_index("header.out.bias").expect("header bias exists");
    net.params[i].data[0] = T::from_f64((cfg.prior_prob / (1.0 - cfg.prior_prob)).ln());
    Ok(net)
}

/// Decoded boxes, before NMS, for every pixel with `p >= thresh`. `out` is
/// one frame's `C x H x W` output.
pub fn decode_candidates<T: Real>(
    out: &[T],
    h: usize,
    w: usize,
    stats: &NormStats,
    bev: &BevConfig,
    thresh: f64,
) -> Vec<OrientedBox> {
    let hw = h * w;
    assert!(out.len() >= OUTPUT_CHANNELS * hw, "output too small");
    let mut dets = Vec::new();
    for i in 0..hw {
        let p = out[i].to_f64();
        if p < thresh {
            continue;
        }
        let z: [f64; REG_CHANNELS] = std::array::from_fn(|k| out[(k + 1) * hw + i].to_f64());
        let q = bev.output_cell_center(i / w, i % w);
        let b = decode_box(&stats.destandardize(&z), q);
        if b.is_valid() {
            dets.push(b.with_score(p));
        }
    }
    dets
}

/// Keeps detections whose center lies on a set cell of an input-resolution
/// road mask.
pub fn mask_detections(dets: Vec<OrientedBox>, road: &Mask, bev: &BevConfig) -> Vec<OrientedBox> {
    dets.into_iter()
        .filter(|d| bev.cell_of(d.cx, d.cy).is_some_and(|(r, c)| road.get(r, c) != 0))
        .collect()
}

/// Thresholded, NMS-filtered detections of one frame; with `road`, output
/// masking is applied before NMS.
pub fn decode_detections<T: Real>(
    out: &[T],
    h: usize,
    w: usize,
    stats: &NormStats,
    bev: &BevConfig,
    cfg: &DetectorConfig,
    road: Option<&Mask>,
) -> Vec<OrientedBox> {
    let mut dets = decode_candidates(out, h, w, stats, bev, cfg.score_thresh);
    if let Some(m) = road {
        dets = mask_detections(dets, m, bev);
    }
    nms(&dets, cfg.nms_iou)
}

/// Output-grid mask sampled from an input-resolution mask at output-cell
/// centers.
pub fn output_mask(input_mask: &Mask, bev: &BevConfig) -> Mask {
    let (rows, cols) = bev.output_dims();
    let mut m = Mask::filled(rows, cols, 0);
    for r in 0..rows {
        for c in 0..cols {
            let (x, y) = bev.output_cell_center(r, c);
            let v = bev.cell_of(x, y).map_or(0, |(ir, ic)| input_mask.get(ir, ic));
            m.set(r, c, v);
        }
    }
    m
}

/// Road target for the multi-task head: polygons rasterized at output-cell
/// centers, as 0/1 floats.
pub fn road_target(road: &RoadMap, bev: &BevConfig) -> Vec<f32> {
    let (rows, cols) = bev.output_dims();
    let s = crate::bevgrid::OUTPUT_STRIDE as f64;
    let m = rasterize_polygons(road, (bev.x_range.0, bev.y_range.0), s * bev.d_l, s * bev.d_w, rows, cols);
    m.data.iter().map(|&v| f32::from(v)).collect()
}

/// Packs frames into a `B x C x H x W` tensor.
pub fn stack_inputs<T: Real>(frames: &[&BevTensor]) -> Result<Tensor<T>> {
    let f0 = frames.first().ok_or_else(|| Error::DegenerateInput("empty batch".into()))?;
    let (c, h, w) = (f0.channels, f0.height, f0.width);
    let mut data = Vec::with_capacity(frames.len() * f0.data.len());
    for f in frames {
        if (f.channels, f.height, f.width) != (c, h, w) {
            return Err(Error::ShapeMismatch(format!(
                "batch mixes {}x{}x{} and {c}x{h}x{w}",
                f.channels, f.height, f.width
            )));
        }
        data.extend(f.data.iter().map(|&v| T::from_f32(v)));
    }
    Ok(Tensor::from_vec(&[frames.len(), c, h, w], data))
}

/// Network input for `cloud`: ground-relative when `cfg` uses a ground
/// prior, with the road channel appended under input fusion. `road` is an
/// input-resolution mask.
pub fn prepare_input(
    cfg: &DetectorConfig,
    bev: &BevConfig,
    cloud: &PointCloud,
    ground: Option<&dyn GroundQuery>,
    road: Option<&Mask>,
) -> Result<BevTensor> {
    if cfg.ground_prior && ground.is_none() {
        return Err(Error::Config("detector was trained with a ground prior; none given".into()));
    }
    let ground = if cfg.ground_prior { ground } else { None };
    let raster = rasterize_parallel(cloud, bev, ground);
    match cfg.road_fusion {
        RoadFusion::InputFusion => {
            let road = road.ok_or_else(|| Error::Config("input fusion needs a road mask".into()))?;
            concat_road_channel(&raster, road)
        }
        _ => Ok(raster),
    }
}

/// JSON companion of a weights file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "camelCase")]
pub struct DetectorSidecar {
    pub version: u32,
    pub detector_config: DetectorConfig,
    pub norm_stats: NormStats,
    pub bev: BevConfig,
    pub in_channels: usize,
}

pub fn sidecar_path(weights: &Path) -> PathBuf {
    let mut s = weights.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// A trained detector ready for inference.
pub struct Detector {
    pub config: DetectorConfig,
    pub stats: NormStats,
    pub bev: BevConfig,
    pub net: Network<f32>,
}

impl Detector {
    pub fn in_channels(&self) -> usize {
        self.config.in_channels(&self.bev)
    }

    /// Writes `weights` and `weights.json`.
    pub fn save(&self, weights: &Path) -> Result<()> {
        save_weights(weights, &self.net)?;
        let side = DetectorSidecar {
            version: SIDECAR_VERSION,
            detector_config: self.config.clone(),
            norm_stats: self.stats,
            bev: self.bev,
            in_channels: self.in_channels(),
        };
        let path = sidecar_path(weights);
        fs::write(&path, serde_json::to_string_pretty(&side).expect("sidecar serializes")).map_err(|e| Error::io(&path, e))
    }

    pub fn load(weights: &Path) -> Result<Self> {
        let path = sidecar_path(weights);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let side: DetectorSidecar = serde_json::from_str(&text).map_err(|e| Error::parse(&path, e))?;
        if side.version != SIDECAR_VERSION {
            return Err(Error::Version {
                path,
                found: side.version,
                expected: SIDECAR_VERSION,
            });
        }
        side.bev.validate()?;
        if side.in_channels != side.detector_config.in_channels(&side.bev) {
            return Err(Error::parse(&path, "inChannels disagrees with bev and roadFusion"));
        }
        let mut net = new_detector(&side.detector_config, side.in_channels, 0)?;
        load_weights(weights, &mut net)?;
        Ok(Detector {
            config: side.detector_config,
            stats: side.norm_stats,
            bev: side.bev,
            net,
        })
    }

    /// Dense network output for a batch.
    pub fn forward(&self, inputs: &[&BevTensor]) -> Result<Tensor<f32>> {
        let want = self.in_channels();
        if let Some(f) = inputs.iter().find(|f| f.channels != want) {
            return Err(Error::ShapeMismatch(format!("detector expects {want} channels, got {}", f.channels)));
        }
        self.net.infer(&stack_inputs(inputs)?)
    }

    /// Rasterizes `cloud` with the priors this detector was trained with
    /// and detects. `road` is an input-resolution mask.
    pub fn detect_cloud(
        &self,
        cloud: &PointCloud,
        ground: Option<&dyn GroundQuery>,
        road: Option<&Mask>,
    ) -> Result<Vec<OrientedBox>> {
        let input = self.prepare_input(cloud, ground, road)?;
        let roads = road.map(|r| [r]);
        Ok(self.detect(&[&input], roads.as_ref().map(|r| &r[..]))?.remove(0))
    }

    pub fn prepare_input(&self, cloud: &PointCloud, ground: Option<&dyn GroundQuery>, road: Option<&Mask>) -> Result<BevTensor> {
        prepare_input(&self.config, &self.bev, cloud, ground, road)
    }

    /// Detections per frame. `roads` holds input-resolution road masks for
    /// output masking and is ignored by the other variants.
    pub fn detect(&self, inputs: &[&BevTensor], roads: Option<&[&Mask]>) -> Result<Vec<Vec<OrientedBox>>> {
        let out = self.forward(inputs)?;
        let (_, c, h, w) = out.dims4();
        let masking = self.config.road_fusion == RoadFusion::OutputMasking;
        if masking && roads.is_none_or(|r| r.len() != inputs.len()) {
            return Err(Error::Config("output masking needs one road mask per frame".into()));
        }
        Ok((0..inputs.len())
            .map(|f| {
                let frame = &out.data[f * c * h * w..(f + 1) * c * h * w];
                let road = if masking { roads.map(|r| r[f]) } else { None };
                decode_detections(frame, h, w, &self.stats, &self.bev, &self.config, road)
            })
            .collect())
    }
}

/// Finite-difference check of the whole detector (backbone, header and
/// detection loss) in `f64` on a small grid whose output is `7 x 8 x 8`.
/// Returns the worst relative error over the input and all learnable
/// parameters.
pub fn head_gradient_check(seed: u64) -> Result<f64> {
    let bev = BevConfig::new((0.0, 3.2), (0.0, 3.2), (-1.0, 1.0), 0.1, 0.1, 1.0)?;
    let cfg = DetectorConfig {
        blocks: [1, 1, 1, 1],
        filters: [3, 3, 4, 4],
        header_layers: 1,
        header_filters: 4,
        ..DetectorConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = [
        OrientedBox::new(1.0, 1.1, 1.2, 0.8, rng.random_range(-1.0..1.0)),
        OrientedBox::new(2.3, 2.2, 1.0, 0.6, rng.random_range(-1.0..1.0)),
    ];
    let maps = assign_targets(&labels, &bev, None, &cfg);
    let stats = compute_norm_stats(std::slice::from_ref(&maps))?;
    let mut net: Network<f64> = new_detector(&cfg, 3, rng.random())?;
    let x = separated_input(&[1, 3, bev.rows(), bev.cols()], &mut rng);
    let obj = |out: &Tensor<f64>| {
        let ft = [FrameTargets { maps: &maps, road: None }];
        let (parts, g) = detection_loss(out, &ft, &stats, &cfg)?;
        Ok((parts.total(cfg.loss_weight), g))
    };
    // fine step: ReLU kinks inside the backbone are crossed less often
    check_network(&mut net, &x, &obj, 1e-6)
}

#[cfg(test)]
mod tests;
