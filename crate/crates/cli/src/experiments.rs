//! In-memory recipes for the synthetic benchmark: scene sets, per-frame map
//! priors, training of detector variants and map nets, and evaluation.

use hdnetbev::bevgrid::{augment, BevConfig, Mask};
use hdnetbev::dataset::Frame;
use hdnetbev::detector::{
    assign_targets, compute_norm_stats, new_detector, output_mask, prepare_input, road_target, train_detector, Detector,
    DetectorConfig, EpochSummary, LogRow, RoadFusion, SampleSource, TargetMaps, TrainHyper, TrainSample,
};
use hdnetbev::evalkit::{
    detection_report, ground_error_sums, segmentation_metrics, uniform_bins, EvalReport, FrameEval, RangeBin,
    SegMetrics, DEFAULT_IOU,
};
use hdnetbev::mapdata::{fit_ground_plane, rasterize_road_mask, GroundPlane, GroundQuery, GroundRaster, HdMap};
use hdnetbev::mapnet::{
    binarize, estimate_priors, ground_truth_grid, map_input_rasterize, map_sample, train_mapnet, MapLogRow, MapNet, MapTask, UNetConfig,
};
use hdnetbev::synthworld::{dataset_specs, generate_scene, LidarSpec, SceneSpec};
use hdnetbev::{Error, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub const PLANE_ITERATIONS: usize = 200;
pub const PLANE_INLIER_THRESH: f64 = 0.15;

/// Everything that defines the synthetic benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "camelCase")]
pub struct DeskConfig {
    pub bev: BevConfig,
    /// Raw-z raster for the map nets; same x/y grid as `bev`.
    pub map_bev: BevConfig,
    pub scene: SceneSpec,
    pub n_train: usize,
    pub n_val: usize,
    pub train_seed: u64,
    pub val_seed: u64,
    pub detector: DetectorConfig,
    pub hyper: TrainHyper,
    pub unet: UNetConfig,
    pub map_hyper: TrainHyper,
}

/// 32-beam sensor covering the forward half plane.
pub fn desk_lidar() -> LidarSpec {
    LidarSpec {
        azimuth_step: 0.2,
        elevation_angles: (0..32).map(|i| -20.0 + 22.0 * i as f64 / 31.0).collect(),
        range_noise_sigma: 0.02,
        max_range: 90.0,
        azimuth_range: (-90.0, 90.0),
        sensor_height: 1.8,
    }
}

/// Curved roads on 2 degree slopes of either sign with 0.3 m undulation,
/// on-road and parked cars, off-road clutter, and brighter road paint.
pub fn desk_scene() -> SceneSpec {
    let mut s = SceneSpec::new(0, 2.0, 5.0, 0.005, 6, desk_lidar());
    s.terrain_amplitude = 0.3;
    s.random_slope_sign = true;
    s.random_curvature = true;
    s.placement_x = (4.0, 68.0);
    s.n_parked = 3;
    s.n_clutter = 4;
    s.road_intensity = 0.5;
    s.offroad_intensity = 0.15;
    s
}

impl DeskConfig {
    pub fn standard() -> Self {
        let bev = BevConfig::new((0.0, 70.4), (-16.0, 16.0), (-2.0, 2.0), 0.4, 0.4, 0.4).expect("valid grid");
        let map_bev = BevConfig::new((0.0, 70.4), (-16.0, 16.0), (-4.8, 1.6), 0.4, 0.4, 0.2).expect("valid grid");
        DeskConfig {
            bev,
            map_bev,
            scene: desk_scene(),
            n_train: 200,
            n_val: 50,
            train_seed: 1_000,
            val_seed: 900_000,
            detector: DetectorConfig {
                blocks: [2, 2, 3, 6],
                filters: [16, 24, 32, 48],
                header_layers: 2,
                header_filters: 48,
                ..DetectorConfig::default()
            },
            hyper: TrainHyper {
                lr: 0.01,
                batch: 4,
                epochs: 20,
                decay_epochs: vec![14, 18],
                warmup_steps: 100,
                ..TrainHyper::default()
            },
            unet: UNetConfig {
                stages: vec![16, 32, 48, 64],
            },
            map_hyper: TrainHyper {
                lr: 0.003,
                batch: 4,
                epochs: 12,
                decay_epochs: vec![9],
                ..TrainHyper::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.bev.validate()?;
        self.map_bev.validate()?;
        if self.bev.x_range != self.map_bev.x_range
            || self.bev.y_range != self.map_bev.y_range
            || self.bev.d_l != self.map_bev.d_l
            || self.bev.d_w != self.map_bev.d_w
        {
            return Err(Error::Config("mapBev must share the x/y grid of bev".into()));
        }
        if self.n_train == 0 || self.n_val == 0 {
            return Err(Error::Config("nTrain and nVal must be positive".into()));
        }
        self.scene.validate()?;
        self.detector.validate()?;
        self.hyper.validate()?;
        self.unet.validate()?;
        self.map_hyper.validate()
    }
}

/// `n` scenes with seeds `base_seed ..`, generated in parallel.
pub fn synth_frames(template: &SceneSpec, n: usize, base_seed: u64) -> Result<Vec<Frame>> {
    dataset_specs(n, base_seed, template)
        .par_iter()
        .enumerate()
        .map(|(i, spec)| {
            let scene = generate_scene(spec)?;
            let labels = scene.labels();
            Ok(Frame {
                id: format!("{i:06}"),
                cloud: scene.cloud,
                labels,
                map: Some(scene.map),
            })
        })
        .collect()
}

/// Which ground the detector input is expressed relative to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GroundSource {
    /// Absolute z.
    None,
    /// The map's ground surface.
    Map,
    /// A RANSAC plane fitted to the sweep.
    Plane,
}

/// A detector variant of the ablations.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Variant {
    pub name: String,
    pub ground: GroundSource,
    pub fusion: RoadFusion,
    pub dropout: f64,
}

impl Variant {
    pub fn baseline() -> Self {
        Variant::new("baseline", GroundSource::None, RoadFusion::None, 0.0)
    }

    /// Ground surface plus road channel.
    pub fn offline(dropout: f64) -> Self {
        Variant::new("offline", GroundSource::Map, RoadFusion::InputFusion, dropout)
    }

    pub fn plane(dropout: f64) -> Self {
        Variant::new("plane", GroundSource::Plane, RoadFusion::InputFusion, dropout)
    }

    /// Road channel only.
    pub fn road_input(dropout: f64) -> Self {
        Variant::new("road-input", GroundSource::None, RoadFusion::InputFusion, dropout)
    }

    pub fn multi_task() -> Self {
        Variant::new("multi-task", GroundSource::None, RoadFusion::MultiTask, 0.0)
    }

    /// Training pixels and detections off the road are discarded.
    pub fn output_masking() -> Self {
        Variant::new("output-masking", GroundSource::None, RoadFusion::OutputMasking, 0.0)
    }

    pub fn new(name: &str, ground: GroundSource, fusion: RoadFusion, dropout: f64) -> Self {
        Variant {
            name: name.into(),
            ground,
            fusion,
            dropout,
        }
    }

    pub fn detector_config(&self, base: &DetectorConfig) -> DetectorConfig {
        DetectorConfig {
            ground_prior: self.ground != GroundSource::None,
            road_fusion: self.fusion,
            ..base.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Ground {
    Raster(GroundRaster),
    Plane(GroundPlane),
}

impl Ground {
    pub fn query(&self) -> &dyn GroundQuery {
        match self {
            Ground::Raster(g) => g,
            Ground::Plane(p) => p,
        }
    }
}

/// Map priors of one frame at input resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct FramePriors {
    pub ground: Option<Ground>,
    pub road: Option<Mask>,
}

fn frame_map(frame: &Frame) -> Result<&HdMap> {
    frame
        .map
        .as_ref()
        .ok_or_else(|| Error::DegenerateInput(format!("frame {} has no map", frame.id)))
}

/// Priors of `frame` for `source`, plus the map's road when `road` is set.
pub fn frame_priors(frame: &Frame, source: GroundSource, road: bool, bev: &BevConfig) -> Result<FramePriors> {
    let ground = match source {
        GroundSource::None => None,
        GroundSource::Map => Some(Ground::Raster(frame_map(frame)?.ground.clone())),
        GroundSource::Plane => Some(Ground::Plane(fit_ground_plane(
            &frame.cloud,
            PLANE_ITERATIONS,
            PLANE_INLIER_THRESH,
            0,
        )?)),
    };
    let road = road
        .then(|| Ok::<_, Error>(rasterize_road_mask(&frame_map(frame)?.road, bev)))
        .transpose()?;
    Ok(FramePriors { ground, road })
}

pub fn all_priors(frames: &[Frame], source: GroundSource, road: bool, bev: &BevConfig) -> Result<Vec<FramePriors>> {
    frames.par_iter().map(|f| frame_priors(f, source, road, bev)).collect()
}

/// Priors for training or evaluating `variant` from the frames' maps.
pub fn variant_priors(frames: &[Frame], variant: &Variant, bev: &BevConfig) -> Result<Vec<FramePriors>> {
    all_priors(frames, variant.ground, variant.fusion != RoadFusion::None, bev)
}

/// Priors predicted by the map nets.
pub fn estimated_priors(frames: &[Frame], ground: &MapNet, road: &MapNet) -> Result<Vec<FramePriors>> {
    frames
        .par_iter()
        .map(|f| {
            let p = estimate_priors(&f.cloud, Some(ground), Some(road))?;
            Ok(FramePriors {
                ground: p.ground.map(Ground::Raster),
                road: p.road,
            })
        })
        .collect()
}

struct VariantSource<'a> {
    frames: &'a [Frame],
    priors: &'a [FramePriors],
    targets: Vec<TargetMaps>,
    roads: Option<Vec<Vec<f32>>>,
    fov: Option<&'a Mask>,
    cfg: DetectorConfig,
    bev: BevConfig,
}

impl SampleSource for VariantSource<'_> {
    fn len(&self) -> usize {
        self.frames.len()
    }

    fn sample(&self, index: usize, augment_seed: Option<u64>) -> Result<TrainSample> {
        let p = &self.priors[index];
        let frame = &self.frames[index];
        let ground = p.ground.as_ref().map(Ground::query);
        match augment_seed {
            None => Ok(TrainSample {
                input: prepare_input(&self.cfg, &self.bev, &frame.cloud, ground, p.road.as_ref())?,
                targets: self.targets[index].clone(),
                road: self.roads.as_ref().map(|r| r[index].clone()),
            }),
            Some(seed) => {
                // map priors would have to move with the cloud
                let (cloud, labels, _) = augment(&frame.cloud, &frame.labels, None, seed);
                Ok(TrainSample {
                    input: prepare_input(&self.cfg, &self.bev, &cloud, None, None)?,
                    targets: assign_targets(&labels, &self.bev, self.fov, &self.cfg),
                    road: None,
                })
            }
        }
    }
}

pub struct TrainedDetector {
    pub detector: Detector,
    pub log: Vec<LogRow>,
    pub epochs: Vec<EpochSummary>,
}

/// Trains `variant` on frames with their priors. Network init and batch
/// order depend only on `hyper.seed`, so variants share them. Targets
/// outside `fov` are ignored. `validate` runs after every epoch.
#[allow(clippy::too_many_arguments)]
pub fn train_variant(
    frames: &[Frame],
    priors: &[FramePriors],
    variant: &Variant,
    base: &DetectorConfig,
    hyper: &TrainHyper,
    bev: &BevConfig,
    fov: Option<&Mask>,
    validate: &mut dyn FnMut(&Detector, usize) -> Result<Option<f64>>,
) -> Result<TrainedDetector> {
    if frames.len() != priors.len() {
        return Err(Error::ShapeMismatch(format!("{} frames, {} priors", frames.len(), priors.len())));
    }
    let cfg = variant.detector_config(base);
    cfg.validate()?;
    if hyper.augment && (cfg.ground_prior || cfg.road_fusion != RoadFusion::None) {
        return Err(Error::Config("augmentation is only supported without map priors".into()));
    }
    let masking = cfg.road_fusion == RoadFusion::OutputMasking;
    let targets: Vec<TargetMaps> = frames
        .par_iter()
        .zip(priors)
        .map(|(f, p)| {
            let mut t = assign_targets(&f.labels, bev, fov, &cfg);
            if masking {
                let road = p
                    .road
                    .as_ref()
                    .ok_or_else(|| Error::DegenerateInput(format!("frame {}: output masking needs a road prior", f.id)))?;
                t.ignore_outside(&output_mask(road, bev));
            }
            Ok(t)
        })
        .collect::<Result<_>>()?;
    let stats = compute_norm_stats(&targets)?;
    let roads = (cfg.road_fusion == RoadFusion::MultiTask)
        .then(|| frames.iter().map(|f| Ok(road_target(&frame_map(f)?.road, bev))).collect::<Result<Vec<_>>>())
        .transpose()?;
    let source = VariantSource {
        frames,
        priors,
        targets,
        roads,
        fov,
        cfg: cfg.clone(),
        bev: *bev,
    };
    let hyper = TrainHyper {
        dropout_prob: variant.dropout,
        ..hyper.clone()
    };
    let net = new_detector(&cfg, cfg.in_channels(bev), hyper.seed)?;
    log::info!("training {} ({} frames, {} epochs)", variant.name, frames.len(), hyper.epochs);
    let out = train_detector(net, &cfg, &stats, &source, &hyper, &mut |net, epoch| {
        let snapshot = Detector {
            config: cfg.clone(),
            stats,
            bev: *bev,
            net: net.clone(),
        };
        validate(&snapshot, epoch)
    })?;
    Ok(TrainedDetector {
        detector: Detector {
            config: cfg,
            stats,
            bev: *bev,
            net: out.net,
        },
        log: out.log,
        epochs: out.epochs,
    })
}

/// No per-epoch validation.
pub fn no_validation(_: &Detector, _: usize) -> Result<Option<f64>> {
    Ok(None)
}

/// Detections on every frame. With `road_available` false the road prior is
/// replaced by an all-zero mask.
pub fn detect_frames(det: &Detector, frames: &[Frame], priors: &[FramePriors], road_available: bool) -> Result<Vec<FrameEval>> {
    frames
        .par_iter()
        .zip(priors)
        .map(|(f, p)| {
            let empty;
            let road = match &p.road {
                Some(r) if !road_available => {
                    empty = Mask::filled(r.rows, r.cols, 0);
                    Some(&empty)
                }
                r => r.as_ref(),
            };
            let dets = det.detect_cloud(&f.cloud, p.ground.as_ref().map(Ground::query), road)?;
            Ok(FrameEval {
                dets,
                gts: f.labels.clone(),
            })
        })
        .collect()
}

/// Near and far halves of the 70 m range.
pub fn range_bins() -> Vec<RangeBin> {
    vec![RangeBin::new(0.0, 30.0), RangeBin::new(30.0, 70.0)]
}

pub fn evaluate_detector(det: &Detector, frames: &[Frame], priors: &[FramePriors], road_available: bool) -> Result<EvalReport> {
    let evals = detect_frames(det, frames, priors, road_available)?;
    Ok(detection_report(&evals, &range_bins(), DEFAULT_IOU))
}

pub struct TrainedMapNets {
    pub ground: MapNet,
    pub road: MapNet,
    pub ground_log: Vec<MapLogRow>,
    pub road_log: Vec<MapLogRow>,
}

pub fn train_map_net(frames: &[Frame], task: MapTask, unet: &UNetConfig, bev: &BevConfig, hyper: &TrainHyper) -> Result<(MapNet, Vec<MapLogRow>)> {
    let samples = frames
        .par_iter()
        .map(|f| {
            let map = frame_map(f)?;
            Ok(map_sample(&f.cloud, map, bev, task))
        })
        .collect::<Result<Vec<_>>>()?;
    let m = MapNet::new(task, unet.clone(), *bev, hyper.seed)?;
    log::info!("training {task:?} net ({} frames, {} epochs)", frames.len(), hyper.epochs);
    let (net, log) = train_mapnet(m.net, task, &samples, hyper)?;
    Ok((MapNet { net, ..m }, log))
}

pub fn train_map_nets(frames: &[Frame], desk: &DeskConfig) -> Result<TrainedMapNets> {
    let (ground, ground_log) = train_map_net(frames, MapTask::Ground, &desk.unet, &desk.map_bev, &desk.map_hyper)?;
    let (road, road_log) = train_map_net(frames, MapTask::Road, &desk.unet, &desk.map_bev, &desk.map_hyper)?;
    Ok(TrainedMapNets {
        ground,
        road,
        ground_log,
        road_log,
    })
}

/// Ground error bins for map-net evaluation.
pub fn ground_bins() -> Vec<RangeBin> {
    uniform_bins(7, 10.0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MapMetrics {
    /// Masked L1 per [`ground_bins`] bin, meters.
    pub ground_l1: Vec<Option<f64>>,
    /// Masked L1 over cells closer than 30 m.
    pub ground_l1_30m: f64,
    pub road: SegMetrics,
}

/// Pools ground errors and road pixels over all frames.
pub fn evaluate_map_nets(nets: &TrainedMapNets, frames: &[Frame]) -> Result<MapMetrics> {
    let bev = nets.ground.bev;
    let mut bins = ground_bins();
    bins.push(RangeBin::new(0.0, 30.0));
    let per_frame = frames
        .par_iter()
        .map(|f| {
            let map = frame_map(f)?;
            let (input, mask) = map_input_rasterize(&f.cloud, &bev);
            let pred = nets.ground.predict(&[&input])?.remove(0);
            let gt = ground_truth_grid(&map.ground, &bev);
            let sums = ground_error_sums(&pred, &gt, &mask, &bev, &bins)?;
            let (road_input, _) = map_input_rasterize(&f.cloud, &nets.road.bev);
            let road_pred = binarize(&nets.road.predict(&[&road_input])?.remove(0));
            let road_gt = rasterize_road_mask(&map.road, &nets.road.bev);
            Ok((sums, road_pred, road_gt))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut totals = vec![(0.0, 0usize); bins.len()];
    let mut pred_all = Vec::new();
    let mut gt_all = Vec::new();
    for (sums, p, g) in per_frame {
        for (t, s) in totals.iter_mut().zip(sums) {
            t.0 += s.0;
            t.1 += s.1;
        }
        pred_all.extend(p.data);
        gt_all.extend(g.data);
    }
    let mean = |t: &(f64, usize)| (t.1 > 0).then(|| t.0 / t.1 as f64);
    let flat = |data: Vec<u8>| Mask {
        rows: 1,
        cols: data.len(),
        data,
    };
    let near = totals.pop().expect("near bin");
    Ok(MapMetrics {
        ground_l1: totals.iter().map(mean).collect(),
        ground_l1_30m: mean(&near).unwrap_or(f64::NAN),
        road: segmentation_metrics(&flat(pred_all), &flat(gt_all))?,
    })
}
