//! Subcommand definitions and implementations.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hdnetbev::bevgrid::{fov_mask, rasterize, rasterize_parallel, BevConfig, BevTensor, Mask, PointCloud};
use hdnetbev::dataset::{generate_dataset, read_labels, Frame, Manifest};
use hdnetbev::detector::{new_detector, write_epoch_log, write_train_log, Detector};
use hdnetbev::evalkit::{detection_report, emit_report, EvalReport, FrameEval, RangeBin, ReportFormat};
use hdnetbev::geom::OrientedBox;
use hdnetbev::mapdata::HdMap;
use hdnetbev::mapnet::{write_ground_prior, write_map_log, write_road_pgm, MapNet, MapTask};
use hdnetbev::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{load_config, parse_override, ExperimentConfig, MapMode, Preset};
use crate::experiments::{
    all_priors, estimated_priors, evaluate_map_nets, train_map_net, train_variant, FramePriors, Ground, TrainedMapNets,
    Variant,
};
use crate::kitti::kitti_import;
use crate::run::RunDir;

pub const THREADS_ENV: &str = "HDNETBEV_THREADS";

/// Process exit status for an error: 2 configuration, 3 data, 4 numeric
/// divergence.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::Divergence(_) | Error::NonFinite(_) => 4,
        _ => 3,
    }
}

#[derive(Parser, Debug)]
#[command(name = "hdnetbev", version, about = "Map-aware BEV LiDAR detection")]
pub struct Cli {
    /// Worker threads; overrides HDNETBEV_THREADS and the config.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// More log output (-v debug, -vv trace).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// JSON configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Defaults to start from: kitti, tor4d-like or desk.
    #[arg(long, default_value = "desk")]
    pub preset: String,
    /// Override a configuration key, e.g. `--set train.lr=0.005`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// none, offline or online.
    #[arg(long)]
    pub map_mode: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub train_data: Option<PathBuf>,
    #[arg(long)]
    pub val_data: Option<PathBuf>,
    #[arg(long)]
    pub detector_weights: Option<PathBuf>,
    #[arg(long)]
    pub ground_net: Option<PathBuf>,
    #[arg(long)]
    pub road_net: Option<PathBuf>,
}

impl ConfigArgs {
    /// Preset, file, `--set` overrides, then the dedicated flags.
    pub fn resolve(&self, threads: Option<usize>) -> Result<ExperimentConfig> {
        let preset: Preset = self.preset.parse()?;
        let mut overrides = self.set.iter().map(|s| parse_override(s)).collect::<Result<Vec<_>>>()?;
        let path = |p: &PathBuf| json!(p.display().to_string());
        let flags: [(&str, Option<Value>); 10] = [
            ("seed", self.seed.map(|v| json!(v))),
            ("mapMode", self.map_mode.as_ref().map(|v| json!(v))),
            ("train.epochs", self.epochs.map(|v| json!(v))),
            ("train.lr", self.lr.map(|v| json!(v))),
            ("data.train", self.train_data.as_ref().map(path)),
            ("data.val", self.val_data.as_ref().map(path)),
            ("weights.detector", self.detector_weights.as_ref().map(path)),
            ("weights.groundNet", self.ground_net.as_ref().map(path)),
            ("weights.roadNet", self.road_net.as_ref().map(path)),
            ("threads", threads.map(|v| json!(v))),
        ];
        overrides.extend(flags.into_iter().filter_map(|(k, v)| v.map(|v| (k.to_string(), v))));
        load_config(preset, self.config.as_deref(), &overrides)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    Ground,
    Road,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset.
    SynthGen {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        n: usize,
    },
    /// Train a detector.
    TrainDetector {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a ground or road map net.
    TrainMapnet {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum)]
        task: TaskArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a detector on a dataset and write detections.
    Infer {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset; defaults to data.val.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also write the priors used (ground JSON, road PGM).
        #[arg(long)]
        dump_priors: bool,
    },
    /// Evaluate a detector, or detections from an infer run, on a dataset.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Run directory of `infer`; detections are read from it.
        #[arg(long)]
        dets: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// json, csv, svg; repeatable. Default: all.
        #[arg(long)]
        format: Vec<String>,
    },
    /// Write the BEV tensor of one sweep.
    RasterizeDump {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        cloud: PathBuf,
        /// Map JSON; its ground is used as the ground prior.
        #[arg(long)]
        map: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert a KITTI object-detection split.
    KittiImport {
        #[arg(long)]
        velodyne: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        calib: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Latency of rasterization and inference.
    Bench {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 100_000)]
        points: usize,
        #[arg(long, default_value_t = 20)]
        iters: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Sets the global worker count: `--threads`, then HDNETBEV_THREADS, then
/// the config. Returns the count in effect.
pub fn init_threads(flag: Option<usize>, config: Option<usize>) -> Result<usize> {
    let env = match std::env::var(THREADS_ENV) {
        Ok(v) => Some(
            v.trim()
                .parse::<usize>()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| Error::Config(format!("{THREADS_ENV}: {v:?} is not a positive integer")))?,
        ),
        Err(_) => None,
    };
    let n = flag.or(env).or(config);
    if let Some(n) = n {
        // a second call (tests, library use) keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(rayon::current_num_threads())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthGen { cfg, out, n } => synth_gen(&cfg.resolve(cli.threads)?, cli.threads, &out, n),
        Command::TrainDetector { cfg, out } => train_detector_cmd(&cfg.resolve(cli.threads)?, cli.threads, &out),
        Command::TrainMapnet { cfg, task, out } => train_mapnet_cmd(&cfg.resolve(cli.threads)?, cli.threads, task, &out),
        Command::Infer {
            cfg,
            data,
            out,
            dump_priors,
        } => infer_cmd(&cfg.resolve(cli.threads)?, cli.threads, data.as_deref(), &out, dump_priors),
        Command::Eval {
            cfg,
            data,
            dets,
            out,
            format,
        } => eval_cmd(&cfg.resolve(cli.threads)?, cli.threads, data.as_deref(), dets.as_deref(), &out, &format),
        Command::RasterizeDump { cfg, cloud, map, out } => {
            rasterize_dump(&cfg.resolve(cli.threads)?, cli.threads, &cloud, map.as_deref(), &out)
        }
        Command::KittiImport {
            velodyne,
            labels,
            calib,
            out,
        } => {
            init_threads(cli.threads, None)?;
            kitti_import_cmd(&velodyne, &labels, &calib, &out)
        }
        Command::Bench { cfg, points, iters, out } => bench(&cfg.resolve(cli.threads)?, cli.threads, points, iters, &out),
    }
}

fn config_value(cfg: &ExperimentConfig) -> Value {
    serde_json::to_value(cfg).expect("config serializes")
}

/// Loads a dataset after checking every checksum.
pub fn load_dataset(dir: &Path) -> Result<(Manifest, Vec<Frame>)> {
    let manifest = Manifest::load(dir)?;
    let bad = manifest.verify(dir)?;
    if let Some(p) = bad.first() {
        return Err(Error::parse(p, format!("checksum mismatch ({} files differ from the manifest)", bad.len())));
    }
    if manifest.frames.is_empty() {
        return Err(Error::DegenerateInput(format!("{}: dataset has no frames", dir.display())));
    }
    let frames = (0..manifest.frames.len())
        .into_par_iter()
        .map(|i| manifest.load_frame(dir, i))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, frames))
}

fn required<'a>(v: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    v.as_deref().ok_or_else(|| Error::Config(format!("{key}: required by this command")))
}

fn fov_half_angle(manifest: &Manifest) -> Result<Option<f64>> {
    match manifest.fov_half_angle_deg {
        Some(d) if d > 0.0 && d < 180.0 => Ok(Some(d.to_radians())),
        Some(d) => Err(Error::parse(
            "manifest.json",
            format!("fovHalfAngleDeg {d} outside (0, 180)"),
        )),
        None => Ok(None),
    }
}

fn synth_gen(cfg: &ExperimentConfig, threads: Option<usize>, out: &Path, n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::Config("n: must be positive".into()));
    }
    init_threads(threads, cfg.threads)?;
    let mut run = RunDir::create(out, "synth-gen", json!({"scene": cfg.scene, "n": n}))?;
    let manifest = generate_dataset(out, n, cfg.scene.seed, &cfg.scene)?;
    run.record(hdnetbev::dataset::MANIFEST_FILE)?;
    for f in &manifest.frames {
        for name in f.sha256.keys() {
            run.record(name)?;
        }
    }
    run.finish()?;
    log::info!("wrote {n} scenes to {}", out.display());
    Ok(())
}

fn variant_of(cfg: &ExperimentConfig) -> Variant {
    let name = match cfg.map_mode {
        MapMode::None => "no-map",
        MapMode::Offline => "offline",
        MapMode::Online => "online",
    };
    Variant::new(name, cfg.ground_source(), cfg.detector.road_fusion, cfg.train.dropout_prob)
}

/// Priors from the dataset's maps, as the detector config needs them.
fn map_priors(cfg: &ExperimentConfig, frames: &[Frame]) -> Result<Vec<FramePriors>> {
    let v = variant_of(cfg);
    all_priors(frames, v.ground, v.fusion != hdnetbev::detector::RoadFusion::None, &cfg.bev)
}

fn train_detector_cmd(cfg: &ExperimentConfig, threads: Option<usize>, out: &Path) -> Result<()> {
    let train_dir = required(&cfg.data.train, "data.train")?;
    init_threads(threads, cfg.threads)?;
    let (train_manifest, train) = load_dataset(train_dir)?;
    let val = cfg.data.val.as_deref().map(load_dataset).transpose()?;
    let fov = fov_half_angle(&train_manifest)?.map(|a| fov_mask(&cfg.bev, a, (0.0, 0.0)));
    let priors = map_priors(cfg, &train)?;
    let val_priors = val.as_ref().map(|(_, f)| map_priors(cfg, f)).transpose()?;
    let mut run = RunDir::create(out, "train-detector", config_value(cfg))?;
    run.input("train", train_dir);
    let variant = variant_of(cfg);
    let bins = bins_of(cfg);
    let trained = train_variant(
        &train,
        &priors,
        &variant,
        &cfg.detector,
        &cfg.train,
        &cfg.bev,
        fov.as_ref(),
        &mut |det, _| match (&val, &val_priors) {
            (Some((m, frames)), Some(p)) => {
                let r = evaluate(det, frames, p, fov_half_angle(m)?, &bins, cfg.eval.iou)?;
                Ok(r.overall.ap_interp40)
            }
            _ => Ok(None),
        },
    )?;
    trained.detector.save(&run.file("detector.bin"))?;
    run.record("detector.bin")?;
    run.record("detector.bin.json")?;
    write_train_log(&run.file("train_log.csv"), &trained.log)?;
    run.record("train_log.csv")?;
    write_epoch_log(&run.file("epoch_log.csv"), &trained.epochs)?;
    run.record("epoch_log.csv")?;
    run.write_json("config.json", cfg)?;
    if let (Some((m, frames)), Some(p)) = (&val, &val_priors) {
        run.input("val", cfg.data.val.as_deref().expect("val loaded"));
        let report = evaluate(&trained.detector, frames, p, fov_half_angle(m)?, &bins, cfg.eval.iou)?;
        run.write_json("val_report.json", &report)?;
    }
    run.finish()?;
    Ok(())
}

fn train_mapnet_cmd(cfg: &ExperimentConfig, threads: Option<usize>, task: TaskArg, out: &Path) -> Result<()> {
    let train_dir = required(&cfg.data.train, "data.train")?;
    init_threads(threads, cfg.threads)?;
    let (_, train) = load_dataset(train_dir)?;
    let val = cfg.data.val.as_deref().map(load_dataset).transpose()?;
    let task = match task {
        TaskArg::Ground => MapTask::Ground,
        TaskArg::Road => MapTask::Road,
    };
    let name = match task {
        MapTask::Ground => "ground",
        MapTask::Road => "road",
    };
    let mut run = RunDir::create(out, "train-mapnet", config_value(cfg))?;
    run.input("train", train_dir);
    let (net, log) = train_map_net(&train, task, &cfg.unet, &cfg.map_bev, &cfg.map_train)?;
    let weights = format!("{name}_net.bin");
    net.save(&run.file(&weights))?;
    run.record(&weights)?;
    run.record(&format!("{weights}.json"))?;
    write_map_log(&run.file("train_log.csv"), &log)?;
    run.record("train_log.csv")?;
    run.write_json("config.json", cfg)?;
    if let Some((_, frames)) = &val {
        // metrics need both nets; the untrained partner only fills a slot
        let partner_task = match task {
            MapTask::Ground => MapTask::Road,
            MapTask::Road => MapTask::Ground,
        };
        let partner = MapNet::new(partner_task, cfg.unet.clone(), cfg.map_bev, 0)?;
        let (ground, road) = match task {
            MapTask::Ground => (net, partner),
            MapTask::Road => (partner, net),
        };
        let nets = TrainedMapNets {
            ground,
            road,
            ground_log: Vec::new(),
            road_log: Vec::new(),
        };
        let m = evaluate_map_nets(&nets, frames)?;
        let metrics = match task {
            MapTask::Ground => json!({"groundL1ByRange": m.ground_l1, "groundL1Within30m": m.ground_l1_30m,
                "binEdges": crate::experiments::ground_bins().iter().map(|b| [b.lo, b.hi]).collect::<Vec<_>>()}),
            MapTask::Road => json!({"road": m.road}),
        };
        run.write_json("val_metrics.json", &metrics)?;
    }
    run.finish()?;
    Ok(())
}

struct LoadedModels {
    detector: Detector,
    map_nets: Option<(MapNet, MapNet)>,
}

fn load_models(cfg: &ExperimentConfig) -> Result<LoadedModels> {
    let path = required(&cfg.weights.detector, "weights.detector")?;
    let detector = Detector::load(path)?;
    let uses_map = detector.config.ground_prior || detector.config.road_fusion != hdnetbev::detector::RoadFusion::None;
    if uses_map && cfg.map_mode == MapMode::None {
        return Err(Error::Config(format!(
            "mapMode: {} was trained with map priors; use offline or online",
            path.display()
        )));
    }
    let map_nets = match cfg.map_mode {
        MapMode::Online => {
            let g = MapNet::load(required(&cfg.weights.ground_net, "weights.groundNet")?)?;
            let r = MapNet::load(required(&cfg.weights.road_net, "weights.roadNet")?)?;
            if g.task != MapTask::Ground || r.task != MapTask::Road {
                return Err(Error::Config("weights.groundNet / weights.roadNet: tasks are swapped".into()));
            }
            Some((g, r))
        }
        _ => None,
    };
    Ok(LoadedModels { detector, map_nets })
}

fn priors_for(cfg: &ExperimentConfig, models: &LoadedModels, frames: &[Frame]) -> Result<Vec<FramePriors>> {
    let det = &models.detector.config;
    let road = det.road_fusion != hdnetbev::detector::RoadFusion::None;
    match (&models.map_nets, cfg.map_mode) {
        (Some((g, r)), MapMode::Online) => estimated_priors(frames, g, r),
        (_, MapMode::None) => all_priors(frames, crate::experiments::GroundSource::None, false, &models.detector.bev),
        _ => {
            let source = if det.ground_prior {
                cfg.ground_source
            } else {
                crate::experiments::GroundSource::None
            };
            all_priors(frames, source, road, &models.detector.bev)
        }
    }
}

fn in_fov(b: &OrientedBox, half: Option<f64>) -> bool {
    half.is_none_or(|h| b.cy.atan2(b.cx).abs() <= h)
}

fn bins_of(cfg: &ExperimentConfig) -> Vec<RangeBin> {
    cfg.eval.bin_edges.windows(2).map(|w| RangeBin::new(w[0], w[1])).collect()
}

fn detect_all(det: &Detector, frames: &[Frame], priors: &[FramePriors], fov: Option<f64>) -> Result<Vec<Vec<OrientedBox>>> {
    frames
        .par_iter()
        .zip(priors)
        .map(|(f, p)| {
            let dets = det.detect_cloud(&f.cloud, p.ground.as_ref().map(Ground::query), p.road.as_ref())?;
            Ok(dets.into_iter().filter(|b| in_fov(b, fov)).collect())
        })
        .collect()
}

fn evaluate(
    det: &Detector,
    frames: &[Frame],
    priors: &[FramePriors],
    fov: Option<f64>,
    bins: &[RangeBin],
    iou: f64,
) -> Result<EvalReport> {
    let dets = detect_all(det, frames, priors, fov)?;
    Ok(report_for(frames, dets, bins, iou))
}

fn report_for(frames: &[Frame], dets: Vec<Vec<OrientedBox>>, bins: &[RangeBin], iou: f64) -> EvalReport {
    let evals: Vec<FrameEval> = frames
        .iter()
        .zip(dets)
        .map(|(f, d)| FrameEval {
            dets: d,
            gts: f.labels.clone(),
        })
        .collect();
    detection_report(&evals, bins, iou)
}

fn data_dir<'a>(flag: Option<&'a Path>, cfg: &'a ExperimentConfig) -> Result<&'a Path> {
    flag.or(cfg.data.val.as_deref())
        .ok_or_else(|| Error::Config("data.val: pass --data or set data.val".into()))
}

fn infer_cmd(cfg: &ExperimentConfig, threads: Option<usize>, data: Option<&Path>, out: &Path, dump: bool) -> Result<()> {
    let dir = data_dir(data, cfg)?;
    required(&cfg.weights.detector, "weights.detector")?;
    init_threads(threads, cfg.threads)?;
    let models = load_models(cfg)?;
    let (manifest, frames) = load_dataset(dir)?;
    let priors = priors_for(cfg, &models, &frames)?;
    let mut run = RunDir::create(out, "infer", config_value(cfg))?;
    run.input("data", dir);
    let dets = detect_all(&models.detector, &frames, &priors, fov_half_angle(&manifest)?)?;
    for (f, d) in frames.iter().zip(&dets) {
        let text = serde_json::to_string_pretty(d).expect("boxes serialize");
        run.write(&format!("dets/{}.json", f.id), text.as_bytes())?;
    }
    if dump {
        std::fs::create_dir_all(run.file("priors")).map_err(|e| Error::io(run.file("priors"), e))?;
        for (f, p) in frames.iter().zip(&priors) {
            if let Some(Ground::Raster(g)) = &p.ground {
                let name = format!("priors/{}.ground.json", f.id);
                write_ground_prior(&run.file(&name), &f.id, g)?;
                run.record(&name)?;
            }
            if let Some(r) = &p.road {
                let name = format!("priors/{}.road.pgm", f.id);
                write_road_pgm(&run.file(&name), r)?;
                run.record(&name)?;
            }
        }
    }
    run.finish()?;
    Ok(())
}

fn eval_cmd(
    cfg: &ExperimentConfig,
    threads: Option<usize>,
    data: Option<&Path>,
    dets_dir: Option<&Path>,
    out: &Path,
    formats: &[String],
) -> Result<()> {
    let dir = data_dir(data, cfg)?;
    let formats: Vec<ReportFormat> = if formats.is_empty() {
        vec![ReportFormat::Json, ReportFormat::Csv, ReportFormat::Svg]
    } else {
        formats
            .iter()
            .map(|f| f.parse())
            .collect::<Result<_>>()?
    };
    if dets_dir.is_none() {
        required(&cfg.weights.detector, "weights.detector")?;
    }
    init_threads(threads, cfg.threads)?;
    let (manifest, frames) = load_dataset(dir)?;
    let fov = fov_half_angle(&manifest)?;
    let dets = match dets_dir {
        Some(d) => frames
            .iter()
            .map(|f| {
                let boxes = read_labels_with_scores(&d.join("dets").join(format!("{}.json", f.id)))?;
                Ok(boxes.into_iter().filter(|b| in_fov(b, fov)).collect())
            })
            .collect::<Result<Vec<_>>>()?,
        None => {
            let models = load_models(cfg)?;
            let priors = priors_for(cfg, &models, &frames)?;
            detect_all(&models.detector, &frames, &priors, fov)?
        }
    };
    let mut run = RunDir::create(out, "eval", config_value(cfg))?;
    run.input("data", dir);
    if let Some(d) = dets_dir {
        run.input("dets", d);
    }
    let report = report_for(&frames, dets, &bins_of(cfg), cfg.eval.iou);
    for f in formats {
        let name = match f {
            ReportFormat::Json => "report.json",
            ReportFormat::Csv => "report.csv",
            ReportFormat::Svg => "pr_curve.svg",
        };
        emit_report(&report, &run.file(name), f)?;
        run.record(name)?;
    }
    run.finish()?;
    log::info!(
        "AP@{}: {} (interp40), {} (continuous)",
        cfg.eval.iou,
        report.overall.ap_interp40.map_or("-".into(), |a| format!("{a:.2}")),
        report.overall.ap_continuous.map_or("-".into(), |a| format!("{a:.2}"))
    );
    Ok(())
}

/// Detection files keep scores, which plain label loading also accepts.
fn read_labels_with_scores(path: &Path) -> Result<Vec<OrientedBox>> {
    read_labels(path)
}

/// NPY v1.0, little-endian float32, C order.
pub fn write_npy(path: &Path, shape: &[usize], data: &[f32]) -> Result<()> {
    let dims = shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", ");
    let dims = if shape.len() == 1 { format!("{dims},") } else { dims };
    let mut header = format!("{{'descr': '<f4', 'fortran_order': False, 'shape': ({dims}), }}");
    // magic (6) + version (2) + length (2) + header + newline, padded to 64
    let total = 10 + header.len() + 1;
    header.push_str(&" ".repeat((64 - total % 64) % 64));
    header.push('\n');
    let mut bytes = Vec::with_capacity(10 + header.len() + data.len() * 4);
    bytes.extend_from_slice(b"\x93NUMPY\x01\x00");
    bytes.extend_from_slice(&(header.len() as u16).to_le_bytes());
    bytes.extend_from_slice(header.as_bytes());
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

fn rasterize_dump(cfg: &ExperimentConfig, threads: Option<usize>, cloud: &Path, map: Option<&Path>, out: &Path) -> Result<()> {
    init_threads(threads, cfg.threads)?;
    let pc = hdnetbev::bevgrid::read_velodyne(cloud)?;
    let map = map.map(HdMap::load).transpose()?;
    let mut run = RunDir::create(out, "rasterize-dump", config_value(cfg))?;
    run.input("cloud", cloud);
    let t: BevTensor = rasterize_parallel(&pc, &cfg.bev, map.as_ref().map(|m| &m.ground as _));
    write_npy(&run.file("bev.npy"), &[t.channels, t.height, t.width], &t.data)?;
    run.record("bev.npy")?;
    let meta = json!({
        "shape": [t.channels, t.height, t.width],
        "bev": cfg.bev,
        "heightSlices": cfg.bev.height_slices(),
        "belowChannel": cfg.bev.below_channel(),
        "aboveChannel": cfg.bev.above_channel(),
        "intensityChannel": cfg.bev.intensity_channel(),
        "groundRelative": map.is_some(),
        "points": pc.len(),
    });
    run.write_json("bev.json", &meta)?;
    run.finish()?;
    Ok(())
}

fn kitti_import_cmd(velodyne: &Path, labels: &Path, calib: &Path, out: &Path) -> Result<()> {
    for (key, p) in [("velodyne", velodyne), ("labels", labels), ("calib", calib)] {
        if !p.is_dir() {
            return Err(Error::Config(format!("{key}: {} is not a directory", p.display())));
        }
    }
    let mut run = RunDir::create(out, "kitti-import", json!({}))?;
    run.input("velodyne", velodyne);
    run.input("labels", labels);
    run.input("calib", calib);
    let (manifest, summary) = kitti_import(velodyne, labels, calib, out)?;
    run.record(hdnetbev::dataset::MANIFEST_FILE)?;
    for f in &manifest.frames {
        for name in f.sha256.keys() {
            run.record(name)?;
        }
    }
    let skipped: BTreeMap<&str, &str> = summary.skipped.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
    run.write_json("skipped.json", &skipped)?;
    run.finish()?;
    log::info!("imported {} frames, skipped {}", summary.imported, summary.skipped.len());
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct Latency {
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p90_ms: f64,
    pub p99_ms: f64,
    pub max_ms: f64,
}

/// Nearest-rank percentiles.
pub fn latency(samples_ms: &[f64]) -> Latency {
    let mut s = samples_ms.to_vec();
    s.sort_by(f64::total_cmp);
    let pct = |p: f64| {
        let rank = ((p / 100.0) * s.len() as f64).ceil() as usize;
        s[rank.clamp(1, s.len()) - 1]
    };
    Latency {
        mean_ms: s.iter().sum::<f64>() / s.len() as f64,
        p50_ms: pct(50.0),
        p90_ms: pct(90.0),
        p99_ms: pct(99.0),
        max_ms: *s.last().expect("samples"),
    }
}

/// `n` points uniform over the grid volume.
pub fn random_cloud(bev: &BevConfig, n: usize, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pc = PointCloud::default();
    for _ in 0..n {
        let x = rng.random_range(bev.x_range.0..bev.x_range.1) as f32;
        let y = rng.random_range(bev.y_range.0..bev.y_range.1) as f32;
        let z = rng.random_range(bev.z_range.0..bev.z_range.1) as f32;
        pc.push([x, y, z], rng.random());
    }
    pc
}

fn time_ms<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let t = Instant::now();
    let v = f();
    (v, t.elapsed().as_secs_f64() * 1e3)
}

fn bench(cfg: &ExperimentConfig, threads: Option<usize>, points: usize, iters: usize, out: &Path) -> Result<()> {
    if points == 0 || iters == 0 {
        return Err(Error::Config("points and iters must be positive".into()));
    }
    let workers = init_threads(threads, cfg.threads)?;
    let detector = match &cfg.weights.detector {
        Some(p) => Detector::load(p)?,
        None => Detector {
            net: new_detector(&cfg.detector, cfg.detector.in_channels(&cfg.bev), 0)?,
            config: cfg.detector.clone(),
            stats: hdnetbev::detector::NormStats::IDENTITY,
            bev: cfg.bev,
        },
    };
    let bev = detector.bev;
    let cloud = random_cloud(&bev, points, 7);
    let road = Mask::filled(bev.rows(), bev.cols(), 1);
    let ground = hdnetbev::mapdata::GroundPlane { a: 0.0, b: 0.0, c: bev.z_range.0 };
    let ground_q = detector.config.ground_prior.then_some(&ground as &dyn hdnetbev::mapdata::GroundQuery);
    let mut single = Vec::new();
    let mut multi = Vec::new();
    let mut e2e = Vec::new();
    for _ in 0..iters {
        single.push(time_ms(|| rasterize(&cloud, &bev, None)).1);
        multi.push(time_ms(|| rasterize_parallel(&cloud, &bev, None)).1);
        let (r, ms) = time_ms(|| detector.detect_cloud(&cloud, ground_q, Some(&road)));
        r?;
        e2e.push(ms);
    }
    let mut run = RunDir::create(out, "bench", config_value(cfg))?;
    let report = json!({
        "points": points,
        "iters": iters,
        "threads": workers,
        "tensorShape": [bev.channels(), bev.rows(), bev.cols()],
        "rasterizeSingleThread": latency(&single),
        "rasterizeParallel": latency(&multi),
        "inference": latency(&e2e),
    });
    run.write_json("bench.json", &report)?;
    run.finish()?;
    println!("{}", serde_json::to_string_pretty(&report).expect("json"));
    Ok(())
}
