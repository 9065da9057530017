//! Experiment configuration: presets, JSON files, flag overrides and
//! validation.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use hdnetbev::bevgrid::BevConfig;
use hdnetbev::detector::{DetectorConfig, RoadFusion, TrainHyper};
use hdnetbev::evalkit::DEFAULT_IOU;
use hdnetbev::mapnet::UNetConfig;
use hdnetbev::synthworld::SceneSpec;
use hdnetbev::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::experiments::{DeskConfig, GroundSource};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MapMode {
    /// No map priors.
    None,
    /// Priors from the dataset's HD maps.
    Offline,
    /// Priors estimated by the map nets.
    Online,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Kitti,
    Tor4dLike,
    Desk,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kitti" => Ok(Preset::Kitti),
            "tor4d-like" => Ok(Preset::Tor4dLike),
            "desk" => Ok(Preset::Desk),
            _ => Err(Error::Config(format!("unknown preset {s:?} (kitti, tor4d-like, desk)"))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "camelCase")]
pub struct DataPaths {
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "camelCase")]
pub struct WeightPaths {
    pub detector: Option<PathBuf>,
    pub ground_net: Option<PathBuf>,
    pub road_net: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "camelCase")]
pub struct EvalSettings {
    pub iou: f64,
    /// Range bin edges in meters; consecutive pairs form the bins.
    pub bin_edges: Vec<f64>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            iou: DEFAULT_IOU,
            bin_edges: vec![0.0, 30.0, 50.0, 70.0],
        }
    }
}

/// Everything a subcommand needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "camelCase")]
pub struct ExperimentConfig {
    pub bev: BevConfig,
    pub detector: DetectorConfig,
    pub train: TrainHyper,
    pub map_mode: MapMode,
    /// Ground used by detectors with a ground prior in offline mode.
    pub ground_source: GroundSource,
    pub map_bev: BevConfig,
    pub unet: UNetConfig,
    pub map_train: TrainHyper,
    pub scene: SceneSpec,
    pub data: DataPaths,
    pub weights: WeightPaths,
    pub eval: EvalSettings,
    /// When set, replaces `train.seed`, `mapTrain.seed` and `scene.seed`.
    pub seed: Option<u64>,
    pub threads: Option<usize>,
}

impl ExperimentConfig {
    pub fn preset(p: Preset) -> Self {
        let desk = DeskConfig::standard();
        let base = ExperimentConfig {
            bev: desk.bev,
            detector: desk.detector.clone(),
            train: desk.hyper.clone(),
            map_mode: MapMode::None,
            ground_source: GroundSource::Map,
            map_bev: desk.map_bev,
            unet: desk.unet.clone(),
            map_train: desk.map_hyper.clone(),
            scene: desk.scene.clone(),
            data: DataPaths::default(),
            weights: WeightPaths::default(),
            eval: EvalSettings::default(),
            seed: None,
            threads: None,
        };
        match p {
            Preset::Desk => base,
            Preset::Kitti => {
                let bev = BevConfig::kitti();
                ExperimentConfig {
                    bev,
                    map_bev: BevConfig { z_range: (-4.0, 2.0), ..bev },
                    detector: DetectorConfig::default(),
                    train: TrainHyper::default(),
                    unet: UNetConfig::default(),
                    ..base
                }
            }
            Preset::Tor4dLike => {
                let bev = BevConfig::tor4d();
                ExperimentConfig {
                    bev,
                    map_bev: BevConfig { z_range: (-4.0, 3.4), ..bev },
                    detector: DetectorConfig::default(),
                    train: TrainHyper {
                        lr: 0.02,
                        ..TrainHyper::default()
                    },
                    unet: UNetConfig::default(),
                    ..base
                }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ctx = |key: &str, e: Error| match e {
            Error::Config(m) => Error::Config(format!("{key}: {m}")),
            e => e,
        };
        self.bev.validate().map_err(|e| ctx("bev", e))?;
        self.map_bev.validate().map_err(|e| ctx("mapBev", e))?;
        self.detector.validate().map_err(|e| ctx("detector", e))?;
        self.train.validate().map_err(|e| ctx("train", e))?;
        self.unet.validate().map_err(|e| ctx("unet", e))?;
        self.map_train.validate().map_err(|e| ctx("mapTrain", e))?;
        self.scene.validate().map_err(|e| ctx("scene", e))?;
        if self.threads == Some(0) {
            return Err(Error::Config("threads: must be at least 1".into()));
        }
        if !(self.eval.iou > 0.0 && self.eval.iou <= 1.0) {
            return Err(Error::Config(format!("eval.iou: {} is outside (0, 1]", self.eval.iou)));
        }
        if self.eval.bin_edges.len() < 2 || self.eval.bin_edges.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Config("eval.binEdges: need at least two increasing edges".into()));
        }
        if (self.bev.x_range, self.bev.y_range, self.bev.d_l, self.bev.d_w)
            != (self.map_bev.x_range, self.map_bev.y_range, self.map_bev.d_l, self.map_bev.d_w)
        {
            return Err(Error::Config("mapBev: x/y extent and resolution must match bev".into()));
        }
        let uses_map = self.detector.ground_prior || self.detector.road_fusion != RoadFusion::None;
        match self.map_mode {
            MapMode::None if uses_map => Err(Error::Config(
                "mapMode: detector uses map priors (detector.groundPrior or detector.roadFusion) but mapMode is none".into(),
            )),
            MapMode::Online if self.weights.ground_net.is_none() || self.weights.road_net.is_none() => Err(Error::Config(
                "weights.groundNet, weights.roadNet: online map mode needs both map net weights".into(),
            )),
            MapMode::Online if self.ground_source == GroundSource::Plane => {
                Err(Error::Config("groundSource: plane priors are not available in online mode".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn ground_source(&self) -> GroundSource {
        if self.detector.ground_prior {
            self.ground_source
        } else {
            GroundSource::None
        }
    }
}

/// Recursive merge; objects merge key by key, everything else replaces.
pub fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// Sets `path` (dot separated) in `root` to `value`, creating objects as
/// needed.
pub fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("bad key path {path:?}")));
    }
    for k in &keys[..keys.len() - 1] {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("{path}: {k} is not an object")))?;
        cur = obj.entry(k.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    let obj = cur
        .as_object_mut()
        .ok_or_else(|| Error::Config(format!("{path}: parent is not an object")))?;
    obj.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

/// `key.path=value`; values parse as JSON and fall back to strings.
pub fn parse_override(s: &str) -> Result<(String, Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {s:?} is not key=value")))?;
    let v = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), v))
}

/// Deserializes with the failing key path in the error.
pub fn from_value(v: Value) -> Result<ExperimentConfig> {
    serde_path_to_error::deserialize(v).map_err(|e| {
        let path = e.path().to_string();
        Error::Config(format!("{path}: {}", e.into_inner()))
    })
}

/// Preset, then the file, then overrides; the result is validated.
pub fn load_config(preset: Preset, file: Option<&Path>, overrides: &[(String, Value)]) -> Result<ExperimentConfig> {
    let mut v = serde_json::to_value(ExperimentConfig::preset(preset)).expect("config serializes");
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let file_v: Value =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if !file_v.is_object() {
            return Err(Error::Config(format!("{}: top level must be an object", path.display())));
        }
        merge(&mut v, file_v);
    }
    for (k, val) in overrides {
        set_path(&mut v, k, val.clone())?;
    }
    let mut cfg = from_value(v)?;
    if let Some(seed) = cfg.seed {
        cfg.train.seed = seed;
        cfg.map_train.seed = seed;
        cfg.scene.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}
