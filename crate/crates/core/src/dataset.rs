//! On-disk frame collections: one velodyne `.bin`, one label JSON and an
//! optional map JSON per frame, indexed by `manifest.json` with SHA-256
//! checksums of every file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bevgrid::{read_velodyne, write_velodyne, PointCloud};
use crate::error::{Error, Result};
use crate::geom::OrientedBox;
use crate::mapdata::HdMap;
use crate::synthworld::{dataset_specs, generate_scene, SceneSpec};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "camelCase")]
pub struct FrameEntry {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub cloud: String,
    pub labels: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub map: Option<String>,
    /// File name -> lowercase hex SHA-256.
    pub sha256: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "camelCase")]
pub struct Manifest {
    pub version: u32,
    /// `"synthworld"` or `"kitti"`.
    pub source: String,
    /// Camera field-of-view half angle in degrees, when labels only cover
    /// a camera wedge.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fov_half_angle_deg: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene_template: Option<SceneSpec>,
    pub frames: Vec<FrameEntry>,
}

pub struct Frame {
    pub id: String,
    pub cloud: PointCloud,
    pub labels: Vec<OrientedBox>,
    pub map: Option<HdMap>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

pub fn labels_to_json(labels: &[OrientedBox]) -> String {
    let plain: Vec<OrientedBox> = labels
        .iter()
        .map(|b| OrientedBox { score: None, ..*b })
        .collect();
    serde_json::to_string_pretty(&plain).expect("boxes serialize")
}

pub fn write_labels(path: &Path, labels: &[OrientedBox]) -> Result<()> {
    fs::write(path, labels_to_json(labels)).map_err(|e| Error::io(path, e))
}

pub fn read_labels(path: &Path) -> Result<Vec<OrientedBox>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let boxes: Vec<OrientedBox> = serde_json::from_str(&text).map_err(|e| Error::parse(path, e))?;
    if let Some(b) = boxes.iter().find(|b| !b.is_valid()) {
        return Err(Error::parse(path, format!("invalid box {b:?}")));
    }
    Ok(boxes)
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::parse(&path, e))?;
        let found = value.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if found != MANIFEST_VERSION {
            return Err(Error::Version {
                path,
                found,
                expected: MANIFEST_VERSION,
            });
        }
        serde_json::from_value(value).map_err(|e| Error::parse(&path, e))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    /// Recomputes every checksum; returns the files that do not match.
    pub fn verify(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let mut bad = Vec::new();
        for f in &self.frames {
            for (name, digest) in &f.sha256 {
                let path = dir.join(name);
                if &file_digest(&path)? != digest {
                    bad.push(path);
                }
            }
        }
        Ok(bad)
    }

    pub fn load_frame(&self, dir: &Path, i: usize) -> Result<Frame> {
        let e = &self.frames[i];
        Ok(Frame {
            id: e.id.clone(),
            cloud: read_velodyne(&dir.join(&e.cloud))?,
            labels: read_labels(&dir.join(&e.labels))?,
            map: e.map.as_ref().map(|m| HdMap::load(&dir.join(m))).transpose()?,
        })
    }
}

/// Writes one frame's files under `dir` and returns its manifest entry.
pub fn write_frame(
    dir: &Path,
    id: &str,
    seed: Option<u64>,
    cloud: &PointCloud,
    labels: &[OrientedBox],
    map: Option<&HdMap>,
) -> Result<FrameEntry> {
    let cloud_name = format!("{id}.bin");
    let labels_name = format!("{id}.labels.json");
    write_velodyne(&dir.join(&cloud_name), cloud)?;
    write_labels(&dir.join(&labels_name), labels)?;
    let mut names = vec![cloud_name.clone(), labels_name.clone()];
    let map_name = match map {
        Some(m) => {
            let name = format!("{id}.map.json");
            m.save(&dir.join(&name))?;
            names.push(name.clone());
            Some(name)
        }
        None => None,
    };
    let mut sha256 = BTreeMap::new();
    for n in names {
        sha256.insert(n.clone(), file_digest(&dir.join(&n))?);
    }
    Ok(FrameEntry {
        id: id.to_string(),
        seed,
        cloud: cloud_name,
        labels: labels_name,
        map: map_name,
        sha256,
    })
}

/// Generates `n` scenes with seeds `base_seed ..` and writes them plus a
/// manifest into `dir`. Scenes are generated in parallel; output does not
/// depend on the worker count.
pub fn generate_dataset(dir: &Path, n: usize, base_seed: u64, template: &SceneSpec) -> Result<Manifest> {
    if n == 0 {
        return Err(Error::Config("dataset needs at least one scene".into()));
    }
    template.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let specs = dataset_specs(n, base_seed, template);
    let frames = specs
        .par_iter()
        .enumerate()
        .map(|(i, spec)| {
            let scene = generate_scene(spec)?;
            write_frame(dir, &format!("{i:06}"), Some(spec.seed), &scene.cloud, &scene.labels(), Some(&scene.map))
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        source: "synthworld".into(),
        fov_half_angle_deg: None,
        scene_template: Some(template.clone()),
        frames,
    };
    manifest.save(dir)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthworld::LidarSpec;

    fn template() -> SceneSpec {
        let lidar = LidarSpec {
            azimuth_step: 2.0,
            elevation_angles: vec![-15.0, -10.0, -5.0, -2.0],
            range_noise_sigma: 0.02,
            max_range: 60.0,
            azimuth_range: (-45.0, 45.0),
            sensor_height: 1.8,
        };
        SceneSpec::new(0, 1.0, 5.0, 0.002, 3, lidar)
    }

    #[test]
    fn dataset_round_trip_and_checksums() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_dataset(dir.path(), 3, 40, &template()).unwrap();
        assert_eq!(m.frames.len(), 3);
        assert!(m.frames.iter().all(|f| f.sha256.len() == 3));
        assert!(m.verify(dir.path()).unwrap().is_empty());
        let loaded = Manifest::load(dir.path()).unwrap();
        assert_eq!(loaded, m);
        let scene = generate_scene(&SceneSpec {
            seed: 41,
            ..template()
        })
        .unwrap();
        let f = loaded.load_frame(dir.path(), 1).unwrap();
        assert_eq!(f.cloud, scene.cloud);
        assert_eq!(f.labels, scene.labels());
        assert_eq!(f.map.unwrap(), scene.map);

        fs::write(dir.path().join(&m.frames[0].labels), "[]").unwrap();
        assert_eq!(m.verify(dir.path()).unwrap().len(), 1);
    }

    #[test]
    fn regeneration_is_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ma = generate_dataset(a.path(), 2, 7, &template()).unwrap();
        let mb = generate_dataset(b.path(), 2, 7, &template()).unwrap();
        assert_eq!(ma, mb);
    }

    #[test]
    fn manifest_version_checked() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(MANIFEST_FILE), r#"{"version":2,"source":"x","frames":[]}"#).unwrap();
        assert!(matches!(Manifest::load(dir.path()), Err(Error::Version { found: 2, .. })));
    }
}
