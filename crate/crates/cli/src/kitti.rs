//! KITTI object-detection layout to the internal dataset format.

use std::fs;
use std::path::Path;

use hdnetbev::bevgrid::read_velodyne;
use hdnetbev::dataset::{write_frame, Manifest, MANIFEST_VERSION};
use hdnetbev::geom::OrientedBox;
use hdnetbev::{Error, Result};

type Mat3 = [[f64; 3]; 3];

/// The calibration matrices the importer needs.
#[derive(Debug, Clone, PartialEq)]
pub struct Calib {
    /// Left color camera projection, 3x4.
    pub p2: [[f64; 4]; 3],
    pub r0_rect: Mat3,
    /// Rigid LiDAR-to-camera transform, 3x4.
    pub tr_velo_to_cam: [[f64; 4]; 3],
}

fn parse_values(line: &str, n: usize, key: &str) -> std::result::Result<Vec<f64>, String> {
    let vals: std::result::Result<Vec<f64>, _> = line.split_whitespace().map(str::parse).collect();
    let vals = vals.map_err(|e| format!("{key}: {e}"))?;
    if vals.len() != n {
        return Err(format!("{key}: expected {n} values, got {}", vals.len()));
    }
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(format!("{key}: non-finite value"));
    }
    Ok(vals)
}

fn det3(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

fn inv3(m: &Mat3) -> Option<Mat3> {
    let d = det3(m);
    if !(d.abs() > 1e-9) {
        return None;
    }
    let c = |r0: usize, c0: usize, r1: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
    Some([
        [c(1, 1, 2, 2) / d, -c(0, 1, 2, 2) / d, c(0, 1, 1, 2) / d],
        [-c(1, 0, 2, 2) / d, c(0, 0, 2, 2) / d, -c(0, 0, 1, 2) / d],
        [c(1, 0, 2, 1) / d, -c(0, 0, 2, 1) / d, c(0, 0, 1, 1) / d],
    ])
}

fn mul(m: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|r| m[r][0] * v[0] + m[r][1] * v[1] + m[r][2] * v[2])
}

impl Calib {
    /// Parses `key: values` lines; `R0_rect`, `Tr_velo_to_cam` and `P2` are
    /// required and checked for consistency.
    pub fn parse(text: &str) -> std::result::Result<Calib, String> {
        let mut p2 = None;
        let mut r0 = None;
        let mut tr = None;
        for line in text.lines() {
            let Some((key, rest)) = line.split_once(':') else { continue };
            match key.trim() {
                "P2" => p2 = Some(parse_values(rest, 12, "P2")?),
                "R0_rect" => r0 = Some(parse_values(rest, 9, "R0_rect")?),
                "Tr_velo_to_cam" => tr = Some(parse_values(rest, 12, "Tr_velo_to_cam")?),
                _ => {}
            }
        }
        let p2 = p2.ok_or("missing P2")?;
        let r0 = r0.ok_or("missing R0_rect")?;
        let tr = tr.ok_or("missing Tr_velo_to_cam")?;
        let calib = Calib {
            p2: [0, 1, 2].map(|r| [0, 1, 2, 3].map(|c| p2[r * 4 + c])),
            r0_rect: [0, 1, 2].map(|r| [0, 1, 2].map(|c| r0[r * 3 + c])),
            tr_velo_to_cam: [0, 1, 2].map(|r| [0, 1, 2, 3].map(|c| tr[r * 4 + c])),
        };
        if (det3(&calib.r0_rect) - 1.0).abs() > 1e-2 {
            return Err(format!("R0_rect is not a rotation (det {})", det3(&calib.r0_rect)));
        }
        if (det3(&calib.rotation()) - 1.0).abs() > 1e-2 {
            return Err("Tr_velo_to_cam rotation part is not a rotation".into());
        }
        if !(calib.p2[0][0] > 0.0) || !(calib.p2[0][2] > 0.0) {
            return Err("P2 has a non-positive focal length or principal point".into());
        }
        Ok(calib)
    }

    fn rotation(&self) -> Mat3 {
        [0, 1, 2].map(|r| [0, 1, 2].map(|c| self.tr_velo_to_cam[r][c]))
    }

    /// Rectified camera coordinates to the LiDAR frame.
    pub fn rect_to_velo(&self, p: [f64; 3]) -> [f64; 3] {
        let r0_inv = inv3(&self.r0_rect).expect("checked at parse");
        let cam = mul(&r0_inv, p);
        let t = [0, 1, 2].map(|r| self.tr_velo_to_cam[r][3]);
        // rigid inverse: R^T (x - t)
        let d = [cam[0] - t[0], cam[1] - t[1], cam[2] - t[2]];
        let r = self.rotation();
        [0, 1, 2].map(|c| r[0][c] * d[0] + r[1][c] * d[1] + r[2][c] * d[2])
    }

    /// Horizontal half angle of the left color camera, from the principal
    /// point to the image border at `x = 2 cx`.
    pub fn fov_half_angle_deg(&self) -> f64 {
        (self.p2[0][2] / self.p2[0][0]).atan().to_degrees()
    }
}

/// One parsed label line.
#[derive(Debug, Clone, PartialEq)]
pub struct KittiLabel {
    pub kind: String,
    pub truncation: f64,
    pub occlusion: i32,
    pub alpha: f64,
    pub bbox: [f64; 4],
    /// Height, width, length in meters.
    pub dims: [f64; 3],
    /// Bottom center in rectified camera coordinates.
    pub location: [f64; 3],
    pub rotation_y: f64,
}

impl KittiLabel {
    pub fn parse(line: &str) -> std::result::Result<KittiLabel, String> {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() < 15 {
            return Err(format!("label line has {} fields, need 15", f.len()));
        }
        let num = |i: usize| f[i].parse::<f64>().map_err(|e| format!("field {i} ({:?}): {e}", f[i]));
        Ok(KittiLabel {
            kind: f[0].to_string(),
            truncation: num(1)?,
            occlusion: f[2].parse().map_err(|e| format!("field 2 ({:?}): {e}", f[2]))?,
            alpha: num(3)?,
            bbox: [num(4)?, num(5)?, num(6)?, num(7)?],
            dims: [num(8)?, num(9)?, num(10)?],
            location: [num(11)?, num(12)?, num(13)?],
            rotation_y: num(14)?,
        })
    }

    /// BEV box in the LiDAR frame. The heading at `ry = 0` points along the
    /// camera x axis.
    pub fn to_lidar_box(&self, calib: &Calib) -> Option<OrientedBox> {
        let c = calib.rect_to_velo(self.location);
        let tip = [
            self.location[0] + self.rotation_y.cos(),
            self.location[1],
            self.location[2] - self.rotation_y.sin(),
        ];
        let t = calib.rect_to_velo(tip);
        let theta = (t[1] - c[1]).atan2(t[0] - c[0]);
        let [_, w, l] = self.dims;
        (l > 0.0 && w > 0.0 && c.iter().all(|v| v.is_finite())).then(|| OrientedBox::new(c[0], c[1], l, w, theta))
    }
}

pub const KEEP_CLASS: &str = "Car";

/// Cars of one label file in the LiDAR frame.
pub fn import_labels(text: &str, calib: &Calib) -> std::result::Result<Vec<OrientedBox>, String> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let l = KittiLabel::parse(line).map_err(|e| format!("line {}: {e}", i + 1))?;
        if l.kind != KEEP_CLASS {
            continue;
        }
        out.push(l.to_lidar_box(calib).ok_or_else(|| format!("line {}: degenerate box", i + 1))?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImportSummary {
    pub imported: usize,
    /// Frame id and reason.
    pub skipped: Vec<(String, String)>,
}

/// Imports every `velodyne/*.bin` that has a label and calibration file.
/// Frames with unusable calibration or labels are skipped and logged.
pub fn kitti_import(velodyne: &Path, labels: &Path, calib: &Path, out: &Path) -> Result<(Manifest, ImportSummary)> {
    let mut ids: Vec<String> = fs::read_dir(velodyne)
        .map_err(|e| Error::io(velodyne, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let p = e.path();
            (p.extension().is_some_and(|x| x == "bin")).then(|| p.file_stem().unwrap().to_string_lossy().into_owned())
        })
        .collect();
    ids.sort();
    if ids.is_empty() {
        return Err(Error::DegenerateInput(format!("no .bin files in {}", velodyne.display())));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut frames = Vec::new();
    let mut skipped = Vec::new();
    let mut fov = None;
    for id in ids {
        let calib_path = calib.join(format!("{id}.txt"));
        let label_path = labels.join(format!("{id}.txt"));
        let parsed = fs::read_to_string(&calib_path)
            .map_err(|e| format!("calibration {}: {e}", calib_path.display()))
            .and_then(|t| Calib::parse(&t).map_err(|e| format!("calibration {}: {e}", calib_path.display())))
            .and_then(|c| {
                let text =
                    fs::read_to_string(&label_path).map_err(|e| format!("labels {}: {e}", label_path.display()))?;
                let boxes = import_labels(&text, &c).map_err(|e| format!("labels {}: {e}", label_path.display()))?;
                Ok((c, boxes))
            });
        let (c, boxes) = match parsed {
            Ok(v) => v,
            Err(reason) => {
                log::warn!("skipping frame {id}: {reason}");
                skipped.push((id, reason));
                continue;
            }
        };
        let cloud = read_velodyne(&velodyne.join(format!("{id}.bin")))?;
        fov.get_or_insert(c.fov_half_angle_deg());
        frames.push(write_frame(out, &id, None, &cloud, &boxes, None)?);
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        source: "kitti".into(),
        fov_half_angle_deg: fov,
        scene_template: None,
        frames,
    };
    manifest.save(out)?;
    let summary = ImportSummary {
        imported: manifest.frames.len(),
        skipped,
    };
    Ok((manifest, summary))
}
