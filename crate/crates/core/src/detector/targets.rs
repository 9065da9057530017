use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DetectorConfig, OUTPUT_CHANNELS, REG_CHANNELS};
use crate::bevgrid::{BevConfig, BevTensor, Mask, OUTPUT_STRIDE};
use crate::error::{Error, Result};
use crate::geom::OrientedBox;
use crate::tensor::{bce_loss, focal_loss, smooth_l1, ClsTarget, FocalLossParams, Real, Tensor};

pub const STD_FLOOR: f64 = 1e-3;

/// Per-pixel training targets on the output grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetMaps {
    pub rows: usize,
    pub cols: usize,
    pub cls: Vec<ClsTarget>,
    /// `(pixel, raw regression target)` for every positive pixel, in pixel
    /// order.
    pub positives: Vec<(usize, [f64; REG_CHANNELS])>,
}

impl TargetMaps {
    pub fn count(&self, t: ClsTarget) -> usize {
        self.cls.iter().filter(|&&c| c == t).count()
    }

    /// Forces every pixel whose mask value is zero to `Ignore`.
    pub fn ignore_outside(&mut self, keep: &Mask) {
        assert!(keep.rows == self.rows && keep.cols == self.cols, "mask shape");
        for (c, &k) in self.cls.iter_mut().zip(&keep.data) {
            if k == 0 {
                *c = ClsTarget::Ignore;
            }
        }
        let cls = &self.cls;
        self.positives.retain(|(i, _)| cls[*i] == ClsTarget::Positive);
    }
}

/// Raw regression target of box `b` seen from output pixel center `q`:
/// `(cos 2θ, sin 2θ, cx - qx, cy - qy, ln w, ln l)`.
pub fn encode_box(b: &OrientedBox, q: (f64, f64)) -> [f64; REG_CHANNELS] {
    let (s, c) = (2.0 * b.theta).sin_cos();
    [c, s, b.cx - q.0, b.cy - q.1, b.w.ln(), b.l.ln()]
}

/// Inverse of [`encode_box`]; the heading lands in `[-pi/2, pi/2)`.
pub fn decode_box(t: &[f64; REG_CHANNELS], q: (f64, f64)) -> OrientedBox {
    let mut theta = 0.5 * t[1].atan2(t[0]);
    if theta >= PI / 2.0 {
        theta -= PI;
    }
    OrientedBox::new(q.0 + t[2], q.1 + t[3], t[5].exp(), t[4].exp(), theta)
}

/// Positive / ignore / negative labels by distance from each output pixel
/// center to the nearest box center, relative to that box's smaller side.
/// The output cell containing a box center is always positive, so every box
/// has at least one positive pixel even when cells are coarse relative to
/// the positive radius. Pixels outside `fov` are ignored.
pub fn assign_targets(labels: &[OrientedBox], bev: &BevConfig, fov: Option<&Mask>, cfg: &DetectorConfig) -> TargetMaps {
    let (rows, cols) = bev.output_dims();
    if let Some(m) = fov {
        assert!(m.rows == rows && m.cols == cols, "fov mask must match the output grid");
    }
    let mut cls = vec![ClsTarget::Negative; rows * cols];
    let mut owner = vec![usize::MAX; rows * cols];
    if !labels.is_empty() {
        for r in 0..rows {
            for c in 0..cols {
                let (qx, qy) = bev.output_cell_center(r, c);
                let (k, d) = labels
                    .iter()
                    .enumerate()
                    .map(|(k, b)| (k, (b.cx - qx).hypot(b.cy - qy)))
                    .min_by(|a, b| a.1.total_cmp(&b.1))
                    .expect("non-empty labels");
                let m = labels[k].w.min(labels[k].l);
                let i = r * cols + c;
                if d <= cfg.pos_radius * m {
                    cls[i] = ClsTarget::Positive;
                    owner[i] = k;
                } else if d <= cfg.ignore_radius * m {
                    cls[i] = ClsTarget::Ignore;
                }
            }
        }
        let cell_x = OUTPUT_STRIDE as f64 * bev.d_l;
        let cell_y = OUTPUT_STRIDE as f64 * bev.d_w;
        for (k, b) in labels.iter().enumerate() {
            let fr = ((b.cx - bev.x_range.0) / cell_x).floor();
            let fc = ((b.cy - bev.y_range.0) / cell_y).floor();
            if fr < 0.0 || fc < 0.0 || fr >= rows as f64 || fc >= cols as f64 {
                continue;
            }
            let i = fr as usize * cols + fc as usize;
            if cls[i] != ClsTarget::Positive {
                cls[i] = ClsTarget::Positive;
                owner[i] = k;
            }
        }
    }
    if let Some(m) = fov {
        for (t, &v) in cls.iter_mut().zip(&m.data) {
            if v == 0 {
                *t = ClsTarget::Ignore;
            }
        }
    }
    let positives = (0..rows * cols)
        .filter(|&i| cls[i] == ClsTarget::Positive)
        .map(|i| (i, encode_box(&labels[owner[i]], bev.output_cell_center(i / cols, i % cols))))
        .collect();
    TargetMaps { rows, cols, cls, positives }
}

/// Mean and standard deviation of each raw regression channel over the
/// positives of a training set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: [f64; REG_CHANNELS],
    pub std: [f64; REG_CHANNELS],
}

impl NormStats {
    pub const IDENTITY: NormStats = NormStats {
        mean: [0.0; REG_CHANNELS],
        std: [1.0; REG_CHANNELS],
    };

    pub fn standardize(&self, raw: &[f64; REG_CHANNELS]) -> [f64; REG_CHANNELS] {
        std::array::from_fn(|k| (raw[k] - self.mean[k]) / self.std[k])
    }

    pub fn destandardize(&self, t: &[f64; REG_CHANNELS]) -> [f64; REG_CHANNELS] {
        std::array::from_fn(|k| t[k] * self.std[k] + self.mean[k])
    }
}

pub fn compute_norm_stats(targets: &[TargetMaps]) -> Result<NormStats> {
    let all = || targets.iter().flat_map(|t| t.positives.iter().map(|(_, v)| v));
    let n = all().count();
    if n == 0 {
        return Err(Error::NoPositives);
    }
    let mut mean = [0.0; REG_CHANNELS];
    for v in all() {
        for k in 0..REG_CHANNELS {
            mean[k] += v[k];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = [0.0; REG_CHANNELS];
    for v in all() {
        for k in 0..REG_CHANNELS {
            var[k] += (v[k] - mean[k]).powi(2);
        }
    }
    let std = var.map(|s| (s / n as f64).sqrt().max(STD_FLOOR));
    Ok(NormStats { mean, std })
}

/// With probability `prob` zeroes the last (road) channel. Draws exactly
/// one number from `rng` per call. Returns whether the channel was dropped.
pub fn data_dropout<R: Rng>(input: &mut BevTensor, prob: f64, rng: &mut R) -> bool {
    let drop = rng.random::<f64>() < prob;
    if drop {
        let last = input.channels - 1;
        input.channel_mut(last).fill(0.0);
    }
    drop
}

/// Loss terms summed over a batch.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub cls: f64,
    pub reg: f64,
    /// Road-segmentation term of the multi-task variant.
    pub road: f64,
}

impl LossParts {
    pub fn total(&self, loss_weight: f64) -> f64 {
        self.cls + loss_weight * self.reg + self.road
    }
}

/// Targets of one frame as seen by the loss.
pub struct FrameTargets<'a> {
    pub maps: &'a TargetMaps,
    /// Output-grid road mask (0/1) for the multi-task head.
    pub road: Option<&'a [f32]>,
}

/// Focal loss over non-ignored pixels plus `loss_weight` times smooth-L1
/// over positives (standardized targets), plus `road_loss_weight` times the
/// per-cell mean road BCE when the output carries a road channel. Returns
/// the loss parts and the gradient with respect to the (post-sigmoid)
/// network output.
pub fn detection_loss<T: Real>(
    out: &Tensor<T>,
    targets: &[FrameTargets],
    stats: &NormStats,
    cfg: &DetectorConfig,
) -> Result<(LossParts, Tensor<T>)> {
    let (b, c, h, w) = out.dims4();
    let has_road = c == OUTPUT_CHANNELS + 1;
    if !(c == OUTPUT_CHANNELS || has_road) || b != targets.len() {
        return Err(Error::ShapeMismatch(format!(
            "detector output {:?} for {} frames of targets",
            out.shape,
            targets.len()
        )));
    }
    let focal = FocalLossParams::new(cfg.focal_alpha, cfg.focal_gamma)?;
    let hw = h * w;
    let mut grad = Tensor::zeros(&out.shape);
    let mut parts = LossParts::default();
    for (f, t) in targets.iter().enumerate() {
        if t.maps.rows != h || t.maps.cols != w {
            return Err(Error::ShapeMismatch(format!(
                "targets {}x{} vs output {h}x{w}",
                t.maps.rows, t.maps.cols
            )));
        }
        let base = f * c * hw;
        let (l, g) = focal_loss(&out.data[base..base + hw], &t.maps.cls, focal)?;
        parts.cls += l;
        grad.data[base..base + hw].copy_from_slice(&g);

        let n = t.maps.positives.len();
        if n > 0 {
            let mut pred = Vec::with_capacity(n * REG_CHANNELS);
            let mut want = Vec::with_capacity(n * REG_CHANNELS);
            for (i, raw) in &t.maps.positives {
                let z = stats.standardize(raw);
                for k in 0..REG_CHANNELS {
                    pred.push(out.data[base + (k + 1) * hw + i]);
                    want.push(T::from_f64(z[k]));
                }
            }
            let (l, g) = smooth_l1(&pred, &want, &vec![true; pred.len()])?;
            parts.reg += l;
            let lw = T::from_f64(cfg.loss_weight);
            for (j, (i, _)) in t.maps.positives.iter().enumerate() {
                for k in 0..REG_CHANNELS {
                    grad.data[base + (k + 1) * hw + i] = g[j * REG_CHANNELS + k] * lw;
                }
            }
        }

        if has_road {
            let road = t
                .road
                .ok_or_else(|| Error::ShapeMismatch("road channel present but no road target".into()))?;
            if road.len() != hw {
                return Err(Error::ShapeMismatch(format!("road target has {} cells, output {hw}", road.len())));
            }
            let off = base + OUTPUT_CHANNELS * hw;
            let (l, g) = bce_loss(&out.data[off..off + hw], road, None)?;
            let scale = cfg.road_loss_weight / hw as f64;
            parts.road += l * scale;
            let s = T::from_f64(scale);
            for (d, g) in grad.data[off..off + hw].iter_mut().zip(g) {
                *d = g * s;
            }
        }
    }
    Ok((parts, grad))
}
