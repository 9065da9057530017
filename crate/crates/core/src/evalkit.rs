//! Detection matching, average precision, range-binned evaluation, map
//! estimation metrics and report files.
//!
//! AP functions return fractions in `[0, 1]`; [`EvalReport`] stores
//! percentages.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bevgrid::{BevConfig, Grid2, Mask};
use crate::error::{Error, Result};
use crate::geom::{rotated_iou, OrientedBox};

pub const DEFAULT_IOU: f64 = 0.7;
pub const INTERP_POINTS: usize = 40;

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// Per detection, in input order.
    pub tp: Vec<bool>,
    pub matched_gt: Vec<Option<usize>>,
    pub gt_matched: Vec<bool>,
    pub iou_thresh: f64,
}

/// Indices of `dets` by descending score; ties keep input order.
fn score_order(dets: &[OrientedBox]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| {
        let si = dets[i].score.unwrap_or(0.0);
        let sj = dets[j].score.unwrap_or(0.0);
        sj.total_cmp(&si).then(i.cmp(&j))
    });
    order
}

/// Greedy matching: in descending score order each detection takes the
/// unmatched ground truth of highest IoU, if that IoU reaches the threshold.
pub fn match_detections(dets: &[OrientedBox], gts: &[OrientedBox], iou_thresh: f64) -> MatchResult {
    let mut tp = vec![false; dets.len()];
    let mut matched_gt = vec![None; dets.len()];
    let mut gt_matched = vec![false; gts.len()];
    for i in score_order(dets) {
        let best = gts
            .iter()
            .enumerate()
            .filter(|(g, _)| !gt_matched[*g])
            .map(|(g, gt)| (g, rotated_iou(&dets[i], gt)))
            .filter(|&(_, iou)| iou >= iou_thresh)
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
        if let Some((g, _)) = best {
            tp[i] = true;
            matched_gt[i] = Some(g);
            gt_matched[g] = true;
        }
    }
    MatchResult {
        tp,
        matched_gt,
        gt_matched,
        iou_thresh,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ApMode {
    Interp40,
    Continuous,
}

/// `(recall, precision)` after each detection, for `(score, is_tp)` pairs
/// pooled over a dataset. Pairs are ranked by descending score; ties keep
/// the given order.
pub fn pr_curve(scored: &[(f64, bool)], n_gt: usize) -> Vec<(f64, f64)> {
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&i, &j| scored[j].0.total_cmp(&scored[i].0).then(i.cmp(&j)));
    let mut tp = 0usize;
    order
        .iter()
        .enumerate()
        .map(|(k, &i)| {
            tp += scored[i].1 as usize;
            (tp as f64 / n_gt as f64, tp as f64 / (k + 1) as f64)
        })
        .collect()
}

/// Precision envelope: the best precision at recall `>= r`.
fn envelope(curve: &[(f64, f64)], r: f64) -> f64 {
    curve
        .iter()
        .filter(|(rec, _)| *rec >= r - 1e-12)
        .map(|(_, p)| *p)
        .fold(0.0, f64::max)
}

pub fn average_precision(scored: &[(f64, bool)], n_gt: usize, mode: ApMode) -> Result<f64> {
    if n_gt == 0 {
        return Err(Error::NoGroundTruth);
    }
    let curve = pr_curve(scored, n_gt);
    Ok(match mode {
        ApMode::Interp40 => {
            (1..=INTERP_POINTS)
                .map(|k| envelope(&curve, k as f64 / INTERP_POINTS as f64))
                .sum::<f64>()
                / INTERP_POINTS as f64
        }
        ApMode::Continuous => {
            // the envelope is a step function that changes only at the
            // recall levels reached by some detection
            let mut levels: Vec<f64> = curve.iter().map(|c| c.0).collect();
            levels.dedup();
            let mut prev = 0.0;
            let mut area = 0.0;
            for r in levels {
                if r > prev {
                    area += (r - prev) * envelope(&curve, r);
                    prev = r;
                }
            }
            area
        }
    })
}

/// One frame's detections and ground truth.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FrameEval {
    pub dets: Vec<OrientedBox>,
    pub gts: Vec<OrientedBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ApSummary {
    pub n_gt: usize,
    pub n_det: usize,
    pub ap_interp40: f64,
    pub ap_continuous: f64,
    pub pr: Vec<(f64, f64)>,
}

/// Matches every frame and pools the scored matches.
pub fn evaluate(frames: &[FrameEval], iou_thresh: f64) -> Result<ApSummary> {
    let mut scored = Vec::new();
    let mut n_gt = 0;
    for f in frames {
        let m = match_detections(&f.dets, &f.gts, iou_thresh);
        n_gt += f.gts.len();
        scored.extend(f.dets.iter().zip(&m.tp).map(|(d, &tp)| (d.score.unwrap_or(0.0), tp)));
    }
    Ok(ApSummary {
        n_gt,
        n_det: scored.len(),
        ap_interp40: average_precision(&scored, n_gt, ApMode::Interp40)?,
        ap_continuous: average_precision(&scored, n_gt, ApMode::Continuous)?,
        pr: pr_curve(&scored, n_gt),
    })
}

/// Half-open range interval `[lo, hi)` on the ground-plane distance from
/// the sensor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RangeBin {
    pub lo: f64,
    pub hi: f64,
}

impl RangeBin {
    pub fn new(lo: f64, hi: f64) -> Self {
        assert!(hi > lo, "empty range bin");
        RangeBin { lo, hi }
    }

    pub fn contains(&self, r: f64) -> bool {
        r >= self.lo && r < self.hi
    }
}

/// `n` consecutive bins of `width` meters from 0.
pub fn uniform_bins(n: usize, width: f64) -> Vec<RangeBin> {
    (0..n)
        .map(|i| RangeBin::new(i as f64 * width, (i + 1) as f64 * width))
        .collect()
}

/// 0-70, 30-50 and 50-70 m.
pub fn coarse_bins() -> Vec<RangeBin> {
    vec![RangeBin::new(0.0, 70.0), RangeBin::new(30.0, 50.0), RangeBin::new(50.0, 70.0)]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct BinResult {
    pub bin: RangeBin,
    pub n_gt: usize,
    pub n_det: usize,
    /// `None` when the bin holds no ground truth.
    pub ap_interp40: Option<f64>,
    pub ap_continuous: Option<f64>,
}

/// Evaluation restricted, per bin, to detections and ground truth whose
/// center range falls in the bin.
pub fn range_binned_eval(frames: &[FrameEval], bins: &[RangeBin], iou_thresh: f64) -> Vec<BinResult> {
    bins.iter()
        .map(|bin| {
            let sub: Vec<FrameEval> = frames
                .iter()
                .map(|f| FrameEval {
                    dets: f.dets.iter().filter(|b| bin.contains(b.range())).copied().collect(),
                    gts: f.gts.iter().filter(|b| bin.contains(b.range())).copied().collect(),
                })
                .collect();
            let n_det = sub.iter().map(|f| f.dets.len()).sum();
            match evaluate(&sub, iou_thresh) {
                Ok(s) => BinResult {
                    bin: *bin,
                    n_gt: s.n_gt,
                    n_det,
                    ap_interp40: Some(s.ap_interp40),
                    ap_continuous: Some(s.ap_continuous),
                },
                Err(_) => BinResult {
                    bin: *bin,
                    n_gt: 0,
                    n_det,
                    ap_interp40: None,
                    ap_continuous: None,
                },
            }
        })
        .collect()
}

/// Mean absolute height error over masked pixels, per range bin of the
/// pixel center; `None` for bins without masked pixels.
pub fn ground_error_by_range(
    pred: &Grid2<f32>,
    gt: &Grid2<f32>,
    mask: &Mask,
    bev: &BevConfig,
    bins: &[RangeBin],
) -> Result<Vec<Option<f64>>> {
    Ok(ground_error_sums(pred, gt, mask, bev, bins)?
        .iter()
        .map(|&(s, n)| (n > 0).then(|| s / n as f64))
        .collect())
}

/// Per-bin sum of absolute errors and masked pixel count, for pooling over
/// frames.
pub fn ground_error_sums(
    pred: &Grid2<f32>,
    gt: &Grid2<f32>,
    mask: &Mask,
    bev: &BevConfig,
    bins: &[RangeBin],
) -> Result<Vec<(f64, usize)>> {
    if !pred.same_shape(gt) || !pred.same_shape(mask) || pred.rows != bev.rows() || pred.cols != bev.cols() {
        return Err(Error::ShapeMismatch(format!(
            "ground error: pred {}x{}, gt {}x{}, mask {}x{}, grid {}x{}",
            pred.rows,
            pred.cols,
            gt.rows,
            gt.cols,
            mask.rows,
            mask.cols,
            bev.rows(),
            bev.cols()
        )));
    }
    let mut sum = vec![0.0; bins.len()];
    let mut count = vec![0usize; bins.len()];
    for r in 0..pred.rows {
        for c in 0..pred.cols {
            if mask.get(r, c) == 0 {
                continue;
            }
            let (x, y) = bev.cell_center(r, c);
            let range = x.hypot(y);
            let err = (pred.get(r, c) as f64 - gt.get(r, c) as f64).abs();
            for (k, b) in bins.iter().enumerate() {
                if b.contains(range) {
                    sum[k] += err;
                    count[k] += 1;
                }
            }
        }
    }
    Ok(sum.into_iter().zip(count).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SegMetrics {
    pub pixel_accuracy: f64,
    /// Road-class IoU; `None` when both masks are empty.
    pub iou: Option<f64>,
}

pub fn segmentation_metrics(pred: &Mask, gt: &Mask) -> Result<SegMetrics> {
    if !pred.same_shape(gt) || pred.data.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "segmentation: pred {}x{} vs gt {}x{}",
            pred.rows, pred.cols, gt.rows, gt.cols
        )));
    }
    let (mut correct, mut inter, mut union) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        let (p, g) = (p != 0, g != 0);
        correct += (p == g) as usize;
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    Ok(SegMetrics {
        pixel_accuracy: correct as f64 / pred.data.len() as f64,
        iou: (union > 0).then(|| inter as f64 / union as f64),
    })
}

/// One row of a detection report; AP in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "camelCase")]
pub struct ReportRow {
    pub bin_lo: f64,
    /// `None` for an unbounded row.
    pub bin_hi: Option<f64>,
    pub n_gt: usize,
    pub n_det: usize,
    pub ap_interp40: Option<f64>,
    pub ap_continuous: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "camelCase")]
pub struct GroundBinRow {
    pub bin_lo: f64,
    pub bin_hi: f64,
    /// Mean absolute error in meters.
    pub l1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "camelCase")]
pub struct EvalReport {
    pub iou_thresh: f64,
    pub overall: ReportRow,
    pub bins: Vec<ReportRow>,
    /// `(recall, precision)` samples of the overall curve.
    pub pr_curve: Vec<(f64, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_l1: Option<Vec<GroundBinRow>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segmentation: Option<SegMetrics>,
}

const PR_SAMPLES: usize = 101;

/// Overall and per-bin detection results for a dataset. Frames without
/// any ground truth still contribute false positives.
pub fn detection_report(frames: &[FrameEval], bins: &[RangeBin], iou_thresh: f64) -> EvalReport {
    let pct = |v: f64| 100.0 * v;
    let n_det = frames.iter().map(|f| f.dets.len()).sum();
    let (overall, pr) = match evaluate(frames, iou_thresh) {
        Ok(s) => (
            ReportRow {
                bin_lo: 0.0,
                bin_hi: None,
                n_gt: s.n_gt,
                n_det,
                ap_interp40: Some(pct(s.ap_interp40)),
                ap_continuous: Some(pct(s.ap_continuous)),
            },
            s.pr,
        ),
        Err(_) => (
            ReportRow {
                bin_lo: 0.0,
                bin_hi: None,
                n_gt: 0,
                n_det,
                ap_interp40: None,
                ap_continuous: None,
            },
            Vec::new(),
        ),
    };
    // thin the curve to a fixed number of points for the report
    let pr_curve = if pr.len() <= PR_SAMPLES {
        pr
    } else {
        (0..PR_SAMPLES).map(|k| pr[k * (pr.len() - 1) / (PR_SAMPLES - 1)]).collect()
    };
    let bins = range_binned_eval(frames, bins, iou_thresh)
        .into_iter()
        .map(|b| ReportRow {
            bin_lo: b.bin.lo,
            bin_hi: Some(b.bin.hi),
            n_gt: b.n_gt,
            n_det: b.n_det,
            ap_interp40: b.ap_interp40.map(pct),
            ap_continuous: b.ap_continuous.map(pct),
        })
        .collect();
    EvalReport {
        iou_thresh,
        overall,
        bins,
        pr_curve,
        ground_l1: None,
        segmentation: None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
    Svg,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            "svg" | "svg-pr-curve" => Ok(ReportFormat::Svg),
            other => Err(Error::Config(format!("unknown report format {other:?} (json, csv, svg)"))),
        }
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:.4}"))
}

/// CSV with one row per bin and a final `all` summary row.
pub fn report_csv(report: &EvalReport) -> String {
    let mut s = String::from("bin_lo,bin_hi,nGT,nDet,AP_interp40,AP_continuous\n");
    for b in &report.bins {
        writeln!(
            s,
            "{},{},{},{},{},{}",
            b.bin_lo,
            opt(b.bin_hi),
            b.n_gt,
            b.n_det,
            opt(b.ap_interp40),
            opt(b.ap_continuous)
        )
        .expect("string write");
    }
    let o = &report.overall;
    writeln!(
        s,
        "all,all,{},{},{},{}",
        o.n_gt,
        o.n_det,
        opt(o.ap_interp40),
        opt(o.ap_continuous)
    )
    .expect("string write");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Precision-recall curve as a standalone SVG document.
pub fn report_svg(report: &EvalReport, title: &str) -> String {
    let (w, h, m) = (480.0, 400.0, 60.0);
    let pw = w - 2.0 * m;
    let ph = h - 2.0 * m;
    let px = |r: f64| m + r * pw;
    let py = |p: f64| h - m - p * ph;
    let mut s = String::new();
    writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#).unwrap();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#).unwrap();
    writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#).unwrap();
    writeln!(
        s,
        r#"<text x="{}" y="30" text-anchor="middle" font-family="sans-serif" font-size="16">{}</text>"#,
        w / 2.0,
        xml_escape(title)
    )
    .unwrap();
    writeln!(
        s,
        r#"<path d="M {} {} L {} {} L {} {}" fill="none" stroke="black"/>"#,
        px(0.0),
        py(1.0),
        px(0.0),
        py(0.0),
        px(1.0),
        py(0.0)
    )
    .unwrap();
    for k in 0..=5 {
        let v = k as f64 / 5.0;
        writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="11">{v:.1}</text>"#,
            px(v),
            py(0.0) + 16.0
        )
        .unwrap();
        writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end" font-family="sans-serif" font-size="11">{v:.1}</text>"#,
            px(0.0) - 6.0,
            py(v) + 4.0
        )
        .unwrap();
    }
    writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="13">Recall</text>"#,
        w / 2.0,
        h - 18.0
    )
    .unwrap();
    writeln!(
        s,
        r#"<text x="18" y="{}" text-anchor="middle" font-family="sans-serif" font-size="13" transform="rotate(-90 18 {})">Precision</text>"#,
        h / 2.0,
        h / 2.0
    )
    .unwrap();
    if !report.pr_curve.is_empty() {
        let pts: Vec<String> = report
            .pr_curve
            .iter()
            .map(|&(r, p)| format!("{:.2},{:.2}", px(r), py(p)))
            .collect();
        writeln!(s, r#"<polyline points="{}" fill="none" stroke="steelblue" stroke-width="2"/>"#, pts.join(" ")).unwrap();
    }
    let ap = opt(report.overall.ap_interp40);
    writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="end" font-family="sans-serif" font-size="12">AP (40-pt) {ap}</text>"#,
        px(1.0),
        py(1.0) + 14.0
    )
    .unwrap();
    s.push_str("</svg>\n");
    s
}

pub fn emit_report(report: &EvalReport, path: &Path, format: ReportFormat) -> Result<()> {
    let text = match format {
        ReportFormat::Json => serde_json::to_string_pretty(report).expect("report serializes"),
        ReportFormat::Csv => report_csv(report),
        ReportFormat::Svg => report_svg(report, "Precision-recall"),
    };
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_report(path: &Path) -> Result<EvalReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, e))
}
