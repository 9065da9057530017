//! Rotated-box geometry in the bird's-eye-view plane.
//!
//! Boxes are rectangles `(cx, cy, l, w, theta)` where `l` runs along the
//! heading. A heading and its opposite describe the same rectangle, so every
//! quantity here is invariant under `theta -> theta + pi`.

use std::cmp::Ordering;
use std::f64::consts::PI;

use rand::rngs::SmallRng;
use rand::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

/// Areas below this are treated as empty (shared edges, touching corners).
pub const AREA_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrientedBox {
    pub cx: f64,
    pub cy: f64,
    pub l: f64,
    pub w: f64,
    pub theta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

/// Wraps an angle into `[-pi, pi)`.
pub fn normalize_angle(theta: f64) -> f64 {
    if (-PI..PI).contains(&theta) {
        return theta;
    }
    let t = (theta + PI).rem_euclid(2.0 * PI) - PI;
    // rem_euclid can round up to exactly 2*pi
    if t >= PI {
        t - 2.0 * PI
    } else {
        t
    }
}

impl OrientedBox {
    /// Panics when `l` or `w` is not strictly positive and finite.
    pub fn new(cx: f64, cy: f64, l: f64, w: f64, theta: f64) -> Self {
        assert!(
            l > 0.0 && w > 0.0 && l.is_finite() && w.is_finite(),
            "box extents must be positive, got l={l} w={w}"
        );
        OrientedBox {
            cx,
            cy,
            l,
            w,
            theta: normalize_angle(theta),
            score: None,
        }
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = Some(score);
        self
    }

    pub fn is_valid(&self) -> bool {
        self.l > 0.0
            && self.w > 0.0
            && [self.cx, self.cy, self.l, self.w, self.theta]
                .iter()
                .all(|v| v.is_finite())
    }

    pub fn area(&self) -> f64 {
        self.l * self.w
    }

    /// Distance of the center from the origin in the XY plane.
    pub fn range(&self) -> f64 {
        self.cx.hypot(self.cy)
    }

    /// True when `(x, y)` lies inside or on the rectangle.
    #[inline]
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.theta.sin_cos();
        let dx = x - self.cx;
        let dy = y - self.cy;
        let along = dx * c + dy * s;
        let across = -dx * s + dy * c;
        along.abs() <= 0.5 * self.l && across.abs() <= 0.5 * self.w
    }

    /// Corners in counter-clockwise order.
    pub fn corners(&self) -> [(f64, f64); 4] {
        let (s, c) = self.theta.sin_cos();
        let hl = 0.5 * self.l;
        let hw = 0.5 * self.w;
        let local = [(hl, -hw), (hl, hw), (-hl, hw), (-hl, -hw)];
        local.map(|(a, b)| (self.cx + a * c - b * s, self.cy + a * s + b * c))
    }

    /// Axis-aligned bounds `(xmin, ymin, xmax, ymax)`.
    pub fn aabb(&self) -> (f64, f64, f64, f64) {
        let (s, c) = self.theta.sin_cos();
        let ex = 0.5 * (self.l * c.abs() + self.w * s.abs());
        let ey = 0.5 * (self.l * s.abs() + self.w * c.abs());
        (self.cx - ex, self.cy - ey, self.cx + ex, self.cy + ey)
    }

    fn canonical_key(&self) -> [f64; 5] {
        [self.cx, self.cy, self.l, self.w, self.theta]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvexPolygon {
    vertices: Vec<(f64, f64)>,
}

impl ConvexPolygon {
    /// Builds a polygon from CCW vertices. Returns `None` when fewer than three
    /// vertices are given, the signed area is not positive, or a turn is
    /// clockwise beyond tolerance.
    pub fn new(vertices: Vec<(f64, f64)>) -> Option<Self> {
        if vertices.len() < 3 || signed_area(&vertices) <= 0.0 {
            return None;
        }
        let n = vertices.len();
        for i in 0..n {
            let a = vertices[i];
            let b = vertices[(i + 1) % n];
            let c = vertices[(i + 2) % n];
            if cross(a, b, c) < -1e-9 {
                return None;
            }
        }
        Some(ConvexPolygon { vertices })
    }

    pub fn vertices(&self) -> &[(f64, f64)] {
        &self.vertices
    }

    pub fn area(&self) -> f64 {
        signed_area(&self.vertices)
    }
}

#[inline]
fn cross(o: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Shoelace formula; positive for CCW rings.
pub fn signed_area(v: &[(f64, f64)]) -> f64 {
    let n = v.len();
    if n < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..n {
        let (x0, y0) = v[i];
        let (x1, y1) = v[(i + 1) % n];
        acc += x0 * y1 - x1 * y0;
    }
    0.5 * acc
}

pub fn box_to_polygon(b: &OrientedBox) -> ConvexPolygon {
    ConvexPolygon {
        vertices: b.corners().to_vec(),
    }
}

/// Sutherland-Hodgman: clips `subject` against every edge of the convex
/// `clip` polygon and returns the area of what survives.
pub fn convex_intersection_area(subject: &ConvexPolygon, clip: &ConvexPolygon) -> f64 {
    let mut output: Vec<(f64, f64)> = subject.vertices.clone();
    let mut input: Vec<(f64, f64)> = Vec::with_capacity(output.len() + clip.vertices.len());
    let n = clip.vertices.len();
    for i in 0..n {
        if output.is_empty() {
            return 0.0;
        }
        std::mem::swap(&mut input, &mut output);
        output.clear();
        let a = clip.vertices[i];
        let b = clip.vertices[(i + 1) % n];
        let m = input.len();
        for j in 0..m {
            let p = input[j];
            let q = input[(j + 1) % m];
            let sp = cross(a, b, p);
            let sq = cross(a, b, q);
            let p_in = sp >= 0.0;
            let q_in = sq >= 0.0;
            if p_in {
                output.push(p);
            }
            if p_in != q_in {
                let t = sp / (sp - sq);
                output.push((p.0 + t * (q.0 - p.0), p.1 + t * (q.1 - p.1)));
            }
        }
    }
    let area = signed_area(&output);
    if area < AREA_EPS {
        0.0
    } else {
        area
    }
}

/// Intersection-over-union of two rotated rectangles.
///
/// Arguments are put in a canonical order before clipping so the result is
/// bitwise symmetric.
pub fn rotated_iou(a: &OrientedBox, b: &OrientedBox) -> f64 {
    let (first, second) = match cmp_key(&a.canonical_key(), &b.canonical_key()) {
        Ordering::Greater => (b, a),
        _ => (a, b),
    };
    let (ax0, ay0, ax1, ay1) = first.aabb();
    let (bx0, by0, bx1, by1) = second.aabb();
    if ax1 <= bx0 || bx1 <= ax0 || ay1 <= by0 || by1 <= ay0 {
        return 0.0;
    }
    let inter = convex_intersection_area(&box_to_polygon(first), &box_to_polygon(second));
    if inter <= 0.0 {
        return 0.0;
    }
    let union = first.area() + second.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

fn cmp_key(a: &[f64; 5], b: &[f64; 5]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            Ordering::Equal => continue,
            o => return o,
        }
    }
    Ordering::Equal
}

/// Greedy non-maximum suppression. Returns indices into `dets` of the kept
/// boxes, in descending score order. Boxes without a score are treated as
/// score 0. Ties are broken by input index.
pub fn nms_indices(dets: &[OrientedBox], iou_thresh: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| {
        let si = dets[i].score.unwrap_or(0.0);
        let sj = dets[j].score.unwrap_or(0.0);
        sj.total_cmp(&si).then(i.cmp(&j))
    });
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept
            .iter()
            .all(|&k| rotated_iou(&dets[k], &dets[i]) <= iou_thresh)
        {
            kept.push(i);
        }
    }
    kept
}

pub fn nms(dets: &[OrientedBox], iou_thresh: f64) -> Vec<OrientedBox> {
    nms_indices(dets, iou_thresh)
        .into_iter()
        .map(|i| dets[i])
        .collect()
}

/// Rejection-sampling IoU estimate over the joint bounding rectangle.
/// Used as an independent oracle for [`rotated_iou`]. Each sample takes both
/// coordinates from the two 32-bit halves of one 64-bit draw.
pub fn monte_carlo_iou(a: &OrientedBox, b: &OrientedBox, samples: u64, seed: u64) -> f64 {
    assert!(samples >= 1);
    let (ax0, ay0, ax1, ay1) = a.aabb();
    let (bx0, by0, bx1, by1) = b.aabb();
    if ax1 < bx0 || bx1 < ax0 || ay1 < by0 || by1 < ay0 {
        // no sample can land in both boxes
        return 0.0;
    }
    let x0 = ax0.min(bx0);
    let y0 = ay0.min(by0);
    let sx = (ax1.max(bx1) - x0) / 4_294_967_296.0;
    let sy = (ay1.max(by1) - y0) / 4_294_967_296.0;
    let (fa, fb) = (LocalFrame::of(a), LocalFrame::of(b));
    let mut rng = SmallRng::seed_from_u64(seed);
    let (mut in_a, mut in_b, mut both) = (0u64, 0u64, 0u64);
    let mut draws = [0u64; 1024];
    let mut left = samples;
    while left > 0 {
        let n = left.min(draws.len() as u64) as usize;
        draws[..n].iter_mut().for_each(|d| *d = rng.next_u64());
        for &d in &draws[..n] {
            let x = x0 + sx * (d >> 32) as f64;
            let y = y0 + sy * (d & 0xffff_ffff) as f64;
            let pa = fa.contains(x, y);
            let pb = fb.contains(x, y);
            in_a += pa as u64;
            in_b += pb as u64;
            both += (pa & pb) as u64;
        }
        left -= n as u64;
    }
    let union = in_a + in_b - both;
    if union == 0 {
        0.0
    } else {
        both as f64 / union as f64
    }
}

/// Box with its rotation precomputed, for repeated point tests.
struct LocalFrame {
    cx: f64,
    cy: f64,
    s: f64,
    c: f64,
    hl: f64,
    hw: f64,
}

impl LocalFrame {
    fn of(b: &OrientedBox) -> Self {
        let (s, c) = b.theta.sin_cos();
        LocalFrame {
            cx: b.cx,
            cy: b.cy,
            s,
            c,
            hl: 0.5 * b.l,
            hw: 0.5 * b.w,
        }
    }

    #[inline]
    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = x - self.cx;
        let dy = y - self.cy;
        (dx * self.c + dy * self.s).abs() <= self.hl && (-dx * self.s + dy * self.c).abs() <= self.hw
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha8Rng;
    use proptest::prelude::*;

    fn unit(cx: f64, cy: f64, theta: f64) -> OrientedBox {
        OrientedBox::new(cx, cy, 1.0, 1.0, theta)
    }

    fn same_corner_set(a: &[(f64, f64); 4], b: &[(f64, f64); 4]) -> bool {
        a.iter().all(|p| {
            b.iter()
                .any(|q| (p.0 - q.0).abs() < 1e-9 && (p.1 - q.1).abs() < 1e-9)
        })
    }

    #[test]
    fn polygon_of_axis_aligned_box() {
        let poly = box_to_polygon(&OrientedBox::new(0.0, 0.0, 2.0, 1.0, 0.0));
        assert_eq!(poly.vertices().len(), 4);
        assert!((poly.area() - 2.0).abs() < 1e-12);
        for &(x, y) in poly.vertices() {
            assert!((x.abs() - 1.0).abs() < 1e-12 && (y.abs() - 0.5).abs() < 1e-12);
        }
        assert!(ConvexPolygon::new(poly.vertices().to_vec()).is_some());
    }

    #[test]
    fn polygon_heading_period_is_pi() {
        let a = OrientedBox::new(0.0, 0.0, 2.0, 1.0, 0.0).corners();
        let b = OrientedBox::new(0.0, 0.0, 2.0, 1.0, PI).corners();
        assert!(same_corner_set(&a, &b));
    }

    #[test]
    fn polygon_quarter_turn_swaps_extents() {
        let b = OrientedBox::new(1.0, 1.0, 2.0, 1.0, PI / 2.0);
        let expected = [(0.5, 0.0), (1.5, 0.0), (1.5, 2.0), (0.5, 2.0)];
        assert!(same_corner_set(&b.corners(), &expected));
        assert!((box_to_polygon(&b).area() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn theta_is_normalized() {
        for t in [-7.0, -PI, 0.0, PI, 3.5, 100.0] {
            let b = OrientedBox::new(0.0, 0.0, 1.0, 1.0, t);
            assert!(b.theta >= -PI && b.theta < PI, "{t} -> {}", b.theta);
        }
        assert_eq!(OrientedBox::new(0.0, 0.0, 1.0, 1.0, PI).theta, -PI);
    }

    #[test]
    fn rejects_clockwise_polygon() {
        assert!(ConvexPolygon::new(vec![(0.0, 0.0), (0.0, 1.0), (1.0, 1.0), (1.0, 0.0)]).is_none());
        assert!(ConvexPolygon::new(vec![(0.0, 0.0), (1.0, 0.0)]).is_none());
    }

    #[test]
    fn intersection_examples() {
        let sq = box_to_polygon(&unit(0.0, 0.0, 0.0));
        assert!((convex_intersection_area(&sq, &sq) - 1.0).abs() < 1e-12);
        let shifted = box_to_polygon(&unit(0.5, 0.0, 0.0));
        assert!((convex_intersection_area(&sq, &shifted) - 0.5).abs() < 1e-12);
        let rotated = box_to_polygon(&unit(0.0, 0.0, PI / 4.0));
        // regular octagon: 2*(sqrt(2)-1)
        let exact = 2.0 * (2f64.sqrt() - 1.0);
        assert!((convex_intersection_area(&sq, &rotated) - exact).abs() < 1e-12);
        assert!((exact - 0.8284).abs() < 1e-4);
    }

    #[test]
    fn rotated_square_overlap_matches_monte_carlo() {
        let a = unit(0.0, 0.0, 0.0);
        let b = unit(0.0, 0.0, PI / 4.0);
        let mc = monte_carlo_iou(&a, &b, 10_000_000, 7);
        let iou = rotated_iou(&a, &b);
        assert!((iou - 0.7071).abs() < 1e-3, "{iou}");
        assert!((mc - iou).abs() < 1e-3, "mc {mc} vs {iou}");
    }

    #[test]
    fn touching_boxes_have_zero_overlap() {
        let a = unit(0.0, 0.0, 0.0);
        let b = unit(1.0, 0.0, 0.0);
        assert_eq!(rotated_iou(&a, &b), 0.0);
        let c = unit(1.0, 1.0, 0.0);
        assert_eq!(rotated_iou(&a, &c), 0.0);
    }

    #[test]
    fn iou_examples() {
        let a = unit(0.0, 0.0, 0.0);
        assert!((rotated_iou(&a, &a) - 1.0).abs() < 1e-12);
        let b = unit(0.5, 0.0, 0.0);
        assert!((rotated_iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(rotated_iou(&a, &unit(5.0, 0.0, 0.3)), 0.0);
    }

    #[test]
    fn monte_carlo_exact_cases() {
        let a = OrientedBox::new(1.0, 2.0, 4.0, 2.0, 0.4);
        assert_eq!(monte_carlo_iou(&a, &a, 1000, 3), 1.0);
        let far = OrientedBox::new(20.0, 2.0, 4.0, 2.0, 0.4);
        assert_eq!(monte_carlo_iou(&a, &far, 1000, 3), 0.0);
        assert_eq!(
            monte_carlo_iou(&a, &far, 5000, 11),
            monte_carlo_iou(&a, &far, 5000, 11)
        );
    }

    #[test]
    fn monte_carlo_cross_check() {
        let a = OrientedBox::new(0.0, 0.0, 2.0, 1.0, 0.3);
        let b = OrientedBox::new(0.5, 0.2, 1.5, 1.0, 1.0);
        let mc = monte_carlo_iou(&a, &b, 10_000_000, 42);
        assert!((mc - rotated_iou(&a, &b)).abs() < 0.003);
    }

    #[test]
    fn nms_examples() {
        let a = unit(0.0, 0.0, 0.0).with_score(0.9);
        // two unit squares offset by 1/3 overlap with IoU 0.5
        let b = unit(1.0 / 3.0, 0.0, 0.0).with_score(0.8);
        assert!((rotated_iou(&a, &b) - 0.5).abs() < 1e-9);
        let c = unit(10.0, 0.0, 0.0).with_score(0.7);
        let kept = nms(&[b, c, a], 0.1);
        assert_eq!(kept, vec![a, c]);
        assert_eq!(nms(&[a], 0.1), vec![a]);
        assert!(nms(&[], 0.1).is_empty());
    }

    #[test]
    fn nms_ties_break_by_index() {
        let a = unit(0.0, 0.0, 0.0).with_score(0.5);
        let b = unit(0.2, 0.0, 0.0).with_score(0.5);
        assert_eq!(nms_indices(&[a, b], 0.1), vec![0]);
        assert_eq!(nms_indices(&[b, a], 0.1), vec![0]);
    }

    fn arb_box() -> impl Strategy<Value = OrientedBox> {
        (-3.0..3.0f64, -3.0..3.0f64, 0.3..5.0f64, 0.3..3.0f64, -4.0..4.0f64)
            .prop_map(|(cx, cy, l, w, t)| OrientedBox::new(cx, cy, l, w, t))
    }

    proptest! {
        #[test]
        fn iou_is_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = rotated_iou(&a, &b);
            prop_assert_eq!(ab, rotated_iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
        }

        #[test]
        fn iou_heading_period(a in arb_box(), b in arb_box()) {
            let flipped = OrientedBox::new(a.cx, a.cy, a.l, a.w, a.theta + PI);
            prop_assert!((rotated_iou(&a, &flipped) - 1.0).abs() < 1e-9);
            prop_assert!((rotated_iou(&flipped, &b) - rotated_iou(&a, &b)).abs() < 1e-9);
        }

        #[test]
        fn intersection_is_commutative(a in arb_box(), b in arb_box()) {
            let pa = box_to_polygon(&a);
            let pb = box_to_polygon(&b);
            let ab = convex_intersection_area(&pa, &pb);
            let ba = convex_intersection_area(&pb, &pa);
            prop_assert!((ab - ba).abs() < 1e-9);
            prop_assert!(ab <= a.area().min(b.area()) + 1e-9);
        }

        #[test]
        fn nms_is_permutation_invariant(
            boxes in proptest::collection::vec(arb_box(), 1..30),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            let dets: Vec<OrientedBox> = boxes
                .iter()
                .enumerate()
                .map(|(i, b)| b.with_score(1.0 - i as f64 / 64.0))
                .collect();
            let mut shuffled = dets.clone();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(nms(&dets, 0.1), nms(&shuffled, 0.1));
        }
    }
}
