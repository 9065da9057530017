"""Smoke test for the hdnetbev extension module.

Build and install first:
    maturin build --release -m crates/python/Cargo.toml
    pip install target/wheels/hdnetbev-*.whl

Pass a trained detector weights file as the first argument to also run
inference on a synthetic sweep.
"""

import math
import struct
import sys

import hdnetbev as hb


def check_boxes():
    a = hb.OrientedBox(0.0, 0.0, 4.0, 2.0, 0.0, score=0.9)
    b = hb.OrientedBox(1.0, 0.0, 4.0, 2.0, 0.0, score=0.5)
    assert abs(a.iou(b) - 0.6) < 1e-9, a.iou(b)
    assert abs(hb.rotated_iou(a, a) - 1.0) < 1e-9
    r = hb.OrientedBox(0.0, 0.0, 4.0, 2.0, math.pi / 2)
    assert abs(a.iou(r) - 4.0 / 12.0) < 1e-9
    kept = hb.nms([b, a, hb.OrientedBox(20.0, 0.0, 4.0, 2.0, 0.0, score=0.1)], 0.1)
    assert [k.score for k in kept] == [0.9, 0.1]
    try:
        hb.OrientedBox(0.0, 0.0, -1.0, 2.0, 0.0)
    except ValueError:
        pass
    else:
        raise AssertionError("negative length accepted")


def check_rasterize():
    bev = hb.BevConfig((0.0, 8.0), (-4.0, 4.0), (-2.0, 2.0), 0.5, 0.5, 1.0)
    c, rows, cols = bev.shape
    assert (c, rows, cols) == (4 + 3, 16, 16), bev.shape
    assert hb.BevConfig.kitti().shape == (23, 704, 800)
    pts = [(1.1, 0.2, -1.5), (1.2, 0.3, 0.5), (7.9, 3.9, 5.0)]
    shape, data = hb.rasterize(pts, [0.2, 0.6, 1.0], bev)
    assert shape == (c, rows, cols)
    vals = struct.unpack("<%df" % (c * rows * cols), data)
    assert sum(1 for v in vals if v != 0.0) >= 3
    # point 0 lies in slice 0 of cell (2, 8)
    assert vals[0 * rows * cols + 2 * cols + 8] == 1.0
    try:
        hb.rasterize(pts, [0.1], bev)
    except ValueError:
        pass
    else:
        raise AssertionError("length mismatch accepted")


def check_scene_and_ground():
    s = hb.synth_scene(3, slope_deg=2.0, n_vehicles=4)
    assert len(s["points"]) == len(s["intensity"]) > 1000
    assert 1 <= len(s["labels"]) <= 4
    plane = hb.fit_ground_plane(s["points"], s["intensity"], seed=1)
    assert abs(plane.a - math.tan(math.radians(2.0))) < 0.01, plane
    bev = hb.BevConfig((0.0, 40.0), (-20.0, 20.0), (-2.0, 2.0), 0.4, 0.4, 0.5)
    shape, data = hb.rasterize(s["points"], s["intensity"], bev, ground=plane)
    assert len(data) == 4 * shape[0] * shape[1] * shape[2]
    return s


def check_ap(scene):
    gts = scene["labels"]
    dets = [hb.OrientedBox(g.cx, g.cy, g.l, g.w, g.theta, score=1.0) for g in gts]
    r = hb.average_precision([dets], [gts])
    assert abs(r["ap_interp40"] - 100.0) < 1e-9 and r["n_gt"] == len(gts), r
    r = hb.average_precision([[]], [gts])
    assert r["ap_interp40"] == 0.0


def check_detector(weights, scene):
    det = hb.Detector.load(weights)
    m = scene["map_json"] if det.uses_map else None
    boxes = det.detect(scene["points"], scene["intensity"], map_json=m)
    assert all(b.score is not None for b in boxes)
    print("detector: %d boxes" % len(boxes))


def main():
    check_boxes()
    check_rasterize()
    scene = check_scene_and_ground()
    check_ap(scene)
    try:
        hb.Detector.load("/nonexistent/detector.bin")
    except OSError:
        pass
    else:
        raise AssertionError("missing weights accepted")
    if len(sys.argv) > 1:
        check_detector(sys.argv[1], scene)
    print("smoke test ok")


if __name__ == "__main__":
    main()
