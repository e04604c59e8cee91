import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import co_membership_agreement, exact_mean_shift, mc_iou
from rangefuse.decode import (BevBox, BoxTrajectory, DecodeConfig, aggregate_instance, decode_box, detect,
                              encode_box, mean_shift, nms, rotated_iou, wrap_half_pi)
from rangefuse.errors import ConfigError
from rangefuse.nn.layers import PointPredictions


def traj(x, y, score, w=4.0, h=2.0, theta=0.0, n=2):
    return BoxTrajectory(np.tile([x, y], (n, 1)), [w, h], np.full(n, theta), np.ones((n, 2)), score)


def test_box_validation():
    with pytest.raises(ConfigError):
        BevBox(0, 0, 0.0, 1.0, 0.0)
    with pytest.raises(ConfigError):
        BoxTrajectory(np.zeros((2, 2)), [1, 1], np.zeros(2), np.zeros((2, 2)))


def test_corners_ccw_and_area():
    b = BevBox(1.0, 2.0, 4.0, 2.0, 0.3)
    c = b.corners()
    x, y = c[:, 0], c[:, 1]
    assert 0.5 * (np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))) == pytest.approx(8.0)
    np.testing.assert_allclose(c.mean(axis=0), [1.0, 2.0])


def test_decode_zero_offsets_and_orientation():
    (b,), low = decode_box([3.0, 4.0], 0.9, [[0.0, 0.0]], [0.0, 0.0], [[1.0, 0.0]])
    assert (b.x, b.y) == (3.0, 4.0) and b.theta == pytest.approx(0.9) and not low
    # headings are relative to the ray
    (b,), _ = decode_box([0, 0], 1.2, [[0, 0]], [0, 0], [[0.0, 1.0]])
    assert b.theta == pytest.approx(1.2 + math.pi / 4 - math.pi)
    (b,), _ = decode_box([0, 0], 0.0, [[0, 0]], [0, 0], [[-1.0, 0.0]])
    assert b.theta == pytest.approx(math.pi / 2)


def test_decode_future_headings_follow_first_step():
    boxes, _ = decode_box([0, 0], 0.4, [[0, 0]] * 3, [0, 0], [[0.0, 1.0], [1.0, 0.0], [0.0, 1.0]])
    h0 = 0.4 + math.pi / 4
    assert [b.theta for b in boxes] == pytest.approx([h0, h0, h0 + math.pi / 4 - math.pi])


def test_decode_zero_orientation_flagged():
    (b,), low = decode_box([0, 0], 0.0, [[1, 0]], [0, 0], [[0.0, 0.0]])
    assert low and b.theta == 0.0


def test_decode_rotates_offset_by_azimuth():
    (b,), _ = decode_box([0, 5.0], math.pi / 2, [[2.0, 0.0]], [0, 0], [[1, 0]])
    assert (b.x, b.y) == pytest.approx((0.0, 7.0))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6))
def test_decode_encode_round_trip(seed):
    rng = np.random.default_rng(seed)
    p, az = rng.normal(size=2) * 10, rng.uniform(0, 2 * math.pi)
    off, ld = rng.normal(size=(3, 2)) * 3, rng.normal(size=2)
    ang = rng.uniform(-math.pi, math.pi, 3)
    orient = np.stack([np.cos(ang), np.sin(ang)], axis=1) * rng.uniform(0.5, 2, (3, 1))
    boxes, _ = decode_box(p, az, off, ld, orient)
    off2, ld2, or2 = encode_box(p, az, boxes)
    np.testing.assert_allclose(off2, off, atol=1e-9)
    np.testing.assert_allclose(ld2, ld, atol=1e-9)
    np.testing.assert_allclose(or2, orient / np.linalg.norm(orient, axis=1, keepdims=True), atol=1e-9)


def test_wrap_half_pi_range():
    th = wrap_half_pi(np.linspace(-10, 10, 1001))
    assert np.all(th > -math.pi / 2) and np.all(th <= math.pi / 2)
    assert wrap_half_pi(-math.pi / 2) == pytest.approx(math.pi / 2)


def test_iou_examples():
    a = BevBox(0, 0, 1, 1, 0)
    assert rotated_iou(a, a) == pytest.approx(1.0)
    assert rotated_iou(a, BevBox(5, 0, 1, 1, 0)) == 0.0
    shifted = BevBox(0.5, 0, 1, 1, 0)
    assert rotated_iou(a, shifted) == pytest.approx(1 / 3)
    assert mc_iou(a, shifted) == pytest.approx(1 / 3, abs=0.01)
    # 45 degree rotated unit square inside... against the same center: octagon overlap
    r = BevBox(0, 0, 1, 1, math.pi / 4)
    octagon = 2 * (math.sqrt(2) - 1)  # area of the regular octagon shared by the two squares
    assert rotated_iou(a, r) == pytest.approx(octagon / (2 - octagon))


def test_iou_contained_box():
    assert rotated_iou(BevBox(0, 0, 4, 4, 0.3), BevBox(0.2, 0.1, 1, 2, 1.0)) == pytest.approx(2 / 16)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6))
def test_iou_symmetric_bounded(seed):
    rng = np.random.default_rng(seed)
    a = BevBox(*rng.normal(size=2), *rng.uniform(0.2, 3, 2), rng.uniform(-3, 3))
    b = BevBox(*rng.normal(size=2), *rng.uniform(0.2, 3, 2), rng.uniform(-3, 3))
    v = rotated_iou(a, b)
    assert 0.0 <= v <= 1.0
    assert v == pytest.approx(rotated_iou(b, a), abs=1e-12)
    assert rotated_iou(a, a) == pytest.approx(1.0)
    # a box and its mod-pi twin are the same footprint
    assert rotated_iou(a, BevBox(a.x, a.y, a.w, a.h, a.theta + math.pi)) == pytest.approx(1.0)


def test_mean_shift_examples():
    assert len(mean_shift(np.zeros((0, 2)))) == 0
    assert set(mean_shift(np.ones((10, 2)) * 3.3)) == {0}
    x = np.vstack([np.zeros((5, 2)), np.full((5, 2), 10.0)])
    lab = mean_shift(x, 1.0)
    assert len(set(lab)) == 2 and len(set(lab[:5])) == 1 and len(set(lab[5:])) == 1
    with pytest.raises(ConfigError):
        mean_shift(x, 0.0)


def test_mean_shift_order_invariant(rng):
    x = np.vstack([rng.normal(c, 0.4, (20, 2)) for c in ([0, 0], [4, 1], [1, 6])])
    lab = mean_shift(x)
    perm = rng.permutation(len(x))
    lab_p = mean_shift(x[perm])
    assert co_membership_agreement(lab[perm], lab_p) == 1.0
    np.testing.assert_array_equal(lab[perm], lab_p)


def test_mean_shift_matches_exact_oracle():
    rng = np.random.default_rng(5)
    x = np.vstack([rng.normal(c, 0.3, (n, 2)) for c, n in (([0, 0], 20), ([5, 0], 15), ([2, 7], 15))])
    assert co_membership_agreement(mean_shift(x, 1.0), exact_mean_shift(x, 1.0)) >= 0.95


def test_aggregate_examples():
    one = aggregate_instance(np.array([[[1.0, 2.0]]]), np.array([[4.0, 2.0]]), np.array([[0.3]]),
                             np.array([[[0.5, 1.5]]]), np.array([0.8]))
    np.testing.assert_allclose(one.centers, [[1, 2]])
    np.testing.assert_allclose(one.sigma, [[0.5, 1.5]])
    assert one.score == pytest.approx(0.8) and one.headings[0] == pytest.approx(0.3)
    cents = np.array([[[0.0, 0.0]], [[10.0, 0.0]]])
    dims = np.array([[4, 2], [4, 2]], float)
    heads = np.zeros((2, 1))
    eq = aggregate_instance(cents, dims, heads, np.ones((2, 1, 2)), np.array([0.6, 0.8]))
    np.testing.assert_allclose(eq.centers, [[5.0, 0.0]])
    ws = aggregate_instance(cents, dims, heads, np.array([[[1.0, 1.0]], [[2.0, 2.0]]]), np.array([1, 1.0]))
    np.testing.assert_allclose(ws.centers, [[2.0, 0.0]])  # weights 4:1


def test_aggregate_heading_circular_mean():
    agg = aggregate_instance(np.zeros((2, 1, 2)), np.ones((2, 2)), np.array([[math.pi / 2 - 0.1],
                                                                             [-math.pi / 2 + 0.1]]),
                             np.ones((2, 1, 2)), np.ones(2))
    assert abs(abs(agg.headings[0]) - math.pi / 2) < 1e-9


def test_aggregate_permutation_invariant(rng):
    n = 7
    args = (rng.normal(size=(n, 3, 2)), rng.uniform(1, 4, (n, 2)), rng.uniform(-1, 1, (n, 3)),
            rng.uniform(0.1, 2, (n, 3, 2)), rng.uniform(0, 1, n))
    perm = rng.permutation(n)
    a = aggregate_instance(*args)
    b = aggregate_instance(*[x[perm] for x in args])
    np.testing.assert_allclose(a.centers, b.centers, atol=1e-12)
    np.testing.assert_allclose(a.headings, b.headings, atol=1e-12)
    np.testing.assert_allclose(a.sigma, b.sigma, atol=1e-12)


def test_nms_examples():
    one = [traj(0, 0, 0.5)]
    assert nms(one) == one
    a, b = traj(0, 0, 0.9), traj(0, 0, 0.8)
    assert nms([b, a]) == [a]


def test_nms_greedy_chain():
    # boxes 4x2 along x: A-B overlap 2.4 m (IoU 3/7 > 0.3), B-C likewise, A-C overlap 0.8 m (IoU 1/9)
    A, B, C = traj(0, 0, 0.9), traj(1.6, 0, 0.8), traj(3.2, 0, 0.7)
    assert rotated_iou(A.box(0), B.box(0)) == pytest.approx(4.8 / 11.2)
    assert rotated_iou(A.box(0), C.box(0)) == pytest.approx(1.6 / 14.4)
    assert nms([C, B, A]) == [A, C]


def test_nms_ties_keep_lower_index():
    a, b = traj(0, 0, 0.5), traj(0.1, 0, 0.5)
    assert nms([a, b]) == [a]
    assert nms([b, a]) == [b]


def test_trajectory_json_round_trip():
    t = BoxTrajectory(np.array([[1, 2], [3, 4.0]]), [4.0, 2.0], np.array([0.1, 0.2]),
                      np.array([[0.3, 0.4], [0.5, 0.6]]), 0.7)
    d = json.loads(json.dumps(t.to_dict()))
    assert set(d) == {"score", "traj"}
    assert set(d["traj"][1]) == {"t", "x", "y", "w", "h", "theta", "sig_at", "sig_ct"}
    assert d["traj"][1]["t"] == 0.5
    back = BoxTrajectory.from_dict(d)
    np.testing.assert_allclose(back.centers, t.centers)
    np.testing.assert_allclose(back.sigma, t.sigma)


def test_detect_two_objects():
    rng = np.random.default_rng(0)
    centers = np.array([[10.0, 0.0], [0.0, -15.0]])
    pts = np.vstack([c + rng.normal(0, 0.8, (12, 2)) for c in centers])
    az = np.arctan2(pts[:, 1], pts[:, 0])
    n, s = len(pts), 3
    owner = np.repeat([0, 1], 12)
    off = np.zeros((n, s, 2))
    for i in range(n):
        d = centers[owner[i]] - pts[i]
        c, si = math.cos(az[i]), math.sin(az[i])
        off[i, :] = [c * d[0] + si * d[1], -si * d[0] + c * d[1]]
    probs = np.tile([0.1, 0.9], (n, 1))
    probs[0] = [0.9, 0.1]  # below threshold: ignored
    preds = PointPredictions(probs, off, np.log(np.tile([4.0, 2.0], (n, 1))),
                             np.tile([1.0, 0.0], (n, s, 1)), np.zeros((n, s, 2)))
    dets = detect(pts, az, preds, DecodeConfig())
    assert len(dets) == 2
    got = sorted(tuple(np.round(d.centers[0], 6)) for d in dets)
    assert got == sorted(tuple(c) for c in centers.round(6))
    assert detect(pts, az, preds, DecodeConfig(score_threshold=0.95)) == []
