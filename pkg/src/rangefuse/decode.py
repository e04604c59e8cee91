"""Per-point predictions to instances: box decoding, clustering, aggregation, NMS.

Box footprint convention: ``w`` is the extent along the heading, ``h`` the
extent across it.  Headings are defined modulo π and reported in
(-π/2, π/2].
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError
from .nn import tensor as T
from .nn.layers import PointPredictions


@dataclass(frozen=True)
class BevBox:
    x: float
    y: float
    w: float
    h: float
    theta: float

    def __post_init__(self) -> None:
        if not (self.w > 0 and self.h > 0):
            raise ConfigError("box dimensions must be positive")

    @property
    def center(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def corners(self) -> np.ndarray:
        """Counter-clockwise ``(4, 2)`` corners."""
        return box_corners(np.array([self.x, self.y]), np.array([self.w, self.h]), self.theta)

    def area(self) -> float:
        return self.w * self.h

    def to_dict(self) -> dict:
        return {"x": self.x, "y": self.y, "w": self.w, "h": self.h, "theta": self.theta}

    @classmethod
    def from_dict(cls, d: dict) -> BevBox:
        return cls(float(d["x"]), float(d["y"]), float(d["w"]), float(d["h"]), float(d["theta"]))


def box_corners(center, dims, theta) -> np.ndarray:
    """Corners of rotated rectangles, vectorized: center ``(..., 2)``, dims ``(..., 2)``, theta ``(...)``."""
    center, dims, theta = np.asarray(center, float), np.asarray(dims, float), np.asarray(theta, float)
    c, s = np.cos(theta)[..., None], np.sin(theta)[..., None]
    sx = np.array([0.5, -0.5, -0.5, 0.5])
    sy = np.array([0.5, 0.5, -0.5, -0.5])
    lx = dims[..., :1] * sx
    ly = dims[..., 1:2] * sy
    return np.stack([center[..., :1] + c * lx - s * ly, center[..., 1:2] + s * lx + c * ly], axis=-1)


def wrap_half_pi(theta):
    """Map headings to (-π/2, π/2]."""
    out = np.mod(np.asarray(theta, float) + math.pi / 2, math.pi) - math.pi / 2
    return np.where(out <= -math.pi / 2, out + math.pi, out)


@dataclass(eq=False)
class BoxTrajectory:
    """Boxes for t = 0..T sharing one footprint, with along/cross-track scales."""

    centers: np.ndarray  # (S, 2)
    dims: np.ndarray  # (2,)
    headings: np.ndarray  # (S,)
    sigma: np.ndarray  # (S, 2) along-track, cross-track
    score: float = 1.0
    dt: float = 0.5

    def __post_init__(self) -> None:
        self.centers = np.asarray(self.centers, float).reshape(-1, 2)
        self.dims = np.asarray(self.dims, float).reshape(2)
        self.headings = np.asarray(self.headings, float).reshape(-1)
        self.sigma = np.asarray(self.sigma, float).reshape(-1, 2)
        if np.any(self.sigma <= 0):
            raise ConfigError("trajectory scales must be positive")

    @property
    def n_steps(self) -> int:
        return len(self.centers)

    def box(self, t: int = 0) -> BevBox:
        return BevBox(float(self.centers[t, 0]), float(self.centers[t, 1]), float(self.dims[0]),
                      float(self.dims[1]), float(self.headings[t]))

    @property
    def boxes(self) -> list[BevBox]:
        return [self.box(t) for t in range(self.n_steps)]

    def to_dict(self) -> dict:
        traj = []
        for t in range(self.n_steps):
            b = self.box(t)
            traj.append({"t": round(t * self.dt, 6), "x": b.x, "y": b.y, "w": b.w, "h": b.h, "theta": b.theta,
                         "sig_at": float(self.sigma[t, 0]), "sig_ct": float(self.sigma[t, 1])})
        return {"score": float(self.score), "traj": traj}

    @classmethod
    def from_dict(cls, d: dict, dt: float = 0.5) -> BoxTrajectory:
        tr = d["traj"]
        return cls(np.array([[s["x"], s["y"]] for s in tr]), np.array([tr[0]["w"], tr[0]["h"]]),
                   np.array([s["theta"] for s in tr]), np.array([[s["sig_at"], s["sig_ct"]] for s in tr]),
                   float(d["score"]), dt)


# decoding ------------------------------------------------------------------------------------
def decode_tensors(point_xy, azimuth, centers, log_dims, orient):
    """Graph-preserving decode.

    ``point_xy`` (N, 2) and ``azimuth`` (N,) are constants; ``centers``
    (N, S, 2), ``log_dims`` (N, 2) and ``orient`` (N, S, 2) are encodings.
    Returns global centers (N, S, 2), dims (N, 2) and headings (N, S).
    """
    az = np.asarray(azimuth, dtype=centers.dtype)[:, None]
    c, s = np.cos(az), np.sin(az)
    dx, dy = centers[:, :, 0], centers[:, :, 1]
    xy = np.asarray(point_xy, dtype=centers.dtype)
    gx = dx * c - dy * s + xy[:, :1]
    gy = dx * s + dy * c + xy[:, 1:2]
    gcent = T.stack([gx, gy], axis=2)
    dims = T.exp(log_dims)
    # t = 0 orientation is relative to the ray, like the center offsets; later
    # steps are turns relative to the t = 0 heading
    rel = T.atan2(orient[:, :, 1], orient[:, :, 0]) * 0.5
    h0 = rel[:, :1] + az
    heading = T.concat([h0, rel[:, 1:] + h0], axis=1) if rel.shape[1] > 1 else h0
    return gcent, dims, heading


def decode_box(point_xy, azimuth: float, centers, log_dims, orient) -> tuple[list[BevBox], bool]:
    """Boxes for every step of one point's encoding, plus a low-confidence flag.

    A zero-norm orientation vector decodes to the ray direction (the t = 0
    heading for later steps) and sets the flag.
    """
    centers = np.asarray(centers, float).reshape(1, -1, 2)
    orient = np.asarray(orient, float).reshape(1, -1, 2)
    gc, dims, head = decode_tensors(np.asarray(point_xy, float).reshape(1, 2), np.array([azimuth]),
                                    T.Tensor(centers), T.Tensor(np.asarray(log_dims, float).reshape(1, 2)),
                                    T.Tensor(orient))
    low = bool(np.any(np.linalg.norm(orient[0], axis=-1) < 1e-12))
    head = wrap_half_pi(head.data[0])
    boxes = [BevBox(float(gc.data[0, t, 0]), float(gc.data[0, t, 1]), float(dims.data[0, 0]),
                    float(dims.data[0, 1]), float(head[t])) for t in range(centers.shape[1])]
    return boxes, low


def encode_box(point_xy, azimuth: float, boxes: Sequence[BevBox]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Inverse of :func:`decode_box` (orientation returned as a unit vector)."""
    p = np.asarray(point_xy, float).reshape(2)
    c, s = math.cos(azimuth), math.sin(azimuth)
    cent = np.array([b.center - p for b in boxes])
    local = np.stack([c * cent[:, 0] + s * cent[:, 1], -s * cent[:, 0] + c * cent[:, 1]], axis=1)
    th = np.array([b.theta for b in boxes])
    th = np.concatenate([th[:1] - azimuth, th[1:] - th[0]])
    return local, np.log([boxes[0].w, boxes[0].h]), np.stack([np.cos(2 * th), np.sin(2 * th)], axis=1)


def decode_points(point_xy: np.ndarray, azimuth: np.ndarray, preds: PointPredictions):
    """Vectorized decode of every point: centers (N, S, 2), dims (N, 2), headings (N, S), sigma (N, S, 2)."""
    gc, dims, head = decode_tensors(point_xy, azimuth, T.Tensor(preds.centers), T.Tensor(preds.log_dims),
                                    T.Tensor(preds.orient))
    return gc.data, dims.data, wrap_half_pi(head.data), np.exp(preds.log_sigma)


# clustering -------------------------------------------------------------------------------
_NEIGHBORS = [(dx, dy) for dx in (-1, 0, 1) for dy in (-1, 0, 1)]


def mean_shift(centers: np.ndarray, bandwidth: float = 1.0, max_iters: int = 20,
               tol: float = 1e-4) -> np.ndarray:
    """Grid-hash approximate mean shift; returns one cluster label per input point.

    Points are hashed into square cells of side ``bandwidth``.  Each cell's
    mode starts at its mean and is shifted to the count-weighted mean of all
    cell means within ``bandwidth`` (a flat kernel over cells).  Converged
    modes closer than half a bandwidth are merged.  Labels are numbered by
    canonical cell order, so they do not depend on input ordering.
    """
    if bandwidth <= 0:
        raise ConfigError("bandwidth must be positive")
    pts = np.asarray(centers, float).reshape(-1, 2)
    n = len(pts)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    order = np.lexsort((pts[:, 1], pts[:, 0]))
    sp = pts[order]
    keys = np.floor(sp / bandwidth).astype(np.int64)
    ukeys, inv = np.unique(keys, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    m = len(ukeys)
    counts = np.bincount(inv, minlength=m).astype(float)
    means = np.zeros((m, 2))
    np.add.at(means, inv, sp)
    means /= counts[:, None]
    lookup = {(int(a), int(b)): i for i, (a, b) in enumerate(ukeys)}

    def neighbours(y: np.ndarray) -> np.ndarray:
        kx, ky = (int(v) for v in np.floor(y / bandwidth))
        cand = [lookup[(kx + dx, ky + dy)] for dx, dy in _NEIGHBORS if (kx + dx, ky + dy) in lookup]
        return np.array(cand, dtype=np.int64)

    modes = means.copy()
    for _ in range(max_iters):
        shift = 0.0
        new = modes.copy()
        for i in range(m):
            cand = neighbours(modes[i])
            if len(cand) == 0:
                continue
            d = np.linalg.norm(means[cand] - modes[i], axis=1)
            near = cand[d <= bandwidth]
            if len(near) == 0:
                continue
            w = counts[near]
            new[i] = (means[near] * w[:, None]).sum(axis=0) / w.sum()
            shift = max(shift, float(np.linalg.norm(new[i] - modes[i])))
        modes = new
        if shift < tol:
            break

    parent = np.arange(m)

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    radius = 0.5 * bandwidth
    mode_keys: dict[tuple[int, int], list[int]] = {}
    for i, y in enumerate(modes):
        mode_keys.setdefault(tuple(int(v) for v in np.floor(y / radius)), []).append(i)
    for i, y in enumerate(modes):
        kx, ky = (int(v) for v in np.floor(y / radius))
        for dx, dy in _NEIGHBORS:
            for j in mode_keys.get((kx + dx, ky + dy), ()):
                if j > i and np.linalg.norm(modes[j] - y) <= radius:
                    a, b = find(i), find(j)
                    if a != b:
                        parent[max(a, b)] = min(a, b)
    roots = np.array([find(i) for i in range(m)])
    _, cell_label = np.unique(roots, return_inverse=True)
    labels = np.empty(n, dtype=np.int64)
    labels[order] = cell_label.reshape(-1)[inv]
    return labels


# aggregation ------------------------------------------------------------------------------
def aggregate_instance(centers: np.ndarray, dims: np.ndarray, headings: np.ndarray, sigma: np.ndarray,
                       scores: np.ndarray, dt: float = 0.5) -> BoxTrajectory:
    """Combine member trajectories into one.

    Centers use inverse-variance weights from the mean of each point's
    along/cross-track scale; headings use the circular mean of 2θ; dims are
    averaged; output scales are the same weighted mean of member scales.
    """
    centers = np.asarray(centers, float)
    sigma = np.asarray(sigma, float)
    if len(centers) == 0:
        raise ConfigError("aggregate_instance needs at least one member")
    iso = sigma.mean(axis=2)  # (n, S)
    w = 1.0 / iso ** 2
    wn = w / w.sum(axis=0, keepdims=True)
    cent = (centers * wn[..., None]).sum(axis=0)
    sig = (sigma * wn[..., None]).sum(axis=0)
    two = 2.0 * np.asarray(headings, float)
    head = 0.5 * np.arctan2(np.sin(two).sum(axis=0), np.cos(two).sum(axis=0))
    return BoxTrajectory(cent, np.asarray(dims, float).mean(axis=0), wrap_half_pi(head), sig,
                         float(np.mean(scores)), dt)


# overlap and suppression ------------------------------------------------------------------
def _polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def _clip(subject: np.ndarray, clipper: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of a polygon by a convex counter-clockwise polygon."""
    out = list(subject)
    for i in range(len(clipper)):
        if not out:
            break
        a, b = clipper[i], clipper[(i + 1) % len(clipper)]
        edge = b - a

        def side(p):
            return edge[0] * (p[1] - a[1]) - edge[1] * (p[0] - a[0])

        inp, out = out, []
        for j in range(len(inp)):
            p, q = inp[j], inp[(j + 1) % len(inp)]
            sp, sq = side(p), side(q)
            if sp >= 0:
                out.append(p)
            if (sp >= 0) != (sq >= 0):
                t = sp / (sp - sq)
                out.append(p + t * (q - p))
    return np.array(out).reshape(-1, 2)


def rotated_iou(a: BevBox, b: BevBox) -> float:
    """Exact intersection-over-union of two rotated rectangles."""
    area_a, area_b = a.area(), b.area()
    if area_a <= 0 or area_b <= 0:
        return 0.0
    if np.linalg.norm(a.center - b.center) > 0.5 * (math.hypot(a.w, a.h) + math.hypot(b.w, b.h)):
        return 0.0
    inter = max(_polygon_area(_clip(a.corners(), b.corners())), 0.0)
    union = area_a + area_b - inter
    return float(min(max(inter / union, 0.0), 1.0)) if union > 0 else 0.0


def nms(instances: Sequence[BoxTrajectory], iou_threshold: float = 0.3) -> list[BoxTrajectory]:
    """Greedy suppression on t = 0 boxes; ties in score keep the lower index."""
    order = sorted(range(len(instances)), key=lambda i: (-instances[i].score, i))
    kept: list[int] = []
    for i in order:
        bi = instances[i].box(0)
        if all(rotated_iou(bi, instances[j].box(0)) <= iou_threshold for j in kept):
            kept.append(i)
    return [instances[i] for i in kept]


# full post-processing -----------------------------------------------------------------------
@dataclass(frozen=True)
class DecodeConfig:
    score_threshold: float = 0.5
    bandwidth: float = 1.0
    nms_iou: float = 0.3
    min_points: int = 1
    vehicle_class: int = 1
    max_iters: int = 20


def detect(point_xy: np.ndarray, azimuth: np.ndarray, preds: PointPredictions,
           cfg: DecodeConfig = DecodeConfig(), dt: float = 0.5) -> list[BoxTrajectory]:
    """Threshold, cluster, aggregate and suppress per-point predictions."""
    score = preds.class_probs[:, cfg.vehicle_class]
    keep = np.flatnonzero(score >= cfg.score_threshold)
    if len(keep) == 0:
        return []
    cent, dims, head, sig = decode_points(point_xy[keep], azimuth[keep], _subset(preds, keep))
    labels = mean_shift(cent[:, 0], cfg.bandwidth, cfg.max_iters)
    out = []
    for lab in range(labels.max() + 1):
        mem = np.flatnonzero(labels == lab)
        if len(mem) < cfg.min_points:
            continue
        out.append(aggregate_instance(cent[mem], dims[mem], head[mem], sig[mem], score[keep][mem], dt))
    return nms(out, cfg.nms_iou)


def _subset(p: PointPredictions, idx: np.ndarray) -> PointPredictions:
    return PointPredictions(p.class_probs[idx], p.centers[idx], p.log_dims[idx], p.orient[idx], p.log_sigma[idx])
