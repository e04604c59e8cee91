"""Turn scene logs into training / evaluation samples in the newest sensor frame."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .decode import BevBox
from .errors import DataError
from .fusion import FusionPlan, make_plan
from .geometry import Pose, Sweep, range_azimuth
from .loss import LossTargets
from .rangeview import RvGeometry, resolve_cells
from .simkit import box_contains

MIN_HEIGHT = 0.05  # returns below this world height count as ground
MATCH_MARGIN = 0.02  # meters of slack when testing box membership
MIN_GT_POINTS = 5
MAX_GT_RANGE = 50.0


@dataclass(eq=False)
class GtTrack:
    """One actor's labels in the newest sensor frame."""

    actor_id: int
    centers: np.ndarray  # (S, 2)
    dims: np.ndarray  # (2,)
    headings: np.ndarray  # (S,)
    speed: float
    n_points: int

    def box(self, t: int = 0) -> BevBox:
        return BevBox(float(self.centers[t, 0]), float(self.centers[t, 1]), float(self.dims[0]),
                      float(self.dims[1]), float(self.headings[t]))

    @property
    def visible(self) -> bool:
        return self.n_points >= MIN_GT_POINTS and float(np.hypot(*self.centers[0])) <= MAX_GT_RANGE


@dataclass(eq=False)
class Sample:
    name: str
    plan: FusionPlan
    cells: np.ndarray  # (N,) flat cell of each newest-sweep point
    targets: LossTargets
    tracks: list[GtTrack]
    ego_speed: float

    @property
    def n_points(self) -> int:
        return len(self.cells)


def _to_sensor(pose: Pose, box: dict) -> tuple[np.ndarray, float]:
    inv = pose.inverse()
    c = inv.apply(np.array([[float(box["x"]), float(box["y"]), 0.0]]))[0, :2]
    return c, float(box["theta"]) - pose.yaw


def tracks_from_labels(label: dict, pose: Pose, n_future: int, dt: float) -> list[GtTrack]:
    """Actor labels rotated into the sensor frame at ``pose``; needs horizons ``dt..n_future*dt``."""
    tracks = []
    for a in label["actors"]:
        try:
            futures = {round(float(f["dt"]) / dt): f["box"] for f in a.get("future", [])}
            boxes = [a["box"]] + [futures[k] for k in range(1, n_future + 1)]
        except KeyError as exc:
            raise DataError(f"actor {a.get('id')} lacks a label at horizon step {exc}") from None
        cents, heads = zip(*(_to_sensor(pose, b) for b in boxes))
        tracks.append(GtTrack(int(a["id"]), np.array(cents), np.array([a["box"]["w"], a["box"]["h"]], float),
                              np.array(heads), float(a.get("speed", 0.0)), 0))
    return tracks


def match_points(xyz_sensor: np.ndarray, pose: Pose, tracks: Sequence[GtTrack]) -> np.ndarray:
    """Ground-truth track per point (-1 for background) from t = 0 box membership."""
    match = np.full(len(xyz_sensor), -1, dtype=np.int64)
    if not len(xyz_sensor):
        return match
    high = pose.apply(xyz_sensor)[:, 2] > MIN_HEIGHT
    for j, tr in enumerate(tracks):
        inside = box_contains(tr.box(0), xyz_sensor[:, :2], MATCH_MARGIN) & high & (match < 0)
        match[inside] = j
    return match


def build_sample(name: str, sweeps: Sequence[Sweep], labels: Sequence[dict], kind: str, g: RvGeometry,
                 n_sweeps: int = 6, n_future: int = 6, dt: float = 0.5) -> Sample:
    """Fusion plan plus supervision for the newest sweep of a scene."""
    if len(sweeps) < n_sweeps:
        raise DataError(f"{name}: {len(sweeps)} sweeps, need {n_sweeps}")
    if len(labels) != len(sweeps):
        raise DataError(f"{name}: sweep and label counts differ")
    sweeps = list(sweeps[-n_sweeps:])
    label = labels[-1]
    newest = sweeps[-1]
    if abs(float(label["t"]) - newest.pose.timestamp) > 1e-6:
        raise DataError(f"{name}: newest label time {label['t']} does not match sweep time")
    plan = make_plan(kind, sweeps, g)
    _, winner = resolve_cells(newest.xyz, g)
    cells = np.flatnonzero(winner >= 0)
    xyz = newest.xyz[winner[cells]]
    _, az, _ = range_azimuth(xyz)
    tracks = tracks_from_labels(label, newest.pose, n_future, dt)
    match = match_points(xyz, newest.pose, tracks)
    for j, tr in enumerate(tracks):
        tr.n_points = int((match == j).sum())
    if tracks:
        gc = np.stack([t.centers for t in tracks])
        gd = np.stack([t.dims for t in tracks])
        gh = np.stack([t.headings for t in tracks])
    else:
        gc, gd, gh = np.zeros((0, n_future + 1, 2)), np.zeros((0, 2)), np.zeros((0, n_future + 1))
    targets = LossTargets(xyz[:, :2].copy(), az, (match >= 0).astype(np.int64), match, gc, gd, gh)
    return Sample(name, plan, cells, targets, tracks, float(label.get("ego_speed", 0.0)))


def samples_from_logs(scenes, kind: str, g: RvGeometry, n_sweeps: int = 6, n_future: int = 6,
                      dt: float = 0.5) -> list[Sample]:
    """Samples for a list of objects with ``name``/``sweeps``/``labels`` (scene logs)."""
    return [build_sample(getattr(s, "name", str(i)), s.sweeps, s.labels, kind, g, n_sweeps, n_future, dt)
            for i, s in enumerate(scenes)]

