"""Poses, rigid transforms, sweeps and per-point features.

A :class:`Pose` maps sensor-frame coordinates into the world frame.  Point
sets are stored as ``(N, 3)`` float64 arrays; a :class:`Sweep` keeps its
points in the frame of its ``pose``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .errors import ConfigError

TWO_PI = 2.0 * math.pi
DEGENERATE_RANGE = 1e-12

# Column order of PointFeatures.as_array().
FEATURE_NAMES = ("range_native", "azimuth_native", "intensity", "range_current", "azimuth_current")


def rot_z(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid sensor-to-world transform with a capture timestamp."""

    rotation: np.ndarray
    translation: np.ndarray
    timestamp: float = 0.0

    def __post_init__(self) -> None:
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        trans = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(rot)) or not np.all(np.isfinite(trans)):
            raise ConfigError("pose contains non-finite values")
        if np.abs(rot.T @ rot - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(rot) - 1.0) > 1e-9:
            raise ConfigError("pose rotation must be orthonormal with det +1")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)
        object.__setattr__(self, "timestamp", float(self.timestamp))

    @classmethod
    def identity(cls, timestamp: float = 0.0) -> Pose:
        return cls(np.eye(3), np.zeros(3), timestamp)

    @classmethod
    def planar(cls, x: float, y: float, yaw: float, z: float = 0.0, timestamp: float = 0.0) -> Pose:
        """SE(2) pose embedded in 3D: yaw about +z, translation (x, y, z)."""
        return cls(rot_z(yaw), np.array([x, y, z], dtype=np.float64), timestamp)

    @classmethod
    def from_matrix(cls, matrix: Sequence[float] | np.ndarray, timestamp: float = 0.0) -> Pose:
        m = np.asarray(matrix, dtype=np.float64).reshape(4, 4)
        if np.abs(m[3] - np.array([0.0, 0.0, 0.0, 1.0])).max() > 1e-9:
            raise ConfigError("homogeneous pose matrix must end with row [0, 0, 0, 1]")
        return cls(m[:3, :3], m[:3, 3], timestamp)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @property
    def yaw(self) -> float:
        return math.atan2(self.rotation[1, 0], self.rotation[0, 0])

    def compose(self, other: Pose) -> Pose:
        """``self ∘ other``: apply ``other`` first, then ``self``.  Keeps ``other``'s timestamp."""
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation,
                    other.timestamp)

    def inverse(self) -> Pose:
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation, self.timestamp)

    def apply(self, xyz: np.ndarray) -> np.ndarray:
        """Map ``(N, 3)`` (or ``(3,)``) points from this pose's frame to the parent frame."""
        xyz = np.asarray(xyz, dtype=np.float64)
        return xyz @ self.rotation.T + self.translation

    def allclose(self, other: Pose, atol: float = 1e-12) -> bool:
        return bool(np.allclose(self.rotation, other.rotation, rtol=0.0, atol=atol)
                    and np.allclose(self.translation, other.translation, rtol=0.0, atol=atol))

    def relative_to(self, dst: Pose) -> Pose:
        """Transform taking coordinates in ``self``'s frame to ``dst``'s frame."""
        return dst.inverse().compose(self)


@dataclass(frozen=True, eq=False)
class Point:
    xyz: np.ndarray
    intensity: float = 0.0
    ring: int | None = None

    def __post_init__(self) -> None:
        xyz = np.asarray(self.xyz, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(xyz)):
            raise ConfigError("point coordinates must be finite")
        object.__setattr__(self, "xyz", xyz)


@dataclass(frozen=True, eq=False)
class PointFeatures:
    """Per-point hand-crafted features, stored column-wise (length N each)."""

    range_native: np.ndarray
    azimuth_native: np.ndarray
    intensity: np.ndarray
    range_current: np.ndarray
    azimuth_current: np.ndarray
    degenerate: np.ndarray  # bool; point at a sensor origin (native or current)

    def __len__(self) -> int:
        return len(self.range_native)

    def as_array(self) -> np.ndarray:
        return np.stack([self.range_native, self.azimuth_native, self.intensity,
                         self.range_current, self.azimuth_current], axis=1)


def range_azimuth(xyz: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Range, azimuth in [0, 2π) and a degenerate mask for ``(N, 3)`` points."""
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    rng = np.linalg.norm(xyz, axis=1)
    degenerate = rng < DEGENERATE_RANGE
    az = wrap_angle(np.arctan2(xyz[:, 1], xyz[:, 0]))
    az[degenerate] = 0.0
    rng = np.where(degenerate, 0.0, rng)
    return rng, az, degenerate


def wrap_angle(theta: np.ndarray) -> np.ndarray:
    """Wrap to [0, 2π); ``np.mod`` alone can round tiny negatives up to exactly 2π."""
    out = np.mod(theta, TWO_PI)
    return np.where(out >= TWO_PI, 0.0, out)


@dataclass(frozen=True, eq=False)
class Sweep:
    """One 360° slice.  ``xyz`` is expressed in the frame of ``pose``."""

    index: int
    pose: Pose
    xyz: np.ndarray
    intensity: np.ndarray
    ring: np.ndarray  # -1 where unknown
    features: PointFeatures | None = None

    def __post_init__(self) -> None:
        xyz = np.asarray(self.xyz, dtype=np.float64).reshape(-1, 3)
        n = len(xyz)
        intensity = np.asarray(self.intensity, dtype=np.float64).reshape(n)
        ring = np.asarray(self.ring, dtype=np.int64).reshape(n)
        if not np.all(np.isfinite(xyz)):
            raise ConfigError("sweep contains non-finite coordinates")
        if self.features is not None and len(self.features) != n:
            raise ConfigError("features must be parallel to points")
        object.__setattr__(self, "xyz", xyz)
        object.__setattr__(self, "intensity", intensity)
        object.__setattr__(self, "ring", ring)

    @classmethod
    def from_points(cls, index: int, pose: Pose, points: Sequence[Point]) -> Sweep:
        xyz = np.array([p.xyz for p in points], dtype=np.float64).reshape(-1, 3)
        return cls(index, pose, xyz, [p.intensity for p in points],
                   [-1 if p.ring is None else p.ring for p in points])

    @classmethod
    def empty(cls, index: int, pose: Pose) -> Sweep:
        return cls(index, pose, np.zeros((0, 3)), np.zeros(0), np.zeros(0, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.xyz)

    @property
    def points(self) -> list[Point]:
        return [Point(self.xyz[i], float(self.intensity[i]), None if self.ring[i] < 0 else int(self.ring[i]))
                for i in range(len(self))]

    def with_features(self, current_pose: Pose) -> Sweep:
        return replace(self, features=compute_point_features(self, current_pose))

    def feature_array(self) -> np.ndarray:
        """``(N, 5)`` feature matrix; features default to own-frame values when absent."""
        feats = self.features if self.features is not None else compute_point_features(self, self.pose)
        return feats.as_array()


def transform_point(p: Point, src: Pose, dst: Pose) -> Point:
    xyz = src.relative_to(dst).apply(p.xyz)
    return Point(xyz, p.intensity, p.ring)


def warp_sweep(s: Sweep, dst: Pose) -> Sweep:
    """Express every point of ``s`` in ``dst``'s frame.  Never drops points."""
    xyz = s.pose.relative_to(dst).apply(s.xyz)
    return replace(s, pose=dst, xyz=xyz)


def compute_point_features(s: Sweep, current_pose: Pose) -> PointFeatures:
    """Native range/azimuth in ``s.pose``, plus range/azimuth after warping to ``current_pose``."""
    r, az, deg_native = range_azimuth(s.xyz)
    cur = s.pose.relative_to(current_pose).apply(s.xyz)
    r0, az0, deg_cur = range_azimuth(cur)
    return PointFeatures(r, az, s.intensity.copy(), r0, az0, deg_native | deg_cur)
