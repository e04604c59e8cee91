"""Range-view projection and min-range rasterization.

Rows index discretized elevation measured from ``phi_min``; columns index
discretized azimuth, wrapped modulo ``n_cols``.  Row 0 is the lowest beam.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .geometry import TWO_PI, Pose, Sweep, range_azimuth, warp_sweep

RVIM_MAGIC = b"RVIM"
RVIM_HEADER = struct.Struct("<4sIII8x")  # 24 bytes


@dataclass(frozen=True)
class RvGeometry:
    n_rows: int
    n_cols: int
    phi_min: float
    phi_max: float

    def __post_init__(self) -> None:
        if self.n_rows <= 0 or self.n_cols <= 0:
            raise ConfigError("range image needs positive rows and columns")
        if not self.phi_max > self.phi_min:
            raise ConfigError("phi_max must exceed phi_min")

    @classmethod
    def from_degrees(cls, n_rows: int = 32, n_cols: int = 1024,
                     phi_min_deg: float = -30.0, phi_max_deg: float = 10.0) -> RvGeometry:
        return cls(int(n_rows), int(n_cols), math.radians(phi_min_deg), math.radians(phi_max_deg))

    @property
    def d_phi(self) -> float:
        return (self.phi_max - self.phi_min) / self.n_rows

    @property
    def d_theta(self) -> float:
        return TWO_PI / self.n_cols

    @property
    def n_cells(self) -> int:
        return self.n_rows * self.n_cols

    @property
    def shape(self) -> tuple[int, int]:
        return self.n_rows, self.n_cols

    def row_elevations(self) -> np.ndarray:
        """Elevation at each row's bin center."""
        return self.phi_min + (np.arange(self.n_rows) + 0.5) * self.d_phi

    def col_azimuths(self) -> np.ndarray:
        return (np.arange(self.n_cols) + 0.5) * self.d_theta


DEFAULT_GEOMETRY = RvGeometry.from_degrees()


def project(xyz: np.ndarray, g: RvGeometry) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized projection.  Returns ``(row, col, valid)``; invalid entries hold -1."""
    rng, az, degenerate = range_azimuth(xyz)
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    with np.errstate(invalid="ignore", divide="ignore"):
        phi = np.arcsin(np.clip(xyz[:, 2] / np.where(degenerate, 1.0, rng), -1.0, 1.0))
    row = np.floor((phi - g.phi_min) / g.d_phi)
    valid = ~degenerate & (phi >= g.phi_min) & (phi < g.phi_max) & (row >= 0) & (row < g.n_rows)
    col = np.mod(np.floor(az / g.d_theta), g.n_cols)
    row = np.where(valid, row, -1).astype(np.int64)
    col = np.where(valid, col, -1).astype(np.int64)
    return row, col, valid


def project_point(xyz, g: RvGeometry) -> tuple[int, int] | None:
    """Cell of a single point, or ``None`` when out of view (including zero range)."""
    row, col, valid = project(np.asarray(xyz, dtype=np.float64).reshape(1, 3), g)
    if not valid[0]:
        return None
    return int(row[0]), int(col[0])


def resolve_cells(xyz: np.ndarray, g: RvGeometry) -> tuple[np.ndarray, np.ndarray]:
    """Min-range cell assignment.

    Returns ``(cell, winner)``: ``cell[i]`` is the flat cell of point ``i``
    (-1 out of view) and ``winner[c]`` the index of the point kept in cell
    ``c`` (-1 empty).  Ties on range go to the lower point index.
    """
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    row, col, valid = project(xyz, g)
    cell = np.where(valid, row * g.n_cols + col, -1)
    winner = np.full(g.n_cells, -1, dtype=np.int64)
    idx = np.flatnonzero(valid)
    if len(idx):
        rng = np.linalg.norm(xyz[idx], axis=1)
        order = np.lexsort((idx, rng, cell[idx]))
        sorted_cells = cell[idx][order]
        first = np.ones(len(order), dtype=bool)
        first[1:] = sorted_cells[1:] != sorted_cells[:-1]
        winner[sorted_cells[first]] = idx[order][first]
    return cell, winner


@dataclass(frozen=True, eq=False)
class RangeImage:
    """Rasterized sweep.  Arrays are ``(n_rows, n_cols, ...)``; empty cells hold index -1."""

    geometry: RvGeometry
    point_index: np.ndarray
    range: np.ndarray
    features: np.ndarray
    xyz: np.ndarray

    @property
    def occupied(self) -> np.ndarray:
        return self.point_index >= 0

    @property
    def n_occupied(self) -> int:
        return int(self.occupied.sum())

    def channels(self) -> np.ndarray:
        """``(n_rows, n_cols, F + 1)`` feature grid; the last channel is the occupancy flag."""
        occ = self.occupied[..., None].astype(self.features.dtype)
        return np.concatenate([self.features, occ], axis=-1)

    def surviving_indices(self) -> np.ndarray:
        return np.sort(self.point_index[self.occupied])

    def to_points(self) -> tuple[np.ndarray, np.ndarray]:
        """Winning points (row-major order) and their feature vectors."""
        occ = self.occupied
        return self.xyz[occ], self.features[occ]


def rasterize(s: Sweep, g: RvGeometry, features: np.ndarray | None = None) -> RangeImage:
    """Rasterize a sweep (already expressed in the image viewpoint).

    ``features`` overrides the per-point vectors copied into cells; by
    default the sweep's :class:`PointFeatures` are used.
    """
    feats = s.feature_array() if features is None else np.asarray(features)
    if len(feats) != len(s):
        raise ConfigError("feature rows must match point count")
    return rasterize_points(s.xyz, feats, g)


def rasterize_points(xyz: np.ndarray, feats: np.ndarray, g: RvGeometry) -> RangeImage:
    feats = np.asarray(feats)
    feats = feats if feats.ndim == 2 else feats.reshape(len(xyz), -1)
    _, winner = resolve_cells(xyz, g)
    occ = winner >= 0
    w = winner[occ]
    point_index = winner.reshape(g.shape)
    rng = np.zeros(g.n_cells)
    rng[occ] = np.linalg.norm(xyz[w], axis=1)
    out_feats = np.zeros((g.n_cells, feats.shape[1]), dtype=feats.dtype if feats.size else np.float64)
    out_feats[occ] = feats[w]
    out_xyz = np.zeros((g.n_cells, 3))
    out_xyz[occ] = xyz[w]
    return RangeImage(g, point_index, rng.reshape(g.shape), out_feats.reshape(*g.shape, -1),
                      out_xyz.reshape(*g.shape, 3))


@dataclass(frozen=True)
class DropStats:
    n_points: int
    collision: int
    out_of_view: int

    @property
    def total(self) -> int:
        return self.collision + self.out_of_view

    @property
    def fraction(self) -> float:
        return self.total / self.n_points if self.n_points else 0.0


def drops_for(xyz: np.ndarray, g: RvGeometry) -> DropStats:
    cell, winner = resolve_cells(xyz, g)
    n_in_view = int((cell >= 0).sum())
    n_kept = int((winner >= 0).sum())
    return DropStats(len(cell), n_in_view - n_kept, len(cell) - n_in_view)


def count_dropped(s: Sweep, view: Pose, g: RvGeometry) -> DropStats:
    """Points of ``s`` lost when rasterized from ``view``, split by cause."""
    return drops_for(warp_sweep(s, view).xyz, g)


def write_rvim(path: str | Path, channels: np.ndarray) -> None:
    """Dump an ``(n_rows, n_cols, C)`` grid as little-endian f32 behind a 24-byte header."""
    arr = np.ascontiguousarray(channels, dtype="<f4")
    if arr.ndim != 3:
        raise ConfigError("RVIM dump expects (rows, cols, channels)")
    with open(path, "wb") as fh:
        fh.write(RVIM_HEADER.pack(RVIM_MAGIC, *arr.shape))
        fh.write(arr.tobytes())


def read_rvim(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < RVIM_HEADER.size:
        raise DataError("RVIM file truncated")
    magic, rows, cols, chans = RVIM_HEADER.unpack_from(raw)
    if magic != RVIM_MAGIC:
        raise DataError("not an RVIM file")
    body = np.frombuffer(raw, dtype="<f4", offset=RVIM_HEADER.size)
    if body.size != rows * cols * chans:
        raise DataError("RVIM payload size does not match header")
    return body.reshape(rows, cols, chans).copy()
