"""On-disk formats: sweep and label logs, run configs, checkpoints, loss curves."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DataError
from .geometry import Pose, Sweep
from .nn.layers import BackboneConfig, HeadLayout
from .rangeview import DEFAULT_GEOMETRY, RvGeometry

SWEEPS_FILE = "sweeps.jsonl"
LABELS_FILE = "labels.jsonl"
GEOMETRY_FILE = "geometry.json"


# sweeps ----------------------------------------------------------------------------------------
def sweep_record(s: Sweep) -> dict:
    pts = np.column_stack([s.xyz, s.intensity, s.ring]) if len(s) else np.zeros((0, 5))
    return {"t": float(s.pose.timestamp), "pose": [float(v) for v in s.pose.matrix().ravel()],
            "points": pts.tolist()}


def sweep_from_record(rec: dict, index: int) -> Sweep:
    try:
        pose = Pose.from_matrix(rec["pose"], timestamp=float(rec["t"]))
        pts = np.asarray(rec["points"], dtype=float).reshape(-1, 5)
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed sweep record: {exc}") from exc
    return Sweep(index, pose, pts[:, :3], pts[:, 3], pts[:, 4].astype(np.int64))


def _write_jsonl(path: Path, records: Iterable[dict]) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, separators=(",", ":")) + "\n")


def _read_jsonl(path: Path) -> list[dict]:
    if not path.exists():
        raise DataError(f"missing file {path}")
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                try:
                    out.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise DataError(f"{path}:{lineno}: {exc}") from exc
    return out


def write_sweeps(path: str | Path, sweeps: Sequence[Sweep]) -> None:
    """One JSON record per sweep, oldest first."""
    _write_jsonl(Path(path), (sweep_record(s) for s in sweeps))


def read_sweeps(path: str | Path) -> list[Sweep]:
    """Sweeps oldest first; the newest gets index 0, older ones negative indices."""
    recs = _read_jsonl(Path(path))
    n = len(recs)
    return [sweep_from_record(r, i - (n - 1)) for i, r in enumerate(recs)]


def write_labels(path: str | Path, labels: Sequence[dict]) -> None:
    _write_jsonl(Path(path), labels)


def read_labels(path: str | Path) -> list[dict]:
    recs = _read_jsonl(Path(path))
    for r in recs:
        if "t" not in r or "actors" not in r:
            raise DataError(f"label record missing 't' or 'actors' in {path}")
    return recs


def geometry_to_dict(g: RvGeometry) -> dict:
    return {"n_rows": g.n_rows, "n_cols": g.n_cols, "phi_min": g.phi_min, "phi_max": g.phi_max}


def write_geometry(path: str | Path, g: RvGeometry) -> None:
    Path(path).write_text(json.dumps(geometry_to_dict(g)) + "\n")


def read_geometry(path: str | Path) -> RvGeometry:
    path = Path(path)
    if not path.exists():
        return DEFAULT_GEOMETRY
    try:
        return RvGeometry(**json.loads(path.read_text()))
    except (TypeError, ValueError) as exc:
        raise DataError(f"bad geometry file {path}: {exc}") from exc


@dataclass(eq=False)
class SceneLog:
    name: str
    sweeps: list[Sweep]
    labels: list[dict]


def write_scene(directory: str | Path, sweeps: Sequence[Sweep], labels: Sequence[dict]) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_sweeps(d / SWEEPS_FILE, sweeps)
    write_labels(d / LABELS_FILE, labels)


def scene_dirs(root: str | Path) -> list[Path]:
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"data directory {root} does not exist")
    dirs = sorted(p for p in root.iterdir() if (p / SWEEPS_FILE).exists())
    if not dirs:
        raise DataError(f"no scenes under {root}")
    return dirs


def read_scene(directory: str | Path) -> SceneLog:
    d = Path(directory)
    sweeps = read_sweeps(d / SWEEPS_FILE)
    labels = read_labels(d / LABELS_FILE)
    if len(labels) != len(sweeps):
        raise DataError(f"{d}: {len(sweeps)} sweeps but {len(labels)} label records")
    return SceneLog(d.name, sweeps, labels)


def read_dataset(root: str | Path) -> tuple[RvGeometry, list[SceneLog]]:
    root = Path(root)
    return read_geometry(root / GEOMETRY_FILE), [read_scene(d) for d in scene_dirs(root)]


# run configuration -------------------------------------------------------------------------------
@dataclass(frozen=True)
class RunConfig:
    """Training run settings; every field maps to a dotted ``key=value`` config entry."""

    kind: str = "incremental"
    n_sweeps: int = 6
    extractor_width: int = 16
    extractor_layers: int = 1
    widths: tuple[int, ...] = (32, 64, 128)
    kernel: int = 3
    convs_per_stage: int = 2
    n_future: int = 6
    iterations: int = 2000
    lr_start: float = 2e-3
    lr_end: float = 2e-5
    decay_every: int = 250
    momentum: float = 0.9
    weight_decay: float = 0.0
    grad_clip: float | None = 10.0
    b_gt: float = 0.1
    gamma: float = 2.0
    alpha_future: float = 4.0
    beta_at: float = 2.0
    beta_ct: float = 1.0
    seed: int = 0
    log_every: int = 10
    dtype: str = "float32"

    def backbone(self) -> BackboneConfig:
        return BackboneConfig(self.widths, self.kernel, self.convs_per_stage)

    def layout(self) -> HeadLayout:
        return HeadLayout(2, self.n_future)


CONFIG_KEYS = {
    "fusion.kind": "kind", "fusion.n_sweeps": "n_sweeps", "fusion.extractor_width": "extractor_width",
    "fusion.extractor_layers": "extractor_layers", "nn.widths": "widths", "nn.kernel": "kernel",
    "nn.convs_per_stage": "convs_per_stage", "nn.n_future": "n_future", "nn.dtype": "dtype",
    "train.iterations": "iterations", "train.lr_start": "lr_start", "train.lr_end": "lr_end",
    "train.decay_every": "decay_every", "train.momentum": "momentum", "train.weight_decay": "weight_decay",
    "train.grad_clip": "grad_clip", "train.seed": "seed", "train.log_every": "log_every",
    "loss.b_gt": "b_gt", "loss.gamma": "gamma", "loss.alpha_future": "alpha_future",
    "loss.beta_at": "beta_at", "loss.beta_ct": "beta_ct",
}


def _coerce(name: str, raw: str):
    default = RunConfig.__dataclass_fields__[name].default
    if name == "widths":
        return tuple(int(v) for v in raw.replace(",", " ").split())
    if name == "grad_clip":
        return None if raw.lower() in ("none", "") else float(raw)
    return type(default)(raw)


def parse_config(text: str, base: RunConfig = RunConfig()) -> RunConfig:
    """Parse ``key = value`` lines (``#`` comments) into a :class:`RunConfig`."""
    updates = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = (p.strip() for p in line.partition("="))
        if not sep:
            raise ConfigError(f"config line {lineno}: expected key=value")
        if key not in CONFIG_KEYS:
            raise ConfigError(f"config line {lineno}: unknown key {key!r}")
        try:
            updates[CONFIG_KEYS[key]] = _coerce(CONFIG_KEYS[key], value)
        except ValueError as exc:
            raise ConfigError(f"config line {lineno}: bad value for {key}: {exc}") from exc
    return replace(base, **updates)


def format_config(cfg: RunConfig) -> str:
    inv = {v: k for k, v in CONFIG_KEYS.items()}
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        lines.append(f"{inv[f.name]} = {' '.join(map(str, v)) if isinstance(v, tuple) else v}")
    return "\n".join(lines) + "\n"


# checkpoints ---------------------------------------------------------------------------------------
def manifest_path(ckpt: str | Path) -> Path:
    return Path(str(ckpt) + ".json")


def save_checkpoint(path: str | Path, net, extra: dict | None = None) -> None:
    """Flat little-endian f32 parameters plus a JSON manifest next to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    net.params.flat().astype("<f4").tofile(path)
    manifest = {"net": net.cfg.to_dict(), "params": net.params.manifest(), **(extra or {})}
    manifest_path(path).write_text(json.dumps(manifest, indent=1) + "\n")


def load_checkpoint(path: str | Path):
    """Rebuild the network stored at ``path``; returns ``(net, manifest)``."""
    from .nn.model import FusionNet, NetConfig

    path = Path(path)
    mpath = manifest_path(path)
    if not path.exists() or not mpath.exists():
        raise DataError(f"checkpoint {path} or its manifest is missing")
    try:
        manifest = json.loads(mpath.read_text())
        net = FusionNet(NetConfig.from_dict(manifest["net"]))
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise DataError(f"bad checkpoint manifest {mpath}: {exc}") from exc
    expected = [{"name": k, "shape": list(t.shape)} for k, t in net.params]
    if manifest.get("params") != expected:
        raise DataError(f"checkpoint manifest {mpath} does not match the network layout")
    try:
        net.params.load_flat(np.fromfile(path, dtype="<f4"))
    except ConfigError as exc:
        raise DataError(str(exc)) from exc
    return net, manifest


# training log ------------------------------------------------------------------------------------------
TRAIN_LOG_FIELDS = ("iteration", "L_cls", "L_reg", "total")


@dataclass
class TrainLog:
    rows: list[tuple[int, float, float, float]] = field(default_factory=list)

    def append(self, it: int, cls: float, reg: float, total: float) -> None:
        self.rows.append((it, cls, reg, total))

    def write(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TRAIN_LOG_FIELDS)
            for it, c, r, t in self.rows:
                w.writerow([it, f"{c:.6g}", f"{r:.6g}", f"{t:.6g}"])

    @classmethod
    def read(cls, path: str | Path) -> TrainLog:
        with open(path, newline="") as fh:
            rows = [(int(r["iteration"]), float(r["L_cls"]), float(r["L_reg"]), float(r["total"]))
                    for r in csv.DictReader(fh)]
        return cls(rows)

    def totals(self) -> np.ndarray:
        return np.array([r[3] for r in self.rows])


def write_detections(path: str | Path, detections: Sequence) -> None:
    _write_jsonl(Path(path), (d.to_dict() for d in detections))


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow(["" if v is None else (f"{v:.6g}" if isinstance(v, float) else v) for v in r])
