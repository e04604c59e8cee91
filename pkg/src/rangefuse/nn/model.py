"""Fusion network: strategy-specific feature extractors, backbone and heads."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from ..errors import ConfigError
from ..fusion import DISP_CHANNELS, KINDS, RAW_CHANNELS, FusionPlan, assemble
from .layers import Backbone, BackboneConfig, ConvBlock, HeadLayout, Heads, ParamStore, backbone_gather
from .tensor import Tensor, concat, mul

# Fixed input normalization: ranges in tens of meters, azimuths in radians.
RAW_SCALE = np.array([1 / 20, 1 / math.pi, 1.0, 1 / 20, 1 / math.pi, 1.0])
DISP_SCALE = 0.25
SURFACE_CHANNELS = 4
SURFACE_MAX_STEP = 1.5  # meters; larger neighbour gaps are treated as object boundaries


def surface_features(raw: np.ndarray, max_step: float = SURFACE_MAX_STEP) -> np.ndarray:
    """Local surface direction of a native ``(6, H, W)`` raw image, relative to each cell's ray.

    The BEV offset to the next and previous column neighbour is expressed in the
    cell's ray frame and encoded as ``(cos 2φ, sin 2φ)``; channels are zero where
    either cell is empty or the neighbour lies more than ``max_step`` away.
    """
    r, az, occ = raw[0], raw[1], raw[5] > 0
    xy = np.stack([r * np.cos(az), r * np.sin(az)])
    c, s = np.cos(az), np.sin(az)
    out = []
    for shift in (-1, 1):
        d = np.roll(xy, shift, axis=2) - xy
        radial, tangential = c * d[0] + s * d[1], c * d[1] - s * d[0]
        n = np.hypot(radial, tangential)
        ok = occ & np.roll(occ, shift, axis=1) & (n > 1e-6) & (n < max_step)
        n = np.where(ok, n, 1.0)
        u, v = np.where(ok, radial / n, 0.0), np.where(ok, tangential / n, 0.0)
        out += [np.where(ok, u * u - v * v, 0.0), 2.0 * u * v]
    return np.stack(out)


@dataclass(frozen=True)
class NetConfig:
    kind: str = "incremental"
    n_sweeps: int = 6
    extractor_width: int = 16
    extractor_layers: int = 1
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    layout: HeadLayout = field(default_factory=HeadLayout)
    horizon_dt: float = 0.5
    seed: int = 0
    dtype: str = "float32"
    surface: bool = True  # append surface_features of the newest sweep to the backbone input

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ConfigError(f"unknown fusion kind {self.kind!r}")
        if self.n_sweeps < 1:
            raise ConfigError("n_sweeps must be >= 1")
        if self.kind == "incremental" and self.extractor_width < 1:
            raise ConfigError("extractor width must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> NetConfig:
        d = dict(d)
        d["backbone"] = BackboneConfig(**{**d.get("backbone", {}),
                                          "widths": tuple(d.get("backbone", {}).get("widths", (32, 64, 128)))})
        d["layout"] = HeadLayout(**d.get("layout", {}))
        return cls(**d)


def input_width(kind: str, n_sweeps: int, feat: int) -> int:
    """Channels entering the backbone for each strategy."""
    k = n_sweeps
    if kind == "early":
        return feat
    if kind == "late":
        return feat + (k - 1) * (feat + 1) + (k - 1) * DISP_CHANNELS
    return feat


class FusionNet:
    def __init__(self, cfg: NetConfig):
        self.cfg = cfg
        self.params = ParamStore(cfg.seed, cfg.dtype)
        p, k, f, nl = self.params, cfg.n_sweeps, cfg.extractor_width, cfg.extractor_layers
        self.init = None
        if cfg.kind == "early":
            self.extractor = ConvBlock(p, "extractor", k * RAW_CHANNELS + (k - 1) * DISP_CHANNELS, f, nl)
        elif cfg.kind == "late":
            self.extractor = ConvBlock(p, "extractor", RAW_CHANNELS, f, nl)
        else:
            self.init = ConvBlock(p, "init", RAW_CHANNELS, f, 1)
            self.extractor = ConvBlock(p, "extractor", RAW_CHANNELS + f + 1 + DISP_CHANNELS, f, nl)
        extra = SURFACE_CHANNELS if cfg.surface else 0
        self.backbone = Backbone(p, input_width(cfg.kind, k, f) + extra, cfg.backbone)
        self.heads = Heads(p, cfg.backbone.out_width, cfg.layout)
        self.out_scale = self._output_scale()

    def _output_scale(self) -> np.ndarray:
        """Per-column multiplier on head outputs so far-horizon offsets need modest weights."""
        lay = self.cfg.layout
        scale = np.ones(lay.width)
        steps = np.arange(lay.n_steps) * self.cfg.horizon_dt
        scale[lay.slices["centers"]] = np.repeat(1.0 + 4.0 * steps, 2)
        return scale.astype(self.cfg.dtype)

    def prepare(self, plan: FusionPlan) -> FusionPlan:
        """Normalize and cast a plan once, ahead of repeated forward passes."""
        if plan.kind != self.cfg.kind:
            raise ConfigError(f"plan kind {plan.kind!r} does not match model kind {self.cfg.kind!r}")
        if len(plan.sweep_ids) != self.cfg.n_sweeps:
            raise ConfigError(f"plan has {len(plan.sweep_ids)} sweeps, model expects {self.cfg.n_sweeps}")
        return plan.scaled(RAW_SCALE, DISP_SCALE).astype(self.cfg.dtype)

    def features(self, plan: FusionPlan) -> Tensor:
        init = self.init if self.init is not None else (lambda x: x)
        x = assemble(plan, self.extractor, init)
        if self.cfg.surface:
            newest = plan.raw[-1] / RAW_SCALE.reshape(-1, 1, 1).astype(plan.raw[-1].dtype)
            x = concat([x, Tensor(surface_features(newest).astype(x.dtype))], axis=0)
        return self.backbone(x)

    def forward(self, plan: FusionPlan, cells: np.ndarray) -> Tensor:
        """Raw ``(N, width)`` head output for points at flat ``cells`` of a prepared plan."""
        feats = backbone_gather(self.features(plan), cells)
        return mul(self.heads(feats), self.out_scale)

    __call__ = forward

    def n_parameters(self) -> int:
        return sum(t.size for _, t in self.params)
