"""Parameterized layers, the multi-scale backbone and per-point heads."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError
from .tensor import Tensor, add, avg_pool2, channel_norm, concat, conv2d, gather_points, log_softmax, matmul, mul, relu, upsample2


class ParamStore:
    """Ordered collection of named trainable tensors; the order defines checkpoint layout."""

    def __init__(self, seed: int = 0, dtype=np.float32):
        self.rng = np.random.default_rng(seed)
        self.dtype = np.dtype(dtype)
        self.tensors: dict[str, Tensor] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.tensors:
            raise ConfigError(f"duplicate parameter {name!r}")
        t = Tensor(np.asarray(value, dtype=self.dtype), requires_grad=True, name=name)
        self.tensors[name] = t
        return t

    def he(self, name: str, shape: tuple[int, ...], fan_in: int) -> Tensor:
        return self.add(name, self.rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape))

    def zeros(self, name: str, shape: tuple[int, ...]) -> Tensor:
        return self.add(name, np.zeros(shape))

    def __iter__(self):
        return iter(self.tensors.items())

    def __len__(self) -> int:
        return len(self.tensors)

    def values(self) -> list[Tensor]:
        return list(self.tensors.values())

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def flat(self) -> np.ndarray:
        return np.concatenate([t.data.ravel() for t in self.tensors.values()]) if self.tensors else np.zeros(0)

    def load_flat(self, values: np.ndarray) -> None:
        values = np.asarray(values)
        n = sum(t.size for t in self.tensors.values())
        if values.size != n:
            raise ConfigError(f"parameter vector has {values.size} values, model needs {n}")
        pos = 0
        for t in self.tensors.values():
            t.data[...] = values[pos:pos + t.size].reshape(t.shape)
            pos += t.size

    def manifest(self) -> list[dict]:
        return [{"name": k, "shape": list(t.shape)} for k, t in self.tensors.items()]


class Conv:
    def __init__(self, params: ParamStore, name: str, cin: int, cout: int, k: int = 3):
        self.w = params.he(f"{name}.w", (cout, cin, k, k), cin * k * k)
        self.b = params.zeros(f"{name}.b", (cout,))
        self.cin, self.cout = cin, cout

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.w, self.b)


class ConvBlock:
    """Stack of conv + ReLU layers, optionally with per-image channel normalization before each ReLU."""

    def __init__(self, params: ParamStore, name: str, cin: int, cout: int, layers: int = 1, k: int = 3,
                 norm: bool = False):
        if layers < 1:
            raise ConfigError("conv block needs at least one layer")
        self.convs = [Conv(params, f"{name}.{i}", cin if i == 0 else cout, cout, k) for i in range(layers)]
        self.affine = []
        if norm:
            self.affine = [(params.add(f"{name}.{i}.gamma", np.ones((cout, 1, 1))),
                            params.zeros(f"{name}.{i}.beta", (cout, 1, 1))) for i in range(layers)]
        self.cout = cout

    def __call__(self, x: Tensor) -> Tensor:
        for i, c in enumerate(self.convs):
            x = c(x)
            if self.affine:
                gamma, beta = self.affine[i]
                x = add(mul(channel_norm(x), gamma), beta)
            x = relu(x)
        return x


@dataclass(frozen=True)
class BackboneConfig:
    widths: tuple[int, ...] = (32, 64, 128)
    kernel: int = 3
    convs_per_stage: int = 2
    norm: bool = True

    def __post_init__(self) -> None:
        if len(self.widths) < 1 or any(w <= 0 for w in self.widths):
            raise ConfigError("backbone widths must be positive")
        if self.kernel % 2 == 0:
            raise ConfigError("backbone kernel size must be odd")

    @property
    def stride_multiple(self) -> int:
        """Input rows and columns must be divisible by this."""
        return 2 ** (len(self.widths) - 1)

    @property
    def out_width(self) -> int:
        return self.widths[0]


class Backbone:
    """Encoder-decoder with skip connections; output has the input's spatial size."""

    def __init__(self, params: ParamStore, cin: int, cfg: BackboneConfig, name: str = "backbone"):
        self.cfg = cfg
        self.cin = cin
        n = cfg.convs_per_stage
        self.down = []
        prev = cin
        for i, w in enumerate(cfg.widths):
            self.down.append(ConvBlock(params, f"{name}.down{i}", prev, w, n, cfg.kernel, cfg.norm))
            prev = w
        self.up = []
        for i in range(len(cfg.widths) - 2, -1, -1):
            w = cfg.widths[i]
            self.up.append(ConvBlock(params, f"{name}.up{i}", prev + w, w, 1, cfg.kernel, cfg.norm))
            prev = w

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[0] != self.cin:
            raise ConfigError(f"backbone expects {self.cin} channels, got {x.shape[0]}")
        m = self.cfg.stride_multiple
        if x.shape[1] % m or x.shape[2] % m:
            raise ConfigError(f"image {x.shape[1:]} not divisible by {m}")
        skips = []
        for i, block in enumerate(self.down):
            if i:
                x = avg_pool2(x)
            x = block(x)
            skips.append(x)
        for block, skip in zip(self.up, reversed(skips[:-1])):
            x = block(concat([upsample2(x), skip], axis=0))
        return x


@dataclass(frozen=True)
class HeadLayout:
    """Column layout of the per-point head output."""

    n_classes: int = 2
    n_future: int = 6  # T; predictions cover t = 0..T

    @property
    def n_steps(self) -> int:
        return self.n_future + 1

    @property
    def slices(self) -> dict[str, slice]:
        c, s = self.n_classes, self.n_steps
        bounds = {"logits": c, "centers": 2 * s, "log_dims": 2, "orient": 2 * s, "log_sigma": 2 * s}
        out, pos = {}, 0
        for k, n in bounds.items():
            out[k] = slice(pos, pos + n)
            pos += n
        return out

    @property
    def width(self) -> int:
        return self.n_classes + 2 + 6 * self.n_steps


@dataclass(eq=False)
class PointPredictions:
    """Per-point outputs (numpy views of the head tensor)."""

    class_probs: np.ndarray  # (N, C)
    centers: np.ndarray  # (N, T+1, 2) ray-frame center offsets
    log_dims: np.ndarray  # (N, 2) log of (w, h)
    orient: np.ndarray  # (N, T+1, 2) (cos 2θ, sin 2θ)
    log_sigma: np.ndarray  # (N, T+1, 2) log (σ_AT, σ_CT)
    raw: Tensor | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.class_probs)


def split_head(raw: Tensor, layout: HeadLayout) -> dict[str, Tensor]:
    """Slice a raw ``(N, width)`` head tensor into named, reshaped parts (graph-preserving)."""
    sl = layout.slices
    n, s = raw.shape[0], layout.n_steps
    return {
        "logits": raw[:, sl["logits"]],
        "centers": raw[:, sl["centers"]].reshape(n, s, 2),
        "log_dims": raw[:, sl["log_dims"]],
        "orient": raw[:, sl["orient"]].reshape(n, s, 2),
        "log_sigma": raw[:, sl["log_sigma"]].reshape(n, s, 2),
    }


def predictions_from_raw(raw: Tensor, layout: HeadLayout) -> PointPredictions:
    parts = split_head(Tensor(raw.data), layout)
    probs = np.exp(log_softmax(parts["logits"], axis=1).data)
    return PointPredictions(probs, parts["centers"].data, parts["log_dims"].data, parts["orient"].data,
                            parts["log_sigma"].data, raw)


HEAD_INIT_STD = 0.01


class Heads:
    """Linear per-point heads for class logits, box encodings and log-scales."""

    def __init__(self, params: ParamStore, cin: int, layout: HeadLayout, name: str = "heads",
                 prior: float = 0.01):
        self.layout = layout
        # near-zero initial outputs: unit scales, boxes on the point, rare foreground
        self.w = params.add(f"{name}.w", params.rng.normal(0.0, HEAD_INIT_STD, size=(cin, layout.width)))
        b = np.zeros(layout.width)
        b[layout.slices["logits"]][1:] = math.log(prior / (1.0 - prior))
        # unit-length (cos 2θ, sin 2θ) keeps the heading atan2 away from its singular origin
        b[layout.slices["orient"]][0::2] = 1.0
        self.b = params.add(f"{name}.b", b)

    def __call__(self, point_features: Tensor) -> Tensor:
        return matmul(point_features, self.w) + self.b


def backbone_gather(features: Tensor, cells: np.ndarray) -> Tensor:
    """Per-point features read from the cells the points project to."""
    return gather_points(features, cells)
