"""Training objective: focal classification loss plus along/cross-track Laplace KL regression."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .decode import box_corners, decode_tensors
from .errors import DomainError
from .nn import tensor as T
from .nn.layers import HeadLayout, split_head
from .nn.tensor import Tensor

P_CLAMP = 1e-7


@dataclass(frozen=True)
class LossWeights:
    gamma: float = 2.0
    alpha_0: float = 1.0
    alpha_future: float = 4.0
    beta_at: float = 2.0
    beta_ct: float = 1.0
    b_gt: float = 0.1

    def __post_init__(self) -> None:
        if min(self.gamma, self.alpha_0, self.alpha_future, self.beta_at, self.beta_ct) < 0:
            raise DomainError("loss weights must be non-negative")
        if self.b_gt <= 0:
            raise DomainError("ground-truth Laplace scale must be positive")

    def alphas(self, n_steps: int) -> np.ndarray:
        a = np.full(n_steps, self.alpha_future)
        a[0] = self.alpha_0
        return a


def focal_loss(logits: Tensor, labels: np.ndarray, gamma: float = 2.0) -> Tensor:
    """Mean over points of ``-(1 - p_true)^γ log p_true``; probabilities clamped to [1e-7, 1 - 1e-7]."""
    labels = np.asarray(labels, dtype=np.int64)
    logp = T.log_softmax(logits, axis=1)
    p = T.exp(logp[np.arange(len(labels)), labels])
    pc = T.clip(p, P_CLAMP, 1.0 - P_CLAMP)
    per_point = (1.0 - pc) ** gamma * T.log(pc)
    return -per_point.mean()


def focal_loss_probs(probs: np.ndarray, labels: np.ndarray, gamma: float = 2.0) -> float:
    """Scalar focal loss evaluated directly on class distributions."""
    probs = np.asarray(probs, float).reshape(len(labels), -1)
    p = np.clip(probs[np.arange(len(labels)), np.asarray(labels, dtype=np.int64)], P_CLAMP, 1 - P_CLAMP)
    return float(np.mean(-((1 - p) ** gamma) * np.log(p)))


def _check_scales(*scales) -> None:
    for s in scales:
        data = s.data if isinstance(s, Tensor) else np.asarray(s)
        if np.any(data <= 0):
            raise DomainError("Laplace scales must be positive")


def laplace_kl(mu_gt, b_gt, mu_hat, b_hat):
    """Closed-form ``KL(Laplace(mu_gt, b_gt) || Laplace(mu_hat, b_hat))``.

    Accepts floats, arrays or tensors; tensors keep the graph.
    """
    _check_scales(b_gt, b_hat)
    if not any(isinstance(v, Tensor) for v in (mu_gt, b_gt, mu_hat, b_hat)):
        d = np.abs(np.asarray(mu_hat, float) - np.asarray(mu_gt, float))
        b0, b1 = np.asarray(b_gt, float), np.asarray(b_hat, float)
        out = np.log(b1 / b0) + (b0 * np.exp(-d / b0) + d) / b1 - 1.0
        return float(out) if out.ndim == 0 else out
    return _kl_log(mu_gt, b_gt, mu_hat, T.log(T.as_tensor(b_hat)))


def _kl_log(mu_gt, b_gt, mu_hat, log_b_hat: Tensor) -> Tensor:
    """KL with the predicted scale given in log space (what the heads emit)."""
    d = T.tabs(T.sub(mu_hat, mu_gt))
    if isinstance(b_gt, Tensor):
        inner = T.exp(-d / b_gt) * b_gt + d
        log_b0 = T.log(b_gt)
    else:
        b0 = np.asarray(b_gt, dtype=d.dtype)
        inner = T.exp(d * (-1.0 / b0)) * b0 + d
        log_b0 = np.log(b0)
    return log_b_hat - log_b0 + inner * T.exp(-log_b_hat) - 1.0


def rotate_into(xy, direction: np.ndarray):
    """Express ``(..., 4, 2)`` corners in frames whose x-axis is ``direction`` (``(..., 2)`` unit vectors)."""
    c = np.asarray(direction[..., 0])[..., None]
    s = np.asarray(direction[..., 1])[..., None]
    if isinstance(xy, Tensor):
        x, y = xy[..., 0], xy[..., 1]
        return T.stack([x * c + y * s, y * c - x * s], axis=-1)
    xy = np.asarray(xy, float)
    return np.stack([xy[..., 0] * c + xy[..., 1] * s, xy[..., 1] * c - xy[..., 0] * s], axis=-1)


def align_track_frame(pred_corners, gt_corners, direction: np.ndarray):
    """Rotate predicted and ground-truth corners so x is along-track and y cross-track."""
    direction = np.asarray(direction, float)
    direction = direction / np.linalg.norm(direction, axis=-1, keepdims=True)
    return rotate_into(pred_corners, direction), rotate_into(gt_corners, direction)


def motion_directions(centers: np.ndarray, headings: np.ndarray, min_step: float = 0.05) -> np.ndarray:
    """Unit motion direction per (object, step) from center differences.

    Steps where the object moves less than ``min_step`` fall back to the
    box heading.  Input ``centers`` (M, S, 2), ``headings`` (M, S).
    """
    centers = np.asarray(centers, float)
    headings = np.asarray(headings, float)
    d = np.zeros_like(centers)
    if centers.shape[1] > 1:
        d[:, :-1] = centers[:, 1:] - centers[:, :-1]
        d[:, -1] = centers[:, -1] - centers[:, -2]
    norm = np.linalg.norm(d, axis=-1)
    head = np.stack([np.cos(headings), np.sin(headings)], axis=-1)
    moving = norm >= min_step
    return np.where(moving[..., None], d / np.maximum(norm, 1e-12)[..., None], head)


def corners_tensor(centers: Tensor, dims: Tensor, theta: Tensor) -> Tensor:
    """Graph-preserving :func:`~rangefuse.decode.box_corners`: (M, S, 2), (M, 2), (M, S) -> (M, S, 4, 2).

    ``dims`` may also be per step, ``(M, S, 2)``.
    """
    c, s = T.cos(theta), T.sin(theta)
    m, n = theta.shape
    k = n if dims.ndim == 3 else 1
    sx = np.array([0.5, -0.5, -0.5, 0.5], dtype=theta.dtype)
    sy = np.array([0.5, 0.5, -0.5, -0.5], dtype=theta.dtype)
    lx = dims[..., 0].reshape(m, k, 1) * sx  # (M, k, 4)
    ly = dims[..., 1].reshape(m, k, 1) * sy
    c4, s4 = c.reshape(m, n, 1), s.reshape(m, n, 1)
    cx, cy = centers[:, :, 0].reshape(m, n, 1), centers[:, :, 1].reshape(m, n, 1)
    x = cx + c4 * lx - s4 * ly
    y = cy + s4 * lx + c4 * ly
    return T.stack([x, y], axis=-1)


def regression_loss(pred_corners, gt_corners: np.ndarray, directions: np.ndarray, log_sigma,
                    weights: LossWeights = LossWeights()):
    """Along/cross-track KL loss over ``M`` matched predictions.

    ``pred_corners``/``gt_corners``: (M, S, 4, 2); ``directions``: (M, S, 2);
    ``log_sigma``: (M, S, 2) predicted log scales shared by the four corners.
    Returns a scalar tensor (zero when M = 0).
    """
    m = gt_corners.shape[0]
    if m == 0:
        return Tensor(np.zeros((), dtype=log_sigma.dtype if hasattr(log_sigma, "dtype") else float))
    pred_corners = T.as_tensor(pred_corners)
    log_sigma = T.as_tensor(log_sigma)
    p, g = align_track_frame(pred_corners, gt_corners, directions)
    n_steps = gt_corners.shape[1]
    kl = _kl_log(g.astype(p.dtype), weights.b_gt, p, log_sigma.reshape(m, n_steps, 1, 2))  # (M, S, 4, 2)
    per_axis_step = kl.sum(axis=(0, 2)) * (1.0 / (4.0 * m))  # (S, 2)
    w = (weights.alphas(n_steps)[:, None] * np.array([weights.beta_at, weights.beta_ct])[None, :]) / n_steps
    return (per_axis_step * w.astype(p.dtype)).sum()


def nearest_heading(pred: Tensor, target: np.ndarray) -> Tensor:
    """Shift predicted headings by multiples of π toward ``target`` (constant offset, keeps the graph)."""
    k = np.round((np.asarray(target) - pred.data) / math.pi)
    return pred + (k * math.pi).astype(pred.dtype)


def nearest_parametrization(pred: Tensor, dims: Tensor, target: np.ndarray) -> tuple[Tensor, Tensor]:
    """Re-express predicted boxes with the heading closest to ``target``.

    A box ``(w, h, θ)`` has the same corners as ``(h, w, θ + π/2)``, so the
    heading is shifted by the multiple of π/2 nearest ``target`` and ``w, h``
    are swapped where that multiple is odd.  Returns headings (M, S) and
    per-step dims (M, S, 2).
    """
    k = np.round((np.asarray(target) - pred.data) / (math.pi / 2))
    head = pred + (k * (math.pi / 2)).astype(pred.dtype)
    m, n = pred.shape
    ones = np.ones((1, n, 1), dtype=pred.dtype)
    straight = dims.reshape(m, 1, 2) * ones
    swapped = T.concat([dims[:, 1:2], dims[:, 0:1]], axis=1).reshape(m, 1, 2) * ones
    odd = np.broadcast_to((np.mod(k, 2) != 0)[..., None], (m, n, 2))
    return head, T.where(odd, swapped, straight)


@dataclass(eq=False)
class LossTargets:
    """Per-scene supervision in the current sensor frame."""

    point_xy: np.ndarray  # (N, 2)
    azimuth: np.ndarray  # (N,)
    labels: np.ndarray  # (N,) class ids
    match: np.ndarray  # (N,) ground-truth object per point, -1 if none
    gt_centers: np.ndarray  # (G, S, 2)
    gt_dims: np.ndarray  # (G, 2)
    gt_headings: np.ndarray  # (G, S)

    def directions(self) -> np.ndarray:
        return motion_directions(self.gt_centers, self.gt_headings)


def total_loss(raw: Tensor, layout: HeadLayout, targets: LossTargets,
               weights: LossWeights = LossWeights()) -> tuple[Tensor, Tensor, Tensor]:
    """``(total, classification, regression)`` for one scene's raw head output."""
    parts = split_head(raw, layout)
    cls = focal_loss(parts["logits"], targets.labels, weights.gamma)
    idx = np.flatnonzero(targets.match >= 0)
    if len(idx) == 0:
        reg = Tensor(np.zeros((), dtype=raw.dtype))
    else:
        sub = split_head(raw[idx], layout)
        gt = targets.match[idx]
        cent, dims, head = decode_tensors(targets.point_xy[idx], targets.azimuth[idx], sub["centers"],
                                          sub["log_dims"], sub["orient"])
        gt_head = targets.gt_headings[gt]
        head, step_dims = nearest_parametrization(head, dims, gt_head)
        pc = corners_tensor(cent, step_dims, head)
        gc = box_corners(targets.gt_centers[gt], targets.gt_dims[gt][:, None, :], gt_head)
        reg = regression_loss(pc, gc, targets.directions()[gt], sub["log_sigma"], weights)
    return cls + reg, cls, reg
