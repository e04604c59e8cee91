"""Multi-sweep range-view fusion: early, late and incremental strategies.

Each strategy is split into a *plan* (pure geometry: which source cell
feeds which destination cell after a warp, displacement features, drop
statistics) and an *assembly* step that pushes feature images through the
plan with caller-supplied extractors.  The plan is computed once per scene;
assembly runs on :class:`~rangefuse.nn.tensor.Tensor` values so the same
code path serves hand-crafted features and trained networks.

Feature images are channel-first ``(C, n_rows, n_cols)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError
from .geometry import Pose, Sweep, range_azimuth, warp_sweep
from .nn.tensor import Tensor, as_tensor, concat, gather_cells
from .rangeview import DropStats, RangeImage, RvGeometry, drops_for, rasterize, resolve_cells

KINDS = ("early", "late", "incremental")
POINT_FEATURES = 5
RAW_CHANNELS = POINT_FEATURES + 1  # point features + occupancy flag
DISP_CHANNELS = 3

Extractor = Callable[[Tensor], Tensor]


def identity(x: Tensor) -> Tensor:
    return x


def displacement_feature(p_warped, p_native, theta_n) -> np.ndarray:
    """Offset ``p_warped - p_native`` expressed in the ray-aligned frame at azimuth ``theta_n``.

    Vectorized over leading dimensions: ``(..., 3)`` points and ``(...)`` angles.
    """
    d = np.asarray(p_warped, dtype=np.float64) - np.asarray(p_native, dtype=np.float64)
    theta = np.asarray(theta_n, dtype=np.float64)
    c, s = np.cos(theta), np.sin(theta)
    return np.stack([c * d[..., 0] + s * d[..., 1], -s * d[..., 0] + c * d[..., 1], d[..., 2]], axis=-1)


@dataclass(eq=False)
class FusedImage:
    """Fused feature grid at one viewpoint.

    ``anchors`` holds, per cell, the point the cell's features describe
    (used when the image is warped again); ``provenance[j]`` marks cells that
    carry information from sweep ``sweep_ids[j]``.
    """

    geometry: RvGeometry
    viewpoint: Pose
    viewpoint_index: int
    channels: np.ndarray
    provenance: np.ndarray
    sweep_ids: tuple[int, ...]
    anchors: np.ndarray
    anchor_mask: np.ndarray
    blocks: list[tuple[str, int, int]] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.channels.shape[1:] != self.geometry.shape:
            raise ConfigError("fused channels do not match geometry")
        if any(k > self.viewpoint_index for k in self.sweep_ids):
            raise ConfigError("fused image references a sweep newer than its viewpoint")

    @property
    def n_channels(self) -> int:
        return self.channels.shape[0]

    @property
    def occupied(self) -> np.ndarray:
        return self.provenance.any(axis=0)

    def block(self, name: str) -> np.ndarray:
        for n, lo, hi in self.blocks:
            if n == name:
                return self.channels[lo:hi]
        raise KeyError(name)

    def provenance_at(self, row: int, col: int) -> list[int]:
        return [k for j, k in enumerate(self.sweep_ids) if self.provenance[j, row, col]]

    def manifest(self) -> str:
        return "".join(f"{lo}\t{hi}\t{name}\n" for name, lo, hi in self.blocks)

    @classmethod
    def from_range_image(cls, img: RangeImage, viewpoint: Pose, index: int) -> FusedImage:
        g = img.geometry
        ch = np.moveaxis(img.channels(), -1, 0)
        return cls(g, viewpoint, index, ch, img.occupied[None].copy(), (index,),
                   img.xyz.reshape(-1, 3).copy(), img.occupied.reshape(-1).copy(),
                   [(f"raw[{index}]", 0, ch.shape[0])])


@dataclass(eq=False)
class WarpStep:
    """Routing of an anchored feature image from viewpoint ``src`` to ``dst``."""

    src: int
    dst: int
    route: np.ndarray  # (n_cells,) source flat cell per destination cell, -1 empty
    disp: np.ndarray  # (3, H, W); zero unless both sides occupy the cell
    drops: DropStats

    @property
    def occupancy(self) -> np.ndarray:
        return (self.route >= 0).astype(np.float64)


@dataclass(eq=False)
class FusionPlan:
    kind: str
    geometry: RvGeometry
    viewpoint: Pose
    sweep_ids: tuple[int, ...]  # oldest to newest
    raw: list[np.ndarray]  # (6, H, W) per sweep: early in viewpoint 0, otherwise native
    disp: list[np.ndarray]  # early only: (3, H, W) per past sweep against sweep 0
    steps: list[WarpStep]
    drops: list[DropStats]  # per past sweep (early/late) or per chain step (incremental)
    provenance: np.ndarray
    anchors: np.ndarray
    anchor_mask: np.ndarray

    @property
    def drop_fractions(self) -> np.ndarray:
        return np.array([d.fraction for d in self.drops])

    def scaled(self, raw_scale: np.ndarray, disp_scale: float) -> FusionPlan:
        """Copy with raw channels multiplied per channel and displacements scaled (input normalization)."""
        rs = np.asarray(raw_scale, dtype=np.float64).reshape(-1, 1, 1)
        steps = [WarpStep(s.src, s.dst, s.route, s.disp * disp_scale, s.drops) for s in self.steps]
        return FusionPlan(self.kind, self.geometry, self.viewpoint, self.sweep_ids,
                          [r * rs for r in self.raw], [d * disp_scale for d in self.disp], steps,
                          self.drops, self.provenance, self.anchors, self.anchor_mask)

    def astype(self, dtype) -> FusionPlan:
        steps = [WarpStep(s.src, s.dst, s.route, s.disp.astype(dtype), s.drops) for s in self.steps]
        return FusionPlan(self.kind, self.geometry, self.viewpoint, self.sweep_ids,
                          [r.astype(dtype) for r in self.raw], [d.astype(dtype) for d in self.disp], steps,
                          self.drops, self.provenance, self.anchors, self.anchor_mask)


# geometry helpers ------------------------------------------------------------------------
def _raw_channels(img: RangeImage) -> np.ndarray:
    return np.moveaxis(img.channels(), -1, 0).astype(np.float64)


def _co_displacement(warped_xyz: np.ndarray, warped_mask: np.ndarray, native_xyz: np.ndarray,
                     native_mask: np.ndarray, g: RvGeometry) -> np.ndarray:
    both = warped_mask & native_mask
    disp = np.zeros((g.n_cells, 3))
    if both.any():
        _, az, _ = range_azimuth(native_xyz[both])
        disp[both] = displacement_feature(warped_xyz[both], native_xyz[both], az)
    return np.ascontiguousarray(disp.T.reshape(3, *g.shape))


def route_anchors(anchors: np.ndarray, mask: np.ndarray, src_pose: Pose, dst_pose: Pose,
                  g: RvGeometry) -> tuple[np.ndarray, np.ndarray, DropStats]:
    """Warp anchored cells to ``dst_pose`` and resolve collisions by range.

    Returns the route (source cell per destination cell), the warped anchor
    coordinates per destination cell, and the drop count among the anchors.
    """
    src_cells = np.flatnonzero(mask)
    xyz = src_pose.relative_to(dst_pose).apply(anchors[src_cells]) if len(src_cells) else np.zeros((0, 3))
    cell, winner = resolve_cells(xyz, g)
    route = np.where(winner >= 0, src_cells[np.maximum(winner, 0)] if len(src_cells) else -1, -1)
    warped = np.zeros((g.n_cells, 3))
    ok = winner >= 0
    warped[ok] = xyz[winner[ok]]
    n_in = int((cell >= 0).sum())
    drops = DropStats(len(src_cells), n_in - int(ok.sum()), len(src_cells) - n_in)
    return route.astype(np.int64), warped, drops


def _check(sweeps: Sequence[Sweep]) -> None:
    if len(sweeps) == 0:
        raise ConfigError("fusion needs at least one sweep")
    idx = [s.index for s in sweeps]
    if any(b <= a for a, b in zip(idx, idx[1:])):
        raise ConfigError("sweeps must be ordered oldest to newest")


def _with_current_features(sweeps: Sequence[Sweep]) -> list[Sweep]:
    current = sweeps[-1].pose
    return [s if s.features is not None else s.with_features(current) for s in sweeps]


# planning ------------------------------------------------------------------------------------
def plan_early(sweeps: Sequence[Sweep], g: RvGeometry) -> FusionPlan:
    _check(sweeps)
    sweeps = _with_current_features(sweeps)
    view = sweeps[-1].pose
    imgs = [rasterize(warp_sweep(s, view), g) for s in sweeps]
    ref = imgs[-1]
    ref_xyz, ref_mask = ref.xyz.reshape(-1, 3), ref.occupied.reshape(-1)
    disp = [_co_displacement(im.xyz.reshape(-1, 3), im.occupied.reshape(-1), ref_xyz, ref_mask, g)
            for im in imgs[:-1]]
    drops = [drops_for(warp_sweep(s, view).xyz, g) for s in sweeps[:-1]]
    prov = np.stack([im.occupied for im in imgs])
    anchors, mask = _union_anchors(imgs)
    return FusionPlan("early", g, view, tuple(s.index for s in sweeps), [_raw_channels(im) for im in imgs],
                      disp, [], drops, prov, anchors, mask)


def _union_anchors(imgs: Sequence[RangeImage]) -> tuple[np.ndarray, np.ndarray]:
    """Newest occupied point per cell, falling back to older sweeps."""
    g = imgs[0].geometry
    anchors = np.zeros((g.n_cells, 3))
    mask = np.zeros(g.n_cells, dtype=bool)
    for im in imgs:
        occ = im.occupied.reshape(-1)
        anchors[occ] = im.xyz.reshape(-1, 3)[occ]
        mask |= occ
    return anchors, mask


def plan_late(sweeps: Sequence[Sweep], g: RvGeometry) -> FusionPlan:
    _check(sweeps)
    sweeps = _with_current_features(sweeps)
    view = sweeps[-1].pose
    native = [rasterize(s, g) for s in sweeps]
    ref = native[-1]
    ref_xyz, ref_mask = ref.xyz.reshape(-1, 3), ref.occupied.reshape(-1)
    steps, prov = [], []
    anchors, mask = ref_xyz.copy(), ref_mask.copy()
    for s, im in zip(sweeps[:-1], native[:-1]):
        route, warped, drops = route_anchors(im.xyz.reshape(-1, 3), im.occupied.reshape(-1), s.pose, view, g)
        wmask = route >= 0
        steps.append(WarpStep(s.index, sweeps[-1].index, route,
                              _co_displacement(warped, wmask, ref_xyz, ref_mask, g), drops))
        prov.append(wmask.reshape(g.shape))
        fill = wmask & ~mask
        anchors[fill] = warped[fill]
        mask |= wmask
    prov.append(ref.occupied)
    return FusionPlan("late", g, view, tuple(s.index for s in sweeps), [_raw_channels(im) for im in native],
                      [], steps, [st.drops for st in steps], np.stack(prov), anchors, mask)


def plan_incremental(sweeps: Sequence[Sweep], g: RvGeometry) -> FusionPlan:
    _check(sweeps)
    sweeps = _with_current_features(sweeps)
    native = [rasterize(s, g) for s in sweeps]
    first = native[0]
    anchors, mask = first.xyz.reshape(-1, 3).copy(), first.occupied.reshape(-1).copy()
    prov = first.occupied.reshape(1, -1).copy()
    steps = []
    for prev_s, s, im in zip(sweeps[:-1], sweeps[1:], native[1:]):
        step, anchors, mask, prov = _chain_step(anchors, mask, prov, prev_s, s, im, g)
        steps.append(step)
    prov = prov.reshape(len(sweeps), *g.shape)
    return FusionPlan("incremental", g, sweeps[-1].pose, tuple(s.index for s in sweeps),
                      [_raw_channels(im) for im in native], [], steps, [st.drops for st in steps],
                      prov, anchors, mask)


def _chain_step(anchors, mask, prov, prev_s: Sweep, s: Sweep, im: RangeImage, g: RvGeometry):
    route, warped, drops = route_anchors(anchors, mask, prev_s.pose, s.pose, g)
    wmask = route >= 0
    nat_xyz, nat_mask = im.xyz.reshape(-1, 3), im.occupied.reshape(-1)
    step = WarpStep(prev_s.index, s.index, route, _co_displacement(warped, wmask, nat_xyz, nat_mask, g), drops)
    new_anchors = np.where(nat_mask[:, None], nat_xyz, warped)
    new_mask = nat_mask | wmask
    new_prov = np.zeros((prov.shape[0] + 1, g.n_cells), dtype=bool)
    new_prov[:-1, wmask] = prov[:, route[wmask]]
    new_prov[-1] = nat_mask
    return step, new_anchors, new_mask, new_prov


def make_plan(kind: str, sweeps: Sequence[Sweep], g: RvGeometry) -> FusionPlan:
    try:
        planner = {"early": plan_early, "late": plan_late, "incremental": plan_incremental}[kind]
    except KeyError:
        raise ConfigError(f"unknown fusion kind {kind!r}; expected one of {KINDS}") from None
    return planner(sweeps, g)


# assembly --------------------------------------------------------------------------------
def _fuse(prev: Tensor, step: WarpStep, raw_next, g: RvGeometry) -> Tensor:
    warped = gather_cells(prev, step.route)
    occ = as_tensor(step.occupancy.reshape(1, *g.shape).astype(warped.dtype))
    return concat([as_tensor(raw_next, dtype=warped.dtype), warped, occ,
                   as_tensor(step.disp, dtype=warped.dtype)], axis=0)


def assemble(plan: FusionPlan, extractor: Extractor = identity, init: Extractor = identity) -> Tensor:
    """Run feature images through ``plan``.

    ``extractor`` is the single stacked-image extractor (early), the
    per-sweep extractor (late), or the shared per-step extractor
    (incremental).  ``init`` maps the oldest native image before the
    incremental chain starts.
    """
    g = plan.geometry
    if plan.kind == "early":
        return extractor(concat([as_tensor(r) for r in plan.raw] + [as_tensor(d) for d in plan.disp], axis=0))
    if plan.kind == "late":
        feats = [extractor(as_tensor(r)) for r in plan.raw]
        parts = [feats[-1]]
        for f, step in zip(feats[:-1], plan.steps):
            warped = gather_cells(f, step.route)
            parts += [warped, as_tensor(step.occupancy.reshape(1, *g.shape).astype(warped.dtype))]
        parts += [as_tensor(step.disp, dtype=feats[-1].dtype) for step in plan.steps]
        return concat(parts, axis=0)
    if plan.kind == "incremental":
        running = init(as_tensor(plan.raw[0]))
        for step, raw in zip(plan.steps, plan.raw[1:]):
            running = extractor(_fuse(running, step, raw, g))
        return running
    raise ConfigError(f"unknown fusion kind {plan.kind!r}")


def channel_blocks(plan: FusionPlan, feat_width: int | None = None) -> list[tuple[str, int, int]]:
    """Names of channel ranges produced by :func:`assemble` with identity extractors.

    ``feat_width`` overrides the width of extracted features when a learned
    extractor is used (late: per-sweep output; incremental: the carried
    state, so the blocks describe the last step's extractor input).
    """
    ids = plan.sweep_ids
    blocks: list[tuple[str, int, int]] = []

    def add(name, width):
        lo = blocks[-1][2] if blocks else 0
        blocks.append((name, lo, lo + width))

    if plan.kind == "early":
        for k in ids:
            add(f"raw[{k}]", RAW_CHANNELS)
        for k in ids[:-1]:
            add(f"disp[{k}->{ids[-1]}]", DISP_CHANNELS)
    elif plan.kind == "late":
        w = RAW_CHANNELS if feat_width is None else feat_width
        add(f"feat[{ids[-1]}]", w)
        for k in ids[:-1]:
            add(f"warped[{k}->{ids[-1]}]", w)
            add(f"occ[{k}->{ids[-1]}]", 1)
        for k in ids[:-1]:
            add(f"disp[{k}->{ids[-1]}]", DISP_CHANNELS)
    else:
        width = RAW_CHANNELS if feat_width is None else feat_width
        for step in plan.steps:
            blocks = []
            add(f"raw[{step.dst}]", RAW_CHANNELS)
            add(f"warped[{step.src}->{step.dst}]", width)
            add(f"occ[{step.src}->{step.dst}]", 1)
            add(f"disp[{step.src}->{step.dst}]", DISP_CHANNELS)
            width = blocks[-1][2] if feat_width is None else feat_width
        if not plan.steps:
            add(f"raw[{ids[0]}]", RAW_CHANNELS)
    return blocks


def _to_image(plan: FusionPlan, out: Tensor, blocks=None) -> FusedImage:
    return FusedImage(plan.geometry, plan.viewpoint, plan.sweep_ids[-1], np.asarray(out.data),
                      plan.provenance.reshape(len(plan.sweep_ids), *plan.geometry.shape), plan.sweep_ids,
                      plan.anchors, plan.anchor_mask, blocks if blocks is not None else [])


def _build(kind: str, sweeps, g, extractor, init=identity) -> FusedImage:
    plan = make_plan(kind, sweeps, g)
    out = assemble(plan, extractor, init)
    blocks = channel_blocks(plan) if extractor is identity and init is identity else [("features", 0, out.shape[0])]
    return _to_image(plan, out, blocks)


def build_early(sweeps: Sequence[Sweep], g: RvGeometry, extractor: Extractor = identity) -> FusedImage:
    """Warp every sweep to the newest viewpoint, rasterize, stack oldest first, extract once."""
    return _build("early", sweeps, g, extractor)


def build_late(sweeps: Sequence[Sweep], g: RvGeometry, extractor: Extractor = identity) -> FusedImage:
    """Extract per sweep in its own viewpoint, then warp all features to the newest viewpoint at once."""
    return _build("late", sweeps, g, extractor)


def build_incremental(sweeps: Sequence[Sweep], g: RvGeometry, extractor: Extractor = identity,
                      init: Extractor = identity) -> FusedImage:
    """Fuse each sweep into the running image, moving only one viewpoint at a time."""
    return _build("incremental", sweeps, g, extractor, init)


def fuse_pair(prev: FusedImage | RangeImage, nxt: Sweep, g: RvGeometry | None = None,
              prev_pose: Pose | None = None, prev_index: int | None = None) -> FusedImage:
    """Warp ``prev`` into ``nxt``'s viewpoint and concatenate ``[next, warped prev, occupancy, h]``.

    A bare :class:`RangeImage` carries no pose, so ``prev_pose`` and
    ``prev_index`` must be supplied with one.
    """
    if isinstance(prev, RangeImage):
        if prev_pose is None or prev_index is None:
            raise ConfigError("fusing a RangeImage needs its viewpoint pose and sweep index")
        prev = FusedImage.from_range_image(prev, prev_pose, prev_index)
    g = prev.geometry if g is None else g
    if g != prev.geometry:
        raise ConfigError("fuse_pair geometries differ")
    if nxt.index <= prev.viewpoint_index:
        raise ConfigError("next sweep must be newer than the previous viewpoint")
    im = rasterize(nxt, g)
    prev_stub = Sweep.empty(prev.viewpoint_index, prev.viewpoint)
    step, anchors, mask, prov = _chain_step(prev.anchors, prev.anchor_mask,
                                            prev.provenance.reshape(len(prev.sweep_ids), -1),
                                            prev_stub, nxt, im, g)
    out = _fuse(as_tensor(prev.channels), step, _raw_channels(im), g)
    w = prev.n_channels
    blocks = [(f"raw[{nxt.index}]", 0, RAW_CHANNELS),
              (f"warped[{prev.viewpoint_index}->{nxt.index}]", RAW_CHANNELS, RAW_CHANNELS + w),
              (f"occ[{prev.viewpoint_index}->{nxt.index}]", RAW_CHANNELS + w, RAW_CHANNELS + w + 1),
              (f"disp[{prev.viewpoint_index}->{nxt.index}]", RAW_CHANNELS + w + 1, RAW_CHANNELS + w + 4)]
    return FusedImage(g, nxt.pose, nxt.index, out.data, prov.reshape(-1, *g.shape),
                      prev.sweep_ids + (nxt.index,), anchors, mask, blocks)


def empty_fused(g: RvGeometry, viewpoint: Pose, index: int, width: int = RAW_CHANNELS) -> FusedImage:
    return FusedImage(g, viewpoint, index, np.zeros((width, *g.shape)), np.zeros((1, *g.shape), dtype=bool),
                      (index,), np.zeros((g.n_cells, 3)), np.zeros(g.n_cells, dtype=bool),
                      [(f"raw[{index}]", 0, width)])
