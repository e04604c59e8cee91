"""Detection and forecasting metrics plus the speed-binned strategy comparison."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .decode import BevBox, BoxTrajectory, rotated_iou
from .errors import ConfigError

AP_IOU = 0.7
L2_IOU = 0.5
ACTOR_SPEED_BINS = (0.0, 5.0, 10.0, 15.0, 30.0)
EGO_SPEED_BINS = (0.0, 5.0, 10.0, 15.0, 30.0)


@dataclass
class Matching:
    pairs: list[tuple[int, int]] = field(default_factory=list)  # (pred, gt)
    false_positives: list[int] = field(default_factory=list)
    false_negatives: list[int] = field(default_factory=list)
    ignored: list[int] = field(default_factory=list)  # preds that hit a do-not-care gt


def match_detections(preds: Sequence[BoxTrajectory], gts: Sequence[BevBox], eps: float,
                     ignore: Sequence[BevBox] = ()) -> Matching:
    """Greedy t = 0 matching in descending score order (ties by prediction index).

    Each prediction takes the unmatched gt it overlaps most, provided the IoU
    is at least ``eps``.  Unmatched predictions overlapping an ``ignore`` box
    by ``eps`` are set aside instead of counted as false positives.
    """
    if not 0.0 < eps < 1.0:
        raise ConfigError("matching threshold must lie in (0, 1)")
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].score, i))
    taken = np.zeros(len(gts), dtype=bool)
    out = Matching()
    for i in order:
        b = preds[i].box(0)
        ious = np.array([rotated_iou(b, g) for g in gts]) if gts else np.zeros(0)
        ious[taken] = -1.0
        j = int(np.argmax(ious)) if len(ious) else -1
        if j >= 0 and ious[j] >= eps:
            taken[j] = True
            out.pairs.append((i, j))
        elif any(rotated_iou(b, g) >= eps for g in ignore):
            out.ignored.append(i)
        else:
            out.false_positives.append(i)
    out.false_negatives = [j for j in range(len(gts)) if not taken[j]]
    return out


def average_precision(scores: Sequence[float], is_tp: Sequence[bool], n_gt: int) -> float | None:
    """All-point interpolated area under the precision-recall curve; None without ground truth."""
    if n_gt <= 0:
        return None
    scores = np.asarray(scores, float)
    is_tp = np.asarray(is_tp, bool)
    if len(scores) == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    tp = np.cumsum(is_tp[order])
    fp = np.cumsum(~is_tp[order])
    recall = tp / n_gt
    precision = tp / (tp + fp)
    r = np.concatenate([[0.0], recall, [recall[-1]]])
    p = np.concatenate([[0.0], precision, [0.0]])
    p = np.maximum.accumulate(p[::-1])[::-1]
    return float(np.sum((r[1:] - r[:-1]) * p[1:]))


def center_errors(preds: Sequence[BoxTrajectory], gts: Sequence[np.ndarray], pairs, step: int) -> np.ndarray:
    """Per-pair center distance in meters at horizon ``step``; ``gts`` hold (S, 2) centers."""
    return np.array([float(np.linalg.norm(preds[i].centers[step] - np.asarray(gts[j])[step])) for i, j in pairs])


def l2_error(preds: Sequence[BoxTrajectory], gts: Sequence[np.ndarray], pairs, step: int) -> float | None:
    """Mean center distance in centimeters over matched pairs; None without matches."""
    if not pairs:
        return None
    return float(np.mean(center_errors(preds, gts, pairs, step)) * 100.0)


@dataclass
class SceneResult:
    """Everything the reports need from one evaluated scene."""

    detections: list[BoxTrajectory]
    ap_scores: list[float]
    ap_tp: list[bool]
    n_gt: int
    l2_records: list[dict]  # one per matched pair at L2_IOU


@dataclass
class EvalReport:
    ap: float | None
    l2_cm: dict[float, float | None]
    n_gt: int
    n_det: int
    n_l2_matches: int
    records: list[dict]

    def rows(self) -> list[tuple[str, float | int | None]]:
        out = [("ap@0.7", self.ap)]
        out += [(f"l2_cm@{t:g}s", v) for t, v in self.l2_cm.items()]
        out += [("n_gt", self.n_gt), ("n_det", self.n_det), ("n_l2_matches", self.n_l2_matches)]
        return out


def summarize(results: Sequence[SceneResult], horizons: Mapping[float, int]) -> EvalReport:
    """Pool scene results into AP and L2 at each ``{seconds: step}`` horizon."""
    scores = [s for r in results for s in r.ap_scores]
    tps = [t for r in results for t in r.ap_tp]
    n_gt = sum(r.n_gt for r in results)
    records = [rec for r in results for rec in r.l2_records]
    l2 = {}
    for sec, step in horizons.items():
        vals = [rec["err"][step] for rec in records]
        l2[sec] = float(np.mean(vals) * 100.0) if vals else None
    return EvalReport(average_precision(scores, tps, n_gt), l2, n_gt, sum(len(r.detections) for r in results),
                      len(records), records)


def _bin_index(value: float, edges: Sequence[float]) -> int | None:
    if value < edges[0] or value > edges[-1]:
        return None
    return min(int(np.searchsorted(edges, value, side="right")) - 1, len(edges) - 2)


def binned_report(records: Mapping[str, Sequence[dict]], horizons: Mapping[float, int], baseline: str = "early",
                  actor_bins: Sequence[float] = ACTOR_SPEED_BINS,
                  ego_bins: Sequence[float] = EGO_SPEED_BINS) -> list[dict]:
    """Per-bin mean L2 and relative improvement over ``baseline``.

    ``records`` maps strategy to per-match dicts with ``actor_speed``,
    ``ego_speed`` and ``err`` (meters per step).  Bins where a strategy has
    no matches produce no row for that strategy.
    """
    if len(records) < 2:
        raise ConfigError("binned report needs at least two strategies")
    if baseline not in records:
        raise ConfigError(f"baseline strategy {baseline!r} missing from results")
    rows = []
    for axis, key, edges in (("actor_speed", "actor_speed", actor_bins), ("ego_speed", "ego_speed", ego_bins)):
        for b in range(len(edges) - 1):
            means: dict[str, dict[float, float]] = {}
            counts: dict[str, int] = {}
            for strat, recs in records.items():
                sel = [r for r in recs if _bin_index(r[key], edges) == b]
                if sel:
                    means[strat] = {sec: float(np.mean([r["err"][st] for r in sel]) * 100.0)
                                    for sec, st in horizons.items()}
                    counts[strat] = len(sel)
            for strat in records:
                if strat not in means:
                    continue
                for sec in horizons:
                    base = means.get(baseline, {}).get(sec)
                    val = means[strat][sec]
                    rel = None if base is None or base <= 0 else (base - val) / base * 100.0
                    rows.append({"axis": axis, "bin_lo": edges[b], "bin_hi": edges[b + 1], "strategy": strat,
                                 "horizon_s": sec, "n": counts[strat], "l2_cm": val, "rel_improvement_pct": rel})
    return rows


BINNED_FIELDS = ("axis", "bin_lo", "bin_hi", "strategy", "horizon_s", "n", "l2_cm", "rel_improvement_pct")
