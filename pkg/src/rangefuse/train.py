"""Training loop and evaluation pipeline."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .decode import DecodeConfig, detect
from .dataset import Sample
from .logs import RunConfig, TrainLog
from .loss import LossWeights, total_loss
from .metrics import AP_IOU, L2_IOU, EvalReport, SceneResult, center_errors, match_detections, summarize
from .nn.layers import predictions_from_raw
from .nn.model import FusionNet, NetConfig
from .nn.optim import SGD, Schedule
from .nn.tensor import no_grad

log = logging.getLogger(__name__)

EVAL_HORIZONS = {0.0: 0, 1.0: 2, 3.0: 6}


def net_config(cfg: RunConfig) -> NetConfig:
    return NetConfig(kind=cfg.kind, n_sweeps=cfg.n_sweeps, extractor_width=cfg.extractor_width,
                     extractor_layers=cfg.extractor_layers, backbone=cfg.backbone(), layout=cfg.layout(),
                     seed=cfg.seed, dtype=cfg.dtype)


def loss_weights(cfg: RunConfig) -> LossWeights:
    return LossWeights(gamma=cfg.gamma, alpha_future=cfg.alpha_future, beta_at=cfg.beta_at,
                       beta_ct=cfg.beta_ct, b_gt=cfg.b_gt)


@dataclass(eq=False)
class Prepared:
    sample: Sample
    plan: object


def train(samples: Sequence[Sample], cfg: RunConfig, net: FusionNet | None = None,
          callback: Callable[[int, float, float, float], None] | None = None) -> tuple[FusionNet, TrainLog]:
    """SGD over single-scene steps in a seeded, reshuffled-per-epoch order."""
    if not samples:
        raise ValueError("no training samples")
    net = net if net is not None else FusionNet(net_config(cfg))
    weights = loss_weights(cfg)
    prepared = [Prepared(s, net.prepare(s.plan)) for s in samples]
    opt = SGD(net.params, Schedule(cfg.lr_start, cfg.lr_end, cfg.iterations, cfg.decay_every),
              cfg.momentum, cfg.weight_decay, cfg.grad_clip)
    rng = np.random.default_rng(cfg.seed)
    order: list[int] = []
    history = TrainLog()
    for it in range(1, cfg.iterations + 1):
        if not order:
            order = list(rng.permutation(len(prepared)))
        p = prepared[order.pop()]
        raw = net(p.plan, p.sample.cells)
        total, cls, reg = total_loss(raw, net.cfg.layout, p.sample.targets, weights)
        net.params.zero_grad()
        total.backward()
        opt.step()
        history.append(it, float(cls.data), float(reg.data), float(total.data))
        if callback is not None:
            callback(it, float(cls.data), float(reg.data), float(total.data))
        if cfg.log_every and it % cfg.log_every == 0:
            log.info("iter %d total %.4f cls %.4f reg %.4f", it, total.data, cls.data, reg.data)
    return net, history


def predict(net: FusionNet, sample: Sample, plan=None):
    with no_grad():
        raw = net(plan if plan is not None else net.prepare(sample.plan), sample.cells)
    return predictions_from_raw(raw, net.cfg.layout)


def evaluate_sample(net: FusionNet, sample: Sample, decode_cfg: DecodeConfig = DecodeConfig(),
                    plan=None) -> SceneResult:
    preds = predict(net, sample, plan)
    t = sample.targets
    dets = detect(t.point_xy, t.azimuth, preds, decode_cfg, net.cfg.horizon_dt)
    vis = [tr for tr in sample.tracks if tr.visible]
    hidden = [tr.box(0) for tr in sample.tracks if not tr.visible]
    gt_boxes = [tr.box(0) for tr in vis]
    m_ap = match_detections(dets, gt_boxes, AP_IOU, hidden)
    tp = set(i for i, _ in m_ap.pairs)
    scored = [i for i in range(len(dets)) if i not in set(m_ap.ignored)]
    m_l2 = match_detections(dets, gt_boxes, L2_IOU, hidden)
    records = []
    if m_l2.pairs:
        errs = np.stack([center_errors(dets, [tr.centers for tr in vis], m_l2.pairs, s)
                         for s in range(len(vis[0].centers))], axis=1)
        for (i, j), e in zip(m_l2.pairs, errs):
            records.append({"scene": sample.name, "actor_id": vis[j].actor_id, "actor_speed": vis[j].speed,
                            "ego_speed": sample.ego_speed, "score": dets[i].score, "err": e.tolist()})
    return SceneResult(dets, [dets[i].score for i in scored], [i in tp for i in scored], len(vis), records)


def evaluate(net: FusionNet, samples: Sequence[Sample], decode_cfg: DecodeConfig = DecodeConfig(),
             horizons=EVAL_HORIZONS) -> tuple[EvalReport, list[SceneResult]]:
    results = [evaluate_sample(net, s, decode_cfg) for s in samples]
    return summarize(results, horizons), results
