"""Command-line entry point: ``rangefuse <command> ...``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

from .dataset import samples_from_logs
from .errors import ConfigError, DataError
from .fusion import KINDS, channel_blocks
from .logs import (GEOMETRY_FILE, RunConfig, format_config, load_checkpoint, parse_config, read_dataset,
                   save_checkpoint, write_csv, write_detections, write_geometry, write_scene)
from .metrics import BINNED_FIELDS, binned_report
from .simkit import expand_scenarios, generate_scenario, parse_scenario_text
from .train import EVAL_HORIZONS, evaluate, train

log = logging.getLogger("rangefuse")

EXIT_OK, EXIT_CONFIG, EXIT_DATA = 0, 2, 3
DROP_FIELDS = ("scene", "ego_speed", "strategy", "step", "src", "dst", "n_points", "collision", "out_of_view",
               "drop_fraction")


def run_dir(ckpt: Path) -> Path:
    return Path(str(ckpt) + ".run")


def cmd_simulate(args) -> int:
    spec_path = Path(args.spec)
    if not spec_path.exists():
        raise ConfigError(f"scenario spec {spec_path} not found")
    spec = parse_scenario_text(spec_path.read_text())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scenarios = expand_scenarios(spec, args.seed)
    write_geometry(out / GEOMETRY_FILE, spec.scenario.geometry)
    for i, sc in enumerate(scenarios):
        lg = generate_scenario(sc, spec.n_sweeps)
        write_scene(out / f"scene_{i:04d}", lg.sweeps, lg.labels)
    log.info("wrote %d scenes to %s", len(scenarios), out)
    return EXIT_OK


def _load_config(path: str | None, **overrides) -> RunConfig:
    cfg = RunConfig()
    if path:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} not found")
        cfg = parse_config(p.read_text())
    return replace(cfg, **{k: v for k, v in overrides.items() if v is not None})


def cmd_train(args) -> int:
    cfg = _load_config(args.config, kind=args.fusion, seed=args.seed, iterations=args.iterations)
    g, scenes = read_dataset(args.data)
    samples = samples_from_logs(scenes, cfg.kind, g, cfg.n_sweeps, cfg.n_future)
    net, history = train(samples, cfg)
    ckpt = Path(args.out)
    save_checkpoint(ckpt, net, {"iterations": cfg.iterations})
    rd = run_dir(ckpt)
    rd.mkdir(parents=True, exist_ok=True)
    history.write(rd / "train_log.csv")
    (rd / "config.txt").write_text(format_config(cfg))
    blocks = channel_blocks(samples[0].plan, cfg.extractor_width)
    (rd / "channels.txt").write_text("".join(f"{a}\t{b}\t{name}\n" for name, a, b in blocks))
    log.info("saved %s (final loss %.4f)", ckpt, history.totals()[-1])
    return EXIT_OK


def _evaluate_ckpt(ckpt: str, data: str):
    net, _ = load_checkpoint(ckpt)
    g, scenes = read_dataset(data)
    samples = samples_from_logs(scenes, net.cfg.kind, g, net.cfg.n_sweeps, net.cfg.layout.n_future)
    report, results = evaluate(net, samples)
    return net, samples, report, results


def cmd_eval(args) -> int:
    net, samples, report, results = _evaluate_ckpt(args.ckpt, args.data)
    drops = [float(f) for s in samples for f in s.plan.drop_fractions]
    rows = [("ap_interpolation", "all-point"), ("strategy", net.cfg.kind)] + report.rows()
    rows.append(("mean_drop_fraction", sum(drops) / len(drops) if drops else None))
    write_csv(args.report, ("metric", "value"), rows)
    if args.detections:
        d = Path(args.detections)
        d.mkdir(parents=True, exist_ok=True)
        for s, r in zip(samples, results):
            write_detections(d / f"{s.name}.jsonl", r.detections)
    for k, v in rows:
        print(f"{k}: {v}")
    return EXIT_OK


def cmd_fusion_report(args) -> int:
    if len(args.ckpts) != 3:
        raise ConfigError("fusion-report needs exactly three checkpoints")
    records, summary = {}, []
    for ck in args.ckpts:
        net, _, report, _ = _evaluate_ckpt(ck, args.data)
        if net.cfg.kind in records:
            raise ConfigError(f"two checkpoints use the {net.cfg.kind} strategy")
        records[net.cfg.kind] = report.records
        summary.append((net.cfg.kind, report))
    missing = set(KINDS) - set(records)
    if missing:
        raise ConfigError(f"missing strategies: {sorted(missing)}")
    rows = binned_report(records, EVAL_HORIZONS)
    write_csv(args.out, BINNED_FIELDS, ([r[k] for k in BINNED_FIELDS] for r in rows))
    for kind, rep in summary:
        l2 = ", ".join(f"L2@{t:g}s={v:.1f}cm" if v is not None else f"L2@{t:g}s=n/a" for t, v in rep.l2_cm.items())
        print(f"{kind}: AP={rep.ap if rep.ap is None else round(rep.ap, 4)} {l2}")
    return EXIT_OK


def cmd_drop_stats(args) -> int:
    g, scenes = read_dataset(args.data)
    rows = []
    for kind in KINDS:
        for s in samples_from_logs(scenes, kind, g, args.n_sweeps, 6):
            ids = s.plan.sweep_ids
            pairs = ([(ids[i], ids[-1]) for i in range(len(ids) - 1)] if kind != "incremental" else
                     [(ids[i], ids[i + 1]) for i in range(len(ids) - 1)])
            for step, (d, (src, dst)) in enumerate(zip(s.plan.drops, pairs)):
                rows.append((s.name, s.ego_speed, kind, step, src, dst, d.n_points, d.collision, d.out_of_view,
                             d.fraction))
    write_csv(args.out, DROP_FIELDS, rows)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rangefuse", description="Range-view multi-sweep fusion toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate synthetic scenes from a scenario spec")
    s.add_argument("--spec", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    t = sub.add_parser("train", help="train one fusion strategy")
    t.add_argument("--data", required=True)
    t.add_argument("--fusion", choices=KINDS, required=True)
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--iterations", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--data", required=True)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--report", required=True)
    e.add_argument("--detections", help="directory for per-scene detection JSON lines")
    e.set_defaults(func=cmd_eval)

    f = sub.add_parser("fusion-report", help="speed-binned comparison of three strategies")
    f.add_argument("--data", required=True)
    f.add_argument("--ckpts", nargs="+", required=True)
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_fusion_report)

    d = sub.add_parser("drop-stats", help="dropped-point statistics per strategy")
    d.add_argument("--data", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--n-sweeps", type=int, default=6)
    d.set_defaults(func=cmd_drop_stats)

    for sp in (s, t, e, f, d):
        sp.add_argument("--seed", type=int, default=0)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
