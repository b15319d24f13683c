"""Command line entry point: ``splitrelay run|sweep|verify|attack|report``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import harness
from .dp import protect
from .attacks import dbscan, extraction_attack, jitter_probes, kmeans_auto, unsplit_invert
from .pipeline import run_training
from .verifier import assemble


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON experiment config (defaults are used when omitted)")
    p.add_argument("--seed", type=int, help="re-seed every role from one master seed")
    p.add_argument("--transport", choices=("inproc", "tcp"), default="inproc")
    p.add_argument("--out-dir", type=Path, default=Path("runs"))


def _parse_value(v: str):
    return "inf" if v.lower() in ("inf", "infinity") else float(v)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="splitrelay", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train, watermark and verify one experiment")
    _common(p)

    p = sub.add_parser("sweep", help="one run per value along an axis")
    _common(p)
    p.add_argument("--axis", choices=harness.SWEEP_AXES, required=True)
    p.add_argument("--values", nargs="+", required=True)

    p = sub.add_parser("verify", help="check a persisted watermark chain")
    p.add_argument("--cache", type=Path, required=True)
    p.add_argument("--checkpoints", type=Path, nargs="+", required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out-dir", type=Path)

    p = sub.add_parser("attack", help="run one adversary against a fresh release")
    p.add_argument("kind", choices=("cluster", "invert", "extract"))
    _common(p)
    p.add_argument("--iters", type=int, default=2000, help="inversion iterations")
    p.add_argument("--samples", type=int, default=100, help="inversion targets")
    p.add_argument("--surrogate-init", choices=("true", "random"), default="true",
                   help="inversion surrogate starting point")

    p = sub.add_parser("report", help="render metrics CSV files as a table")
    p.add_argument("inputs", type=Path, nargs="*")
    return parser


def cmd_run(args) -> int:
    record = harness.run_experiment(args.config, args.out_dir, args.transport, args.seed)
    _, table = harness.report([record])
    print(table)
    print(f"artifacts written to {args.out_dir}")
    return 0 if record.verification["overall"] == "Success" else 1


def cmd_sweep(args) -> int:
    values = [_parse_value(v) if args.axis == "epsilon" else v for v in args.values]
    cfg = harness.load_config(args.config, args.seed)
    records = harness.sweep(cfg, args.axis, values, args.transport, args.out_dir)
    print(harness.report(records)[1])
    return 0


def cmd_verify(args) -> int:
    report = harness.verify_from_files(args.cache, args.checkpoints, args.manifest)
    print(report.to_json())
    print(report.table())
    if args.out_dir:
        args.out_dir.mkdir(parents=True, exist_ok=True)
        (args.out_dir / "report.json").write_text(report.to_json())
    return 0 if report.success else 1


def attack(kind: str, cfg: dict, transport: str = "inproc", iters: int = 2000, samples: int = 100,
           surrogate_init: str = "true") -> dict:
    """Run one adversary on a fresh release described by ``cfg``; return its metrics."""
    prep = harness.prepare(cfg)
    plan = prep.plan
    seed = plan.seeds.attack
    result = {"attack": kind, "run_id": harness.run_id(cfg), "epsilon": cfg["epsilon"], "gamma": plan.gamma}
    if kind == "cluster":
        groups = np.asarray(prep.label_map.inverse)[prep.expanded.labels]
        km = kmeans_auto(prep.cache.values, range(2, 9), seed=seed, true_groups=groups)
        db = dbscan(prep.cache.values, 5, true_groups=groups)
        result.update(kmeans_k=km.k_found, kmeans_perfect_accuracy=km.perfect_accuracy,
                      dbscan_k=db.k_found, dbscan_perfect_accuracy=db.perfect_accuracy)
    elif kind == "invert":
        x = prep.data.x_test[:samples]
        observed = protect(prep.client, x, plan.dp, seed)
        side = int(math.isqrt(x.shape[1]))
        out = unsplit_invert(observed, plan.client_widths, iters=iters, seed=seed,
                             init=prep.client if surrogate_init == "true" else None,
                             clip_radius=plan.dp.clip_radius, targets=x,
                             image_shape=(side, side) if side * side == x.shape[1] else None)
        result.update(mean_mse=float(out.mse.mean()),
                      mean_ssim=None if out.ssim is None else out.mean_ssim)
    else:
        trained = run_training(plan, prep.cache, prep.expanded.labels, transport=transport)
        model = assemble(prep.client, trained.segments, plan.dp.clip_radius)
        probes = jitter_probes(prep.data.x_train, plan.augment_sigma, 1, seed)
        out = extraction_attack(model.predict, probes, plan.q, seed, prep.data.x_test, prep.data.y_test,
                                n_pseudo=plan.n_pseudo)
        result.update(queries=out.pseudo_label_queries, surrogate_true_accuracy=out.surrogate_true_accuracy)
    return result


def cmd_attack(args) -> int:
    cfg = harness.load_config(args.config, args.seed)
    result = attack(args.kind, cfg, args.transport, args.iters, args.samples, args.surrogate_init)
    print(json.dumps(result, indent=2))
    args.out_dir.mkdir(parents=True, exist_ok=True)
    (args.out_dir / f"attack-{args.kind}.json").write_text(json.dumps(result, indent=2))
    params = {k: v for k, v in result.items() if k not in ("attack", "run_id")}
    metric = next(k for k in ("kmeans_perfect_accuracy", "mean_ssim", "surrogate_true_accuracy") if k in result)
    csv_path = args.out_dir / "attacks.csv"
    fresh = not csv_path.exists()
    with csv_path.open("a", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if fresh:
            writer.writerow(["run_id", "attack", "parameters", "metric", "value"])
        writer.writerow([result["run_id"], args.kind, json.dumps(params, sort_keys=True), metric, result[metric]])
    return 0


def cmd_report(args) -> int:
    rows = [row for path in args.inputs for row in harness.read_metrics(path)]
    print(harness.report(rows)[1])
    return 0


COMMANDS = {"run": cmd_run, "sweep": cmd_sweep, "verify": cmd_verify, "attack": cmd_attack, "report": cmd_report}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except harness.StageError as exc:
        print(f"error in stage {exc.stage}: {exc.cause}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
