"""Command-line entry point: train, eval, ablate, metrics normalize, selftest.

Every command prints its results between ``=== name ===`` / ``=== end name ===``
lines, and writes JSON, JSON-lines and PNG files to ``--out``.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time

from . import metrics as Mx
from .errors import ConfigError, ContractError, FormatError, TrainingDiverged


def _block(name, body):
    print(f"=== {name} ===")
    print(body.rstrip("\n"))
    print(f"=== end {name} ===")


def _write_json(out, filename, payload):
    path = os.path.join(out, filename)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _progress(quiet):
    if quiet:
        return None

    def report(record):
        if record["step"] % 50 == 0 or record["step"] == 1:
            print(f"step {record['step']:5d}  loss {record['loss']:.5f}  lr {record['lr']:.2e}", file=sys.stderr)

    return report


def cmd_train(args):
    from .harness import report
    from .harness.checkpoint import save_checkpoint
    from .harness.config import RunConfig
    from .harness.evaluate import evaluate
    from .harness.train import train

    cfg = RunConfig.from_file(args.config)
    if args.steps is not None:
        cfg = cfg.replace(steps=args.steps, warmup=min(cfg.warmup, max(args.steps - 1, 0)))
        cfg.validate()
    start = time.perf_counter()
    ckpt, history = train(cfg, log_path=os.path.join(args.out, "train_log.jsonl"), on_step=_progress(args.quiet))
    seconds = time.perf_counter() - start
    ckpt_path = os.path.join(args.out, "checkpoint.vfmc")
    save_checkpoint(ckpt, ckpt_path)
    mode = cfg.readout_mode
    scores = evaluate(ckpt, mode)
    _write_json(args.out, "metrics.json", {"mode": mode, "metrics": scores, "train_seconds": seconds})
    figure = report.plot_loss({cfg.variant: history}, os.path.join(args.out, "loss.png"),
                              title=f"{cfg.task} / {cfg.variant} / {cfg.regime}")
    _block("config", cfg.to_ini())
    _block("metrics", "\n".join(f"{k} = {v:.6g}" for k, v in scores.items()))
    _block("files", "\n".join([ckpt_path, os.path.join(args.out, "train_log.jsonl"),
                               os.path.join(args.out, "metrics.json"), figure]))
    return 0


def cmd_eval(args):
    from .harness import report
    from .harness.checkpoint import load_checkpoint
    from .harness.evaluate import METRIC_DIRECTIONS, evaluate

    ckpt = load_checkpoint(args.ckpt)
    scores = evaluate(ckpt, args.mode)
    _write_json(args.out, f"metrics_{args.mode}.json", {"mode": args.mode, "metrics": scores})
    table = Mx.MetricTable({k: METRIC_DIRECTIONS[k] for k in scores})
    table.add_row(f"{ckpt.config.variant}/{args.mode}", scores)
    figure = report.plot_metric_table(table, os.path.join(args.out, f"metrics_{args.mode}.png"),
                                      title=f"{ckpt.config.task}, step {ckpt.step}")
    _block("metrics", table.format_text(digits=6))
    _block("files", "\n".join([os.path.join(args.out, f"metrics_{args.mode}.json"), figure]))
    return 0


def cmd_ablate(args):
    from .harness import report
    from .harness.ablate import DELTA_ROW, delta_favours_multi_depth, run_ablation
    from .harness.config import RunConfig

    cfg = RunConfig.from_file(args.config)
    if args.steps is not None:
        cfg = cfg.replace(steps=args.steps, warmup=min(cfg.warmup, max(args.steps - 1, 0)))
        cfg.validate()
    progress = _progress(args.quiet)
    table, histories = run_ablation(cfg, on_step=(lambda mode, r: progress(r)) if progress else None)
    with open(os.path.join(args.out, "ablation.json"), "w") as fh:
        fh.write(table.to_json() + "\n")
    figures = [
        report.plot_metric_table(table, os.path.join(args.out, "ablation.png"), "feature modes",
                                 skip_rows=(DELTA_ROW,)),
        report.plot_loss(histories, os.path.join(args.out, "ablation_loss.png"), "feature modes"),
    ]
    trend = delta_favours_multi_depth(table)
    _block("ablation", table.format_text(digits=6))
    _block("trend", "\n".join(f"{k}: multi_depth {'better' if v else 'not better'}" for k, v in trend.items()))
    _block("files", "\n".join([os.path.join(args.out, "ablation.json")] + figures))
    return 0


def cmd_normalize(args):
    from .harness import report

    with open(args.table) as fh:
        table = Mx.MetricTable.from_json(fh.read())
    columns = [c.strip() for c in args.columns.split(",") if c.strip()] if args.columns else None
    averages = Mx.normalized_averages(table, columns)
    shown = Mx.MetricTable({c: table.directions[c] for c in (columns or table.columns)})
    for name, scores in table.rows.items():
        shown.add_row(name, {c: scores.get(c) for c in shown.columns})
    _write_json(args.out, "normalized.json", {"columns": shown.columns, "normalized_average": averages})
    figure = report.plot_normalized(averages, os.path.join(args.out, "normalized.png"))
    _block("normalized", shown.format_text(extra={"norm_avg": averages}))
    _block("files", "\n".join([os.path.join(args.out, "normalized.json"), figure]))
    return 0


def cmd_selftest(args):
    from .selftest import run_selftest

    results = run_selftest()
    lines = [f"{'PASS' if ok else 'FAIL'}  {name}  ({seconds:.2f}s)  {detail}"
             for name, ok, detail, seconds in results]
    _write_json(args.out, "selftest.json",
                [{"check": n, "passed": ok, "detail": d, "seconds": s} for n, ok, d, s in results])
    _block("selftest", "\n".join(lines))
    return 0 if all(ok for _, ok, _, _ in results) else 1


def build_parser():
    parser = argparse.ArgumentParser(prog="streamvid", description=__doc__.splitlines()[0])
    parser.add_argument("--out", default="streamvid_out", help="directory for JSON, logs and figures")
    parser.add_argument("--quiet", action="store_true", help="no per-step progress on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one run from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--steps", type=int, default=None, help="override the configured step count")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a saved checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--mode", choices=("streaming", "offline"), default="streaming")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="multi-depth vs final-layer features under one seed")
    p.add_argument("--config", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("metrics", help="metric table utilities")
    msub = p.add_subparsers(dest="metrics_command", required=True)
    n = msub.add_parser("normalize", help="normalized average of each row of a metric table")
    n.add_argument("--table", required=True, help="JSON with 'directions' and 'rows'")
    n.add_argument("--columns", default=None, help="comma-separated subset of columns")
    n.set_defaults(func=cmd_normalize)

    p = sub.add_parser("selftest", help="run the invariant checks")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    os.makedirs(args.out, exist_ok=True)
    try:
        return args.func(args)
    except (ConfigError, ContractError, FormatError, TrainingDiverged, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
