"""Command-line entry point: train, eval, ablate, plot, export-evalset."""
from __future__ import annotations

import argparse
import itertools
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, load_config


def _grid_points(grid: dict) -> list[dict]:
    """A grid file is either {"runs": [{dotted: value}, ...]} or {dotted: [values, ...]} (cartesian)."""
    if "runs" in grid:
        return [dict(r) for r in grid["runs"]]
    keys = sorted(grid)
    for k in keys:
        if not isinstance(grid[k], list) or not grid[k]:
            raise ConfigError(f"grid.{k}: expected a non-empty list of values")
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


def _run_name(point: dict) -> str:
    parts = []
    for k, v in sorted(point.items()):
        v = v if not isinstance(v, dict) else "-".join(f"{a}{b}" for a, b in sorted(v.items()))
        parts.append(f"{k.split('.')[-1]}={v}")
    return "__".join(parts) or "base"


def cmd_train(args) -> int:
    from .trainer import run_experiment
    cfg = load_config(args.config)
    out = Path(args.out) if args.out else Path("runs") / Path(args.config).stem
    rows = run_experiment(cfg, out, resume=args.resume)
    last = next((r for r in reversed(rows) if r.eval_accuracy is not None), None)
    print(f"wrote {len(rows)} metric rows to {out / 'metrics.csv'}")
    if last is not None:
        print(f"eval accuracy at step {last.step}: {last.eval_accuracy:.4f}")
    return 0


def cmd_eval(args) -> int:
    from .envs import load_eval_set
    from .trainer import evaluate, load_params
    params, vocab = load_params(args.ckpt)
    eval_set = load_eval_set(args.eval_set)
    acc, per = evaluate(params, eval_set, vocab, args.max_len)
    print(json.dumps({"accuracy": acc, "per_family": per, "n": len(eval_set)}, sort_keys=True))
    return 0


def cmd_ablate(args) -> int:
    from .trainer import run_experiment
    base = load_config(args.config)
    grid = json.loads(Path(args.grid).read_text())
    out = Path(args.out) if args.out else Path("runs") / Path(args.grid).stem
    summary = []
    for point in _grid_points(grid):
        cfg = base.replace(**point)
        name = _run_name(point)
        rows = run_experiment(cfg, out / name)
        accs = [r.eval_accuracy for r in rows if r.eval_accuracy is not None]
        summary.append({"run": name, "overrides": point, "final_accuracy": accs[-1] if accs else None})
        print(f"{name}: final accuracy {summary[-1]['final_accuracy']}")
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return 0


def cmd_plot(args) -> int:
    from .plotting import FIGURES, render
    figures = [args.figure] if args.figure else list(FIGURES)
    for fig in figures:
        path = render(args.run, fig)
        print(f"{fig}: {path if path else 'no rows, nothing rendered'}")
    return 0


def cmd_export_evalset(args) -> int:
    from .envs import make_eval_set, save_eval_set
    from .policy import default_vocabulary
    cfg = load_config(args.config)
    env = cfg.env
    n = args.n if args.n is not None else env.eval_size
    inst = make_eval_set(env.family, n, env.difficulty, env.eval_seed_offset,
                         default_vocabulary(cfg.model.vocab_size), env.p_direct)
    save_eval_set(args.out, inst)
    print(f"wrote {len(inst)} instances to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lpreg", description="Low-probability token regularization experiments.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress every 100 steps")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run one experiment")
    p.add_argument("--config", required=True)
    p.add_argument("--resume", help="checkpoint to resume from (written under the same config)")
    p.add_argument("--out", help="output directory (default runs/<config stem>)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="greedy accuracy of a checkpoint on a JSONL eval set")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--eval-set", required=True)
    p.add_argument("--max-len", type=int, default=32)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run a grid of dotted-path overrides over a base config")
    p.add_argument("--config", required=True)
    p.add_argument("--grid", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("plot", help="render SVG figures from a run directory")
    p.add_argument("--run", required=True)
    p.add_argument("--figure", choices=("density", "scatter", "curves", "gap"))
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("export-evalset", help="write the configured eval set as JSONL")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("-n", type=int)
    p.set_defaults(func=cmd_export_evalset)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
