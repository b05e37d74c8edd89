"""Command-line entry point.

Verbs: train, eval, ablate, gradcheck, plot, summarize. Configuration comes
from one JSON file plus repeatable --set key=value overrides (dotted keys
reach nested sections, values parse as JSON with a string fallback).

Exit codes: 0 success, 2 configuration error, 3 numeric error,
4 verification failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import ConfigError, NumericError, ProtocolError, VerificationError
from .harness import (
    ABLATION_VARIANTS,
    RunConfig,
    ablate,
    evaluate,
    load_run,
    run_gradcheck,
    summarize_runs,
    train_run,
)
from .numcore import Prng

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_VERIFY = 4


def _apply_set(cfg: dict, key: str, raw: str) -> None:
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    parts = key.split(".")
    node = cfg
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"--set key {key!r} descends into non-object")
    node[parts[-1]] = value


def _load_config(args) -> RunConfig:
    cfg_dict: dict = {}
    if args.config:
        cfg_dict = json.loads(Path(args.config).read_text())
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        _apply_set(cfg_dict, key, raw)
    if getattr(args, "seed", None) is not None:
        cfg_dict["seed"] = args.seed
    return RunConfig.from_dict(cfg_dict)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="normrl", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("train", help="train one run and evaluate shift suites periodically")
    _add_common(p)
    p.add_argument("--resume", action="store_true", help="continue from the latest checkpoint in --out")

    p = sub.add_parser("eval", help="evaluate a saved run on one suite")
    p.add_argument("--run", required=True, help="run directory with checkpoints")
    p.add_argument("--suite", default="train")
    p.add_argument("--episodes", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--step", type=int, default=None, help="checkpoint step (default: latest)")

    p = sub.add_parser("ablate", help="run the variant x seed ablation matrix")
    _add_common(p)
    p.add_argument("--seeds", default="0,1", help="comma-separated seed list")
    p.add_argument("--variants", default=",".join(ABLATION_VARIANTS))
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("gradcheck", help="finite-difference verification of all backward passes")
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--self-test-corrupt", dest="corrupt", default=None,
                   help="scale one suite's analytic grads by 1.01 to prove the gate can fail")

    p = sub.add_parser("plot", help="render seed-averaged learning curves as SVG")
    p.add_argument("runs", nargs="+", help="run directories")
    p.add_argument("--out", default="plot.svg")
    p.add_argument("--suites", default=None, help="comma-separated suite filter")

    p = sub.add_parser("summarize", help="aggregate run summaries into a table")
    p.add_argument("runs", nargs="+", help="run directories")
    p.add_argument("--out", default=None, help="directory for summary.csv / summary.txt")
    return ap


def _cmd_train(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out) if args.out else Path(f"runs/{cfg.variant}_seed{cfg.seed}")
    train_run(cfg, out, resume=args.resume, log=lambda m: print(m, flush=True))
    summary = json.loads((out / "summary.json").read_text())
    print(f"run dir: {out}")
    if summary.get("status") != "ok":
        print(f"run failed: {summary.get('error')}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def _cmd_eval(args) -> int:
    _, qnet, meta = load_run(args.run, args.step)
    mean, std = evaluate(qnet, args.suite, args.episodes, Prng(args.seed))
    print(f"suite={args.suite} episodes={args.episodes} mean={mean:.4f} std={std:.4f} (checkpoint step {meta['step']})")
    return EXIT_OK


def _cmd_ablate(args) -> int:
    cfg = _load_config(args)
    seeds = [int(s) for s in args.seeds.split(",") if s != ""]
    variants = tuple(v for v in args.variants.split(",") if v)
    out = Path(args.out) if args.out else Path("runs/ablation")
    table = ablate(cfg, seeds, out, variants=variants, workers=args.workers,
                   log=lambda m: print(m, flush=True))
    print(table.to_text(), end="")
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    report = run_gradcheck(corrupt=args.corrupt, trials=args.trials, seed=args.seed)
    print(report.to_text(), end="")
    if not report.passed:
        failed = ", ".join(s.name for s in report.suites if not s.passed)
        print(f"failed suites: {failed}", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def _cmd_plot(args) -> int:
    from .plotsvg import plot_runs

    suites = args.suites.split(",") if args.suites else None
    path = plot_runs(args.runs, args.out, suites=suites)
    print(f"wrote {path}")
    return EXIT_OK


def _cmd_summarize(args) -> int:
    table = summarize_runs(args.runs)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "summary.csv").write_text(table.to_csv_text())
        (out / "summary.txt").write_text(table.to_text())
    print(table.to_text(), end="")
    return EXIT_OK


_COMMANDS = {
    "train": _cmd_train,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "gradcheck": _cmd_gradcheck,
    "plot": _cmd_plot,
    "summarize": _cmd_summarize,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.verb](args)
    except (ConfigError, ProtocolError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except VerificationError as exc:
        print(f"verification failure: {exc}", file=sys.stderr)
        return EXIT_VERIFY


if __name__ == "__main__":
    sys.exit(main())
