"""Command line entry point: pretrain, eval, ablate, theory, export."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import harness
from .numkit import ConfigError, Rng

# flag dest -> ExperimentConfig field
_EXPERIMENT_FLAGS = (
    "suite", "variant", "method", "trials", "seeds", "horizon", "k", "epsilon", "lr", "epochs",
    "gamma", "lam", "truncation", "value_mode", "adapter", "estimator", "init_progress", "restore",
    "checkpoint", "auto_pretrain", "out", "workers",
)


def _seed_list(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}")


def _experiment_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with experiment settings; flags override it")
    p.add_argument("--suite", choices=sorted(harness.envsim.SUITES))
    p.add_argument("--variant")
    p.add_argument("--method", choices=harness.METHODS)
    p.add_argument("--trials", type=int)
    p.add_argument("--seeds", type=_seed_list, help="comma-separated, e.g. 0,1,2")
    p.add_argument("--horizon", type=int)
    p.add_argument("--k", type=int, help="update interval (steps per update)")
    p.add_argument("--epsilon", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--gamma", type=float)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--truncation", type=int)
    p.add_argument("--value-mode", choices=("zero", "remaining-progress", "learned"))
    p.add_argument("--adapter", help="'full' or 'lowrank:R'")
    p.add_argument("--estimator", help="'oracle' or 'noisy:SD'")
    p.add_argument("--init-progress", choices=("baseline", "zero"))
    p.add_argument("--restore", choices=("episode", "never"))
    p.add_argument("--checkpoint")
    p.add_argument("--auto-pretrain", action="store_true", default=None)
    p.add_argument("--out")
    p.add_argument("--workers", type=int)


def build_config(args: argparse.Namespace) -> harness.ExperimentConfig:
    data = harness.load_config_file(args.config) if args.config else {}
    for name in _EXPERIMENT_FLAGS:
        val = getattr(args, name, None)
        if val is not None:
            data[name] = val
    return harness.ExperimentConfig.from_dict(data)


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ttvla", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="behaviour-clone the scripted expert and save a checkpoint")
    p.add_argument("--episodes", type=int, default=600)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=harness.DEFAULT_CHECKPOINT)

    p = sub.add_parser("eval", help="frozen vs one adaptation method on one suite")
    _experiment_args(p)

    p = sub.add_parser("ablate", help="reward-design or update-interval ablation")
    p.add_argument("--kind", choices=harness.ABLATIONS, default="update-interval")
    p.add_argument("--suites", type=lambda t: t.split(","), help="comma-separated suites")
    _experiment_args(p)

    p = sub.add_parser("theory", help="check the progress-reward degeneracy claims on random traces")
    p.add_argument("--traces", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="JSONL report path")

    p = sub.add_parser("export", help="convert a results file between csv and jsonl")
    p.add_argument("input")
    p.add_argument("--format", choices=("csv", "jsonl"), default="csv")
    p.add_argument("--out", required=True)
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return _dispatch(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def _dispatch(args) -> int:
    if args.command == "pretrain":
        params = harness.pretrain(args.episodes, args.seed)
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        harness.save_checkpoint(args.out, params)
        print(f"saved checkpoint to {args.out}")
        return 0
    if args.command == "eval":
        cfg = build_config(args)
        print(harness.format_table(harness.run_experiment(cfg).rows))
        return 0
    if args.command == "ablate":
        cfg = build_config(args)
        print(harness.format_table(harness.run_ablation(args.kind, cfg, args.suites).rows))
        return 0
    if args.command == "theory":
        summary = harness.run_theory_suite(args.traces, Rng(args.seed), report_path=args.out)
        rec = summary.to_record()
        rec.pop("failing_traces")
        rec["violations"] = len(summary.violations)
        print(json.dumps(rec, indent=2))
        if not summary.ok:
            for v in summary.violations[:20]:
                print(f"violation: {v}", file=sys.stderr)
            return 1
        return 0
    rows = harness.import_results(args.input)
    harness.export_results(rows, args.out, args.format)
    return 0


if __name__ == "__main__":
    sys.exit(main())
