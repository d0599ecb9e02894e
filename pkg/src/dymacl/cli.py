"""Command-line front end.

Exit codes: 0 success, 1 usage error, 2 runtime error, 3 verification failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import re
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from . import analysis
from . import curriculum as C
from . import verify
from .errors import DymaError, ParseError
from .transfer import TRANSFER_KINDS

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_VERIFY = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _positive(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value <= 0:
        raise argparse.ArgumentTypeError(f"must be > 0, got {value}")
    return value


def _scenarios(text):
    try:
        sizes = tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated sizes, got {text!r}") from None
    if not sizes or any(n <= 0 for n in sizes):
        raise argparse.ArgumentTypeError("scenario sizes must be positive")
    return sizes


_TASK_RE = re.compile(r"^(\d+)v(\d+)(?::(\d+))?$")


def parse_task(text: str) -> C.TaskSpec:
    """``"5v5"`` or ``"5v5:20"`` (team sizes, optional map side)."""
    m = _TASK_RE.match(text.strip())
    if not m:
        raise argparse.ArgumentTypeError(f"task must look like 5v5 or 5v5:20, got {text!r}")
    a, b, side = m.groups()
    return C.TaskSpec(int(a), int(b), 1, int(side) if side else None)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dymacl", description="Dynamic multiagent curriculum learning.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="run a curriculum")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--config", type=Path, help="YAML run configuration")
    src.add_argument("--preset", choices=C.PRESETS, help="shipped configuration")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--transfer", choices=TRANSFER_KINDS, help="override the transfer mechanism")

    p = sub.add_parser("eval", help="evaluate a checkpoint greedily against the scripted opponent")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--task", type=parse_task, required=True, help="e.g. 5v5 or 5v5:20")
    p.add_argument("--episodes", type=_positive, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-steps", type=_positive, default=300)
    p.add_argument("--out", type=Path, help="write metrics CSV here (default: stdout only)")

    p = sub.add_parser("analyze", help="embedding distance analysis")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--scenarios", type=_scenarios, default=(3, 4, 5))
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--samples", type=_positive, default=300, help="samples per scenario")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--metric", choices=analysis.METRICS, default="euclidean")
    p.add_argument("--labeler", choices=sorted(analysis.LABELERS), default="teammates")

    p = sub.add_parser("verify", help="run the gradient, permutation and loss-oracle suites")
    p.add_argument("--suite", action="append", choices=verify.SUITES,
                   help="run only this suite (repeatable)")
    p.add_argument("--inject-fault", choices=verify.FAULTS,
                   help="deliberately break one component (self-test of the harness)")
    p.add_argument("--quick", action="store_true", help="fewer seeds and draws")
    return parser


def _train(args) -> int:
    spec = C.parse_spec(args.config) if args.config else C.load_preset(args.preset)
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    if args.transfer is not None:
        spec = replace(spec, transfer=replace(spec.transfer, kind=args.transfer))
    report = C.run(spec, args.out)
    for task in report.tasks:
        m = task.metrics
        line = f"task {task.index} {task.label}: {task.steps} steps, {task.episodes} episodes"
        if m is not None:
            line += (f", win {m.win_rate:.3f}, kills {m.mean_kill_count:.2f}"
                     f"±{m.se_kill_count:.2f}, survivors {m.mean_survivors:.2f}"
                     f"±{m.se_survivors:.2f}")
        print(line)
    print(f"wrote {args.out}")
    return EXIT_OK


def _eval(args) -> int:
    if not args.checkpoint.exists():
        raise ParseError(f"checkpoint not found: {args.checkpoint}")
    world = C.CurriculumSpec((args.task,), world=C.WorldDefaults(max_steps=args.max_steps)) \
        .world_config(args.task)
    m = C.evaluate(args.checkpoint, world, args.episodes, args.seed)
    print(f"task {args.task.label}, {m.episodes} episodes")
    print(f"win_rate  {m.win_rate:.4f} ± {m.se_win_rate:.4f}")
    print(f"survivors {m.mean_survivors:.4f} ± {m.se_survivors:.4f}")
    print(f"kills     {m.mean_kill_count:.4f} ± {m.se_kill_count:.4f}")
    print(f"reward    {m.mean_episode_reward:.4f} ± {m.se_episode_reward:.4f}")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    row = m.to_dict()
    writer.writerow(["task"] + list(row))
    writer.writerow([args.task.label] + [repr(v) for v in row.values()])
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        path = args.out / f"eval_{args.task.label}.csv"
        analysis._atomic_write(path, buf.getvalue())
        print(f"wrote {path}")
    return EXIT_OK


def _analyze(args) -> int:
    if not args.checkpoint.exists():
        raise ParseError(f"checkpoint not found: {args.checkpoint}")
    report = analysis.analyze(args.checkpoint, args.out, args.scenarios, args.samples,
                              args.seed, args.metric, args.labeler)
    sys.stdout.write(report.to_text())
    print(f"wrote {args.out / 'embeddings.csv'} and {args.out / 'report.txt'}")
    return EXIT_OK


def _verify(args) -> int:
    results = verify.run_suites(tuple(args.suite or verify.SUITES), args.inject_fault, args.quick)
    print(verify.format_table(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_VERIFY


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handlers = {"train": _train, "eval": _eval, "analyze": _analyze, "verify": _verify}
    try:
        return handlers[args.verb](args)
    except ParseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DymaError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
