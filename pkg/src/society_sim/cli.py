"""``society-sim`` command line: validate, run and sweep scenarios.

Exit codes: 0 success, 1 invalid input, 2 failure while running.
Set ``SOCIETY_SIM_LOG`` (DEBUG, INFO, WARNING, ...) for log output on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .errors import InvalidConfig
from .market import build_market, check_config, load_scenario, schema_errors, validate
from .metrics import dumps_json
from .simulation import run
from .sweep import SweepSpec, sweep, write_sweep

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("society_sim")


def _configure_logging() -> None:
    level = os.environ.get("SOCIETY_SIM_LOG", "WARNING").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.WARNING),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )


def _load(path: str):
    try:
        return load_scenario(path)
    except FileNotFoundError:
        print(f"error: FileNotFound: {path}", file=sys.stderr)
    except json.JSONDecodeError as e:
        print(f"error: ParseError: {path}: {e}", file=sys.stderr)
    return None


def _problems(config) -> list[str]:
    out = schema_errors(config)
    if out:
        return out
    try:
        check_config(config)
        state = build_market(config)
    except InvalidConfig as e:
        return [f"{type(e).__name__}: {e}"]
    return [str(v) for v in validate(state)]


def cmd_validate(args) -> int:
    config = _load(args.file)
    if config is None:
        return EXIT_INVALID
    problems = _problems(config)
    for p in problems:
        print(p)
    if problems:
        return EXIT_INVALID
    print(f"ok: {config.get('name', args.file)}")
    return EXIT_OK


def _invalid(config) -> bool:
    problems = _problems(config)
    for p in problems:
        print(p, file=sys.stderr)
    return bool(problems)


def cmd_run(args) -> int:
    config = _load(args.file)
    if config is None or _invalid(config):
        return EXIT_INVALID
    try:
        result = run(config, args.seed, args.epochs)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        stem = f"{config.get('name', 'scenario')}_seed{result.seed}"
        (out / f"{stem}.csv").write_text(result.csv(), newline="")
        summary = result.summary()
        (out / f"{stem}.json").write_text(dumps_json(summary))
    except Exception as e:
        log.exception("run failed")
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    final = summary["final"]
    line = f"{stem}: epochs={summary['epochs']} equilibrium={summary['equilibrium']['epoch']}"
    if final:
        subs = {**final["operator_subs"], **final["mvno_subs"]}
        total = sum(subs.values()) or 1
        shares = " ".join(f"{k}={v / total:.3f}" for k, v in subs.items())
        line += f" society_share={final['society_share']:.3f} shares: {shares}"
    print(line)
    return EXIT_OK


def cmd_sweep(args) -> int:
    config = _load(args.file)
    if config is None or _invalid(config):
        return EXIT_INVALID
    try:
        spec = SweepSpec(args.param, args.start, args.stop, args.steps, args.seeds)
        result = sweep(config, spec, workers=args.workers)
    except InvalidConfig as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as e:
        log.exception("sweep failed")
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    try:
        path = write_sweep(result, args.out)
    except OSError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    for key, point in result.combined()["points"].items():
        med = point["median"]
        share = "failed" if med is None else f"{med['society_share']:.4f}"
        print(f"{spec.param}={key} median_society_share={share}")
    print(f"summary: {path}")
    for r in result.failed:
        print(f"failed: {spec.param}={r.value} seed={r.seed}: {r.error}", file=sys.stderr)
    return EXIT_RUNTIME if result.failed else EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors are invalid input, not runtime failures
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="society-sim", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    v = sub.add_parser("validate", help="check a scenario file")
    v.add_argument("file")
    v.set_defaults(func=cmd_validate)

    r = sub.add_parser("run", help="simulate one scenario")
    r.add_argument("file")
    r.add_argument("--seed", type=int, default=None, help="default: the scenario's seed")
    r.add_argument("--epochs", type=int, default=None, help="default: the scenario's epochs")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="grid over one parameter")
    s.add_argument("file")
    s.add_argument("--param", required=True, help="dotted path, e.g. spectrum.w")
    s.add_argument("--from", dest="start", type=float, required=True)
    s.add_argument("--to", dest="stop", type=float, required=True)
    s.add_argument("--steps", type=int, required=True)
    s.add_argument("--seeds", type=int, default=3)
    s.add_argument("--workers", type=int, default=1, help="parallel runs (0: one per CPU)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    _configure_logging()
    args = build_parser().parse_args(argv)
    if getattr(args, "workers", 1) == 0:
        args.workers = None
    if getattr(args, "epochs", None) is not None and args.epochs < 0:
        print("error: --epochs must be >= 0", file=sys.stderr)
        return EXIT_INVALID
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
