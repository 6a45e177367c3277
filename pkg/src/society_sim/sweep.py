"""Grid sweeps over one scenario parameter, several seeds per point."""

from __future__ import annotations

import copy
import logging
import math
import statistics
from collections.abc import Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .errors import InvalidConfig
from .market import ScenarioConfig, _schema, check_config
from .metrics import SCHEMA_VERSION, dumps_json
from .simulation import run

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SweepSpec:
    param: str
    start: float
    stop: float
    steps: int
    seeds: int = 3

    def __post_init__(self):
        if self.steps < 1:
            raise InvalidConfig(f"steps must be >= 1, got {self.steps}", "sweep.steps")
        if self.seeds < 1:
            raise InvalidConfig(f"seeds must be >= 1, got {self.seeds}", "sweep.seeds")
        if not self.start <= self.stop:
            raise InvalidConfig(f"need from <= to, got {self.start} > {self.stop}", "sweep.from")
        if self.steps == 1 and self.start != self.stop:
            log.info("steps=1: sweeping only from=%s", self.start)

    def values(self) -> list[float]:
        # 12 significant digits keep 0.15 from printing as 0.15000000000000002
        return [float(f"{v:.12g}") for v in np.linspace(self.start, self.stop, self.steps)]


def value_key(v: float) -> str:
    return f"{v:.12g}"


# ---------------------------------------------------------------- paths


def _schema_node(parts: Sequence[str]) -> dict | None:
    node = _schema()
    for p in parts:
        if "$ref" in node:
            return node  # below a shared definition: accept
        if "properties" in node and p in node["properties"]:
            node = node["properties"][p]
        elif "items" in node and p.isdigit():
            node = node["items"]
        else:
            return None
    return node


def set_param(config: ScenarioConfig, path: str, value: float) -> ScenarioConfig:
    """Copy of ``config`` with the dotted ``path`` set to ``value``.

    List elements are addressed by index (``operators.0.retail_price``).
    """
    parts = path.split(".")
    if not path or _schema_node(parts) is None:
        raise InvalidConfig(f"unknown parameter path {path!r}", "sweep.param")
    out = copy.deepcopy(config)
    node: Any = out
    for p in parts[:-1]:
        try:
            node = node[int(p)] if isinstance(node, list) else node[p]
        except (KeyError, IndexError, ValueError):
            raise InvalidConfig(f"parameter path {path!r} does not resolve in this scenario", "sweep.param") from None
    leaf = parts[-1]
    if isinstance(node, list):
        node[int(leaf)] = value
    else:
        node[leaf] = value
    return out


# ---------------------------------------------------------------- running


@dataclass
class PointRun:
    value: float
    seed: int
    csv: str | None = None
    summary: dict[str, Any] | None = None
    error: str | None = None


@dataclass
class SweepResult:
    spec: SweepSpec
    scenario: str
    runs: list[PointRun] = field(default_factory=list)

    @property
    def failed(self) -> list[PointRun]:
        return [r for r in self.runs if r.error is not None]

    def by_value(self) -> dict[float, list[PointRun]]:
        out: dict[float, list[PointRun]] = {}
        for r in self.runs:
            out.setdefault(r.value, []).append(r)
        return out

    def median_society_share(self) -> list[float]:
        return [
            statistics.median(r.summary["final"]["society_share"] for r in rs if r.summary)
            for rs in self.by_value().values()
        ]

    def combined(self) -> dict[str, Any]:
        points = {}
        for v, rs in self.by_value().items():
            ok = [r for r in rs if r.summary is not None]
            per_seed = [_digest(r) for r in ok]
            eq = [d["equilibrium_epoch"] for d in per_seed if d["equilibrium_epoch"] is not None]
            points[value_key(v)] = {
                "value": v,
                "runs": per_seed,
                "errors": {str(r.seed): r.error for r in rs if r.error is not None},
                "median": None if not ok else {
                    "society_share": statistics.median(d["society_share"] for d in per_seed),
                    "equilibrium_epoch": statistics.median(eq) if eq else None,
                    "equilibrium_found": len(eq),
                    "mean_prices": {
                        o: statistics.median(d["mean_prices"][o] for d in per_seed)
                        for o in per_seed[0]["mean_prices"]
                    },
                },
            }
        return {
            "schema_version": SCHEMA_VERSION,
            "scenario": self.scenario,
            "param": self.spec.param,
            "from": self.spec.start,
            "to": self.spec.stop,
            "steps": self.spec.steps,
            "seeds_per_point": self.spec.seeds,
            "points": points,
        }


def _digest(r: PointRun) -> dict[str, Any]:
    s = r.summary
    return {
        "seed": r.seed,
        "equilibrium_epoch": s["equilibrium"]["epoch"],
        "equilibrium_mean_prices": s["equilibrium"]["mean_prices"],
        "mean_prices": s["aggregate"]["mean_prices"] if s["aggregate"] else {},
        "society_share": s["final"]["society_share"] if s["final"] else math.nan,
    }


def _run_point(job: tuple[ScenarioConfig, float, int]) -> PointRun:
    config, value, seed = job
    try:
        result = run(config, seed)
        return PointRun(value, seed, result.csv(), result.summary())
    except Exception as e:  # reported per point, never fatal to the sweep
        log.exception("point %s seed %d failed", value, seed)
        return PointRun(value, seed, error=f"{type(e).__name__}: {e}")


def sweep(config: ScenarioConfig, spec: SweepSpec, workers: int | None = 1) -> SweepResult:
    """Run every grid point with seeds ``config["seed"] + k``, ``k < spec.seeds``.

    Configs for all points are validated up front. Runs may execute in a
    process pool (``workers > 1`` or ``None`` for one per CPU); the result
    order is always grid-major, seed-minor.
    """
    base = config["seed"]
    jobs = []
    for v in spec.values():
        point = set_param(config, spec.param, v)
        check_config(point)
        jobs += [(point, v, base + k) for k in range(spec.seeds)]
    log.info("sweep %s: %d points x %d seeds", spec.param, spec.steps, spec.seeds)
    if workers == 1:
        runs = [_run_point(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            runs = list(pool.map(_run_point, jobs))
    return SweepResult(spec, config.get("name", "scenario"), runs)


def write_sweep(result: SweepResult, out_dir) -> Path:
    """One CSV and JSON per run under ``<param>=<value>/``, plus ``sweep_summary.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for r in result.runs:
        if r.summary is None:
            continue
        d = out / f"{result.spec.param}={value_key(r.value)}"
        d.mkdir(exist_ok=True)
        (d / f"seed_{r.seed}.csv").write_text(r.csv, newline="")
        (d / f"seed_{r.seed}.json").write_text(dumps_json(r.summary))
    path = out / "sweep_summary.json"
    path.write_text(dumps_json(result.combined()))
    return path
