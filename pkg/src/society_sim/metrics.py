"""Per-epoch measurements, equilibrium detection and export."""

from __future__ import annotations

import csv
import io
import json
import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .errors import EmptyInput, SeriesTooShort

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class LicensedAudit:
    """What one operator's licensed band did in one epoch."""

    capacity: float
    demand: float
    allocation: float
    donated: float
    delivered: float  # summed over the operator's exclusive contracts


@dataclass
class EpochMetrics:
    epoch: int
    prices: dict[str, float]
    objective: dict[str, float]
    op_revenue: dict[str, float]
    op_subs: dict[str, int]
    mvno_subs: dict[str, int]
    mvno_revenue: dict[str, float]
    mvno_margin: dict[str, float]
    mvno_active: dict[str, bool]
    soc_q_p10: float
    soc_q_p50: float
    soc_q_p90: float
    soc_q_mean: float
    exc_q_p50: float
    exc_q_mean: float
    jain_society: float
    donated: float
    unallocated: float
    society_load: float
    exclusive_load: float
    shares: dict[str, float] = field(default_factory=dict)
    licensed: dict[str, LicensedAudit] = field(default_factory=dict)
    quality: np.ndarray | None = field(default=None, repr=False)

    @property
    def population(self) -> int:
        return sum(self.op_subs.values()) + sum(self.mvno_subs.values())

    @property
    def exclusive_subs(self) -> int:
        return sum(self.op_subs.values())

    @property
    def society_share(self) -> float:
        n = self.population
        return sum(self.mvno_subs.values()) / n if n else 0.0


def jain_index(allocations: Sequence[float]) -> float:
    """Jain's fairness index, ``(sum x)^2 / (n * sum x^2)``.

    >>> jain_index([1, 0, 0, 0])
    0.25
    """
    x = [float(a) for a in allocations]
    if not x:
        raise EmptyInput("jain_index needs at least one allocation")
    if any(a < 0 for a in x):
        raise ValueError("allocations must be non-negative")
    sq = math.fsum(a * a for a in x)
    if sq == 0:
        return 1.0
    return min(1.0, math.fsum(x) ** 2 / (len(x) * sq))


def percentiles(values, qs=(10, 50, 90)) -> list[float]:
    if len(values) == 0:
        return [0.0] * len(qs)
    return [float(v) for v in np.percentile(np.asarray(values, dtype=float), qs)]


def detect_equilibrium(
    series,
    window: int,
    tol: float,
    start_epoch: int = 0,
) -> int | None:
    """First epoch whose trailing window shows every price stable.

    ``series`` is a sequence of per-epoch price vectors (or mappings), the
    first belonging to ``start_epoch``. Epoch ``e`` qualifies when for each
    price the spread ``(max - min) / min`` over epochs ``e - window .. e``
    is below ``tol``.
    """
    if window < 2:
        raise ValueError("window must be >= 2")
    if tol <= 0:
        raise ValueError("tol must be > 0")
    rows = [list(r.values()) if isinstance(r, Mapping) else list(np.atleast_1d(r)) for r in series]
    if len(rows) < window + 1:
        raise SeriesTooShort(f"need at least {window + 1} epochs, got {len(rows)}")
    arr = np.asarray(rows, dtype=float)
    for end in range(window, len(arr)):
        chunk = arr[end - window: end + 1]
        lo, hi = chunk.min(axis=0), chunk.max(axis=0)
        with np.errstate(divide="ignore", invalid="ignore"):
            spread = np.where(hi == lo, 0.0, (hi - lo) / lo)
        if np.all(spread < tol):
            return start_epoch + end
    return None


# ---------------------------------------------------------------- export


def csv_columns(operators: Sequence[str], mvnos: Sequence[str], share_ops: Sequence[str] = ()) -> list[str]:
    cols = ["epoch"]
    for o in operators:
        cols += [f"op_{o}_price", f"op_{o}_revenue", f"op_{o}_subs"]
    cols += [f"mvno_{m}_subs" for m in mvnos]
    cols += ["soc_q_p10", "soc_q_p50", "soc_q_p90", "exc_q_p50", "jain_society", "donated", "unallocated"]
    cols += [f"share_{o}" for o in share_ops]
    return cols


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def csv_row(m: EpochMetrics, operators, mvnos, share_ops=()) -> list[str]:
    row = [m.epoch]
    for o in operators:
        row += [m.prices[o], m.op_revenue[o], m.op_subs[o]]
    row += [m.mvno_subs[k] for k in mvnos]
    row += [m.soc_q_p10, m.soc_q_p50, m.soc_q_p90, m.exc_q_p50, m.jain_society, m.donated, m.unallocated]
    row += [m.shares.get(o, 0.0) for o in share_ops]
    return [_fmt(v) for v in row]


def metrics_csv(metrics: Sequence[EpochMetrics], operators, mvnos, share_ops=()) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(csv_columns(operators, mvnos, share_ops))
    for m in metrics:
        writer.writerow(csv_row(m, operators, mvnos, share_ops))
    return buf.getvalue()


def summary(
    metrics: Sequence[EpochMetrics],
    *,
    scenario: str,
    seed: int,
    operators: Sequence[str],
    mvnos: Sequence[str],
    equilibrium_window: int = 30,
    equilibrium_tol: float = 0.01,
    equilibrium_from: int = 0,
    extra: Mapping[str, Any] | None = None,
) -> dict[str, Any]:
    """Aggregate a metrics stream into the versioned JSON summary."""
    segment = [m for m in metrics if m.epoch >= equilibrium_from]
    try:
        eq = detect_equilibrium(
            [[m.prices[o] for o in operators] for m in segment],
            equilibrium_window, equilibrium_tol, start_epoch=segment[0].epoch if segment else 0,
        )
    except SeriesTooShort:
        eq = None
    eq_prices = None
    if eq is not None:
        win = [m for m in metrics if eq - equilibrium_window <= m.epoch <= eq]
        eq_prices = {o: math.fsum(m.prices[o] for m in win) / len(win) for o in operators}

    n = len(metrics)
    out: dict[str, Any] = {
        "schema_version": SCHEMA_VERSION,
        "scenario": scenario,
        "seed": seed,
        "epochs": n,
        "equilibrium": {
            "epoch": eq,
            "window": equilibrium_window,
            "tol": equilibrium_tol,
            "from_epoch": equilibrium_from,
            "mean_prices": eq_prices,
        },
        "final": None,
        "aggregate": None,
    }
    if n:
        last = metrics[-1]
        out["final"] = {
            "epoch": last.epoch,
            "prices": {k: last.prices[k] for k in list(operators) + list(mvnos)},
            "operator_subs": dict(last.op_subs),
            "mvno_subs": dict(last.mvno_subs),
            "mvno_active": dict(last.mvno_active),
            "society_share": last.society_share,
            "mean_price": math.fsum(last.prices[o] for o in operators) / len(operators),
        }
        out["aggregate"] = {
            "mean_prices": {o: math.fsum(m.prices[o] for m in metrics) / n for o in operators},
            "mean_society_share": math.fsum(m.society_share for m in metrics) / n,
            "operator_revenue": {o: math.fsum(m.op_revenue[o] for m in metrics) for o in operators},
            "mvno_revenue": {k: math.fsum(m.mvno_revenue[k] for m in metrics) for k in mvnos},
            "mvno_profit": {k: math.fsum(m.mvno_margin[k] for m in metrics) for k in mvnos},
            "mean_jain_society": math.fsum(m.jain_society for m in metrics) / n,
            "mean_donated": math.fsum(m.donated for m in metrics) / n,
        }
    if extra:
        out.update(extra)
    return out


def dumps_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False, default=_json_default) + "\n"


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def export(
    metrics: Sequence[EpochMetrics],
    fmt: str,
    path,
    *,
    operators: Sequence[str],
    mvnos: Sequence[str],
    share_ops: Sequence[str] = (),
    summary_data: Mapping[str, Any] | None = None,
) -> Path:
    """Write metrics as ``csv`` (one row per epoch) or ``json`` (summary).

    Raises ``OSError`` when the destination is not writable.
    """
    path = Path(path)
    if fmt == "csv":
        text = metrics_csv(metrics, operators, mvnos, share_ops)
    elif fmt == "json":
        if summary_data is None:
            raise ValueError("json export needs summary_data")
        text = dumps_json(summary_data)
    else:
        raise ValueError(f"unknown format {fmt!r}")
    with path.open("w", newline="") as fh:
        fh.write(text)
    return path
