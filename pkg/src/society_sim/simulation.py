"""Running a scenario end to end."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass
from typing import Any

import numpy as np

from .dynamics import step_epoch
from .market import MarketState, ScenarioConfig, build_market
from .metrics import EpochMetrics, metrics_csv, summary

log = logging.getLogger(__name__)


@dataclass
class RunResult:
    config: ScenarioConfig
    seed: int
    metrics: list[EpochMetrics]
    initial: MarketState
    final: MarketState

    @property
    def operators(self) -> list[str]:
        return sorted(self.final.operators)

    @property
    def mvnos(self) -> list[str]:
        return sorted(self.final.mvnos)

    @property
    def share_ops(self) -> list[str]:
        return self.operators if self.final.assignment_model == "per_operator" else []

    def csv(self) -> str:
        return metrics_csv(self.metrics, self.operators, self.mvnos, self.share_ops)

    def summary(self) -> dict[str, Any]:
        m = self.config.get("metrics", {})
        return summary(
            self.metrics,
            scenario=self.config.get("name", "scenario"),
            seed=self.seed,
            operators=self.operators,
            mvnos=self.mvnos,
            equilibrium_window=m.get("equilibrium_window", 30),
            equilibrium_tol=m.get("equilibrium_tol", 0.01),
            equilibrium_from=m.get("equilibrium_from", 0),
            extra={"w": self.final.pool.society_fraction, "assignment_model": self.final.assignment_model},
        )


def run(config: ScenarioConfig, seed: int | None = None, epochs: int | None = None) -> RunResult:
    """Build the market from ``config`` and step it ``epochs`` times.

    ``seed`` and ``epochs`` override the scenario's own values. The
    population and the per-epoch draws use separate streams derived from
    ``seed``.
    """
    seed = config["seed"] if seed is None else int(seed)
    epochs = config["epochs"] if epochs is None else int(epochs)
    state = build_market(config, seed)
    initial = state.copy()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    out = []
    for _ in range(epochs):
        state, m = step_epoch(state, rng)
        out.append(m)
        log.debug("epoch %d prices=%s society_share=%.4f", m.epoch, m.prices, m.society_share)
    return RunResult(copy.deepcopy(config), seed, out, initial, state)
