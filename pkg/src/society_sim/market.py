"""Market entities and construction of the initial state from a scenario."""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any, Union

import jsonschema
import numpy as np

from .assignment import AccessRegistry, Contract, RegistrationResult, ShareTable, register_contract
from .errors import InconsistentTopology, InvalidConfig

CAPACITY_TOL = 1e-9
MAX_PRICING_INTERVAL = 32  # two blocks must fit in the retained history
ASSIGNMENT_MODELS = ("chaotic", "virtual_operator", "per_operator")

ScenarioConfig = dict[str, Any]


# ---------------------------------------------------------------- pricing


@dataclass(frozen=True)
class FixedPricing:
    kind = "fixed"


@dataclass(frozen=True)
class AdaptivePricing:
    """Revenue hill-climbing with relative step ``step``, clamped to a band.

    The price moves every ``interval`` epochs, judged on the mean revenue
    of the last block against the block before. With ``step_decay < 1``
    every reversal shrinks the step by that factor, down to ``min_step``;
    the default keeps the step fixed.
    """

    step: float
    min_price: float = 0.0
    max_price: float = math.inf
    step_decay: float = 1.0
    min_step: float = 0.0
    interval: int = 1
    kind = "adaptive"


@dataclass(frozen=True)
class CollusionPricing:
    """Hold a colluded price on ``[start_epoch, end_epoch)``, else ``fallback``.

    Either ``colluded_price`` is given outright, or ``markup`` raises the
    price in force just before ``start_epoch`` by that fraction.
    """

    start_epoch: int
    end_epoch: int
    colluded_price: float | None = None
    markup: float | None = None
    fallback: PricingPolicy = FixedPricing()
    kind = "collusion"


PricingPolicy = Union[FixedPricing, AdaptivePricing, CollusionPricing]


def parse_pricing(raw: dict | None, path: str) -> PricingPolicy:
    if raw is None:
        return FixedPricing()
    kind = raw["kind"]
    if kind == "fixed":
        return FixedPricing()
    if kind == "adaptive":
        step = raw.get("step", 0.01)
        if step <= 0:
            raise InvalidConfig(f"adaptive step must be > 0, got {step}", f"{path}.step")
        lo, hi = raw.get("min_price", 0.0), raw.get("max_price", math.inf)
        if not 0 <= lo <= hi:
            raise InvalidConfig("need 0 <= min_price <= max_price", path)
        decay, floor = raw.get("step_decay", 1.0), raw.get("min_step", 0.0)
        if not 0 < decay <= 1:
            raise InvalidConfig(f"step_decay must lie in (0, 1], got {decay}", f"{path}.step_decay")
        if not 0 <= floor <= step:
            raise InvalidConfig("need 0 <= min_step <= step", f"{path}.min_step")
        interval = raw.get("interval", 1)
        if not 1 <= interval <= MAX_PRICING_INTERVAL:
            raise InvalidConfig(f"interval must lie in [1, {MAX_PRICING_INTERVAL}]", f"{path}.interval")
        return AdaptivePricing(step, lo, hi, decay, floor, interval)
    start, end = raw.get("start_epoch"), raw.get("end_epoch")
    if start is None or end is None or end < start:
        raise InvalidConfig("collusion needs start_epoch <= end_epoch", path)
    price, markup = raw.get("colluded_price"), raw.get("markup")
    if (price is None) == (markup is None):
        raise InvalidConfig("give exactly one of colluded_price or markup", path)
    if markup is not None and markup < 0:
        raise InvalidConfig("markup must be >= 0", f"{path}.markup")
    fallback = parse_pricing(raw.get("fallback"), f"{path}.fallback")
    return CollusionPricing(start, end, price, markup, fallback)


# ---------------------------------------------------------------- entities


@dataclass
class SpectrumPool:
    total_capacity: float
    society_fraction: float
    exclusive_allocations: dict[str, float]
    w_min: float = 0.01
    w_max: float = 0.99

    @property
    def society_capacity(self) -> float:
        return self.society_fraction * self.total_capacity


@dataclass
class PhysicalOperator:
    id: str
    exclusive_capacity: float
    retail_price: float
    hosting_fee: float
    pricing: PricingPolicy = FixedPricing()
    hosted_mvnos: set[str] = field(default_factory=set)
    sold_capacity: float = 0.0
    infrastructure_cost: float = 0.0

    @property
    def retail_capacity(self) -> float:
        """Licensed capacity not sold to MVNOs as dedicated slices."""
        return self.exclusive_capacity - self.sold_capacity


@dataclass
class Mvno:
    id: str
    host_operator: str
    retail_price: float
    purchased_slice: float = 0.0
    active: bool = True
    subsidiary_of: str | None = None
    fixed_cost: float = 0.0
    pricing: PricingPolicy = FixedPricing()
    slice_strategy: dict | None = None
    slice_price: float = 0.0
    loss_streak: int = 0


@dataclass(frozen=True)
class Plan:
    kind: str  # "exclusive" or "society"
    provider: str

    @classmethod
    def exclusive(cls, operator_id: str) -> Plan:
        return cls("exclusive", operator_id)

    @classmethod
    def society(cls, mvno_id: str) -> Plan:
        return cls("society", mvno_id)


@dataclass
class Consumer:
    """One consumer, as seen by the scalar API (see :class:`Population`)."""

    id: int
    demand: float
    alpha: float
    switching_cost: float
    plan: Plan
    access_code: str


@dataclass
class Population:
    """Consumer attributes stored column-wise.

    ``plan`` holds provider ids; ``extra`` maps a consumer index to the
    additional society contracts it holds beyond its plan.
    """

    ids: np.ndarray
    demand: np.ndarray
    alpha: np.ndarray
    switching_cost: np.ndarray
    plan: list[str]
    access_code: list[str]
    extra: dict[int, list[str]] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.ids)

    def consumer(self, i: int, operators) -> Consumer:
        pid = self.plan[i]
        kind = "exclusive" if pid in operators else "society"
        return Consumer(
            int(self.ids[i]), float(self.demand[i]), float(self.alpha[i]),
            float(self.switching_cost[i]), Plan(kind, pid), self.access_code[i],
        )


@dataclass
class MarketState:
    epoch: int
    pool: SpectrumPool
    operators: dict[str, PhysicalOperator]
    mvnos: dict[str, Mvno]
    consumers: Population
    registry: AccessRegistry
    rng_seed: int
    assignment_model: str
    assignment: dict[str, Any]
    market: dict[str, Any]
    share_table: ShareTable | None = None
    service_ratio: dict[str, float] = field(default_factory=dict)
    history: list = field(default_factory=list)

    def provider_ids(self) -> list[str]:
        return sorted(self.operators) + sorted(m for m in self.mvnos if self.mvnos[m].active)

    def copy(self) -> MarketState:
        """Independent copy; history entries and frozen records are shared."""
        pop = self.consumers
        return MarketState(
            epoch=self.epoch,
            pool=copy.deepcopy(self.pool),
            operators={k: replace(v, hosted_mvnos=set(v.hosted_mvnos)) for k, v in self.operators.items()},
            mvnos={k: replace(v) for k, v in self.mvnos.items()},
            consumers=Population(
                pop.ids.copy(), pop.demand.copy(), pop.alpha.copy(), pop.switching_cost.copy(),
                list(pop.plan), list(pop.access_code), {i: list(v) for i, v in pop.extra.items()},
            ),
            registry=AccessRegistry(self.registry.enabled, {k: list(v) for k, v in self.registry.contracts.items()}),
            rng_seed=self.rng_seed,
            assignment_model=self.assignment_model,
            assignment=dict(self.assignment),
            market=dict(self.market),
            share_table=self.share_table,
            service_ratio=dict(self.service_ratio),
            history=list(self.history),
        )


# ---------------------------------------------------------------- config


def _schema() -> dict:
    text = resources.files("society_sim").joinpath("data/scenario.schema.json").read_text()
    return json.loads(text)


def load_scenario(path) -> ScenarioConfig:
    """Read a scenario file. Raises ``FileNotFoundError`` or ``json.JSONDecodeError``."""
    with Path(path).open() as fh:
        return json.load(fh)


def schema_errors(config: ScenarioConfig) -> list[str]:
    validator = jsonschema.Draft202012Validator(_schema())
    errors = sorted(validator.iter_errors(config), key=lambda e: list(e.absolute_path))
    out = []
    for e in errors:
        where = ".".join(str(p) for p in e.absolute_path) or "<root>"
        out.append(f"{where}: {e.message}")
    return out


def _range(value, path: str, minimum: float = 0.0, strict: bool = False) -> tuple[float, float]:
    lo, hi = (value, value) if isinstance(value, (int, float)) else (value["lo"], value["hi"])
    bad = lo <= minimum if strict else lo < minimum
    if bad or hi < lo:
        op = ">" if strict else ">="
        raise InvalidConfig(f"need {minimum} {op} and lo <= hi, got [{lo}, {hi}]", path)
    return float(lo), float(hi)


def check_config(config: ScenarioConfig) -> None:
    """Raise :class:`InvalidConfig` on the first schema or range problem."""
    problems = schema_errors(config)
    if problems:
        raise InvalidConfig("; ".join(problems))

    sp = config["spectrum"]
    w, w_min, w_max = sp["w"], sp.get("w_min", 0.01), sp.get("w_max", 0.99)
    if not 0 < w_min <= w_max < 1:
        raise InvalidConfig(f"need 0 < w_min <= w_max < 1, got [{w_min}, {w_max}]", "spectrum.w_min")
    if not 0 < w < 1:
        raise InvalidConfig(f"w must lie in (0, 1), got {w}", "spectrum.w")
    if not w_min <= w <= w_max:
        raise InvalidConfig(f"w must lie in [{w_min}, {w_max}], got {w}", "spectrum.w")

    op_ids = [o["id"] for o in config["operators"]]
    mvno_ids = [m["id"] for m in config["mvnos"]]
    if len(set(op_ids + mvno_ids)) != len(op_ids) + len(mvno_ids):
        raise InvalidConfig("provider ids must be unique across operators and MVNOs", "operators")
    for k, o in enumerate(config["operators"]):
        if o["retail_price"] < 0:
            raise InvalidConfig("must be >= 0", f"operators.{k}.retail_price")
        if o.get("hosting_fee", 0) < 0:
            raise InvalidConfig("must be >= 0", f"operators.{k}.hosting_fee")
        parse_pricing(o.get("pricing"), f"operators.{k}.pricing")
    subsidiaries: set[str] = set()
    for k, m in enumerate(config["mvnos"]):
        if m["host"] not in op_ids:
            raise InconsistentTopology(f"MVNO {m['id']} references unknown host {m['host']!r}", f"mvnos.{k}.host")
        owner = m.get("subsidiary_of")
        if owner is not None:
            if owner not in op_ids:
                raise InconsistentTopology(f"unknown owner {owner!r}", f"mvnos.{k}.subsidiary_of")
            if owner in subsidiaries:
                raise InvalidConfig(f"operator {owner} already owns a subsidiary", f"mvnos.{k}.subsidiary_of")
            subsidiaries.add(owner)
        if m["retail_price"] < 0:
            raise InvalidConfig("must be >= 0", f"mvnos.{k}.retail_price")
        if m.get("purchased_slice", 0) < 0:
            raise InvalidConfig("must be >= 0", f"mvnos.{k}.purchased_slice")
        parse_pricing(m.get("pricing"), f"mvnos.{k}.pricing")
    if not any(m.get("active", True) for m in config["mvnos"]):
        raise InvalidConfig("at least one active MVNO is required (society access is universal)", "mvnos")

    c = config["consumers"]
    lo, hi = c["alpha"]["lo"], c["alpha"]["hi"]
    if not 0 <= lo <= hi:
        raise InvalidConfig(f"need 0 <= lo <= hi, got [{lo}, {hi}]", "consumers.alpha")
    _range(c["demand"], "consumers.demand", strict=True)
    _range(c["switching_cost"], "consumers.switching_cost")
    for k, dup in enumerate(c.get("duplicates", [])):
        if dup["consumer"] >= c["count"]:
            raise InvalidConfig("consumer index out of range", f"consumers.duplicates.{k}.consumer")
        for mid in dup["contracts"]:
            if mid not in mvno_ids:
                raise InconsistentTopology(f"unknown MVNO {mid!r}", f"consumers.duplicates.{k}.contracts")


def hosting_fee_default(config: ScenarioConfig) -> float:
    prices = [o["retail_price"] for o in config["operators"]]
    return 0.05 * sum(prices) / len(prices)


def _sample(rng: np.random.Generator, value, n: int) -> np.ndarray:
    if isinstance(value, (int, float)):
        return np.full(n, float(value))
    return rng.uniform(value["lo"], value["hi"], n)


def build_market(config: ScenarioConfig, seed: int | None = None) -> MarketState:
    """Validate ``config`` and build the epoch-0 market state.

    The consumer population is drawn from a generator seeded with ``seed``
    (default: ``config["seed"]``), so equal inputs give equal states.
    """
    check_config(config)
    seed = config["seed"] if seed is None else seed
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))

    sp = config["spectrum"]
    total, w = float(sp["total"]), float(sp["w"])
    weights = {o["id"]: float(o.get("exclusive_weight", 1.0)) for o in config["operators"]}
    weight_sum = sum(weights.values())
    licensed = total - w * total
    alloc = {oid: licensed * wt / weight_sum for oid, wt in weights.items()}
    pool = SpectrumPool(total, w, alloc, sp.get("w_min", 0.01), sp.get("w_max", 0.99))

    fee = hosting_fee_default(config)
    operators = {
        o["id"]: PhysicalOperator(
            id=o["id"],
            exclusive_capacity=alloc[o["id"]],
            retail_price=float(o["retail_price"]),
            hosting_fee=float(o.get("hosting_fee", fee)),
            pricing=parse_pricing(o.get("pricing"), "operators"),
            infrastructure_cost=float(o.get("infrastructure_cost", 0.0)),
        )
        for o in config["operators"]
    }
    for k, o in enumerate(config["operators"]):
        policy = operators[o["id"]].pricing
        if isinstance(policy, CollusionPricing) and policy.colluded_price is not None:
            if policy.colluded_price < o["retail_price"]:
                raise InvalidConfig("colluded_price below the pre-collusion price", f"operators.{k}.pricing")

    mvnos = {}
    for m in config["mvnos"]:
        mvnos[m["id"]] = Mvno(
            id=m["id"],
            host_operator=m["host"],
            retail_price=float(m["retail_price"]),
            active=bool(m.get("active", True)),
            subsidiary_of=m.get("subsidiary_of"),
            fixed_cost=float(m.get("fixed_cost", 0.0)),
            pricing=parse_pricing(m.get("pricing"), "mvnos"),
            slice_strategy=m.get("slice_strategy"),
        )
        operators[m["host"]].hosted_mvnos.add(m["id"])
    for k, m in enumerate(config["mvnos"]):
        amount = float(m.get("purchased_slice", 0.0))
        host = operators[m["host"]]
        if amount > host.retail_capacity + CAPACITY_TOL:
            raise InvalidConfig(
                f"slice {amount} exceeds host's uncommitted capacity {host.retail_capacity}",
                f"mvnos.{k}.purchased_slice",
            )
        host.sold_capacity += amount
        mvnos[m["id"]].purchased_slice = amount
        mvnos[m["id"]].slice_price = float(config.get("market", {}).get("slice_unit_price", 0.0))

    c = config["consumers"]
    n = int(c["count"])
    lo, hi = c["alpha"]["lo"], c["alpha"]["hi"]
    if c["alpha"].get("dist", "uniform") == "triangular":
        alpha = rng.triangular(lo, (lo + hi) / 2, hi, n) if hi > lo else np.full(n, float(lo))
    else:
        alpha = rng.uniform(lo, hi, n)
    demand = _sample(rng, c["demand"], n)
    switching = _sample(rng, c["switching_cost"], n)
    ids = np.arange(n)
    codes = [f"AC-{seed:x}-{i:06d}" for i in range(n)]
    plans = _initial_plans(alpha, c.get("initial_society_share", w), operators, mvnos)

    registry = AccessRegistry(enabled=bool(config["registry_enabled"]))
    for i in range(n):
        register_contract(registry, codes[i], Contract(i, plans[i]))
    extra: dict[int, list[str]] = {}
    for dup in c.get("duplicates", []):
        i = dup["consumer"]
        first, *rest = dup["contracts"]
        registry.terminate(codes[i], Contract(i, plans[i]))
        plans[i] = first
        register_contract(registry, codes[i], Contract(i, first))
        for mid in rest:
            if register_contract(registry, codes[i], Contract(i, mid)) is RegistrationResult.ACCEPTED:
                extra.setdefault(i, []).append(mid)

    population = Population(ids, demand, alpha, switching, plans, codes, extra)
    assignment = {
        "adjustment_period": 30,
        "count_exclusive_users": False,
        "continuity_penalty": 1.0,
        "chaotic_efficiency": "inverse_overload",
        **config.get("assignment", {}),
    }
    market = {
        "entry_threshold": 1e308,
        "entry_window": 10,
        "exit_loss_epochs": 6,
        "slice_unit_price": 0.0,
        **config.get("market", {}),
        "revision_rate": float(c.get("revision_rate", 1.0)),
        "quality_smoothing": float(c.get("quality_smoothing", 1.0)),
    }
    return MarketState(
        epoch=0,
        pool=pool,
        operators=operators,
        mvnos=mvnos,
        consumers=population,
        registry=registry,
        rng_seed=seed,
        assignment_model=config["assignment_model"],
        assignment=assignment,
        market=market,
    )


def _initial_plans(alpha, society_share, operators, mvnos) -> list[str]:
    """Lowest-alpha consumers start on society plans, the rest on exclusive ones.

    Both groups are dealt round-robin over the providers in id order.
    """
    n = len(alpha)
    n_society = int(round(society_share * n))
    order = np.argsort(alpha, kind="stable")
    active = sorted(m for m in mvnos if mvnos[m].active)
    ops = sorted(operators)
    plans = [""] * n
    for rank, i in enumerate(order):
        if rank < n_society:
            plans[i] = active[rank % len(active)]
        else:
            plans[i] = ops[(rank - n_society) % len(ops)]
    return plans


# ---------------------------------------------------------------- validation


@dataclass(frozen=True)
class Violation:
    kind: str
    entity: str
    detail: str

    def __str__(self) -> str:
        return f"{self.kind} [{self.entity}]: {self.detail}"


def validate(state: MarketState) -> list[Violation]:
    """Check every state invariant; an empty list means the state is sound."""
    out: list[Violation] = []
    pool = state.pool
    if not 0 < pool.society_fraction < 1 or not pool.w_min <= pool.society_fraction <= pool.w_max:
        out.append(Violation("SocietyFractionRange", "pool", f"w={pool.society_fraction}"))
    total = pool.society_capacity + math.fsum(pool.exclusive_allocations.values())
    if abs(total - pool.total_capacity) > CAPACITY_TOL:
        out.append(Violation("CapacityMismatch", "pool", f"society + exclusive = {total} != {pool.total_capacity}"))

    for op in state.operators.values():
        if op.retail_price < 0:
            out.append(Violation("NegativePrice", op.id, str(op.retail_price)))
        if op.hosting_fee < 0:
            out.append(Violation("NegativeHostingFee", op.id, str(op.hosting_fee)))
        if op.sold_capacity > op.exclusive_capacity + CAPACITY_TOL:
            out.append(Violation("OversoldCapacity", op.id, f"{op.sold_capacity} > {op.exclusive_capacity}"))
        if abs(pool.exclusive_allocations.get(op.id, math.nan) - op.exclusive_capacity) > CAPACITY_TOL:
            out.append(Violation("CapacityMismatch", op.id, "operator capacity differs from pool allocation"))
        if op.id in state.mvnos:
            out.append(Violation("OperatorAsMvno", op.id, "operator id reused by an MVNO"))

    for m in state.mvnos.values():
        if m.host_operator not in state.operators:
            out.append(Violation("InconsistentTopology", m.id, f"unknown host {m.host_operator}"))
        if m.retail_price < 0:
            out.append(Violation("NegativePrice", m.id, str(m.retail_price)))

    active = {m for m, v in state.mvnos.items() if v.active}
    pop = state.consumers
    for i, pid in enumerate(pop.plan):
        if pid not in state.operators and pid not in active:
            out.append(Violation("DanglingPlan", f"consumer {pop.ids[i]}", f"plan references {pid}"))
    if np.any(pop.demand <= 0) or np.any(pop.alpha < 0) or np.any(pop.switching_cost < 0):
        out.append(Violation("ConsumerRange", "consumers", "demand > 0, alpha >= 0, switching_cost >= 0"))

    if state.registry.enabled:
        for code, contracts in state.registry.contracts.items():
            if len(contracts) > 1:
                out.append(Violation("DuplicateIdentity", code, f"{len(contracts)} active contracts"))
        seen: dict[str, int] = {}
        for code in pop.access_code:
            seen[code] = seen.get(code, 0) + 1
        for code, count in seen.items():
            if count > 1:
                out.append(Violation("DuplicateIdentity", code, f"code shared by {count} consumers"))
    return out
