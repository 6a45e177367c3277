"""Consumer choice, pricing, MVNO churn and the epoch step."""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from .assignment import (
    EFFICIENCY,
    Contract,
    ShareTable,
    chaotic_allocate,
    per_operator_shares,
    register_contract,
    virtual_operator_allocate,
)
from .errors import InsufficientCapacity, NoSocietyOffer
from .market import (
    CAPACITY_TOL,
    AdaptivePricing,
    CollusionPricing,
    Consumer,
    MarketState,
    Mvno,
    PhysicalOperator,
    Plan,
    PricingPolicy,
)
from .metrics import EpochMetrics, LicensedAudit, jain_index, percentiles
from .scheduler import gps_allocate_array, priority_conserve

HISTORY_KEEP = 64


# ---------------------------------------------------------------- consumers


def consumer_utility(q: float, p: float, alpha: float, demand: float) -> float:
    """``alpha * ln(1 + q / demand) - p``: concave in delivered quality."""
    return alpha * math.log1p(q / demand) - p


@dataclass(frozen=True)
class Offer:
    """A provider's price and the quality it delivered per unit of demand.

    ``quality`` is the service ratio (delivered / demanded) of the
    provider's contracts last epoch; a consumer expects ``quality * demand``.
    """

    provider: str
    price: float
    quality: float


def _best(consumer: Consumer, offers: Sequence[Offer]) -> tuple[float, Offer | None]:
    best_u, best = -math.inf, None
    for offer in sorted(offers, key=lambda o: o.provider):
        u = consumer_utility(
            offer.quality * consumer.demand, offer.price * consumer.demand,
            consumer.alpha, consumer.demand,
        )
        if offer.provider != consumer.plan.provider:
            u -= consumer.switching_cost
        if u > best_u:
            best_u, best = u, offer
    return best_u, best


def choose_plan(consumer: Consumer, exclusive_offers: Sequence[Offer], society_offers: Sequence[Offer]) -> Plan:
    """Pick a plan: exclusive only when it beats the best society offer.

    Every offer other than the current plan carries the consumer's
    switching cost. Ties go to the society side, then to the lowest
    provider id.
    """
    if not society_offers:
        raise NoSocietyOffer("society access must always be offered")
    u_s, best_s = _best(consumer, society_offers)
    u_e, best_e = _best(consumer, exclusive_offers)
    if best_e is not None and u_e - u_s > 0:
        return Plan.exclusive(best_e.provider)
    return Plan.society(best_s.provider)


def choose_plans(
    alpha: np.ndarray,
    demand: np.ndarray,
    switching_cost: np.ndarray,
    current: Sequence[str | None],
    exclusive_offers: Sequence[Offer],
    society_offers: Sequence[Offer],
) -> list[str]:
    """Vectorised :func:`choose_plan` over a whole population."""
    if not society_offers:
        raise NoSocietyOffer("society access must always be offered")
    exc = sorted(exclusive_offers, key=lambda o: o.provider)
    soc = sorted(society_offers, key=lambda o: o.provider)
    cur = np.asarray([c if c is not None else "" for c in current], dtype=object)

    def best(offers):
        if not offers:
            return np.full(len(alpha), -np.inf), np.zeros(len(alpha), dtype=int)
        ratio = np.array([o.quality for o in offers])
        price = np.array([o.price for o in offers])
        u = alpha[:, None] * np.log1p(ratio)[None, :] - price[None, :] * demand[:, None]
        ids = np.array([o.provider for o in offers], dtype=object)
        u = u - switching_cost[:, None] * (ids[None, :] != cur[:, None])
        return u.max(axis=1), u.argmax(axis=1)

    u_e, k_e = best(exc)
    u_s, k_s = best(soc)
    out = []
    for i in range(len(alpha)):
        if exc and u_e[i] - u_s[i] > 0:
            out.append(exc[k_e[i]].provider)
        else:
            out.append(soc[k_s[i]].provider)
    return out


# ---------------------------------------------------------------- pricing


def _sign(x: float) -> int:
    return (x > 0) - (x < 0)


def _price_under(policy: PricingPolicy, provider_id: str, price: float, history, epoch: int) -> float:
    if isinstance(policy, CollusionPricing):
        if policy.start_epoch <= epoch < policy.end_epoch:
            if policy.colluded_price is not None:
                return policy.colluded_price
            if epoch == policy.start_epoch:
                return price * (1.0 + policy.markup)
            return price
        return _price_under(policy.fallback, provider_id, price, history, epoch)
    if isinstance(policy, AdaptivePricing):
        return _adaptive(policy, provider_id, price, history)
    return price


def _last_move(prices: Sequence[float]) -> int | None:
    for j in range(len(prices) - 1, 0, -1):
        if prices[j] != prices[j - 1]:
            return j
    return None


def _adaptive(policy: AdaptivePricing, provider_id: str, price: float, history) -> float:
    if len(history) < 2:
        return price
    k = policy.interval
    prices = [h.prices[provider_id] for h in history]
    j = _last_move(prices)
    if j is None:
        # no move on record: probe upwards
        return min(policy.max_price, max(policy.min_price, price * (1.0 + policy.step)))
    if len(history) - j < k:
        return price
    # revenue since the last move against the revenue just before it
    after = history[-k:]
    before = history[max(0, j - k): j]
    d_rev = (
        math.fsum(h.objective[provider_id] for h in after) / len(after)
        - math.fsum(h.objective[provider_id] for h in before) / len(before)
    )
    d_price = prices[j] - prices[j - 1]
    keep = d_rev > 0
    step = policy.step
    if policy.step_decay < 1:
        # reversals anneal the step; a continuing move keeps its size
        step = min(policy.step, abs(d_price) / prices[j - 1])
        if not keep:
            step = max(policy.min_step, step * policy.step_decay)
    factor = 1.0 + step * (1 if keep else -1) * _sign(d_price)
    return min(policy.max_price, max(policy.min_price, price * factor))


def apply_pricing(provider: PhysicalOperator | Mvno, history: Sequence[EpochMetrics], epoch: int | None = None) -> float:
    """Retail price ``provider`` charges in ``epoch`` under its policy.

    ``history`` ends with the latest settled epoch; ``epoch`` defaults to the
    one after it. Adaptive pricing repeats the last price move if it raised
    the provider's revenue and reverses it otherwise, probing upwards after
    a flat move.
    """
    if epoch is None:
        epoch = history[-1].epoch + 1 if history else 0
    return _price_under(provider.pricing, provider.id, provider.retail_price, history, epoch)


# ---------------------------------------------------------------- slices


def _purchase_slice(state: MarketState, mvno_id: str, amount: float, unit_price: float) -> None:
    if amount < 0:
        raise ValueError("slice amount must be non-negative")
    mvno = state.mvnos[mvno_id]
    host = state.operators[mvno.host_operator]
    if amount > host.retail_capacity + CAPACITY_TOL:
        raise InsufficientCapacity(
            f"{host.id} has {host.retail_capacity} uncommitted, {mvno_id} asked for {amount}"
        )
    if amount == 0:
        return
    amount = min(amount, host.retail_capacity)
    # blended unit price keeps the recurring payment additive across purchases
    paid = mvno.purchased_slice * mvno.slice_price + amount * unit_price
    host.sold_capacity += amount
    mvno.purchased_slice += amount
    mvno.slice_price = paid / mvno.purchased_slice


def purchase_slice(state: MarketState, mvno_id: str, amount: float, unit_price: float | None = None) -> MarketState:
    """Return a copy of ``state`` in which ``mvno_id`` bought ``amount`` of licensed capacity.

    The host's sellable capacity shrinks by ``amount`` and the MVNO pays
    ``amount * unit_price`` every epoch from now on.
    """
    new = state.copy()
    price = new.market["slice_unit_price"] if unit_price is None else unit_price
    _purchase_slice(new, mvno_id, amount, price)
    return new


# ---------------------------------------------------------------- allocation


@dataclass
class Allocation:
    """Outcome of one epoch's capacity split, per contract."""

    consumer: np.ndarray
    provider: list[str]
    demand: np.ndarray
    delivered: np.ndarray
    effective: np.ndarray
    quality: np.ndarray  # per consumer, index-aligned with the population
    donated: float
    unallocated: float
    society_load: float
    exclusive_load: float
    licensed: dict[str, LicensedAudit]
    ratio: dict[str, float]
    society_mask: np.ndarray = field(repr=False, default=None)


def _contracts(state: MarketState):
    pop = state.consumers
    consumer = list(range(len(pop)))
    provider = list(pop.plan)
    for i in sorted(pop.extra):
        for mid in pop.extra[i]:
            if state.mvnos[mid].active:
                consumer.append(i)
                provider.append(mid)
    consumer = np.asarray(consumer, dtype=int)
    demand = pop.demand[consumer] if len(consumer) else np.zeros(0)
    return consumer, provider, demand


def _groups(provider: Sequence[str]) -> dict[str, np.ndarray]:
    groups: dict[str, list[int]] = {}
    for k, p in enumerate(provider):
        groups.setdefault(p, []).append(k)
    return {p: np.asarray(v, dtype=int) for p, v in groups.items()}


def _users_per_operator(state: MarketState, provider: Sequence[str]) -> dict[str, float]:
    users = {o: 0.0 for o in state.operators}
    for p in provider:
        if p in state.mvnos:
            users[state.mvnos[p].host_operator] += 1
        elif state.assignment["count_exclusive_users"]:
            users[p] += 1
    return users


def refresh_share_table(state: MarketState) -> None:
    """Recompute the per-operator share table on period boundaries only."""
    table = state.share_table
    period = int(state.assignment["adjustment_period"])
    if table is not None and not (state.epoch % period == 0 and state.epoch != table.valid_from_epoch):
        return
    _, provider, _ = _contracts(state)
    users = _users_per_operator(state, provider)
    state.share_table = per_operator_shares(state.pool.society_capacity, users, state.epoch, period)


def allocate(state: MarketState) -> Allocation:
    """Split all capacity among the current contracts (phases 2 to 4)."""
    consumer, provider, demand = _contracts(state)
    n_contracts = len(provider)
    groups = _groups(provider)
    delivered = np.zeros(n_contracts)
    active = sorted(m for m, v in state.mvnos.items() if v.active)
    society_mask = np.array([p in state.mvnos for p in provider], dtype=bool)
    society_demand = math.fsum(demand[society_mask])

    donations: list[float] = []
    licensed: dict[str, LicensedAudit] = {}
    for oid in sorted(state.operators):
        op = state.operators[oid]
        idx = groups.get(oid, np.zeros(0, dtype=int))
        want = math.fsum(demand[idx])
        granted, donated = priority_conserve(op.retail_capacity, want, society_demand)
        delivered[idx] = gps_allocate_array(granted, np.ones(len(idx)), demand[idx])
        donations.append(donated)
        licensed[oid] = LicensedAudit(op.retail_capacity, want, granted, donated, math.fsum(delivered[idx]))

    residual = demand.copy()
    slice_total = 0.0
    for mid in active:
        s = state.mvnos[mid].purchased_slice
        if s <= 0:
            continue
        slice_total += s
        idx = groups.get(mid, np.zeros(0, dtype=int))
        granted, donated = priority_conserve(s, math.fsum(demand[idx]), 0.0)
        got = gps_allocate_array(granted, np.ones(len(idx)), demand[idx])
        delivered[idx] += got
        residual[idx] = np.maximum(demand[idx] - got, 0.0)
        donations.append(donated)
    from_slices = delivered.copy()

    soc_cap = state.pool.society_capacity
    model = state.assignment_model
    leftovers: list[float] = []
    soc_idx = np.flatnonzero(society_mask)

    def serve_mvnos(capacity: float, mvno_ids: Sequence[str]) -> float:
        counts = {m: float(len(groups.get(m, ()))) for m in mvno_ids}
        wants = {m: math.fsum(residual[groups[m]]) if m in groups else 0.0 for m in mvno_ids}
        per_mvno = virtual_operator_allocate(capacity, counts, wants)
        for m, cap in per_mvno.items():
            if m not in groups:
                continue
            idx = groups[m]
            got = gps_allocate_array(cap, np.ones(len(idx)), residual[idx])
            delivered[idx] += got
            residual[idx] -= got
            np.maximum(residual, 0.0, out=residual)
        return capacity - math.fsum(per_mvno.values())

    if model == "per_operator":
        table = state.share_table
        if table is None:
            refresh_share_table(state)
            table = state.share_table
        # table.unallocated stays idle until the next recompute
        for oid in sorted(state.operators):
            hosted = [m for m in active if state.mvnos[m].host_operator == oid]
            share = table.shares.get(oid, 0.0)
            leftovers.append(serve_mvnos(share, hosted) if hosted else share)
    elif model == "virtual_operator":
        leftovers.append(serve_mvnos(soc_cap, active))
    else:
        usable = soc_cap + math.fsum(donations)
        eff = EFFICIENCY[state.assignment["chaotic_efficiency"]]
        got = chaotic_allocate(usable, residual[soc_idx], eff)
        delivered[soc_idx] += got
        residual[soc_idx] -= got

    spilled = np.zeros(n_contracts, dtype=bool)
    if model != "chaotic":
        pool = math.fsum(donations + leftovers)
        if pool > 0 and len(soc_idx):
            got = gps_allocate_array(pool, np.ones(len(soc_idx)), np.maximum(residual[soc_idx], 0.0))
            delivered[soc_idx] += got
            spilled[soc_idx] = got > 0

    effective = delivered.copy()
    if model == "virtual_operator":
        effective[spilled] *= float(state.assignment["continuity_penalty"])

    donated = math.fsum(donations)
    from_pool = math.fsum(delivered[soc_idx] - from_slices[soc_idx])
    unallocated = max(0.0, soc_cap + donated - from_pool)

    quality = np.zeros(len(state.consumers))
    np.add.at(quality, consumer, effective)

    ratio: dict[str, float] = {}
    mean_d = float(np.mean(state.consumers.demand)) if len(state.consumers) else 1.0
    soc_ratio = (
        math.fsum(effective[soc_idx]) / math.fsum(demand[soc_idx]) if len(soc_idx) else None
    )
    for oid, op in state.operators.items():
        if oid in groups:
            idx = groups[oid]
            ratio[oid] = math.fsum(effective[idx]) / math.fsum(demand[idx])
        else:
            ratio[oid] = min(1.0, op.retail_capacity / mean_d) if mean_d > 0 else 1.0
    for mid in active:
        if mid in groups:
            idx = groups[mid]
            ratio[mid] = math.fsum(effective[idx]) / math.fsum(demand[idx])
            continue
        host = state.mvnos[mid].host_operator
        peers = [k for k in soc_idx if state.mvnos[provider[k]].host_operator == host]
        if model == "per_operator" and peers:
            ratio[mid] = math.fsum(effective[peers]) / math.fsum(demand[peers])
        elif soc_ratio is not None:
            ratio[mid] = soc_ratio
        else:
            ratio[mid] = min(1.0, soc_cap / mean_d) if mean_d > 0 else 1.0

    exc_cap = math.fsum(op.retail_capacity for op in state.operators.values())
    exc_demand = math.fsum(demand[~society_mask])
    soc_usable = soc_cap + donated + slice_total
    return Allocation(
        consumer=consumer,
        provider=list(provider),
        demand=demand,
        delivered=delivered,
        effective=effective,
        quality=quality,
        donated=donated,
        unallocated=unallocated,
        society_load=society_demand / soc_usable if soc_usable > 0 else math.inf,
        exclusive_load=exc_demand / exc_cap if exc_cap > 0 else math.inf,
        licensed=licensed,
        ratio=ratio,
        society_mask=society_mask,
    )


# ---------------------------------------------------------------- ledger


@dataclass(frozen=True)
class Transfer:
    payer: str
    payee: str
    amount: float
    kind: str  # retail, hosting, slice, cost


@dataclass
class EpochLedger:
    transfers: list[Transfer] = field(default_factory=list)

    def pay(self, payer: str, payee: str, amount: float, kind: str) -> None:
        if amount:
            self.transfers.append(Transfer(payer, payee, float(amount), kind))

    def received(self, who: str, kind: str | None = None) -> float:
        return math.fsum(t.amount for t in self.transfers if t.payee == who and kind in (None, t.kind))

    def paid(self, who: str, kind: str | None = None) -> float:
        return math.fsum(t.amount for t in self.transfers if t.payer == who and kind in (None, t.kind))

    def imbalance(self) -> float:
        """Total outflow minus total inflow over all parties (zero when conserved)."""
        parties = {t.payer for t in self.transfers} | {t.payee for t in self.transfers}
        out = math.fsum(self.paid(p) for p in parties)
        inflow = math.fsum(self.received(p) for p in parties)
        return out - inflow

    def consumer_payments(self) -> float:
        return math.fsum(t.amount for t in self.transfers if t.kind == "retail")


def settle(state: MarketState, consumer: np.ndarray, provider: Sequence[str], demand: np.ndarray) -> EpochLedger:
    """Money flows for the contracts served this epoch."""
    ledger = EpochLedger()
    bills: dict[str, list[float]] = {}
    counts: dict[str, int] = {}
    for k, p in enumerate(provider):
        price = state.operators[p].retail_price if p in state.operators else state.mvnos[p].retail_price
        bills.setdefault(p, []).append(price * demand[k])
        counts[p] = counts.get(p, 0) + 1
    for p in sorted(bills):
        ledger.pay("consumers", p, math.fsum(bills[p]), "retail")
    for mid in sorted(state.mvnos):
        m = state.mvnos[mid]
        if not m.active:
            continue
        host = state.operators[m.host_operator]
        ledger.pay(mid, host.id, host.hosting_fee * counts.get(mid, 0), "hosting")
        ledger.pay(mid, host.id, m.purchased_slice * m.slice_price, "slice")
        ledger.pay(mid, "costs", m.fixed_cost, "cost")
    for oid in sorted(state.operators):
        ledger.pay(oid, "costs", state.operators[oid].infrastructure_cost, "cost")
    return ledger


def provider_revenue(ledger: EpochLedger, pid: str, is_operator: bool) -> float:
    if is_operator:
        return ledger.received(pid)
    return ledger.received(pid, "retail")


def mvno_margin(ledger: EpochLedger, mid: str) -> float:
    return ledger.received(mid, "retail") - ledger.paid(mid)


# ---------------------------------------------------------------- churn


def _offers(state: MarketState, ratio: dict[str, float]) -> tuple[list[Offer], list[Offer]]:
    exc = [Offer(o, state.operators[o].retail_price, ratio.get(o, 1.0)) for o in sorted(state.operators)]
    soc = [
        Offer(m, state.mvnos[m].retail_price, ratio.get(m, 1.0))
        for m in sorted(state.mvnos) if state.mvnos[m].active
    ]
    return exc, soc


def _switch(state: MarketState, i: int, new: str) -> None:
    pop = state.consumers
    old = pop.plan[i]
    if old == new:
        return
    code = pop.access_code[i]
    state.registry.terminate(code, Contract(i, old))
    register_contract(state.registry, code, Contract(i, new))
    pop.plan[i] = new


def _rehome(state: MarketState, who: Sequence[int], ratio: dict[str, float]) -> None:
    if not len(who):
        return
    exc, soc = _offers(state, ratio)
    pop = state.consumers
    idx = np.asarray(who, dtype=int)
    picks = choose_plans(
        pop.alpha[idx], pop.demand[idx], pop.switching_cost[idx], [None] * len(idx), exc, soc
    )
    for i, p in zip(idx, picks):
        _switch(state, int(i), p)


def _deactivate(state: MarketState, mid: str, ratio: dict[str, float]) -> None:
    pop = state.consumers
    state.mvnos[mid].active = False
    for i in list(pop.extra):
        if mid in pop.extra[i]:
            pop.extra[i].remove(mid)
            state.registry.terminate(pop.access_code[i], Contract(i, mid))
            if not pop.extra[i]:
                del pop.extra[i]
    _rehome(state, [i for i, p in enumerate(pop.plan) if p == mid], ratio)


def mvno_entry_exit(state: MarketState, thresholds: dict | None = None, ratio: dict[str, float] | None = None) -> MarketState:
    """Apply MVNO exits and at most one entry, using ``state.history``.

    An active MVNO leaves after ``exit_loss_epochs`` consecutive loss epochs
    (the last active one never leaves, so society access stays available);
    its subscribers pick new plans straight away. One inactive MVNO enters
    when the incumbents' mean margin over the last ``entry_window`` epochs
    exceeds ``entry_threshold``.
    """
    new = state.copy()
    _entry_exit(new, {**new.market, **(thresholds or {})}, ratio if ratio is not None else new.service_ratio)
    return new


def _entry_exit(state: MarketState, params: dict, ratio: dict[str, float]) -> None:
    history = state.history
    if history:
        last = history[-1]
        for mid in sorted(state.mvnos):
            m = state.mvnos[mid]
            if m.active:
                m.loss_streak = m.loss_streak + 1 if last.mvno_margin.get(mid, 0.0) < 0 else 0
    limit = int(params["exit_loss_epochs"])
    for mid in sorted(state.mvnos):
        m = state.mvnos[mid]
        n_active = sum(v.active for v in state.mvnos.values())
        if m.active and m.loss_streak >= limit and n_active > 1:
            _deactivate(state, mid, ratio)
            m.loss_streak = 0

    window = int(params["entry_window"])
    if len(history) < window:
        return
    means = []
    for h in history[-window:]:
        margins = [h.mvno_margin[k] for k in sorted(h.mvno_margin) if h.mvno_active.get(k)]
        if margins:
            means.append(math.fsum(margins) / len(margins))
    if not means:
        return
    if math.fsum(means) / len(means) > params["entry_threshold"]:
        waiting = [k for k in sorted(state.mvnos) if not state.mvnos[k].active]
        if waiting:
            entrant = state.mvnos[waiting[0]]
            entrant.active = True
            entrant.loss_streak = 0


def _slice_strategies(state: MarketState, ratio: dict[str, float], margins: dict[str, float]) -> None:
    for mid in sorted(state.mvnos):
        m = state.mvnos[mid]
        plan = m.slice_strategy
        if not m.active or not plan:
            continue
        host = state.operators[m.host_operator]
        step = plan["step"]
        if (
            ratio.get(mid, 1.0) < plan["target_quality"]
            and margins.get(mid, 0.0) > 0
            and m.purchased_slice + step <= plan["max_slice"] + CAPACITY_TOL
            and step <= host.retail_capacity
        ):
            _purchase_slice(state, mid, step, state.market["slice_unit_price"])


# ---------------------------------------------------------------- epoch


def step_epoch(state: MarketState, rng: np.random.Generator) -> tuple[MarketState, EpochMetrics]:
    """Advance one epoch; returns the next state and this epoch's metrics.

    Works on a copy, so the input state is untouched if anything raises.
    Consumers decide on last-known service ratios and current prices; the
    plans they pick take effect next epoch.
    """
    new = state.copy()
    t = new.epoch
    pop = new.consumers
    n = len(pop)

    if new.assignment_model == "per_operator":
        refresh_share_table(new)
    alloc = allocate(new)
    ledger = settle(new, alloc.consumer, alloc.provider, alloc.demand)
    if abs(ledger.imbalance()) > 1e-9:
        raise RuntimeError(f"ledger out of balance by {ledger.imbalance()}")

    served_plan = list(pop.plan)
    prices = {o: op.retail_price for o, op in new.operators.items()}
    prices.update({m: v.retail_price for m, v in new.mvnos.items()})
    op_revenue = {o: provider_revenue(ledger, o, True) for o in new.operators}
    mvno_revenue = {m: provider_revenue(ledger, m, False) for m in new.mvnos}
    margins = {m: mvno_margin(ledger, m) for m in new.mvnos}
    active_before = {m: v.active for m, v in new.mvnos.items()}

    # quoted quality: exponential smoothing of realised service ratios
    lam = float(new.market.get("quality_smoothing", 1.0))
    quoted = {
        p: r if p not in new.service_ratio else new.service_ratio[p] + lam * (r - new.service_ratio[p])
        for p, r in alloc.ratio.items()
    }

    # choices, synchronous, keyed by consumer id so ordering cannot matter
    draws = rng.random(n)
    if n:
        rate = float(new.market.get("revision_rate", 1.0))
        revising = draws[pop.ids] < rate
        idx = np.flatnonzero(revising)
        exc, soc = _offers(new, quoted)
        picks = choose_plans(
            pop.alpha[idx], pop.demand[idx], pop.switching_cost[idx],
            [pop.plan[i] for i in idx], exc, soc,
        )
        for i, p in zip(idx, picks):
            _switch(new, int(i), p)

    # revenue the current prices earn on the post-choice subscriber base
    _, next_provider, next_demand = _contracts(new)
    next_ledger = settle(new, np.zeros(len(next_provider), dtype=int), next_provider, next_demand)
    objective = {o: next_ledger.received(o) for o in new.operators}
    objective.update({m: mvno_margin(next_ledger, m) for m in new.mvnos})

    soc_mask = np.array([p in new.mvnos for p in served_plan], dtype=bool)
    soc_q = alloc.quality[soc_mask] if n else np.zeros(0)
    exc_q = alloc.quality[~soc_mask] if n else np.zeros(0)
    p10, p50, p90 = percentiles(soc_q)
    metrics = EpochMetrics(
        epoch=t,
        prices=prices,
        objective=objective,
        op_revenue=op_revenue,
        op_subs={o: served_plan.count(o) for o in sorted(new.operators)},
        mvno_subs={m: served_plan.count(m) for m in sorted(new.mvnos)},
        mvno_revenue=mvno_revenue,
        mvno_margin=margins,
        mvno_active=active_before,
        soc_q_p10=p10,
        soc_q_p50=p50,
        soc_q_p90=p90,
        soc_q_mean=math.fsum(soc_q) / len(soc_q) if len(soc_q) else 0.0,
        exc_q_p50=percentiles(exc_q, (50,))[0],
        exc_q_mean=math.fsum(exc_q) / len(exc_q) if len(exc_q) else 0.0,
        jain_society=jain_index(soc_q) if len(soc_q) else 1.0,
        donated=alloc.donated,
        unallocated=alloc.unallocated,
        society_load=alloc.society_load,
        exclusive_load=alloc.exclusive_load,
        shares=dict(new.share_table.shares) if new.share_table else {},
        licensed=alloc.licensed,
        quality=alloc.quality.copy(),
    )
    history = (new.history + [metrics])[-HISTORY_KEEP:]

    for oid in sorted(new.operators):
        op = new.operators[oid]
        op.retail_price = apply_pricing(op, history, t + 1)
    for mid in sorted(new.mvnos):
        m = new.mvnos[mid]
        m.retail_price = apply_pricing(m, history, t + 1)

    new.history = history
    new.service_ratio = quoted
    _slice_strategies(new, alloc.ratio, margins)
    _entry_exit(new, new.market, quoted)
    new.epoch = t + 1
    return new, metrics
