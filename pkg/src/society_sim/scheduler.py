"""Fair resource allocation primitives.

The epoch-level market uses the fluid weighted max-min split
(:func:`gps_allocate`). The packet-level schedulers (:func:`wfq_schedule`,
:func:`drr_schedule`) exist to exercise the same sharing rule at packet
granularity; :func:`priority_conserve` is the strict-priority rule that lends
idle licensed capacity to the shared pool.
"""

from __future__ import annotations

import csv
import heapq
import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import NegativeInput, NonPositiveQuantum, NonPositiveRate


@dataclass(frozen=True)
class FlowSpec:
    """A fluid flow: positive weight and a non-negative demand."""

    weight: float
    demand: float


def gps_allocate_array(capacity: float, weights, demands) -> np.ndarray:
    """Weighted max-min (water-filling) split of ``capacity``.

    Vectorised core of :func:`gps_allocate`. Flows are processed in a
    canonical order (demand/weight, weight, demand) so the result depends on
    the multiset of flows only, bit for bit.
    """
    w = np.asarray(weights, dtype=float)
    d = np.asarray(demands, dtype=float)
    if w.shape != d.shape:
        raise ValueError("weights and demands must have the same shape")
    if capacity < 0 or np.any(d < 0) or np.any(np.isnan(d)):
        raise NegativeInput("capacity and demands must be non-negative")
    if np.any(w <= 0):
        raise NegativeInput("weights must be positive")
    out = np.zeros_like(d)
    if d.size == 0:
        return out

    ratio = d / w
    order = np.lexsort((d, w, ratio))
    ws, ds, rs = w[order], d[order], ratio[order]
    alloc = np.empty_like(ds)
    remaining = float(capacity)
    weight_left = float(ws.sum())
    for k in range(ds.size):
        level = remaining / weight_left if weight_left > 0 else 0.0
        if rs[k] <= level:
            alloc[k] = ds[k]
            remaining -= ds[k]
            weight_left -= ws[k]
        else:
            alloc[k:] = ws[k:] * level
            break
    out[order] = alloc
    return out


def gps_allocate(capacity: float, flows: Sequence[FlowSpec | tuple[float, float]]) -> list[float]:
    """Split ``capacity`` among ``flows`` by weighted max-min fairness.

    No flow receives more than its demand, the total handed out is
    ``min(capacity, sum(demands))`` and every flow not capped by its demand
    gets the same allocation per unit weight.

    >>> gps_allocate(12, [(2, 10), (1, 10)])
    [8.0, 4.0]
    """
    specs = [f if isinstance(f, FlowSpec) else FlowSpec(*f) for f in flows]
    alloc = gps_allocate_array(
        capacity, [f.weight for f in specs], [f.demand for f in specs]
    )
    return alloc.tolist()


# ---------------------------------------------------------------- packet level


@dataclass(frozen=True)
class Packet:
    arrival: float
    size: float


@dataclass
class PacketFlow:
    """A weighted queue of packets, in arrival order."""

    weight: float
    packets: list[Packet]
    flow_id: int | None = None

    @classmethod
    def backlogged(cls, weight: float, n_packets: int, size: float = 1.0, flow_id=None):
        return cls(weight, [Packet(0.0, size) for _ in range(n_packets)], flow_id)


@dataclass(frozen=True)
class Departure:
    flow_id: int
    seq: int
    arrival: float
    size: float
    start: float
    departure: float
    finish_tag: float


@dataclass
class WfqState:
    """System virtual time and the last virtual finish tag of every flow."""

    virtual_time: float = 0.0
    finish_tags: dict[int, float] = field(default_factory=dict)


@dataclass
class WfqResult:
    departures: list[Departure]
    state: WfqState


class _VirtualClock:
    """Virtual time of the fluid reference system.

    ``V`` advances at ``rate / sum(weights of flows still busy in the fluid
    system)``; a flow leaves that set once ``V`` reaches its last finish tag.
    """

    def __init__(self, rate: float, weights: dict[int, float]):
        self.rate = rate
        self.weights = weights
        self.v = 0.0
        self.t = 0.0
        self.last_finish: dict[int, float] = {}
        self.busy: set[int] = set()

    def advance(self, t: float) -> None:
        while self.busy and self.t < t:
            busy_weight = sum(self.weights[i] for i in self.busy)
            f_min = min(self.last_finish[i] for i in self.busy)
            t_reach = self.t + (f_min - self.v) * busy_weight / self.rate
            if t_reach <= t:
                self.t, self.v = t_reach, f_min
                self.busy = {i for i in self.busy if self.last_finish[i] > f_min}
            else:
                self.v += (t - self.t) * self.rate / busy_weight
                self.t = t
        self.t = max(self.t, t)

    def stamp(self, flow: int, t: float, size: float) -> float:
        self.advance(t)
        start = max(self.last_finish.get(flow, 0.0), self.v)
        finish = start + size / self.weights[flow]
        self.last_finish[flow] = finish
        self.busy.add(flow)
        return finish


def wfq_schedule(flows: Sequence[PacketFlow], link_rate: float) -> WfqResult:
    """Packet-by-packet weighted fair queueing on a single link.

    Each packet is stamped with its virtual finish time in the fluid
    reference system at arrival; whenever the link frees up, the stamped
    packet with the smallest finish time is sent next. Ties go to the lower
    flow id, then to the earlier packet. The link never idles while a packet
    is waiting.
    """
    if link_rate <= 0:
        raise NonPositiveRate(f"link_rate must be positive, got {link_rate}")
    ids = [f.flow_id if f.flow_id is not None else i for i, f in enumerate(flows)]
    if len(set(ids)) != len(ids):
        raise ValueError("flow ids must be unique")
    for f in flows:
        if f.weight <= 0:
            raise NegativeInput("flow weights must be positive")
        if any(p.size <= 0 or p.arrival < 0 for p in f.packets):
            raise NegativeInput("packet sizes must be positive and arrivals non-negative")

    clock = _VirtualClock(link_rate, {fid: f.weight for fid, f in zip(ids, flows)})
    arrivals = sorted(
        (p.arrival, fid, seq, p.size)
        for fid, f in zip(ids, flows)
        for seq, p in enumerate(f.packets)
    )
    ready: list[tuple[float, int, int, float, float]] = []
    departures: list[Departure] = []
    t = 0.0
    nxt = 0
    while nxt < len(arrivals) or ready:
        if not ready:
            t = max(t, arrivals[nxt][0])
        while nxt < len(arrivals) and arrivals[nxt][0] <= t:
            arrival, fid, seq, size = arrivals[nxt]
            heapq.heappush(ready, (clock.stamp(fid, arrival, size), fid, seq, arrival, size))
            nxt += 1
        finish, fid, seq, arrival, size = heapq.heappop(ready)
        done = t + size / link_rate
        departures.append(Departure(fid, seq, arrival, size, t, done, finish))
        t = done

    clock.advance(t)
    return WfqResult(departures, WfqState(clock.v, dict(clock.last_finish)))


def write_trace_csv(departures: Iterable[Departure], path) -> None:
    """Dump a packet trace as ``flow_id, arrival, size, departure`` rows."""
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["flow_id", "arrival", "size", "departure"])
        for d in departures:
            writer.writerow([d.flow_id, repr(d.arrival), repr(d.size), repr(d.departure)])


@dataclass(frozen=True)
class Service:
    queue: int
    size: float
    round: int


@dataclass
class DrrState:
    quanta: list[float]
    deficits: list[float]


@dataclass
class DrrResult:
    services: list[Service]
    state: DrrState
    rounds: int

    def served(self, n_queues: int | None = None) -> list[float]:
        n = n_queues if n_queues is not None else len(self.state.quanta)
        totals = [0.0] * n
        for s in self.services:
            totals[s.queue] += s.size
        return totals


def drr_schedule(
    queues: Sequence[Sequence[float]],
    quanta: Sequence[float],
    service_budget: float = math.inf,
) -> DrrResult:
    """Deficit round robin over packet-size queues.

    Every round visits the non-empty queues in order, adds the quantum to the
    queue's deficit and sends head packets while the deficit covers them.
    A queue that runs empty has its deficit reset to zero. Serving stops when
    all queues are empty or the next packet due would exceed the remaining
    ``service_budget``.
    """
    if len(queues) != len(quanta):
        raise ValueError("one quantum per queue is required")
    if any(q <= 0 for q in quanta):
        raise NonPositiveQuantum(f"quanta must be positive, got {list(quanta)}")
    if service_budget < 0:
        raise NegativeInput("service_budget must be non-negative")
    if any(s <= 0 for q in queues for s in q):
        raise NegativeInput("packet sizes must be positive")

    pending = [list(q) for q in queues]
    heads = [0] * len(queues)
    deficits = [0.0] * len(queues)
    services: list[Service] = []
    budget = float(service_budget)
    rounds = 0
    exhausted = False
    while not exhausted and any(h < len(p) for h, p in zip(heads, pending)):
        rounds += 1
        for i, q in enumerate(pending):
            if heads[i] >= len(q):
                continue
            deficits[i] += quanta[i]
            while heads[i] < len(q) and q[heads[i]] <= deficits[i]:
                size = q[heads[i]]
                if size > budget:
                    exhausted = True
                    break
                services.append(Service(i, size, rounds))
                deficits[i] -= size
                budget -= size
                heads[i] += 1
            if heads[i] >= len(q):
                deficits[i] = 0.0
            if exhausted:
                break
    return DrrResult(services, DrrState(list(quanta), deficits), rounds)


def priority_conserve(licensed_capacity, licensed_demand, society_demand):
    """Serve licensed demand first and donate the idle rest for one epoch.

    Returns ``(licensed_allocation, donated_capacity)``. ``society_demand``
    never reduces the licensed allocation; it is accepted only so callers can
    pass the full picture.
    """
    if min(licensed_capacity, licensed_demand, society_demand) < 0:
        raise NegativeInput("priority_conserve inputs must be non-negative")
    # exact for int/Fraction inputs; floats round the subtraction (<= 1 ulp)
    allocation = min(licensed_capacity, licensed_demand)
    return allocation, licensed_capacity - allocation
