"""How the shared society capacity reaches operators, MVNOs and users."""

from __future__ import annotations

import enum
import math
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from .errors import NegativeInput
from .scheduler import gps_allocate_array


@dataclass(frozen=True)
class ShareTable:
    """Society capacity per operator, fixed for one adjustment period."""

    shares: dict[str, float]
    valid_from_epoch: int = 0
    adjustment_period: int = 30
    unallocated: float = 0.0

    def is_due(self, epoch: int) -> bool:
        return epoch % self.adjustment_period == 0 and epoch != self.valid_from_epoch


def per_operator_shares(
    society_capacity: float,
    users_per_operator: Mapping[str, float],
    epoch: int = 0,
    adjustment_period: int = 30,
) -> ShareTable:
    """Split society capacity in proportion to the users each operator carries.

    With no users at all, every share is zero and the whole capacity is
    reported as unallocated.

    >>> per_operator_shares(25, {"A": 600, "B": 300, "C": 100}).shares
    {'A': 15.0, 'B': 7.5, 'C': 2.5}
    """
    if society_capacity < 0 or any(u < 0 for u in users_per_operator.values()):
        raise NegativeInput("capacity and user counts must be non-negative")
    total = math.fsum(users_per_operator.values())
    if total == 0:
        shares = {op: 0.0 for op in users_per_operator}
        return ShareTable(shares, epoch, adjustment_period, float(society_capacity))
    shares = {op: society_capacity * (u / total) for op, u in users_per_operator.items()}
    return ShareTable(shares, epoch, adjustment_period, 0.0)


def virtual_operator_allocate(
    society_capacity: float,
    mvno_user_counts: Mapping[str, float],
    mvno_demands: Mapping[str, float] | None = None,
) -> dict[str, float]:
    """One pooled society operator: weighted max-min over MVNOs by user count.

    ``mvno_demands`` defaults to treating every MVNO as backlogged. MVNOs
    without users get nothing.
    """
    ids = [m for m in mvno_user_counts if mvno_user_counts[m] > 0]
    out = {m: 0.0 for m in mvno_user_counts}
    if not ids:
        return out
    weights = [mvno_user_counts[m] for m in ids]
    if mvno_demands is None:
        demands = [math.inf] * len(ids)
    else:
        demands = [mvno_demands.get(m, 0.0) for m in ids]
    for m, a in zip(ids, gps_allocate_array(society_capacity, weights, demands)):
        out[m] = float(a)
    return out


def inverse_overload(load: float) -> float:
    """Usable fraction of an unmanaged band at offered load ``load``."""
    return 1.0 / (1.0 + max(0.0, load - 1.0))


def ideal(load: float) -> float:
    return 1.0


EFFICIENCY: dict[str, Callable[[float], float]] = {
    "inverse_overload": inverse_overload,
    "ideal": ideal,
}


def chaotic_allocate(
    society_capacity: float,
    user_demands: Sequence[float],
    efficiency: Callable[[float], float] = inverse_overload,
) -> np.ndarray:
    """Unmanaged sharing: contention wastes capacity, the rest splits evenly."""
    d = np.asarray(user_demands, dtype=float)
    if np.any(d < 0) or society_capacity < 0:
        raise NegativeInput("demands and capacity must be non-negative")
    if d.size == 0:
        return d
    total = math.fsum(d)
    if society_capacity == 0:
        return np.zeros_like(d)
    usable = society_capacity * efficiency(total / society_capacity)
    return gps_allocate_array(usable, np.ones_like(d), d)


# ---------------------------------------------------------------- registry


@dataclass(frozen=True)
class Contract:
    consumer: int
    provider: str


class RegistrationResult(enum.Enum):
    ACCEPTED = "accepted"
    REJECTED_DUPLICATE = "rejected(DuplicateIdentity)"


@dataclass
class AccessRegistry:
    """Active contracts per access code."""

    enabled: bool = True
    contracts: dict[str, list[Contract]] = field(default_factory=dict)

    def terminate(self, code: str, contract: Contract) -> None:
        held = self.contracts.get(code, [])
        if contract in held:
            held.remove(contract)
        if not held:
            self.contracts.pop(code, None)

    def active_count(self) -> int:
        return sum(len(v) for v in self.contracts.values())


def register_contract(registry: AccessRegistry, access_code: str, contract: Contract) -> RegistrationResult:
    """Record ``contract`` under ``access_code``.

    An enabled registry refuses a second simultaneous contract for the same
    code; a disabled one accepts everything.
    """
    held = registry.contracts.setdefault(access_code, [])
    if registry.enabled and held:
        return RegistrationResult.REJECTED_DUPLICATE
    held.append(contract)
    return RegistrationResult.ACCEPTED
