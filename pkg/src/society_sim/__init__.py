"""Deterministic agent-based simulator of a self-regulating shared-spectrum cellular market."""

from .assignment import (
    AccessRegistry,
    Contract,
    RegistrationResult,
    ShareTable,
    chaotic_allocate,
    per_operator_shares,
    register_contract,
    virtual_operator_allocate,
)
from .dynamics import apply_pricing, choose_plan, consumer_utility, mvno_entry_exit, purchase_slice, step_epoch
from .errors import InconsistentTopology, InvalidConfig, SocietySimError
from .market import MarketState, build_market, check_config, load_scenario, validate
from .metrics import detect_equilibrium, export, jain_index
from .scheduler import drr_schedule, gps_allocate, priority_conserve, wfq_schedule
from .simulation import RunResult, run
from .sweep import SweepSpec, sweep

__version__ = "0.1.0"

__all__ = [
    "AccessRegistry", "Contract", "InconsistentTopology", "InvalidConfig", "MarketState",
    "RegistrationResult", "RunResult", "ShareTable", "SocietySimError", "SweepSpec",
    "apply_pricing", "build_market", "chaotic_allocate", "check_config", "choose_plan",
    "consumer_utility", "detect_equilibrium", "drr_schedule", "export", "gps_allocate",
    "jain_index", "load_scenario", "mvno_entry_exit", "per_operator_shares", "priority_conserve",
    "purchase_slice", "register_contract", "run", "step_epoch", "sweep", "validate",
    "virtual_operator_allocate", "wfq_schedule",
]
