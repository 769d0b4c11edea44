"""
Virtual queues for the long-term latency, communication and cloud-usage constraints.

Each queue accumulates how far the per-slot arrival exceeded its budget,
`q <- [q + arrival - budget]^+`, so a queue that stays small relative to the run
length certifies that the time-averaged constraint holds.
"""

from __future__ import annotations

import logging
from typing import Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

log = logging.getLogger(__name__)

DEFAULT_TAU_MAX: float = 120.0
DEFAULT_RHO_MAX: float = 0.5
# c_max defaults to this share of mean comm volume times rho_max
DEFAULT_C_MAX_SHARE: float = 0.6
# Q(T)/T above this share of the budget counts as unstable
INSTABILITY_SHARE: float = 0.05
BRIDGE_TOLERANCE: float = 1e-12

QUEUE_NAMES: tuple[str, ...] = ("tau", "c", "rho")


class Budgets(BaseModel):
    """
    Long-term average budgets.

    Attributes:
        tau_max: average latency budget (ms)
        c_max: average communication budget; None resolves from the comm volumes
        rho_max: average cloud-usage ratio budget
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    tau_max: float = Field(DEFAULT_TAU_MAX, gt=0)
    c_max: Optional[float] = Field(None, gt=0)
    rho_max: float = Field(DEFAULT_RHO_MAX, gt=0, le=1)

    def resolve(self, kappas: Sequence[float]) -> Budgets:
        """Fills in `c_max` as 0.6 * mean(kappa) * rho_max when unset."""
        if self.c_max is not None:
            return self
        mean_kappa = float(np.mean(kappas)) if len(kappas) else 1.0
        c_max = DEFAULT_C_MAX_SHARE * mean_kappa * self.rho_max
        if c_max <= 0:
            raise ValueError("resolved c_max is not positive; set it explicitly")
        return self.model_copy(update={"c_max": c_max})

    @property
    def values(self) -> tuple[float, float, float]:
        if self.c_max is None:
            raise ValueError("c_max has not been resolved")
        return self.tau_max, self.c_max, self.rho_max


class QueueState(BaseModel):
    """
    Attributes:
        q_tau: latency queue
        q_c: communication queue
        q_rho: cloud-usage queue
        slot: number of updates applied
    """

    model_config = ConfigDict(frozen=True)

    q_tau: float = Field(0.0, ge=0, allow_inf_nan=False)
    q_c: float = Field(0.0, ge=0, allow_inf_nan=False)
    q_rho: float = Field(0.0, ge=0, allow_inf_nan=False)
    slot: int = Field(0, ge=0)

    @property
    def values(self) -> tuple[float, float, float]:
        return self.q_tau, self.q_c, self.q_rho


def hinge(x: float) -> float:
    """[x]^+"""
    return x if x > 0 else 0.0


def update_queues(
    state: QueueState, avg_latency: float, avg_comm: float, rho: float, budgets: Budgets
) -> QueueState:
    """One global update after every node has executed its slot."""
    if min(avg_latency, avg_comm, rho) < 0 or rho > 1:
        raise ValueError("queue arrivals must be nonnegative and rho must lie in [0, 1]")
    tau_max, c_max, rho_max = budgets.values
    return QueueState(
        q_tau=hinge(state.q_tau + avg_latency - tau_max),
        q_c=hinge(state.q_c + avg_comm - c_max),
        q_rho=hinge(state.q_rho + rho - rho_max),
        slot=state.slot + 1,
    )


def lyapunov_value(state: QueueState) -> float:
    return 0.5 * (state.q_tau**2 + state.q_c**2 + state.q_rho**2)


class QueueStability(BaseModel):
    """
    Stability diagnostics of one queue.

    Attributes:
        final_rate: Q(T)/T
        avg_arrival: time-averaged arrival
        budget: the queue's budget
        bridge_slack: budget + Q(T)/T - avg_arrival; nonnegative up to rounding
        bridge_holds: the bridging inequality held within tolerance
        avg_backlog: time-averaged queue value
        unstable: Q(T)/T exceeded the instability share of the budget
    """

    final_rate: float
    avg_arrival: float
    budget: float
    bridge_slack: float
    bridge_holds: bool
    avg_backlog: float
    unstable: bool


class StabilityReport(BaseModel):
    slots: int
    queues: dict[str, QueueStability]
    avg_backlog: float

    @property
    def bridge_holds(self) -> bool:
        return all(q.bridge_holds for q in self.queues.values())

    @property
    def unstable(self) -> bool:
        return any(q.unstable for q in self.queues.values())


def stability_report(
    states: Sequence[QueueState],
    arrivals: Sequence[tuple[float, float, float]],
    budgets: Budgets,
) -> StabilityReport:
    """
    Diagnostics from a queue trajectory.

    Args:
        states: queue state after each slot's update, in slot order
        arrivals: (avg latency, avg comm, rho) of each slot, aligned with `states`
        budgets: resolved budgets

    Returns:
        StabilityReport: per-queue Q(T)/T, the bridging check
            avg(arrival) <= budget + Q(T)/T and time-averaged backlogs
    """
    if len(states) != len(arrivals):
        raise ValueError("one arrival tuple per queue state is required")
    n = len(states)
    if n == 0:
        return StabilityReport(slots=0, queues={}, avg_backlog=0.0)
    q = np.array([s.values for s in states], dtype=float)
    a = np.array(arrivals, dtype=float)
    report = {}
    for g, (name, budget) in enumerate(zip(QUEUE_NAMES, budgets.values)):
        final_rate = q[-1, g] / n
        avg_arrival = float(a[:, g].mean())
        slack = budget + final_rate - avg_arrival
        holds = slack >= -BRIDGE_TOLERANCE * max(1.0, abs(budget), abs(avg_arrival))
        if not holds:
            log.warning("queue %s violates the bridging bound by %.3g", name, -slack)
        unstable = final_rate > INSTABILITY_SHARE * budget
        report[name] = QueueStability(
            final_rate=final_rate,
            avg_arrival=avg_arrival,
            budget=budget,
            bridge_slack=slack,
            bridge_holds=holds,
            avg_backlog=float(q[:, g].mean()),
            unstable=unstable,
        )
    return StabilityReport(
        slots=n, queues=report, avg_backlog=float(q.sum(axis=1).mean())
    )
