"""
Mean-field routing: queue-weighted pricing of escalation, the relative routing
indices of the three modes, node-wise score thresholds, the cloud-load fixed point
and the final per-node argmin.

Each node compares

    J0 = 0
    J1 = kappa1 / V - g1(s)
    J2 = (kappa1 + kappa2(rho)) / V - g1(s) - g2(s)

at its calibrated score `s`. Because the gains are nondecreasing in `s`, the argmin
partitions the score axis into threshold regions, and the expected share of nodes
above their cloud threshold defines the cloud-load map whose fixed point is solved
before actions are taken.
"""

from __future__ import annotations

import logging
import math
from enum import StrEnum
from typing import Callable, Mapping, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from edgecast.calibration import GainCurves, NodeGains
from edgecast.core import Mode
from edgecast.queues import Budgets, QueueState

log = logging.getLogger(__name__)

DEFAULT_V: float = 80.0
DEFAULT_N_FP: int = 5
DEFAULT_DAMPING: float = 1.0
DEFAULT_KAPPA: float = 1.0
# sentinel for "never reached on [0, s_max]"; score CDFs evaluate to 1 there
NEVER: float = math.inf
SHARPENED_POLE: float = 1.05


class CongestionKind(StrEnum):
    affine = "affine"
    sharpened = "sharpened"


class CongestionCurve(BaseModel):
    """
    Cloud queueing delay as a function of the cloud-load ratio.

    Attributes:
        kind: `affine` is d0 + d1 * rho, `sharpened` is d0 + d1 * rho / (1.05 - rho)
        d0: delay at zero load (ms)
        d1: load sensitivity (ms)
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: CongestionKind = CongestionKind.affine
    d0: float = Field(10.0, ge=0, allow_inf_nan=False)
    d1: float = Field(100.0, ge=0, allow_inf_nan=False)

    def __call__(self, rho: float) -> float:
        rho = min(max(rho, 0.0), 1.0)
        match self.kind:
            case CongestionKind.affine:
                return self.d0 + self.d1 * rho
            case CongestionKind.sharpened:
                return self.d0 + self.d1 * rho / (SHARPENED_POLE - rho)


class NodeLatency(BaseModel):
    """Per-node latency components in milliseconds."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    tau_e: float = Field(10.0, ge=0, allow_inf_nan=False)
    tau_s: float = Field(30.0, ge=0, allow_inf_nan=False)
    tau_f: float = Field(5.0, ge=0, allow_inf_nan=False)
    tau_up: float = Field(20.0, ge=0, allow_inf_nan=False)
    tau_down: float = Field(20.0, ge=0, allow_inf_nan=False)


class LatencyParams(BaseModel):
    """
    Attributes:
        default: latency of nodes without an override
        nodes: per-node overrides
        tau_cld: cloud compute time (ms)
        congestion: cloud queueing delay curve
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    default: NodeLatency = NodeLatency()
    nodes: dict[str, NodeLatency] = Field(default_factory=dict)
    tau_cld: float = Field(40.0, ge=0, allow_inf_nan=False)
    congestion: CongestionCurve = CongestionCurve()

    def for_node(self, node_id: Optional[str]) -> NodeLatency:
        if node_id is None:
            return self.default
        return self.nodes.get(node_id, self.default)


def mode_latency(
    params: LatencyParams,
    mode: Union[Mode, int],
    rho: float,
    node_id: Optional[str] = None,
) -> float:
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"cloud load {rho} outside [0, 1]")
    lat = params.for_node(node_id)
    match Mode(mode):
        case Mode.EXPERT_ONLY:
            return lat.tau_e
        case Mode.EDGE_FUSION:
            return lat.tau_e + lat.tau_s + lat.tau_f
        case Mode.CLOUD_ASSISTED:
            uplink = lat.tau_up + params.congestion(rho)
            cloud_path = uplink + params.tau_cld + lat.tau_down
            return lat.tau_e + lat.tau_f + max(lat.tau_s, cloud_path)


class ControllerConfig(BaseModel):
    """
    Router and constraint settings.

    Attributes:
        v: drift-plus-penalty trade-off (alias `V`)
        n_fp: fixed-point iterations per slot (alias `N_fp`)
        damping: fixed-point damping in (0, 1]
        budgets: long-term budgets
        latency: latency components and congestion curve
        kappa: per-node communication volume of a cloud request
        default_kappa: communication volume of nodes missing from `kappa`
    """

    model_config = ConfigDict(frozen=True, extra="forbid", populate_by_name=True)

    v: float = Field(DEFAULT_V, gt=0, alias="V")
    n_fp: int = Field(DEFAULT_N_FP, ge=1, alias="N_fp")
    damping: float = Field(DEFAULT_DAMPING, gt=0, le=1)
    budgets: Budgets = Budgets()
    latency: LatencyParams = LatencyParams()
    kappa: dict[str, float] = Field(default_factory=dict)
    default_kappa: float = Field(DEFAULT_KAPPA, ge=0)

    @field_validator("kappa")
    @classmethod
    def nonnegative_kappa(cls, v: dict[str, float]) -> dict[str, float]:
        if any(k < 0 or not math.isfinite(k) for k in v.values()):
            raise ValueError("communication volumes must be finite and nonnegative")
        return v

    def kappa_for(self, node_id: str) -> float:
        return self.kappa.get(node_id, self.default_kappa)

    def resolved_budgets(self, node_ids: Sequence[str]) -> Budgets:
        return self.budgets.resolve([self.kappa_for(n) for n in node_ids])


class PricingTerms(BaseModel):
    """
    Queue-weighted marginal costs of escalating one mode level.

    `kappa1 = Q_tau * (tau1 - tau0)` and
    `kappa2(rho) = Q_tau * (tau2(rho) - tau1) + Q_c * kappa_i + Q_rho`.
    """

    model_config = ConfigDict(frozen=True)

    kappa1: float
    q_tau: float
    fixed2: float
    tau_s: float
    cloud_base: float
    congestion: CongestionCurve

    def kappa2_at(self, rho: float) -> float:
        # tau2 - tau1 = max(tau_s, cloud path) - tau_s
        extra = max(self.tau_s, self.cloud_base + self.congestion(rho)) - self.tau_s
        return self.q_tau * extra + self.fixed2


def pricing(
    queues: QueueState,
    params: LatencyParams,
    kappa_i: float,
    node_id: Optional[str] = None,
) -> PricingTerms:
    lat = params.for_node(node_id)
    return PricingTerms(
        kappa1=queues.q_tau * (lat.tau_s + lat.tau_f),
        q_tau=queues.q_tau,
        fixed2=queues.q_c * kappa_i + queues.q_rho,
        tau_s=lat.tau_s,
        cloud_base=lat.tau_up + params.tau_cld + lat.tau_down,
        congestion=params.congestion,
    )


def routing_indices(
    terms: PricingTerms, gains: NodeGains, score: float, v: float, rho: float
) -> tuple[float, float, float]:
    if v <= 0:
        raise ValueError("V must be positive")
    g1, g2 = gains.g1(score), gains.g2(score)
    j1 = terms.kappa1 / v - g1
    j2 = (terms.kappa1 + terms.kappa2_at(rho)) / v - g1 - g2
    return 0.0, j1, j2


class GainGrid:
    """
    Gains tabulated at every point where either curve can change on [0, s_max].
    Both columns (and their sum) are nondecreasing, so a level is first reached at a
    binary-searchable grid point.
    """

    def __init__(self, gains: NodeGains, s_max: float) -> None:
        points = np.union1d(gains.g1.breakpoints, gains.g2.breakpoints)
        self.points = np.r_[0.0, points[(points > 0) & (points <= s_max)]]
        self.g1 = gains.g1.evaluate_many(self.points)
        self.g2 = gains.g2.evaluate_many(self.points)
        self.g12 = np.maximum.accumulate(self.g1 + self.g2)

    def first_reaching(self, column: np.ndarray, level: float) -> float:
        """inf{s : column(s) >= level}, or NEVER."""
        idx = int(np.searchsorted(column, level, side="left"))
        return float(self.points[idx]) if idx < len(self.points) else NEVER


class ThresholdSet(BaseModel):
    """
    Node thresholds at one cloud load. Values lie in [0, s_max] or are `NEVER`.

    Attributes:
        theta01: edge fusion beats the expert from here on
        theta02: cloud-assisted beats the expert from here on
        theta12: cloud-assisted beats edge fusion from here on
        theta_c: cloud-activation threshold, max(theta02, theta12)
    """

    model_config = ConfigDict(frozen=True)

    theta01: float
    theta02: float
    theta12: float
    theta_c: float


def thresholds(
    terms: PricingTerms,
    gains: Union[NodeGains, GainGrid],
    v: float,
    rho: float,
    s_max: float = 1.0,
) -> ThresholdSet:
    grid = gains if isinstance(gains, GainGrid) else GainGrid(gains, s_max)
    kappa2 = terms.kappa2_at(rho)
    theta01 = grid.first_reaching(grid.g1, terms.kappa1 / v)
    theta02 = grid.first_reaching(grid.g12, (terms.kappa1 + kappa2) / v)
    theta12 = grid.first_reaching(grid.g2, kappa2 / v)
    return ThresholdSet(
        theta01=theta01, theta02=theta02, theta12=theta12, theta_c=max(theta02, theta12)
    )


class FixedPointResult(BaseModel):
    """
    Attributes:
        rho_star: final cloud-load estimate
        residual: |T(rho_star) - rho_star|
        iterates: every iterate, starting with the initial value
    """

    rho_star: float = Field(ge=0, le=1)
    residual: float = Field(ge=0)
    iterates: list[float]


ThresholdFn = Callable[[float], float]
CdfFn = Callable[[float], float]


def _load_map(
    theta_fns: Sequence[ThresholdFn], cdfs: Sequence[CdfFn], rho: float
) -> float:
    if not theta_fns:
        return 0.0
    share = sum(1.0 - cdf(theta(rho)) for theta, cdf in zip(theta_fns, cdfs))
    return min(max(share / len(theta_fns), 0.0), 1.0)


def fixed_point_rho(
    theta_fns: Sequence[ThresholdFn],
    cdfs: Sequence[CdfFn],
    n_fp: int = DEFAULT_N_FP,
    damping: float = DEFAULT_DAMPING,
    rho_init: float = 0.0,
) -> FixedPointResult:
    """
    Damped iteration of the cloud-load map
    `rho <- (1 - damping) * rho + damping * mean_i(1 - F_i(theta_c,i(rho)))`
    for exactly `n_fp` steps.

    Args:
        theta_fns: each node's cloud threshold as a function of the load
        cdfs: each node's score CDF, aligned with `theta_fns`
        n_fp: iterations
        damping: step size in (0, 1]
        rho_init: starting load, usually the previous slot's estimate
    """
    if len(theta_fns) != len(cdfs):
        raise ValueError("one score CDF per threshold function is required")
    rho = min(max(rho_init, 0.0), 1.0)
    iterates = [rho]
    for _ in range(n_fp):
        rho = (1.0 - damping) * rho + damping * _load_map(theta_fns, cdfs, rho)
        rho = min(max(rho, 0.0), 1.0)
        iterates.append(rho)
    residual = abs(_load_map(theta_fns, cdfs, rho) - rho)
    return FixedPointResult(rho_star=rho, residual=residual, iterates=iterates)


class NodeDecision(BaseModel):
    model_config = ConfigDict(frozen=True)

    mode: Mode
    j0: float
    j1: float
    j2: float
    calibrated_score: float
    theta_c: float


class RoutingDecision(BaseModel):
    """
    Attributes:
        nodes: per-node decision
        rho_star: cloud-load estimate the decision was taken at
        fp_residual: fixed-point residual at `rho_star`
    """

    nodes: dict[str, NodeDecision]
    rho_star: float = Field(ge=0, le=1)
    fp_residual: float = 0.0

    def modes(self) -> dict[str, Mode]:
        return {n: d.mode for n, d in self.nodes.items()}


def argmin_mode(j: Sequence[float]) -> Mode:
    """Lowest index wins ties."""
    return Mode(int(np.argmin(j)))


def select_actions(
    scores: Mapping[str, float],
    gains: Union[GainCurves, Mapping[str, NodeGains]],
    pricings: Mapping[str, PricingTerms],
    rho_star: float,
    v: float,
    fp_residual: float = 0.0,
    s_max: float = 1.0,
) -> RoutingDecision:
    if not 0.0 <= rho_star <= 1.0:
        raise ValueError(f"rho_star {rho_star} outside [0, 1]")
    nodes = {}
    for node_id, score in scores.items():
        node_gains = (
            gains.for_node(node_id) if isinstance(gains, GainCurves) else gains[node_id]
        )
        j = routing_indices(pricings[node_id], node_gains, score, v, rho_star)
        theta = thresholds(pricings[node_id], node_gains, v, rho_star, s_max)
        nodes[node_id] = NodeDecision(
            mode=argmin_mode(j),
            j0=j[0],
            j1=j[1],
            j2=j[2],
            calibrated_score=score,
            theta_c=theta.theta_c,
        )
    return RoutingDecision(nodes=nodes, rho_star=rho_star, fp_residual=fp_residual)


class MeanFieldRouter:
    """
    Per-slot router. Keeps the previous slot's load estimate as the starting point
    of the next fixed-point solve.
    """

    def __init__(self, config: ControllerConfig, gains: GainCurves) -> None:
        self.config = config
        self.gains = gains
        self.rho_prev: float = 0.0
        self._grids: dict[str, GainGrid] = {}

    def grid(self, node_id: str) -> GainGrid:
        if node_id not in self._grids:
            gains = self.gains.for_node(node_id)
            self._grids[node_id] = GainGrid(gains, self.gains.s_max)
        return self._grids[node_id]

    def route(
        self,
        scores: Mapping[str, float],
        queues: QueueState,
        cdfs: Mapping[str, CdfFn],
    ) -> RoutingDecision:
        """
        Prices escalation from the queues, solves for the cloud load and picks each
        node's mode.

        Args:
            scores: calibrated score per node
            queues: queue state at the start of the slot
            cdfs: score CDF per node
        """
        cfg = self.config
        terms = {
            n: pricing(queues, cfg.latency, cfg.kappa_for(n), n) for n in scores
        }

        def theta_fn(node_id: str) -> ThresholdFn:
            grid = self.grid(node_id)
            return lambda rho: thresholds(terms[node_id], grid, cfg.v, rho).theta_c

        nodes = list(scores)
        fp = fixed_point_rho(
            [theta_fn(n) for n in nodes],
            [cdfs[n] for n in nodes],
            cfg.n_fp,
            cfg.damping,
            self.rho_prev,
        )
        self.rho_prev = fp.rho_star
        return select_actions(
            scores,
            self.gains,
            terms,
            fp.rho_star,
            cfg.v,
            fp.residual,
            self.gains.s_max,
        )
