"""
Active-set fusion with entropic follow-the-regularized-leader weights.

For a node running mode `a` the weights over the mode's active branches are the
closed-form minimizer of `eta * <Gamma, w> + KL(w || prior)` on the simplex,
`w ~ prior * exp(-eta * Gamma)`, where `Gamma` is the sum of loss subgradients of
the node's revealed mode-`a` forecasts. Labels arrive `H` slots late, so each
emitted forecast is parked in a `RevealBuffer` until its target is known.
"""

from __future__ import annotations

import logging
from enum import StrEnum
from typing import Mapping, NamedTuple, Optional, Sequence, Union

import numpy as np
import scipy.sparse as sp
from pydantic import BaseModel, ConfigDict, Field, field_validator
from scipy.optimize import OptimizeResult, linprog, minimize
from scipy.special import softmax

from edgecast.calibration import ExecutedModeCalibrator, ReplayRecord
from edgecast.core import (
    DEFAULT_LOSS,
    Branch,
    HorizonLike,
    HorizonVector,
    LossKind,
    LossSpec,
    Mode,
    SimplexWeights,
    as_array,
    eval_loss,
    fuse_candidates,
    loss_subgradient_weights,
    prediction_gradient,
)

log = logging.getLogger(__name__)

DEFAULT_ETA: float = 0.5
PRIOR_TOLERANCE: float = 1e-9
# floor on mean replay losses before inverting them
INVERSE_LOSS_FLOOR: float = 1e-6
FUSED_MODES: tuple[Mode, ...] = (Mode.EDGE_FUSION, Mode.CLOUD_ASSISTED)
# smallest weight a branch keeps once its logit underflows
WEIGHT_FLOOR: float = float(np.finfo(float).tiny)
# stationarity tolerance for hindsight comparators
KKT_TOLERANCE: float = 1e-8


class PriorMode(StrEnum):
    uniform = "uniform"
    inverse_replay_loss = "inverse_replay_loss"


class FusionConfig(BaseModel):
    """
    Fusion settings.

    Attributes:
        eta: FTRL learning rate
        prior_mode: `uniform`, or priors proportional to inverse mean replay losses
        priors: explicit strictly positive priors keyed by mode (1 or 2); take
            precedence over `prior_mode`
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    eta: float = Field(DEFAULT_ETA, gt=0)
    prior_mode: PriorMode = PriorMode.uniform
    priors: dict[int, tuple[float, ...]] = Field(default_factory=dict)

    @field_validator("priors")
    @classmethod
    def check_priors(
        cls, v: dict[int, tuple[float, ...]]
    ) -> dict[int, tuple[float, ...]]:
        for mode, prior in v.items():
            if mode not in FUSED_MODES:
                raise ValueError(f"priors are defined for modes 1 and 2, not {mode}")
            size = len(Mode(mode).branches)
            if len(prior) != size:
                raise ValueError(f"mode {mode} prior needs {size} entries")
            if min(prior) <= 0 or abs(sum(prior) - 1.0) > PRIOR_TOLERANCE:
                raise ValueError(
                    f"mode {mode} prior must be strictly positive and sum to 1"
                )
        return v

    def prior(self, mode: Union[Mode, int]) -> np.ndarray:
        mode = Mode(mode)
        if mode in self.priors:
            p = np.asarray(self.priors[mode], dtype=float)
            return p / p.sum()
        return np.full(len(mode.branches), 1.0 / len(mode.branches))

    def with_replay_priors(self, records: Sequence[ReplayRecord]) -> FusionConfig:
        """Fills in inverse-replay-loss priors for modes without an explicit one."""
        if self.prior_mode != PriorMode.inverse_replay_loss or not records:
            return self
        learned = replay_priors(records)
        return self.model_copy(update={"priors": {**learned, **self.priors}})


def replay_priors(records: Sequence[ReplayRecord]) -> dict[int, tuple[float, ...]]:
    """Priors proportional to inverse mean replayed branch losses, per fused mode."""
    mean = np.array([r.branch_losses for r in records], dtype=float).mean(axis=0)
    inverse = 1.0 / np.maximum(mean, INVERSE_LOSS_FLOOR)
    out = {}
    for mode in FUSED_MODES:
        p = inverse[: len(mode.branches)]
        out[int(mode)] = tuple(float(x) for x in p / p.sum())
    return out


class CumulativeGradient:
    """Revealed subgradient sums per (node, mode), over that mode's active set."""

    def __init__(self) -> None:
        self._sums: dict[tuple[str, Mode], np.ndarray] = {}

    def get(self, node_id: str, mode: Union[Mode, int]) -> np.ndarray:
        mode = Mode(mode)
        return self._sums.get((node_id, mode), np.zeros(len(mode.branches))).copy()

    def add(self, node_id: str, mode: Union[Mode, int], gradient: np.ndarray) -> None:
        mode = Mode(mode)
        g = np.asarray(gradient, dtype=float)
        if g.shape != (len(mode.branches),):
            raise ValueError(
                f"mode {int(mode)} gradient needs shape ({len(mode.branches)},)"
            )
        self._sums[(node_id, mode)] = self.get(node_id, mode) + g

    def snapshot(self) -> dict[str, list[float]]:
        return {f"{n}|{int(m)}": g.tolist() for (n, m), g in sorted(self._sums.items())}


def fusion_weights(
    config: FusionConfig, gamma: CumulativeGradient, node_id: str, mode: Union[Mode, int]
) -> SimplexWeights:
    """`w_m = prior_m exp(-eta Gamma_m) / sum_n prior_n exp(-eta Gamma_n)`."""
    mode = Mode(mode)
    if mode not in FUSED_MODES:
        raise ValueError("the expert-only mode has no fusion weights")
    logits = np.log(config.prior(mode)) - config.eta * gamma.get(node_id, mode)
    # weights stay strictly positive when a logit underflows
    w = np.maximum(softmax(logits), WEIGHT_FLOOR)
    return SimplexWeights.from_numpy(mode.branches, w)


def fuse_and_emit(
    mode: Union[Mode, int],
    candidates: Mapping[Branch, HorizonLike],
    weights: Optional[SimplexWeights] = None,
) -> HorizonVector:
    """Expert forecast verbatim in mode 0, convex combination otherwise."""
    if Mode(mode) == Mode.EXPERT_ONLY:
        return HorizonVector.from_numpy(as_array(candidates[Branch.expert]))
    if weights is None:
        raise ValueError(f"mode {int(mode)} needs fusion weights")
    return fuse_candidates(candidates, weights)


class PendingForecast(BaseModel):
    """
    An emitted forecast waiting for its label.

    Attributes:
        node_id: node
        slot: decision slot
        mode: executed mode
        candidates: active-set candidates, ordered like `weights.branches`
        weights: weights actually used; None in mode 0
        prediction: the emitted forecast
        calibrated_score: score the mode was chosen at
        reveal_slot: first slot at which the target is known
    """

    model_config = ConfigDict(frozen=True)

    node_id: str
    slot: int
    mode: Mode
    candidates: dict[Branch, HorizonVector]
    weights: Optional[SimplexWeights] = None
    prediction: HorizonVector
    calibrated_score: float
    reveal_slot: int


class RevealBuffer:
    """Pending forecasts; each is handed out once, at or after its reveal slot."""

    def __init__(self) -> None:
        self._pending: list[PendingForecast] = []
        self.missing_targets: int = 0

    def __len__(self) -> int:
        return len(self._pending)

    def push(self, record: PendingForecast) -> None:
        self._pending.append(record)

    def pop_due(self, current_slot: int) -> list[PendingForecast]:
        """Removes and returns records due by `current_slot`, in (slot, node) order."""
        due = [r for r in self._pending if r.reveal_slot <= current_slot]
        self._pending = [r for r in self._pending if r.reveal_slot > current_slot]
        return sorted(due, key=lambda r: (r.slot, r.node_id))

    def retain(self, records: Sequence[PendingForecast]) -> None:
        self._pending.extend(records)


class FusionRound(NamedTuple):
    """One revealed fused forecast: candidate stack (m, H), target (H,), weights (m,)."""

    stack: np.ndarray
    target: np.ndarray
    weights: np.ndarray


class FusionHistory:
    """Revealed fused rounds per (node, mode), in reveal order."""

    def __init__(self) -> None:
        self.rounds: dict[tuple[str, Mode], list[FusionRound]] = {}

    def append(self, node_id: str, mode: Mode, round_: FusionRound) -> None:
        self.rounds.setdefault((node_id, mode), []).append(round_)

    def by_mode(self, mode: Mode) -> dict[str, list[FusionRound]]:
        return {n: r for (n, m), r in self.rounds.items() if m == mode}


class RealizedLoss(BaseModel):
    model_config = ConfigDict(frozen=True)

    node_id: str
    slot: int
    mode: Mode
    loss: float
    calibrated_score: float


def reveal_and_update(
    buffer: RevealBuffer,
    gamma: CumulativeGradient,
    calibrator: ExecutedModeCalibrator,
    current_slot: int,
    revealed_targets: Mapping[tuple[str, int], HorizonLike],
    loss: LossSpec = DEFAULT_LOSS,
    learn_weights: bool = True,
    history: Optional[FusionHistory] = None,
) -> list[RealizedLoss]:
    """
    Processes every record due at `current_slot`: realized loss with the weights that
    were used, a subgradient step on Gamma for fused modes, and a calibrator update
    for the executed mode. Records whose target is missing stay in the buffer.

    Args:
        buffer: pending forecasts
        gamma: cumulative subgradients, updated in place
        calibrator: executed-mode calibrator, updated in place
        current_slot: the slot being started
        revealed_targets: targets keyed by (node, decision slot)
        loss: evaluation loss
        learn_weights: update Gamma for fused modes; off for fixed-weight policies
        history: optional per-(node, mode) record of fused rounds
    """
    realized: list[RealizedLoss] = []
    missing: list[PendingForecast] = []
    for rec in buffer.pop_due(current_slot):
        target = revealed_targets.get((rec.node_id, rec.slot))
        if target is None:
            buffer.missing_targets += 1
            log.warning(
                "no target for node %s slot %d at reveal slot %d; keeping it pending",
                rec.node_id, rec.slot, current_slot,
            )
            missing.append(rec)
            continue
        value = eval_loss(target, rec.prediction, loss)
        if rec.mode != Mode.EXPERT_ONLY and rec.weights is not None:
            if learn_weights:
                g = loss_subgradient_weights(target, rec.candidates, rec.weights, loss)
                gamma.add(rec.node_id, rec.mode, g)
            if history is not None:
                branches = rec.weights.branches
                stack = np.vstack([rec.candidates[b].numpy for b in branches])
                history.append(
                    rec.node_id,
                    rec.mode,
                    FusionRound(stack, as_array(target), rec.weights.numpy),
                )
        calibrator.update(rec.node_id, rec.mode, rec.calibrated_score, value)
        realized.append(
            RealizedLoss(
                node_id=rec.node_id,
                slot=rec.slot,
                mode=rec.mode,
                loss=value,
                calibrated_score=rec.calibrated_score,
            )
        )
    buffer.retain(missing)
    return realized


class RegretReport(BaseModel):
    """
    Attributes:
        rounds: revealed rounds
        algorithm_loss: cumulative loss of the weights actually used
        comparator_loss: cumulative loss of the best fixed weights in hindsight
        regret: algorithm_loss - comparator_loss
        comparator: the best fixed weights
        kkt_residual: largest primal, dual or complementary-slackness residual of the
            linear program for absolute losses; projected-gradient stationarity
            residual otherwise
        kkt_verified: `kkt_residual` is below `KKT_TOLERANCE`
        method: `linprog` for absolute losses, `slsqp` otherwise
    """

    rounds: int
    algorithm_loss: float
    comparator_loss: float
    regret: float
    comparator: tuple[float, ...]
    kkt_residual: float
    kkt_verified: bool
    method: str


# HiGHS feasibility tolerances for the comparator LP
LP_TOLERANCE: float = 1e-10
# weights at or below this are off the comparator's support
SUPPORT_TOLERANCE: float = 1e-12
POLISH_STEPS: int = 25


def _cumulative_loss(
    rounds: Sequence[FusionRound], u: np.ndarray, loss: LossSpec
) -> float:
    return float(sum(eval_loss(r.target, u @ r.stack, loss) for r in rounds))


def _lp_kkt_residual(
    res: OptimizeResult,
    cost: np.ndarray,
    a_ub: sp.csr_matrix,
    b_ub: np.ndarray,
    a_eq: sp.csr_matrix,
    b_eq: np.ndarray,
) -> float:
    # HiGHS marginals: c = A_ub^T y_ub + A_eq^T y_eq + z, y_ub <= 0, z >= 0
    x = res.x
    y_ub, y_eq, z = res.ineqlin.marginals, res.eqlin.marginals, res.lower.marginals
    slack = a_ub @ x - b_ub
    parts = [
        np.abs(cost - a_ub.T @ y_ub - a_eq.T @ y_eq - z),
        np.maximum(slack, 0.0),
        np.abs(a_eq @ x - b_eq),
        np.maximum(-x, 0.0),
        np.maximum(y_ub, 0.0),
        np.maximum(-z, 0.0),
        np.abs(y_ub * slack),
        np.abs(z * x),
    ]
    return float(max(p.max() for p in parts))


def _absolute_comparator(
    rounds: Sequence[FusionRound], loss: LossSpec
) -> tuple[np.ndarray, float]:
    # min over u in the simplex of sum_k sum_h c_h |S_k^T u - y_k|_h as an LP in
    # (u, e) with e >= +-(S^T u - y)
    m, h = rounds[0].stack.shape
    c_h = loss.step_weights(h)
    n_e = len(rounds) * h
    s = np.vstack([r.stack.T for r in rounds])  # (R*H, m)
    y = np.concatenate([r.target for r in rounds])
    eye = sp.identity(n_e, format="csr")
    a_ub = sp.vstack(
        [
            sp.hstack([sp.csr_matrix(s), -eye]),
            sp.hstack([sp.csr_matrix(-s), -eye]),
        ],
        format="csr",
    )
    b_ub = np.concatenate([y, -y])
    a_eq = sp.csr_matrix(np.r_[np.ones(m), np.zeros(n_e)][None, :])
    b_eq = np.ones(1)
    cost = np.r_[np.zeros(m), np.tile(c_h, len(rounds))]
    res = linprog(
        cost,
        A_ub=a_ub,
        b_ub=b_ub,
        A_eq=a_eq,
        b_eq=b_eq,
        bounds=[(0, None)] * (m + n_e),
        method="highs-ds",
        options={
            "primal_feasibility_tolerance": LP_TOLERANCE,
            "dual_feasibility_tolerance": LP_TOLERANCE,
        },
    )
    if not res.success:
        raise RuntimeError(f"comparator LP failed: {res.message}")
    residual = _lp_kkt_residual(res, cost, a_ub, b_ub, a_eq, b_eq)
    u = np.clip(res.x[:m], 0.0, None)
    return u / u.sum(), residual


def _mean_loss_and_grad(
    u: np.ndarray, rounds: Sequence[FusionRound], loss: LossSpec
) -> tuple[float, np.ndarray]:
    value, grad = 0.0, np.zeros_like(u)
    for r in rounds:
        fused = u @ r.stack
        value += eval_loss(r.target, fused, loss)
        grad += r.stack @ prediction_gradient(r.target, fused, loss)
    return value / len(rounds), grad / len(rounds)


def _mean_hessian(
    u: np.ndarray, rounds: Sequence[FusionRound], loss: LossSpec
) -> np.ndarray:
    hess = np.zeros((len(u), len(u)))
    for r in rounds:
        residual = u @ r.stack - r.target
        w = loss.step_weights(len(residual))
        if loss.kind == LossKind.Squared:
            curvature = 2.0 * w
        else:
            curvature = w * (np.abs(residual) <= loss.huber_delta)
        hess += (r.stack * curvature) @ r.stack.T
    return hess / len(rounds)


def _project_simplex(v: np.ndarray) -> np.ndarray:
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    k = np.arange(1, len(v) + 1)
    rho = np.nonzero(u - css / k > 0)[0][-1]
    return np.maximum(v - css[rho] / (rho + 1.0), 0.0)


def _stationarity(u: np.ndarray, grad: np.ndarray) -> float:
    return float(np.max(np.abs(u - _project_simplex(u - grad))))


def _newton_step(
    u: np.ndarray, rounds: Sequence[FusionRound], loss: LossSpec
) -> Optional[np.ndarray]:
    """
    One active-set Newton step on the simplex face spanned by the support of `u`,
    admitting the off-support coordinate with the most negative reduced gradient.
    Returns None when the step does not lower the loss.
    """
    value, grad = _mean_loss_and_grad(u, rounds, loss)
    on = u > SUPPORT_TOLERANCE
    multiplier = grad[on].mean()
    reduced = np.where(on, np.inf, grad - multiplier)
    if reduced.min() < 0:
        on[int(np.argmin(reduced))] = True
    support = np.flatnonzero(on)
    k = len(support)
    kkt = np.zeros((k + 1, k + 1))
    kkt[:k, :k] = _mean_hessian(u, rounds, loss)[np.ix_(support, support)]
    kkt[:k, k] = kkt[k, :k] = 1.0
    rhs = np.r_[-grad[support], 0.0]
    d = np.linalg.lstsq(kkt, rhs, rcond=None)[0][:k]
    # ratio test keeps the step on the simplex
    shrinking = d < 0
    t = min(1.0, float(np.min(-u[support][shrinking] / d[shrinking], initial=1.0)))
    candidate = u.copy()
    candidate[support] += t * d
    candidate = np.where(candidate > SUPPORT_TOLERANCE, candidate, 0.0)
    candidate /= candidate.sum()
    if _mean_loss_and_grad(candidate, rounds, loss)[0] > value:
        return None
    return candidate


def _smooth_comparator(
    rounds: Sequence[FusionRound], loss: LossSpec
) -> tuple[np.ndarray, float]:
    m = rounds[0].stack.shape[0]
    res = minimize(
        lambda u: _mean_loss_and_grad(u, rounds, loss),
        np.full(m, 1.0 / m),
        jac=True,
        method="SLSQP",
        bounds=[(0.0, 1.0)] * m,
        constraints=[{"type": "eq", "fun": lambda u: u.sum() - 1.0}],
        options={"ftol": 1e-15, "maxiter": 500},
    )
    u = _project_simplex(res.x)
    residual = _stationarity(u, _mean_loss_and_grad(u, rounds, loss)[1])
    # SLSQP stops near the optimum; finish with Newton steps on the active face
    for _ in range(POLISH_STEPS):
        if residual < SUPPORT_TOLERANCE:
            break
        step = _newton_step(u, rounds, loss)
        if step is None:
            break
        step_residual = _stationarity(step, _mean_loss_and_grad(step, rounds, loss)[1])
        if step_residual >= residual:
            break
        u, residual = step, step_residual
    return u, residual


def regret_report(
    rounds: Sequence[FusionRound], loss: LossSpec = DEFAULT_LOSS
) -> RegretReport:
    """
    Regret of the used weights against the best fixed simplex weights in hindsight.
    A comparator whose KKT residual reaches `KKT_TOLERANCE` is reported with
    `kkt_verified` false and logged.

    Raises:
        ValueError: with no revealed rounds
    """
    if not rounds:
        raise ValueError("regret needs at least one revealed round")
    if loss.kind in (LossKind.MAE, LossKind.WeightedMAE):
        comparator, residual = _absolute_comparator(rounds, loss)
        method = "linprog"
    else:
        comparator, residual = _smooth_comparator(rounds, loss)
        method = "slsqp"
    verified = residual < KKT_TOLERANCE
    if not verified:
        log.warning(
            "%s comparator KKT residual %.3g is not below %.0e",
            method,
            residual,
            KKT_TOLERANCE,
        )
    algorithm = float(
        sum(eval_loss(r.target, r.weights @ r.stack, loss) for r in rounds)
    )
    best = _cumulative_loss(rounds, comparator, loss)
    return RegretReport(
        rounds=len(rounds),
        algorithm_loss=algorithm,
        comparator_loss=best,
        regret=algorithm - best,
        comparator=tuple(float(x) for x in comparator),
        kkt_residual=residual,
        kkt_verified=verified,
        method=method,
    )
