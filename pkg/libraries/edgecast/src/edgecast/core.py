"""
Shared domain types and the loss machinery used by every other module.

Forecasts live on the capacity-normalized box [0, 1]^H. A node runs one of three
modes per slot; each mode activates a fixed, ordered subset of the branches
(expert `e`, small model `s`, cloud-assisted `c`) whose candidates are fused with
simplex weights.
"""

from __future__ import annotations

import logging
from enum import IntEnum, StrEnum
from typing import Mapping, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from edgecast.exceptions import ConfigError, DimensionError

log = logging.getLogger(__name__)

SIMPLEX_TOLERANCE: float = 1e-12
DEFAULT_HUBER_DELTA: float = 0.1


class HorizonVector(BaseModel):
    """
    An H-step forecast or target on the normalized domain. Entries are clamped into
    [0, 1] at construction.

    Attributes:
        values: one value per horizon step
    """

    model_config = ConfigDict(frozen=True)

    values: tuple[float, ...]

    @field_validator("values", mode="before")
    @classmethod
    def clamp_to_box(cls, v: object) -> tuple[float, ...]:
        arr = np.asarray(v, dtype=float).ravel()
        if arr.size == 0:
            raise ValueError("horizon vector needs at least one step")
        if not np.all(np.isfinite(arr)):
            raise ValueError("horizon vector entries must be finite")
        return tuple(float(x) for x in np.clip(arr, 0.0, 1.0))

    @classmethod
    def from_numpy(cls, arr: np.ndarray) -> HorizonVector:
        return cls(values=arr)  # type: ignore[arg-type]

    @classmethod
    def constant(cls, value: float, horizon: int) -> HorizonVector:
        return cls(values=[value] * horizon)  # type: ignore[arg-type]

    @property
    def numpy(self) -> np.ndarray:
        return np.asarray(self.values, dtype=float)

    @property
    def horizon(self) -> int:
        return len(self.values)

    def __len__(self) -> int:
        return len(self.values)


HorizonLike = Union[HorizonVector, np.ndarray, Sequence[float]]


def as_array(v: HorizonLike) -> np.ndarray:
    """Numpy view of a horizon vector (no clamping for raw arrays)."""
    if isinstance(v, HorizonVector):
        return v.numpy
    return np.asarray(v, dtype=float).ravel()


class Branch(StrEnum):
    """
    Forecast branches.

    Attributes:
        expert: the node's own site expert
        small: the shared small model, cheap to run on the edge
        cloud: the retrieval-conditioned cloud-assisted regressor
    """

    expert = "e"
    small = "s"
    cloud = "c"


BRANCH_ORDER: tuple[Branch, ...] = (Branch.expert, Branch.small, Branch.cloud)


class Mode(IntEnum):
    """
    Inference modes a node can run in one slot. Cost grows with the mode index.
    """

    EXPERT_ONLY = 0
    EDGE_FUSION = 1
    CLOUD_ASSISTED = 2

    @property
    def active_set(self) -> ActiveBranchSet:
        return ActiveBranchSet.for_mode(self)

    @property
    def branches(self) -> tuple[Branch, ...]:
        return ACTIVE_BRANCHES[self]


ACTIVE_BRANCHES: dict[Mode, tuple[Branch, ...]] = {
    Mode.EXPERT_ONLY: (Branch.expert,),
    Mode.EDGE_FUSION: (Branch.expert, Branch.small),
    Mode.CLOUD_ASSISTED: (Branch.expert, Branch.small, Branch.cloud),
}


class ActiveBranchSet(BaseModel):
    """
    The ordered set of branches a mode activates.

    Attributes:
        branches: one of (e,), (e, s), (e, s, c)
    """

    model_config = ConfigDict(frozen=True)

    branches: tuple[Branch, ...]

    @field_validator("branches")
    @classmethod
    def check_canonical(cls, v: tuple[Branch, ...]) -> tuple[Branch, ...]:
        if v not in ACTIVE_BRANCHES.values():
            raise ValueError(f"{v} is not the active set of any mode")
        return v

    @classmethod
    def for_mode(cls, mode: Union[Mode, int]) -> ActiveBranchSet:
        return cls(branches=ACTIVE_BRANCHES[Mode(mode)])

    @property
    def mode(self) -> Mode:
        return Mode(len(self.branches) - 1)

    def __len__(self) -> int:
        return len(self.branches)


class SimplexWeights(BaseModel):
    """
    Fusion weights over an ordered set of branches.

    Attributes:
        branches: the branches the weights are defined over, in fusion order
        weights: nonnegative weights summing to one
    """

    model_config = ConfigDict(frozen=True)

    branches: tuple[Branch, ...]
    weights: tuple[float, ...]

    @model_validator(mode="after")
    def check_simplex(self) -> SimplexWeights:
        if len(self.branches) != len(self.weights):
            raise ValueError("one weight per branch is required")
        if len(set(self.branches)) != len(self.branches):
            raise ValueError("duplicate branches in weight vector")
        w = np.asarray(self.weights, dtype=float)
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError(f"weights must be finite and nonnegative, got {w}")
        if abs(float(w.sum()) - 1.0) > SIMPLEX_TOLERANCE:
            raise ValueError(f"weights sum to {w.sum()!r}, not 1")
        return self

    @classmethod
    def from_numpy(cls, branches: Sequence[Branch], arr: np.ndarray) -> SimplexWeights:
        """Normalizes `arr` onto the simplex before validation."""
        arr = np.asarray(arr, dtype=float)
        arr = arr / arr.sum()
        return cls(branches=tuple(branches), weights=tuple(float(x) for x in arr))

    @classmethod
    def uniform(cls, branches: Sequence[Branch]) -> SimplexWeights:
        return cls.from_numpy(branches, np.ones(len(branches)))

    @classmethod
    def one_hot(cls, branches: Sequence[Branch], hot: Branch) -> SimplexWeights:
        arr = np.array([1.0 if b == hot else 0.0 for b in branches])
        if arr.sum() == 0:
            raise ConfigError(f"branch {hot} is not among {tuple(branches)}")
        return cls.from_numpy(branches, arr)

    @property
    def numpy(self) -> np.ndarray:
        return np.asarray(self.weights, dtype=float)

    def as_dict(self) -> dict[str, float]:
        return {b.value: w for b, w in zip(self.branches, self.weights)}


class LossKind(StrEnum):
    MAE = "MAE"
    WeightedMAE = "WeightedMAE"
    Huber = "Huber"
    Squared = "Squared"


class LossSpec(BaseModel):
    """
    Per-sample forecasting loss, aggregated over the horizon.

    MAE always averages uniformly over steps. WeightedMAE requires horizon weights;
    Huber and Squared use them when present and average uniformly otherwise.

    Attributes:
        kind: the per-step loss
        horizon_weights: optional nonnegative weights over steps, normalized to sum
            to one
        huber_delta: transition point of the Huber loss
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: LossKind = LossKind.MAE
    horizon_weights: Optional[tuple[float, ...]] = None
    huber_delta: float = Field(DEFAULT_HUBER_DELTA, gt=0)

    @field_validator("horizon_weights")
    @classmethod
    def normalize_weights(
        cls, v: Optional[tuple[float, ...]]
    ) -> Optional[tuple[float, ...]]:
        if v is None:
            return v
        arr = np.asarray(v, dtype=float)
        if arr.size == 0 or np.any(arr < 0) or arr.sum() <= 0:
            raise ValueError("horizon weights must be nonnegative with positive sum")
        return tuple(float(x) for x in arr / arr.sum())

    @model_validator(mode="after")
    def weighted_needs_weights(self) -> LossSpec:
        if self.kind == LossKind.WeightedMAE and self.horizon_weights is None:
            raise ValueError("WeightedMAE needs horizon_weights")
        return self

    def step_weights(self, horizon: int) -> np.ndarray:
        if self.kind == LossKind.MAE or self.horizon_weights is None:
            return np.full(horizon, 1.0 / horizon)
        if len(self.horizon_weights) != horizon:
            raise DimensionError(
                f"loss has {len(self.horizon_weights)} horizon weights, "
                f"vectors have {horizon} steps"
            )
        return np.asarray(self.horizon_weights, dtype=float)

    @property
    def upper_bound(self) -> float:
        """Largest loss attainable on [0, 1]^H (residuals are bounded by one)."""
        match self.kind:
            case LossKind.MAE | LossKind.WeightedMAE | LossKind.Squared:
                return 1.0
            case LossKind.Huber:
                d = self.huber_delta
                return 0.5 if d >= 1.0 else d * (1.0 - 0.5 * d)

    @property
    def lipschitz(self) -> float:
        """Lipschitz constant of the loss in the prediction over the unit box."""
        match self.kind:
            case LossKind.MAE | LossKind.WeightedMAE:
                return 1.0
            case LossKind.Squared:
                return 2.0
            case LossKind.Huber:
                return min(self.huber_delta, 1.0)


DEFAULT_LOSS = LossSpec()


def _step_losses(residual: np.ndarray, spec: LossSpec) -> np.ndarray:
    match spec.kind:
        case LossKind.MAE | LossKind.WeightedMAE:
            return np.abs(residual)
        case LossKind.Squared:
            return residual**2
        case LossKind.Huber:
            d = spec.huber_delta
            a = np.abs(residual)
            return np.where(a <= d, 0.5 * residual**2, d * (a - 0.5 * d))


def _step_derivatives(residual: np.ndarray, spec: LossSpec) -> np.ndarray:
    match spec.kind:
        case LossKind.MAE | LossKind.WeightedMAE:
            # np.sign(0) == 0
            return np.sign(residual)
        case LossKind.Squared:
            return 2.0 * residual
        case LossKind.Huber:
            d = spec.huber_delta
            return np.clip(residual, -d, d)


def _check_lengths(*arrays: np.ndarray) -> int:
    lengths = {a.shape[-1] for a in arrays}
    if len(lengths) != 1:
        raise DimensionError(f"horizon lengths disagree: {sorted(lengths)}")
    return lengths.pop()


def eval_loss(
    target: HorizonLike, prediction: HorizonLike, spec: LossSpec = DEFAULT_LOSS
) -> float:
    """
    Horizon-aggregated loss of `prediction` against `target`.

    Raises:
        DimensionError: if the two vectors have different lengths
    """
    y, p = as_array(target), as_array(prediction)
    h = _check_lengths(y, p)
    return float(spec.step_weights(h) @ _step_losses(p - y, spec))


def prediction_gradient(
    target: HorizonLike, prediction: HorizonLike, spec: LossSpec = DEFAULT_LOSS
) -> np.ndarray:
    """(Sub)gradient of `eval_loss` with respect to the prediction vector."""
    y, p = as_array(target), as_array(prediction)
    h = _check_lengths(y, p)
    return spec.step_weights(h) * _step_derivatives(p - y, spec)


def _stack(
    candidates: Mapping[Branch, HorizonLike], weights: SimplexWeights
) -> np.ndarray:
    if set(candidates) != set(weights.branches):
        raise ConfigError(
            f"candidate branches {sorted(b.value for b in candidates)} do not match "
            f"weight branches {[b.value for b in weights.branches]}"
        )
    stack = np.vstack([as_array(candidates[b]) for b in weights.branches])
    return stack


def fuse_candidates(
    candidates: Mapping[Branch, HorizonLike], weights: SimplexWeights
) -> HorizonVector:
    """
    Convex combination of the candidates, per horizon step.

    Raises:
        ConfigError: if the candidate keys differ from the weight branches
    """
    stack = _stack(candidates, weights)
    return HorizonVector.from_numpy(weights.numpy @ stack)


def loss_subgradient_weights(
    target: HorizonLike,
    candidates: Mapping[Branch, HorizonLike],
    weights: SimplexWeights,
    spec: LossSpec = DEFAULT_LOSS,
) -> np.ndarray:
    """
    One subgradient of `w -> eval_loss(target, fuse(candidates, w))`, ordered like
    `weights.branches`. For absolute losses sign(0) is taken as 0.
    """
    stack = _stack(candidates, weights)
    y = as_array(target)
    _check_lengths(stack, y)
    return stack @ prediction_gradient(y, weights.numpy @ stack, spec)
