"""
Ridge-regression branch models: the per-node site expert, the pooled small model
with its bootstrap ensemble, and the conditional regressor behind the cloud branch.

Models are plain pydantic records of their coefficients so they serialize to JSON
as-is; fitting goes through scikit-learn's closed-form `Ridge` (svd solver, which
also accepts a zero penalty).
"""

from __future__ import annotations

import logging
from typing import Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator
from sklearn.linear_model import Ridge

from edgecast.core import HorizonVector
from edgecast.data import FeatureLayout, ObservationWindow, Sample
from edgecast.exceptions import DimensionError
from edgecast.predictors.retrieval import CloudContext

log = logging.getLogger(__name__)

DEFAULT_RIDGE_LAMBDA: float = 1e-3
DEFAULT_ENSEMBLE_SIZE: int = 5


class LinearHead(BaseModel):
    """
    Multi-output linear map `x -> W x + b`.

    Attributes:
        coefficients: H rows of F coefficients
        intercepts: H intercepts
    """

    model_config = ConfigDict(frozen=True)

    coefficients: list[list[float]]
    intercepts: list[float]

    @classmethod
    def fit(cls, x: np.ndarray, y: np.ndarray, ridge_lambda: float) -> LinearHead:
        model = Ridge(alpha=ridge_lambda, solver="svd", fit_intercept=True)
        model.fit(x, y)
        coef = np.atleast_2d(model.coef_)
        return cls(
            coefficients=coef.tolist(),
            intercepts=np.atleast_1d(model.intercept_).astype(float).tolist(),
        )

    @classmethod
    def constant(cls, n_features: int, values: Sequence[float]) -> LinearHead:
        return cls(
            coefficients=np.zeros((len(values), n_features)).tolist(),
            intercepts=[float(v) for v in values],
        )

    @property
    def n_features(self) -> int:
        return len(self.coefficients[0])

    @property
    def horizon(self) -> int:
        return len(self.intercepts)

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Unclamped output for one feature vector or a matrix of them."""
        return np.asarray(x) @ np.asarray(self.coefficients).T + np.asarray(
            self.intercepts
        )


def _design(samples: Sequence[Sample]) -> tuple[np.ndarray, np.ndarray]:
    x = np.vstack([s.window.features for s in samples])
    y = np.vstack([s.target.numpy for s in samples])
    return x, y


def _check_features(x: np.ndarray, expected: int) -> None:
    if x.shape[-1] != expected:
        raise DimensionError(f"got {x.shape[-1]} features, model expects {expected}")


class ExpertModel(BaseModel):
    """
    Site expert of one node.

    Attributes:
        node_id: the node it was trained for
        head: ridge fit on the node's training samples; None for the persistence
            fallback
        n_features: feature dimension of the windows it accepts
        horizon: forecast steps
        last_lag: position of the most recent power lag, used by the fallback
    """

    node_id: str
    head: Optional[LinearHead] = None
    n_features: int
    horizon: int = Field(ge=1)
    last_lag: int = Field(ge=0)

    @property
    def fallback(self) -> bool:
        return self.head is None

    def predict_matrix(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        _check_features(x, self.n_features)
        if self.head is None:
            raw = np.repeat(x[:, [self.last_lag]], self.horizon, axis=1)
        else:
            raw = self.head.apply(x)
        return np.clip(raw, 0.0, 1.0)


class SmallModel(BaseModel):
    """
    Shared small model: B ridge replicas, each fit on a bootstrap resample of the
    pooled training data. The point prediction is the ensemble mean.

    Attributes:
        replicas: bootstrap-trained heads, all of the same shape
        seed: resampling seed
        n_features: feature dimension
        horizon: forecast steps
        last_lag: position of the most recent power lag, used by the fallback
    """

    replicas: list[LinearHead] = Field(default_factory=list)
    seed: int = 0
    n_features: int
    horizon: int = Field(ge=1)
    last_lag: int = Field(ge=0)

    @field_validator("replicas")
    @classmethod
    def same_shape(cls, v: list[LinearHead]) -> list[LinearHead]:
        if v and len(v) < 2:
            raise ValueError("the ensemble needs at least two replicas")
        if len({(r.horizon, r.n_features) for r in v}) > 1:
            raise ValueError("replicas differ in shape")
        return v

    @property
    def fallback(self) -> bool:
        return not self.replicas

    def ensemble_matrix(self, x: np.ndarray) -> np.ndarray:
        """Clamped replica outputs, shape (B, n, H)."""
        x = np.atleast_2d(x)
        _check_features(x, self.n_features)
        if self.fallback:
            persistence = np.repeat(x[:, [self.last_lag]], self.horizon, axis=1)
            return np.clip(persistence, 0.0, 1.0)[None, :, :]
        return np.clip(np.stack([r.apply(x) for r in self.replicas]), 0.0, 1.0)

    def predict_matrix(self, x: np.ndarray) -> np.ndarray:
        return self.ensemble_matrix(x).mean(axis=0)


def train_expert(
    samples: Sequence[Sample],
    node_id: str,
    layout: FeatureLayout,
    horizon: int,
    ridge_lambda: float = DEFAULT_RIDGE_LAMBDA,
) -> ExpertModel:
    """
    Ridge fit on one node's training samples. With no samples the expert falls back
    to persistence (last observed value repeated over the horizon).
    """
    if not samples:
        log.warning("node %s: no training samples, expert falls back to persistence",
                    node_id)
        return ExpertModel(
            node_id=node_id, n_features=layout.dim, horizon=horizon,
            last_lag=layout.last_lag,
        )
    x, y = _design(samples)
    return ExpertModel(
        node_id=node_id,
        head=LinearHead.fit(x, y, ridge_lambda),
        n_features=x.shape[1],
        horizon=y.shape[1],
        last_lag=layout.last_lag,
    )


def train_small(
    samples: Sequence[Sample],
    layout: FeatureLayout,
    horizon: int,
    ensemble_size: int = DEFAULT_ENSEMBLE_SIZE,
    seed: int = 0,
    ridge_lambda: float = DEFAULT_RIDGE_LAMBDA,
) -> SmallModel:
    """
    Bootstrap ensemble of ridge fits on the pooled samples of all nodes.
    """
    if ensemble_size < 2:
        raise ValueError("ensemble_size must be at least 2")
    if not samples:
        log.warning("no pooled training samples, small model falls back to persistence")
        return SmallModel(
            seed=seed, n_features=layout.dim, horizon=horizon, last_lag=layout.last_lag
        )
    x, y = _design(samples)
    rng = np.random.default_rng(seed)
    replicas = []
    for _ in range(ensemble_size):
        idx = rng.integers(0, len(x), size=len(x))
        replicas.append(LinearHead.fit(x[idx], y[idx], ridge_lambda))
    return SmallModel(
        replicas=replicas,
        seed=seed,
        n_features=x.shape[1],
        horizon=y.shape[1],
        last_lag=layout.last_lag,
    )


def predict_expert(model: ExpertModel, window: ObservationWindow) -> HorizonVector:
    return HorizonVector.from_numpy(model.predict_matrix(window.features)[0])


def predict_small(model: SmallModel, window: ObservationWindow) -> HorizonVector:
    return HorizonVector.from_numpy(model.predict_matrix(window.features)[0])


class ConditionalRegressor(BaseModel):
    """
    Cloud-branch regressor over `[window features, context vector, dispersion]`.

    Attributes:
        head: ridge fit; None when no training sample had a usable context, in which
            case the context vector itself is the prediction
        n_features: window feature dimension
        horizon: forecast steps
    """

    head: Optional[LinearHead] = None
    n_features: int
    horizon: int = Field(ge=1)

    def inputs(self, features: np.ndarray, context: np.ndarray, dispersion: np.ndarray
               ) -> np.ndarray:
        features = np.atleast_2d(features)
        _check_features(features, self.n_features)
        context = np.atleast_2d(context)
        if context.shape[1] != self.horizon:
            raise DimensionError(
                f"context has {context.shape[1]} steps, regressor expects {self.horizon}"
            )
        return np.hstack([features, context, np.reshape(dispersion, (-1, 1))])

    def predict_matrix(
        self, features: np.ndarray, context: np.ndarray, dispersion: np.ndarray
    ) -> np.ndarray:
        phi = self.inputs(features, context, dispersion)
        if self.head is None:
            return np.clip(np.atleast_2d(context), 0.0, 1.0)
        return np.clip(self.head.apply(phi), 0.0, 1.0)


def train_conditional_regressor(
    features: np.ndarray,
    contexts: np.ndarray,
    dispersions: np.ndarray,
    targets: np.ndarray,
    ridge_lambda: float = DEFAULT_RIDGE_LAMBDA,
) -> ConditionalRegressor:
    """
    Fits the cloud regressor on rows that have a retrieved context. All arrays are
    row-aligned; `features` may be empty (zero rows) in which case the regressor
    passes contexts through.
    """
    features = np.atleast_2d(features)
    targets = np.atleast_2d(targets)
    n_features, horizon = features.shape[1], targets.shape[1]
    reg = ConditionalRegressor(n_features=n_features, horizon=horizon)
    if len(features) == 0:
        log.warning("no retrieved contexts to train on; cloud regressor passes through")
        return reg
    phi = reg.inputs(features, contexts, dispersions)
    return reg.model_copy(update={"head": LinearHead.fit(phi, targets, ridge_lambda)})


def predict_cloud(
    regressor: ConditionalRegressor, window: ObservationWindow, context: CloudContext
) -> HorizonVector:
    """Cloud-assisted candidate for a window given its retrieved context."""
    out = regressor.predict_matrix(
        window.features, context.context_vector.numpy, np.array([context.dispersion])
    )
    return HorizonVector.from_numpy(out[0])
