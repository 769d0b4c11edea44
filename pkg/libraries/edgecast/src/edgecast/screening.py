"""
Pre-routing screening: the four screening features of a window, the logistic routing
score, and each node's exponentially weighted empirical CDF of calibrated scores.

Only information available before routing enters the features: the site expert's
forecast, the small model's ensemble (a cheap forward pass), the query key and the
recent weather records.
"""

from __future__ import annotations

import logging
import math
from bisect import bisect_left, bisect_right, insort
from collections import deque
from typing import Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.spatial.distance import mahalanobis
from scipy.special import expit, logit
from sklearn.linear_model import LogisticRegression

from edgecast.core import HorizonLike, as_array
from edgecast.data import DEFAULT_W_MU, ObservationWindow, Sample
from edgecast.predictors.retrieval import QueryEncoder
from edgecast.predictors.ridge import SmallModel

log = logging.getLogger(__name__)

DEFAULT_GAMMA: float = 0.99
DEFAULT_W_CDF: int = 512
DEFAULT_ALPHA: float = 1.0
DEFAULT_L2: float = 1.0
DEFAULT_MAX_ITER: int = 200
DEFAULT_OOD_JITTER: float = 1e-6
EMPTY_CDF_VALUE: float = 0.5
# keeps the logistic output strictly inside (0, 1)
SCORE_EPS: float = 1e-12
FEATURE_NAMES: tuple[str, ...] = ("u", "o", "mu", "d")


class ScreeningConfig(BaseModel):
    """
    Screening settings.

    Attributes:
        gamma: per-update decay of the score CDF weights
        w_cdf: score CDF capacity (alias `W_cdf`)
        w_mu: weather records used for the mutation intensity (alias `W_mu`)
        alpha: calibration scale, calibrated score = alpha * r
        l2: L2 penalty of the logistic fit
        max_iter: iteration budget of the logistic fit
        ood_jitter: diagonal jitter added to the OOD covariance
    """

    model_config = ConfigDict(frozen=True, extra="forbid", populate_by_name=True)

    gamma: float = Field(DEFAULT_GAMMA, gt=0, le=1)
    w_cdf: int = Field(DEFAULT_W_CDF, ge=1, alias="W_cdf")
    w_mu: int = Field(DEFAULT_W_MU, ge=1, alias="W_mu")
    alpha: float = Field(DEFAULT_ALPHA, gt=0)
    l2: float = Field(DEFAULT_L2, gt=0)
    max_iter: int = Field(DEFAULT_MAX_ITER, ge=1)
    ood_jitter: float = Field(DEFAULT_OOD_JITTER, ge=0)


class ScreeningFeatures(BaseModel):
    """
    Attributes:
        u: ensemble predictive variance, averaged over the horizon
        o: Mahalanobis distance of the query key to the training keys
        mu: weather mutation intensity
        d: mean absolute disagreement between expert and small model
    """

    model_config = ConfigDict(frozen=True)

    u: float = Field(ge=0, allow_inf_nan=False)
    o: float = Field(ge=0, allow_inf_nan=False)
    mu: float = Field(ge=0, allow_inf_nan=False)
    d: float = Field(ge=0, allow_inf_nan=False)

    @classmethod
    def from_numpy(cls, arr: np.ndarray) -> ScreeningFeatures:
        return cls(**{k: float(v) for k, v in zip(FEATURE_NAMES, arr)})

    @property
    def numpy(self) -> np.ndarray:
        return np.array([self.u, self.o, self.mu, self.d])


class ScreeningWeights(BaseModel):
    """
    Logistic routing-score parameters. Features are z-scored with the stored
    training statistics before the affine map.

    Attributes:
        beta: one coefficient per screening feature
        bias: intercept
        alpha: calibration scale
        feature_mean: training mean of each feature
        feature_scale: training standard deviation of each feature
        degenerate: set when the fit saw a single class
    """

    beta: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)
    bias: float = 0.0
    alpha: float = Field(DEFAULT_ALPHA, gt=0)
    feature_mean: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)
    feature_scale: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)
    degenerate: bool = False

    @model_validator(mode="after")
    def check_finite(self) -> ScreeningWeights:
        values = [*self.beta, self.bias, *self.feature_mean, *self.feature_scale]
        if not all(math.isfinite(v) for v in values):
            raise ValueError("screening weights must be finite")
        if any(s <= 0 for s in self.feature_scale):
            raise ValueError("feature scales must be positive")
        return self

    def affine(self, features: np.ndarray) -> np.ndarray:
        z = (np.asarray(features) - np.asarray(self.feature_mean)) / np.asarray(
            self.feature_scale
        )
        return z @ np.asarray(self.beta) + self.bias

    def raw_scores(self, features: np.ndarray) -> np.ndarray:
        return np.clip(expit(self.affine(features)), SCORE_EPS, 1.0 - SCORE_EPS)

    def calibrate(self, raw_score: float) -> float:
        return self.alpha * raw_score

    @property
    def max_score(self) -> float:
        """Upper end of the calibrated-score axis."""
        return self.alpha


class OodReference(BaseModel):
    """
    Gaussian reference of the training query keys.

    Attributes:
        mean: key mean
        covariance: key covariance plus diagonal jitter
        precision: inverse of `covariance`
    """

    mean: list[float]
    covariance: list[list[float]]
    precision: list[list[float]]

    @model_validator(mode="after")
    def check_spd(self) -> OodReference:
        cov = np.asarray(self.covariance)
        if cov.shape != (len(self.mean), len(self.mean)):
            raise ValueError("covariance does not match the mean")
        if not np.allclose(cov, cov.T):
            raise ValueError("covariance is not symmetric")
        np.linalg.cholesky(cov)
        return self

    @classmethod
    def from_moments(
        cls, mean: np.ndarray, covariance: np.ndarray, jitter: float = 0.0
    ) -> OodReference:
        cov = np.asarray(covariance, dtype=float) + jitter * np.eye(len(mean))
        cov = 0.5 * (cov + cov.T)
        try:
            np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            # singular even after jitter: grow the jitter until it factorizes
            bump = max(jitter, 1e-9)
            while True:
                bump *= 10
                try:
                    np.linalg.cholesky(cov + bump * np.eye(len(mean)))
                    break
                except np.linalg.LinAlgError:
                    continue
            log.warning("OOD covariance needed jitter %.1e to factorize", bump)
            cov = cov + bump * np.eye(len(mean))
        return cls(
            mean=np.asarray(mean, dtype=float).tolist(),
            covariance=cov.tolist(),
            precision=np.linalg.inv(cov).tolist(),
        )

    @classmethod
    def fit(cls, keys: np.ndarray, jitter: float = DEFAULT_OOD_JITTER) -> OodReference:
        keys = np.atleast_2d(keys)
        cov = np.cov(keys, rowvar=False) if len(keys) > 1 else np.zeros(
            (keys.shape[1], keys.shape[1])
        )
        return cls.from_moments(keys.mean(axis=0), np.atleast_2d(cov), jitter)

    def distance(self, key: np.ndarray) -> float:
        return float(mahalanobis(key, self.mean, np.asarray(self.precision)))

    def distances(self, keys: np.ndarray) -> np.ndarray:
        diff = np.atleast_2d(keys) - np.asarray(self.mean)
        quad = np.einsum("ij,jk,ik->i", diff, np.asarray(self.precision), diff)
        return np.sqrt(np.clip(quad, 0.0, None))


def weather_scale(samples: Sequence[Sample], width: int) -> np.ndarray:
    """Training-split standard deviation of each covariate (ones if constant)."""
    if width == 0:
        return np.zeros(0)
    if not samples:
        return np.ones(width)
    records = np.vstack(
        [s.window.weather_history[-1:] for s in samples if len(s.window.weather_history)]
    )
    scale = records.std(axis=0)
    scale[scale < 1e-12] = 1.0
    return scale


def mutation_intensity(weather_recent: np.ndarray, scale: np.ndarray) -> float:
    """Mean over covariates of the recent-window standard deviation, per unit scale."""
    weather_recent = np.atleast_2d(weather_recent)
    if weather_recent.shape[1] == 0 or len(weather_recent) < 2:
        return 0.0
    return float(np.mean(weather_recent.std(axis=0) / scale))


def _feature_row(
    expert_pred: np.ndarray,
    ensemble: np.ndarray,
    key: np.ndarray,
    ood_ref: OodReference,
    weather_recent: np.ndarray,
    scale: np.ndarray,
) -> np.ndarray:
    u = float(ensemble.var(axis=0).mean())
    o = ood_ref.distance(key)
    mu = mutation_intensity(weather_recent, scale)
    d = float(np.mean(np.abs(expert_pred - ensemble.mean(axis=0))))
    return np.array([u, o, mu, d])


def compute_features(
    window: ObservationWindow,
    expert_pred: HorizonLike,
    small_model: SmallModel,
    ood_ref: OodReference,
    encoder: QueryEncoder,
    scale: Optional[np.ndarray] = None,
    weather_recent: Optional[np.ndarray] = None,
) -> ScreeningFeatures:
    """
    Screening features of one window.

    Args:
        window: the observation window
        expert_pred: the site expert's forecast for the window
        small_model: small model whose replica spread gives `u`
        ood_ref: training key reference for `o`
        encoder: query encoder producing the key
        scale: per-covariate normalization for `mu` (ones by default)
        weather_recent: covariate records before the slot; defaults to the
            window's own history
    """
    recent = window.weather_history if weather_recent is None else weather_recent
    recent = np.atleast_2d(recent) if np.size(recent) else np.zeros((0, 0))
    if scale is None:
        scale = np.ones(recent.shape[1] if recent.ndim == 2 else 0)
    ensemble = small_model.ensemble_matrix(window.features)[:, 0, :]
    row = _feature_row(
        as_array(expert_pred), ensemble, encoder.encode(window), ood_ref, recent, scale
    )
    return ScreeningFeatures.from_numpy(row)


def compute_features_many(
    windows: Sequence[ObservationWindow],
    expert_preds: np.ndarray,
    ensembles: np.ndarray,
    keys: np.ndarray,
    ood_ref: OodReference,
    scale: np.ndarray,
) -> np.ndarray:
    """
    Vectorized features for many windows, shape (n, 4).

    Args:
        windows: the windows
        expert_preds: expert forecasts, shape (n, H)
        ensembles: small-model replica forecasts, shape (B, n, H)
        keys: query keys, shape (n, dim)
        ood_ref: training key reference
        scale: per-covariate normalization for `mu`
    """
    u = ensembles.var(axis=0).mean(axis=1)
    o = ood_ref.distances(keys)
    mu = np.array([mutation_intensity(w.weather_history, scale) for w in windows])
    d = np.abs(expert_preds - ensembles.mean(axis=0)).mean(axis=1)
    return np.column_stack([u, o, mu, d])


def routing_score(features: ScreeningFeatures, weights: ScreeningWeights) -> float:
    """Logistic routing score, strictly inside (0, 1)."""
    return float(weights.raw_scores(features.numpy[None, :])[0])


def fit_screening_weights(
    features: np.ndarray,
    labels: np.ndarray,
    config: ScreeningConfig = ScreeningConfig(),
    seed: int = 0,
) -> ScreeningWeights:
    """
    L2-penalized logistic regression of the oracle cloud-benefit label on z-scored
    screening features. A single-class label set gives beta = 0 and a bias equal to
    the logit of the (clipped) class prior, flagged as degenerate.
    """
    features = np.atleast_2d(np.asarray(features, dtype=float))
    labels = np.asarray(labels, dtype=int)
    if len(features) == 0:
        log.warning("no replay records; routing score is uninformative")
        return ScreeningWeights(alpha=config.alpha, degenerate=True)
    mean = features.mean(axis=0)
    scale = features.std(axis=0)
    scale[scale < 1e-12] = 1.0
    if len(np.unique(labels)) < 2:
        prior = float(np.clip(labels.mean(), 1e-6, 1 - 1e-6))
        log.warning("single-class oracle labels (prior %.3f); beta set to 0", prior)
        return ScreeningWeights(
            bias=float(logit(prior)),
            alpha=config.alpha,
            feature_mean=tuple(mean.tolist()),
            feature_scale=tuple(scale.tolist()),
            degenerate=True,
        )
    model = LogisticRegression(
        C=1.0 / config.l2,
        max_iter=config.max_iter,
        solver="lbfgs",
        random_state=seed,
    )
    model.fit((features - mean) / scale, labels)
    return ScreeningWeights(
        beta=tuple(float(b) for b in model.coef_[0]),
        bias=float(model.intercept_[0]),
        alpha=config.alpha,
        feature_mean=tuple(mean.tolist()),
        feature_scale=tuple(scale.tolist()),
    )


class ScoreCdf:
    """
    Exponentially weighted empirical CDF of one node's calibrated scores.

    The most recent observation has weight 1; each later update multiplies older
    weights by `gamma`. At most `capacity` observations are kept.
    """

    def __init__(self, gamma: float = DEFAULT_GAMMA, capacity: int = DEFAULT_W_CDF):
        if not 0 < gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.gamma = gamma
        self.capacity = capacity
        # (score, arrival index) in arrival order and in score order
        self._arrivals: deque[tuple[float, int]] = deque()
        self._window: list[tuple[float, int]] = []
        self._seen: int = 0
        self._cum_weights: Optional[np.ndarray] = None
        self.empty_evaluations: int = 0

    def __len__(self) -> int:
        return len(self._arrivals)

    @property
    def weights(self) -> np.ndarray:
        """Weights aligned with `scores`, oldest first."""
        return self.gamma ** np.arange(len(self._arrivals) - 1, -1, -1, dtype=float)

    @property
    def scores(self) -> np.ndarray:
        return np.array([score for score, _ in self._arrivals], dtype=float)

    def update(self, calibrated_score: float) -> ScoreCdf:
        if calibrated_score < 0 or not math.isfinite(calibrated_score):
            raise ValueError(f"score {calibrated_score} outside [0, inf)")
        entry = (float(calibrated_score), self._seen)
        self._seen += 1
        if len(self._arrivals) == self.capacity:
            evicted = self._arrivals.popleft()
            del self._window[bisect_left(self._window, evicted)]
        self._arrivals.append(entry)
        insort(self._window, entry)
        self._cum_weights = None
        return self

    def _cumulative_weights(self) -> np.ndarray:
        if self._cum_weights is None:
            ages = np.array([self._seen - 1 - seq for _, seq in self._window])
            self._cum_weights = np.cumsum(self.gamma ** ages.astype(float))
        return self._cum_weights

    def evaluate(self, threshold: float) -> float:
        if math.isinf(threshold) and threshold > 0:
            return 1.0
        if not self._arrivals:
            self.empty_evaluations += 1
            log.debug("empty score CDF evaluated; returning %.1f", EMPTY_CDF_VALUE)
            return EMPTY_CDF_VALUE
        idx = bisect_right(self._window, (threshold, math.inf))
        if idx == 0:
            return 0.0
        cum = self._cumulative_weights()
        return float(min(1.0, cum[idx - 1] / cum[-1]))

    __call__ = evaluate


def cdf_update(cdf: ScoreCdf, calibrated_score: float) -> ScoreCdf:
    return cdf.update(calibrated_score)


def cdf_eval(cdf: ScoreCdf, threshold: float) -> float:
    return cdf.evaluate(threshold)
