"""
Offline full-branch replay, oracle routing labels, monotone gain curves and the
executed-mode loss calibrator.

Replay evaluates all three modes on every sample with uniform fusion weights over
each mode's active set, so counterfactual losses never depend on online fusion
state. Gains are fit on the calibrated-score axis by isotonic regression.
"""

from __future__ import annotations

import logging
from enum import StrEnum
from typing import Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from sklearn.isotonic import isotonic_regression
from tqdm import tqdm

from edgecast.core import DEFAULT_LOSS, LossSpec, Mode, eval_loss
from edgecast.data import Sample
from edgecast.exceptions import CalibrationError
from edgecast.predictors.branches import BranchSuite
from edgecast.predictors.retrieval import QueryEncoder
from edgecast.screening import (
    OodReference,
    ScreeningFeatures,
    ScreeningWeights,
    compute_features_many,
)

log = logging.getLogger(__name__)

DEFAULT_B_BINS: int = 20
DEFAULT_M_MIN: int = 50
REPLAY_CHUNK: int = 2048


class ReplaySplit(StrEnum):
    train = "train"
    validation = "validation"


class CalibrationConfig(BaseModel):
    """
    Calibration settings.

    Attributes:
        b_bins: equal-width calibrated-score bins of the executed-mode calibrator
            (alias `B_bins`)
        m_min: records a node needs for its own gain curves (alias `M_min`)
        per_node: fit gain curves per node where enough records exist
        replay_split: split the offline replay is built on
    """

    model_config = ConfigDict(frozen=True, extra="forbid", populate_by_name=True)

    b_bins: int = Field(DEFAULT_B_BINS, ge=1, alias="B_bins")
    m_min: int = Field(DEFAULT_M_MIN, ge=1, alias="M_min")
    per_node: bool = True
    replay_split: ReplaySplit = ReplaySplit.train


def oracle_label(loss0: float, loss1: float, loss2: float) -> int:
    """1 iff cloud-assisted fusion attains the minimum replayed loss (ties count)."""
    return int(loss2 <= min(loss0, loss1))


class ReplayRecord(BaseModel):
    """
    Counterfactual evaluation of one sample under all three modes.

    Attributes:
        node_id: node of the sample
        slot: decision slot
        features: screening features
        raw_score: logistic routing score, once screening weights exist
        calibrated_score: alpha * raw_score
        loss0: loss of the expert alone
        loss1: loss of the uniform expert/small fusion
        loss2: loss of the uniform expert/small/cloud fusion
        branch_losses: loss of each branch alone, ordered (e, s, c)
        oracle_label: 1 iff loss2 <= min(loss0, loss1)
        cloud_fallback: the cloud branch had no eligible case
    """

    model_config = ConfigDict(frozen=True)

    node_id: str
    slot: int
    features: ScreeningFeatures
    raw_score: Optional[float] = None
    calibrated_score: Optional[float] = None
    loss0: float = Field(ge=0)
    loss1: float = Field(ge=0)
    loss2: float = Field(ge=0)
    branch_losses: tuple[float, float, float]
    oracle_label: int
    cloud_fallback: bool = False

    @model_validator(mode="after")
    def check_label(self) -> ReplayRecord:
        if self.oracle_label != oracle_label(self.loss0, self.loss1, self.loss2):
            raise ValueError("oracle label disagrees with the replayed losses")
        return self

    @property
    def losses(self) -> tuple[float, float, float]:
        return self.loss0, self.loss1, self.loss2


def build_replay_set(
    samples: Sequence[Sample],
    suite: BranchSuite,
    encoder: QueryEncoder,
    ood_ref: OodReference,
    scale: np.ndarray,
    loss: LossSpec = DEFAULT_LOSS,
    weights: Optional[ScreeningWeights] = None,
) -> list[ReplayRecord]:
    """
    Replays every sample through all branches (cloud retrieval leakage-filtered at the
    sample's slot) and records per-mode losses under uniform fusion.

    Args:
        samples: samples to replay
        suite: trained branches bound to the training case base
        encoder: query encoder for the OOD feature
        ood_ref: OOD reference of the training keys
        scale: covariate scale for the mutation feature
        loss: evaluation loss
        weights: when given, records also carry raw and calibrated scores
    """
    records: list[ReplayRecord] = []
    chunks = range(0, len(samples), REPLAY_CHUNK)
    quiet = log.getEffectiveLevel() > logging.INFO
    for lo in tqdm(chunks, desc="replay", disable=quiet):
        chunk = samples[lo : lo + REPLAY_CHUNK]
        windows = [s.window for s in chunk]
        expert = suite.expert.predict_many(windows)
        ensembles = suite.small.ensemble_many(windows)
        small = ensembles.mean(axis=0)
        cloud, fallback = suite.cloud.predict_many_flagged(windows)
        keys = encoder.encode_matrix(np.vstack([w.features for w in windows]))
        features = compute_features_many(
            windows, expert, ensembles, keys, ood_ref, scale
        )
        raw = weights.raw_scores(features) if weights is not None else None
        for i, s in enumerate(chunk):
            y = s.target
            e, sm, c = expert[i], small[i], cloud[i]
            loss0 = eval_loss(y, e, loss)
            loss1 = eval_loss(y, (e + sm) / 2.0, loss)
            loss2 = eval_loss(y, (e + sm + c) / 3.0, loss)
            records.append(
                ReplayRecord(
                    node_id=s.node_id,
                    slot=s.slot,
                    features=ScreeningFeatures.from_numpy(features[i]),
                    raw_score=None if raw is None else float(raw[i]),
                    calibrated_score=None
                    if raw is None
                    else weights.calibrate(float(raw[i])),  # type: ignore[union-attr]
                    loss0=loss0,
                    loss1=loss1,
                    loss2=loss2,
                    branch_losses=(loss0, eval_loss(y, sm, loss), eval_loss(y, c, loss)),
                    oracle_label=oracle_label(loss0, loss1, loss2),
                    cloud_fallback=bool(fallback[i]),
                )
            )
    positives = sum(r.oracle_label for r in records)
    log.info("replayed %d samples, %d cloud-positive", len(records), positives)
    return records


def score_replay(
    records: Sequence[ReplayRecord], weights: ScreeningWeights
) -> list[ReplayRecord]:
    """Attaches raw and calibrated routing scores to replay records."""
    if not records:
        return []
    raw = weights.raw_scores(np.vstack([r.features.numpy for r in records]))
    return [
        r.model_copy(
            update={
                "raw_score": float(s),
                "calibrated_score": weights.calibrate(float(s)),
            }
        )
        for r, s in zip(records, raw)
    ]


class StepFunction(BaseModel):
    """
    Right-continuous nondecreasing step function: value `values[j]` on
    [breakpoints[j], breakpoints[j+1]), extended by `values[0]` to the left.

    Attributes:
        breakpoints: strictly increasing
        values: nondecreasing, one per breakpoint
    """

    model_config = ConfigDict(frozen=True)

    breakpoints: tuple[float, ...]
    values: tuple[float, ...]

    @field_validator("breakpoints", "values", mode="before")
    @classmethod
    def to_tuple(cls, v: object) -> tuple[float, ...]:
        return tuple(float(x) for x in np.asarray(v, dtype=float).ravel())

    @model_validator(mode="after")
    def check_monotone(self) -> StepFunction:
        if not self.breakpoints or len(self.breakpoints) != len(self.values):
            raise ValueError("need one value per breakpoint and at least one of each")
        if np.any(np.diff(self.breakpoints) <= 0):
            raise ValueError("breakpoints must be strictly increasing")
        if np.any(np.diff(self.values) < -1e-12):
            raise ValueError("step values must be nondecreasing")
        return self

    @classmethod
    def constant(cls, value: float = 0.0) -> StepFunction:
        return cls(breakpoints=(0.0,), values=(value,))

    def evaluate_many(self, s: np.ndarray) -> np.ndarray:
        idx = np.searchsorted(self.breakpoints, s, side="right") - 1
        return np.asarray(self.values)[np.clip(idx, 0, None)]

    def __call__(self, s: float) -> float:
        return float(self.evaluate_many(np.asarray([s]))[0])


def fit_isotonic(
    xs: Sequence[float], ys: Sequence[float], weights: Optional[Sequence[float]] = None
) -> StepFunction:
    """
    Weighted least-squares nondecreasing fit (pool-adjacent-violators). Tied x values
    are pooled by weighted mean first.

    Raises:
        CalibrationError: on empty input
    """
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    w = np.ones_like(x) if weights is None else np.asarray(weights, dtype=float)
    if x.size == 0:
        raise CalibrationError("cannot fit an isotonic curve to no points")
    if not (len(x) == len(y) == len(w)):
        raise ValueError("xs, ys and weights differ in length")
    if np.any(np.diff(x) < 0):
        raise ValueError("xs must be sorted ascending")
    if np.any(w <= 0):
        raise ValueError("weights must be positive")
    ux, inverse = np.unique(x, return_inverse=True)
    wsum = np.bincount(inverse, weights=w)
    ybar = np.bincount(inverse, weights=w * y) / wsum
    fitted = np.maximum.accumulate(
        isotonic_regression(ybar, sample_weight=wsum, increasing=True)
    )
    # one breakpoint per pooled block
    keep = np.r_[True, np.diff(fitted) != 0]
    return StepFunction(breakpoints=ux[keep], values=fitted[keep])


class NodeGains(BaseModel):
    """
    Attributes:
        g1: expected loss reduction of edge fusion over the expert
        g2: expected loss reduction of cloud-assisted over edge fusion
    """

    model_config = ConfigDict(frozen=True)

    g1: StepFunction
    g2: StepFunction

    @classmethod
    def zero(cls) -> NodeGains:
        return cls(g1=StepFunction.constant(), g2=StepFunction.constant())


class GainCurves(BaseModel):
    """
    Attributes:
        pooled: gains fit on all replay records
        nodes: per-node gains for nodes with at least `m_min` records
        s_max: upper end of the calibrated-score axis
    """

    model_config = ConfigDict(frozen=True)

    pooled: NodeGains
    nodes: dict[str, NodeGains] = Field(default_factory=dict)
    s_max: float = Field(1.0, gt=0)

    def for_node(self, node_id: str) -> NodeGains:
        return self.nodes.get(node_id, self.pooled)


def _fit_gains(records: Sequence[ReplayRecord]) -> NodeGains:
    ordered = sorted(
        records, key=lambda r: r.calibrated_score  # type: ignore[arg-type, return-value]
    )
    xs = [r.calibrated_score for r in ordered]
    g1 = fit_isotonic(xs, [r.loss0 - r.loss1 for r in ordered])  # type: ignore[arg-type]
    g2 = fit_isotonic(xs, [r.loss1 - r.loss2 for r in ordered])  # type: ignore[arg-type]
    return NodeGains(g1=g1, g2=g2)


def fit_gain_curves(
    records: Sequence[ReplayRecord],
    per_node: bool = True,
    m_min: int = DEFAULT_M_MIN,
    s_max: float = 1.0,
) -> GainCurves:
    """
    Isotonic gain curves over the calibrated score: g1 from loss0 - loss1 and g2 from
    loss1 - loss2. Nodes with fewer than `m_min` records use the pooled curves.
    """
    if not records:
        raise CalibrationError("gain curves need a nonempty replay set")
    if any(r.calibrated_score is None for r in records):
        raise CalibrationError("replay records have not been scored")
    nodes = {}
    if per_node:
        by_node: dict[str, list[ReplayRecord]] = {}
        for r in records:
            by_node.setdefault(r.node_id, []).append(r)
        nodes = {n: _fit_gains(rs) for n, rs in by_node.items() if len(rs) >= m_min}
    return GainCurves(pooled=_fit_gains(records), nodes=nodes, s_max=s_max)


def _cell(node_id: str, mode: int) -> str:
    return f"{node_id}|{int(mode)}"


class ExecutedModeCalibrator(BaseModel):
    """
    Binned running means of realized loss per (node, mode) over the calibrated-score
    axis. Mutated in place by `update`.

    Attributes:
        b_bins: number of equal-width bins on [0, s_max]
        s_max: upper end of the calibrated-score axis
        means: running mean per bin, keyed "node|mode"
        counts: observations per bin, keyed "node|mode"
    """

    b_bins: int = Field(DEFAULT_B_BINS, ge=1)
    s_max: float = Field(1.0, gt=0)
    means: dict[str, list[float]] = Field(default_factory=dict)
    counts: dict[str, list[int]] = Field(default_factory=dict)

    def bin_index(self, calibrated_score: float) -> int:
        idx = int(calibrated_score / self.s_max * self.b_bins)
        return min(max(idx, 0), self.b_bins - 1)

    def update(
        self, node_id: str, mode: int, calibrated_score: float, realized_loss: float
    ) -> ExecutedModeCalibrator:
        key = _cell(node_id, mode)
        means = self.means.setdefault(key, [0.0] * self.b_bins)
        counts = self.counts.setdefault(key, [0] * self.b_bins)
        b = self.bin_index(calibrated_score)
        counts[b] += 1
        means[b] += (realized_loss - means[b]) / counts[b]
        return self

    def _cell_mean(self, key: str) -> Optional[float]:
        counts = np.asarray(self.counts.get(key, []), dtype=float)
        if counts.sum() == 0:
            return None
        return float(np.asarray(self.means[key]) @ counts / counts.sum())

    def mean(self, node_id: str, mode: int, calibrated_score: float) -> float:
        """
        Bin mean at the score; falls back to the (node, mode) mean, then the mode
        mean pooled over nodes, then 0.
        """
        key = _cell(node_id, mode)
        if key in self.counts:
            b = self.bin_index(calibrated_score)
            if self.counts[key][b] > 0:
                return self.means[key][b]
            node_mean = self._cell_mean(key)
            if node_mean is not None:
                return node_mean
        suffix = f"|{int(mode)}"
        total, weight = 0.0, 0
        for k, counts in self.counts.items():
            if k.endswith(suffix):
                n = sum(counts)
                if n:
                    total += self._cell_mean(k) * n  # type: ignore[operator]
                    weight += n
        return total / weight if weight else 0.0

    @classmethod
    def from_replay(
        cls,
        records: Sequence[ReplayRecord],
        b_bins: int = DEFAULT_B_BINS,
        s_max: float = 1.0,
    ) -> ExecutedModeCalibrator:
        """Calibrator seeded with the replayed losses of every mode."""
        calibrator = cls(b_bins=b_bins, s_max=s_max)
        for r in records:
            for mode, loss in zip(Mode, r.losses):
                calibrator.update(r.node_id, mode, r.calibrated_score or 0.0, loss)
        return calibrator


def surrogate_losses(
    calibrator: ExecutedModeCalibrator,
    gains: GainCurves,
    node_id: str,
    calibrated_score: float,
) -> tuple[float, float, float]:
    """Predicted losses of modes 0, 1, 2, clamped at zero."""
    node = gains.for_node(node_id)
    l0 = calibrator.mean(node_id, Mode.EXPERT_ONLY, calibrated_score)
    l1 = l0 - node.g1(calibrated_score)
    l2 = l1 - node.g2(calibrated_score)
    return max(l0, 0.0), max(l1, 0.0), max(l2, 0.0)


def calibrator_update(
    calibrator: ExecutedModeCalibrator,
    node_id: str,
    mode: int,
    calibrated_score: float,
    realized_loss: float,
) -> ExecutedModeCalibrator:
    return calibrator.update(node_id, mode, calibrated_score, realized_loss)
