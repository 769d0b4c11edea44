"""
Evaluation metrics of a simulation run, computed from its trace alone.

Errors are on the capacity-normalized domain, so full scale is 1 and `%FS` is the
normalized error times 100. Only rows whose targets were revealed inside the run
enter the loss metrics.
"""

from __future__ import annotations

import logging
from typing import Mapping, Optional, Sequence

import numpy as np
from pydantic import BaseModel, Field
from sklearn.metrics import average_precision_score, roc_auc_score

from edgecast.data import Sample
from edgecast.queues import QUEUE_NAMES
from edgecast.simulation.trace import SlotTrace

log = logging.getLogger(__name__)

DEFAULT_RAMP_QUANTILE: float = 0.95
DEFAULT_OOD_QUANTILE: float = 0.90
DEFAULT_MUTATION_QUANTILE: float = 0.95
GAP_TOLERANCE: float = 1e-9
TERCILES: tuple[str, ...] = ("low", "mid", "high")


def _ramp(last_lag: float, sample: Sample) -> float:
    path = np.r_[last_lag, sample.target.numpy]
    return float(np.max(np.abs(np.diff(path))))


class HardSubsetLabeler(BaseModel):
    """
    Flags hard and OOD evaluation samples with thresholds fit on training and
    validation data only.

    Attributes:
        last_lag: position of the most recent power lag in the window features
        ramp_threshold: training quantile of ramp magnitudes
        mutation_threshold: training quantile of the weather mutation feature
        ood_threshold: validation quantile of the OOD feature
    """

    last_lag: int = Field(ge=0)
    ramp_threshold: float
    mutation_threshold: float
    ood_threshold: float

    @classmethod
    def fit(
        cls,
        train_samples: Sequence[Sample],
        train_mutation: Sequence[float],
        validation_ood: Sequence[float],
        last_lag: int,
        ramp_quantile: float = DEFAULT_RAMP_QUANTILE,
        mutation_quantile: float = DEFAULT_MUTATION_QUANTILE,
        ood_quantile: float = DEFAULT_OOD_QUANTILE,
    ) -> HardSubsetLabeler:
        ramps = [_ramp(s.window.features[last_lag], s) for s in train_samples]
        return cls(
            last_lag=last_lag,
            ramp_threshold=_quantile(ramps, ramp_quantile),
            mutation_threshold=_quantile(train_mutation, mutation_quantile),
            ood_threshold=_quantile(validation_ood, ood_quantile),
        )

    def ramp(self, sample: Sample) -> float:
        return _ramp(sample.window.features[self.last_lag], sample)

    def is_hard(self, sample: Sample, mutation: float) -> bool:
        if self.ramp(sample) >= self.ramp_threshold:
            return True
        return mutation >= self.mutation_threshold

    def is_ood(self, ood_score: float) -> bool:
        return ood_score >= self.ood_threshold


def _quantile(values: Sequence[float], q: float) -> float:
    if len(values) == 0:
        log.warning("no reference values for a %.2f quantile; threshold set to inf", q)
        return float("inf")
    return float(np.quantile(np.asarray(values, dtype=float), q))


def auroc(labels: Sequence[int], scores: Sequence[float]) -> Optional[float]:
    """Rank statistic with half credit for ties; None when one class is absent."""
    y = np.asarray(labels)
    if y.size == 0 or y.min() == y.max():
        log.warning("AUROC undefined: labels contain a single class")
        return None
    return float(roc_auc_score(y, np.asarray(scores, dtype=float)))


def auprc(labels: Sequence[int], scores: Sequence[float]) -> Optional[float]:
    """Step-wise precision-recall area (average precision); None without positives."""
    y = np.asarray(labels)
    if y.size == 0 or y.max() == 0:
        log.warning("AUPRC undefined: no positive labels")
        return None
    return float(average_precision_score(y, np.asarray(scores, dtype=float)))


class MetricReport(BaseModel):
    """
    Attributes:
        nmae: mean absolute error, %FS
        nrmse: root mean squared error, %FS
        mae: mean absolute error in capacity units
        rmse: root mean squared error in capacity units
        auroc: routing-score AUROC against oracle labels
        auprc: routing-score AUPRC against oracle labels
        ree: nMAE on the hard subset, %FS
        dg: nMAE on OOD rows over nMAE on in-distribution rows; None if undefined
        avg_loss: mean realized loss
        avg_latency: mean latency per node-slot (ms)
        avg_comm: mean communication volume per node-slot
        cloud_usage: mean realized cloud-request ratio
        avg_backlog: time-averaged total queue backlog
        q_tau_rate: latency queue Q(T)/T
        q_c_rate: communication queue Q(T)/T
        q_rho_rate: cloud-usage queue Q(T)/T
        n_rows: node-slots in the trace
        n_revealed: node-slots whose target was revealed
        action_profile: mode frequencies (0, 1, 2) per calibrated-score tercile
    """

    nmae: Optional[float] = Field(None, ge=0)
    nrmse: Optional[float] = Field(None, ge=0)
    mae: Optional[float] = Field(None, ge=0)
    rmse: Optional[float] = Field(None, ge=0)
    auroc: Optional[float] = Field(None, ge=0, le=1)
    auprc: Optional[float] = Field(None, ge=0, le=1)
    ree: Optional[float] = Field(None, ge=0)
    dg: Optional[float] = Field(None, gt=0)
    avg_loss: Optional[float] = None
    avg_latency: float = 0.0
    avg_comm: float = 0.0
    cloud_usage: float = 0.0
    avg_backlog: float = 0.0
    q_tau_rate: float = 0.0
    q_c_rate: float = 0.0
    q_rho_rate: float = 0.0
    n_rows: int = 0
    n_revealed: int = 0
    action_profile: dict[str, list[float]] = Field(default_factory=dict)

    def scalars(self) -> dict[str, Optional[float]]:
        """Flat metric columns, as written to sweep tables."""
        return self.model_dump(exclude={"action_profile"})


def _nmae(abs_errors: np.ndarray) -> Optional[float]:
    return float(abs_errors.mean() * 100.0) if abs_errors.size else None


def degradation_ratio(
    ood_error: Optional[float], id_error: Optional[float]
) -> Optional[float]:
    """OOD over in-distribution error; None for an empty partition or zero ID error."""
    if ood_error is None or id_error is None:
        log.warning("DG undefined: empty OOD or in-distribution partition")
        return None
    if id_error == 0:
        log.warning("DG undefined: zero in-distribution error")
        return None
    ratio = ood_error / id_error
    return ratio if ratio > 0 else None


def action_profile(scores: np.ndarray, modes: np.ndarray) -> dict[str, list[float]]:
    """Frequency of each mode within the low, middle and high thirds of the scores."""
    if scores.size == 0:
        return {}
    cuts = np.quantile(scores, [1.0 / 3.0, 2.0 / 3.0])
    bucket = np.searchsorted(cuts, scores, side="right")
    profile = {}
    for b, name in enumerate(TERCILES):
        m = modes[bucket == b]
        profile[name] = (
            [float(np.mean(m == a)) for a in range(3)] if m.size else [0.0, 0.0, 0.0]
        )
    return profile


def compute_metrics(
    trace: SlotTrace,
    hard_labels: Optional[Mapping[tuple[str, int], bool]] = None,
    oracle_labels: Optional[Mapping[tuple[str, int], int]] = None,
) -> MetricReport:
    """
    Metric report of a run.

    Args:
        trace: the run's slot trace
        hard_labels: hard-subset flags by (node, slot); defaults to the trace column
        oracle_labels: replayed oracle labels by (node, slot); defaults to the trace
            column
    """
    frame = trace.records_frame()
    report = MetricReport(n_rows=len(frame))
    if frame.empty:
        return report
    key = list(zip(frame["node_id"], frame["slot"]))
    if hard_labels is not None:
        frame["hard"] = [bool(hard_labels.get(k, False)) for k in key]
    if oracle_labels is not None:
        frame["oracle_label"] = [oracle_labels.get(k) for k in key]

    revealed = frame[frame["revealed"].astype(bool)]
    abs_err = revealed["abs_error"].to_numpy(dtype=float)
    sq_err = revealed["sq_error"].to_numpy(dtype=float)
    cap = revealed["capacity"].to_numpy(dtype=float)
    if abs_err.size:
        report.nmae = _nmae(abs_err)
        report.nrmse = float(np.sqrt(sq_err.mean()) * 100.0)
        report.mae = float((abs_err * cap).mean())
        report.rmse = float(np.sqrt((sq_err * cap**2).mean()))
        report.avg_loss = float(revealed["loss"].to_numpy(dtype=float).mean())
        hard = revealed["hard"].to_numpy(dtype=bool)
        report.ree = _nmae(abs_err[hard])
        if not hard.any():
            log.warning("REE undefined: no hard samples among revealed rows")
        ood = revealed["ood"].to_numpy(dtype=bool)
        report.dg = degradation_ratio(_nmae(abs_err[ood]), _nmae(abs_err[~ood]))
    report.n_revealed = int(abs_err.size)

    labelled = frame[frame["oracle_label"].notna()]
    if not labelled.empty:
        labels = labelled["oracle_label"].to_numpy(dtype=float).astype(int)
        scores = labelled["raw_score"].to_numpy(dtype=float)
        report.auroc = auroc(labels, scores)
        report.auprc = auprc(labels, scores)

    report.avg_latency = float(frame["latency_ms"].mean())
    report.avg_comm = float(frame["comm_cost"].mean())
    report.action_profile = action_profile(
        frame["calibrated_score"].to_numpy(dtype=float),
        frame["mode"].to_numpy(dtype=int),
    )

    slots = trace.slots_frame()
    if not slots.empty:
        n = len(slots)
        report.cloud_usage = float(slots["rho"].mean())
        q = slots[[f"q_{g}" for g in QUEUE_NAMES]].to_numpy(dtype=float)
        report.avg_backlog = float(q.sum(axis=1).mean())
        rates = [float(x) for x in q[-1] / n]
        report.q_tau_rate, report.q_c_rate, report.q_rho_rate = rates
    return report


class PropertyCheckConfig(BaseModel):
    """
    Constants for the retrieval-gap diagnostic.

    Attributes:
        loss_lipschitz: Lipschitz constant of the loss in the prediction
        tolerance: slack allowed beyond the bound
    """

    loss_lipschitz: float = Field(1.0, gt=0)
    tolerance: float = Field(GAP_TOLERANCE, ge=0)


def retrieval_gap_bound(
    context: np.ndarray,
    oracle_context: np.ndarray,
    prediction_gap: float,
    context_lipschitz: float,
    config: PropertyCheckConfig = PropertyCheckConfig(),
) -> float:
    """
    Upper bound on the loss gap between the deployed cloud predictor on the retrieved
    context and the ideal predictor on the ideal context:
    `L_loss * (prediction_gap + L_context * ||context - oracle_context||)`.
    """
    distance = float(np.linalg.norm(np.asarray(context) - np.asarray(oracle_context)))
    return config.loss_lipschitz * (prediction_gap + context_lipschitz * distance)


def retrieval_gap_violations(
    losses: Sequence[float],
    oracle_losses: Sequence[float],
    contexts: np.ndarray,
    oracle_contexts: np.ndarray,
    prediction_gap: float,
    context_lipschitz: float,
    config: PropertyCheckConfig = PropertyCheckConfig(),
) -> int:
    """Number of points whose measured loss gap exceeds the bound beyond tolerance."""
    violations = 0
    for loss, oracle, z, z_star in zip(losses, oracle_losses, contexts, oracle_contexts):
        bound = retrieval_gap_bound(z, z_star, prediction_gap, context_lipschitz, config)
        if abs(loss - oracle) > bound + config.tolerance:
            violations += 1
    return violations
