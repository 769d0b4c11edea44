"""
Slot-synchronous simulation of a deployment over the evaluation split.

Every slot starts by revealing the targets that have matured, which updates the
fusion gradients, the executed-mode calibrator and (optionally) the run's own case
base. Then each node is screened, the policy picks modes, only the branches of the
executed modes run, forecasts are fused and emitted, latency and communication are
accounted at the realized cloud load, and the virtual queues take one global step.
"""

from __future__ import annotations

import json
import logging
from typing import Mapping, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from tqdm import tqdm

from edgecast.bundle import CalibrationBundle
from edgecast.calibration import surrogate_losses
from edgecast.core import (
    DEFAULT_LOSS,
    Branch,
    HorizonVector,
    LossSpec,
    Mode,
    SimplexWeights,
)
from edgecast.data import CaseBase, Sample
from edgecast.exceptions import ConfigError
from edgecast.fusion import (
    CumulativeGradient,
    FusionConfig,
    FusionHistory,
    PendingForecast,
    RegretReport,
    RevealBuffer,
    fuse_and_emit,
    fusion_weights,
    regret_report,
    reveal_and_update,
)
from edgecast.predictors.model_set import ModelSet
from edgecast.queues import (
    Budgets,
    QueueState,
    StabilityReport,
    lyapunov_value,
    stability_report,
    update_queues,
)
from edgecast.router import (
    ControllerConfig,
    MeanFieldRouter,
    RoutingDecision,
    mode_latency,
)
from edgecast.screening import ScoreCdf, ScreeningConfig, compute_features_many
from edgecast.simulation.metrics import (
    DEFAULT_MUTATION_QUANTILE,
    DEFAULT_OOD_QUANTILE,
    DEFAULT_RAMP_QUANTILE,
    PropertyCheckConfig,
)
from edgecast.simulation.policies import Policy, fixed_modes, static_threshold_modes
from edgecast.simulation.trace import SlotRecord, SlotSummary, SlotTrace

log = logging.getLogger(__name__)


class EvaluationConfig(BaseModel):
    """
    Evaluation settings.

    Attributes:
        loss: evaluation and learning loss
        ramp_quantile: training quantile defining a ramp
        ood_quantile: validation quantile of the OOD feature defining OOD rows
        mutation_quantile: training quantile of the mutation feature defining a
            strong weather mutation
        insert_revealed_cases: add revealed evaluation windows to the run's case base
        record_candidates: keep per-branch candidates in the trace
        record_fusion_history: keep fused rounds and report per-(node, mode) regret
        str_threshold: static threshold of the STR baseline; None uses the
            validation-tuned value from the bundle
        property_checks: constants of the retrieval-gap diagnostic
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    loss: LossSpec = DEFAULT_LOSS
    ramp_quantile: float = Field(DEFAULT_RAMP_QUANTILE, gt=0, lt=1)
    ood_quantile: float = Field(DEFAULT_OOD_QUANTILE, gt=0, lt=1)
    mutation_quantile: float = Field(DEFAULT_MUTATION_QUANTILE, gt=0, lt=1)
    insert_revealed_cases: bool = True
    record_candidates: bool = False
    record_fusion_history: bool = False
    str_threshold: Optional[float] = Field(None, ge=0)
    property_checks: PropertyCheckConfig = PropertyCheckConfig()


class SimulationResult(BaseModel):
    """
    Attributes:
        policy: the policy that was run
        trace: the slot trace
        budgets: budgets with `c_max` resolved
        stability: queue stability diagnostics
        regret: per "node|mode" regret reports, when fusion history was recorded
        retrieval_count: case-base searches issued by the cloud branch
        fallback_count: cloud requests that fell back to the small model
        missing_targets: reveal attempts without a target
        max_load_gap: largest |rho - rho_star| over router slots
        str_threshold: threshold used by the STR baseline
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    policy: Policy
    trace: SlotTrace
    budgets: Budgets
    stability: StabilityReport
    regret: dict[str, RegretReport] = Field(default_factory=dict)
    retrieval_count: int = 0
    fallback_count: int = 0
    missing_targets: int = 0
    max_load_gap: float = 0.0
    str_threshold: Optional[float] = None


def comm_cost(mode: Mode, kappa: float) -> float:
    """Communication volume of one node-slot: kappa for cloud-assisted, else 0."""
    return kappa if mode == Mode.CLOUD_ASSISTED else 0.0


def _check_consistency(
    bundle: CalibrationBundle, models: ModelSet, samples: Sequence[Sample]
) -> None:
    if bundle.horizon != models.horizon:
        raise ConfigError(
            f"bundle horizon {bundle.horizon} differs from model horizon "
            f"{models.horizon}"
        )
    for s in samples:
        if len(s.target) != models.horizon:
            raise ConfigError(
                f"sample horizon {len(s.target)} differs from model horizon "
                f"{models.horizon}"
            )
        if s.window.features.size != models.layout.dim:
            raise ConfigError(
                f"window has {s.window.features.size} features, models expect "
                f"{models.layout.dim}"
            )


def run_simulation(
    bundle: CalibrationBundle,
    models: ModelSet,
    case_base: CaseBase,
    samples: Sequence[Sample],
    policy: Policy,
    controller: ControllerConfig = ControllerConfig(),
    fusion: FusionConfig = FusionConfig(),
    screening: ScreeningConfig = ScreeningConfig(),
    evaluation: EvaluationConfig = EvaluationConfig(),
    oracle_labels: Optional[Mapping[tuple[str, int], int]] = None,
) -> SimulationResult:
    """
    Runs one policy over the evaluation samples.

    Args:
        bundle: calibration artifacts fit before the evaluation split
        models: trained branches
        case_base: training case base; the run works on its own copy
        samples: evaluation samples of every node
        policy: routing policy
        controller: router, budgets, latency and communication settings
        fusion: fusion settings
        screening: score CDF settings
        evaluation: evaluation settings
        oracle_labels: replayed oracle labels by (node, slot), copied into the trace

    Raises:
        ConfigError: when bundle, models and samples disagree on dimensions
    """
    _check_consistency(bundle, models, samples)
    case_base = case_base.copy()
    suite = models.suite(case_base)
    priors = {**bundle.fusion_priors, **fusion.priors}
    fusion = fusion.model_copy(update={"priors": priors})

    by_slot: dict[int, list[Sample]] = {}
    for s in samples:
        by_slot.setdefault(s.slot, []).append(s)
    for group in by_slot.values():
        group.sort(key=lambda s: s.node_id)
    slots = sorted(by_slot)
    nodes = sorted({s.node_id for s in samples})
    sample_at = {(s.node_id, s.slot): s for s in samples}
    targets = {k: s.target for k, s in sample_at.items()}

    budgets = controller.resolved_budgets(nodes)
    cdfs = {n: ScoreCdf(screening.gamma, screening.w_cdf) for n in nodes}
    router = MeanFieldRouter(controller, bundle.gains) if policy == Policy.CAPE else None
    threshold = (
        evaluation.str_threshold
        if evaluation.str_threshold is not None
        else bundle.str_threshold
    )
    gamma = CumulativeGradient()
    calibrator = bundle.calibrator.model_copy(deep=True)
    buffer = RevealBuffer()
    history = FusionHistory() if evaluation.record_fusion_history else None
    scale = np.asarray(bundle.weather_scale)

    trace = SlotTrace()
    row_of: dict[tuple[str, int], int] = {}
    forecasts: dict[tuple[str, int], np.ndarray] = {}
    summary_of: dict[int, int] = {}
    unrevealed: dict[int, int] = {}
    slot_loss: dict[int, float] = {}
    queues = QueueState()
    states: list[QueueState] = []
    arrivals: list[tuple[float, float, float]] = []
    max_gap = 0.0

    def reveal(current: int) -> None:
        realized = reveal_and_update(
            buffer, gamma, calibrator, current, targets, evaluation.loss,
            policy.learns_weights, history,
        )
        for r in realized:
            key = (r.node_id, r.slot)
            sample = sample_at[key]
            err = forecasts.pop(key) - sample.target.numpy
            row = trace.records[row_of[key]]
            row.revealed = True
            row.loss = r.loss
            row.abs_error = float(np.mean(np.abs(err)))
            row.sq_error = float(np.mean(err**2))
            if evaluation.insert_revealed_cases:
                case_base.insert(
                    models.encoder.encode(sample.window),
                    sample.target.numpy,
                    sample.reveal_slot,
                    sample.node_id,
                )
            unrevealed[r.slot] -= 1
            slot_loss[r.slot] += r.loss
            if unrevealed[r.slot] == 0:
                summary = trace.slots[summary_of[r.slot]]
                summary.avg_loss = slot_loss[r.slot] / summary.n_nodes

    quiet = log.getEffectiveLevel() > logging.INFO
    progress = tqdm(slots, desc=f"simulate {policy.value}", disable=quiet)
    for t in progress:
        reveal(t)
        group = by_slot[t]
        ids = [s.node_id for s in group]
        windows = [s.window for s in group]

        expert = suite.expert.predict_many(windows)
        ensembles = suite.small.ensemble_many(windows)
        small = ensembles.mean(axis=0)
        keys = models.encoder.encode_matrix(np.vstack([w.features for w in windows]))
        features = compute_features_many(
            windows, expert, ensembles, keys, bundle.ood, scale
        )
        raw = bundle.screening.raw_scores(features)
        calibrated = bundle.screening.alpha * raw
        scores = {n: float(c) for n, c in zip(ids, calibrated)}

        decision: Optional[RoutingDecision] = None
        if router is not None:
            decision = router.route(scores, queues, {n: cdfs[n] for n in ids})
            modes = decision.modes()
        elif policy == Policy.STR:
            modes = static_threshold_modes(scores, threshold)
        else:
            modes = fixed_modes(policy, ids)

        cloud_rows = [i for i, n in enumerate(ids) if modes[n] == Mode.CLOUD_ASSISTED]
        cloud_out = np.zeros((0, models.horizon))
        fallback = np.zeros(0, dtype=bool)
        if cloud_rows:
            cloud_out, fallback = suite.cloud.predict_many_flagged(
                [windows[i] for i in cloud_rows]
            )
        cloud_at = {i: j for j, i in enumerate(cloud_rows)}
        rho = len(cloud_rows) / len(ids)
        if decision is not None:
            gap = abs(rho - decision.rho_star)
            max_gap = max(max_gap, gap)
            log.debug(
                "slot %d: realized load %.3f, estimate %.3f", t, rho, decision.rho_star
            )

        latencies, comms = [], []
        for i, (node_id, sample) in enumerate(zip(ids, group)):
            mode = modes[node_id]
            candidates = {Branch.expert: expert[i]}
            if mode >= Mode.EDGE_FUSION:
                candidates[Branch.small] = small[i]
            if mode == Mode.CLOUD_ASSISTED:
                candidates[Branch.cloud] = cloud_out[cloud_at[i]]
            weights: Optional[SimplexWeights] = None
            if mode != Mode.EXPERT_ONLY:
                weights = (
                    SimplexWeights.one_hot(mode.branches, Branch.cloud)
                    if policy == Policy.CO
                    else fusion_weights(fusion, gamma, node_id, mode)
                )
            prediction = fuse_and_emit(mode, candidates, weights)
            latency = mode_latency(controller.latency, mode, rho, node_id)
            comm = comm_cost(mode, controller.kappa_for(node_id))
            latencies.append(latency)
            comms.append(comm)

            score = scores[node_id]
            vectors = {b: HorizonVector.from_numpy(v) for b, v in candidates.items()}
            buffer.push(
                PendingForecast(
                    node_id=node_id,
                    slot=t,
                    mode=mode,
                    candidates=vectors,
                    weights=weights,
                    prediction=prediction,
                    calibrated_score=score,
                    reveal_slot=sample.reveal_slot,
                )
            )
            forecasts[(node_id, t)] = prediction.numpy
            node_decision = decision.nodes[node_id] if decision is not None else None
            w = weights.as_dict() if weights is not None else {}
            f = features[i]
            fell_back = bool(fallback[cloud_at[i]]) if i in cloud_at else False
            predicted = surrogate_losses(calibrator, bundle.gains, node_id, score)[mode]
            recorded = (
                json.dumps({b.value: list(v.values) for b, v in vectors.items()})
                if evaluation.record_candidates
                else None
            )
            label = oracle_labels.get((node_id, t)) if oracle_labels else None
            row_of[(node_id, t)] = len(trace.records)
            trace.records.append(
                SlotRecord(
                    slot=t,
                    timestamp=sample.window.timestamp,
                    node_id=node_id,
                    mode=int(mode),
                    raw_score=float(raw[i]),
                    calibrated_score=score,
                    u=float(f[0]),
                    o=float(f[1]),
                    mu=float(f[2]),
                    d=float(f[3]),
                    theta_c=node_decision.theta_c if node_decision else None,
                    j0=node_decision.j0 if node_decision else None,
                    j1=node_decision.j1 if node_decision else None,
                    j2=node_decision.j2 if node_decision else None,
                    w_e=w.get(Branch.expert.value),
                    w_s=w.get(Branch.small.value),
                    w_c=w.get(Branch.cloud.value),
                    cloud_fallback=fell_back,
                    predicted_loss=predicted,
                    latency_ms=latency,
                    comm_cost=comm,
                    capacity=sample.capacity,
                    forecast=json.dumps(list(prediction.values)),
                    candidates=recorded,
                    hard=bundle.labeler.is_hard(sample, float(f[2])),
                    ood=bundle.labeler.is_ood(float(f[1])),
                    oracle_label=label,
                )
            )
            cdfs[node_id].update(score)

        avg_latency = float(np.mean(latencies))
        avg_comm = float(np.mean(comms))
        queues = update_queues(queues, avg_latency, avg_comm, rho, budgets)
        states.append(queues)
        arrivals.append((avg_latency, avg_comm, rho))
        unrevealed[t] = len(ids)
        slot_loss[t] = 0.0
        summary_of[t] = len(trace.slots)
        trace.slots.append(
            SlotSummary(
                slot=t,
                n_nodes=len(ids),
                rho=rho,
                rho_star=decision.rho_star if decision is not None else None,
                fp_residual=decision.fp_residual if decision is not None else None,
                avg_latency=avg_latency,
                avg_comm=avg_comm,
                q_tau=queues.q_tau,
                q_c=queues.q_c,
                q_rho=queues.q_rho,
                lyapunov=lyapunov_value(queues),
            )
        )

    if slots:
        reveal(slots[-1] + 1)

    regret = {}
    if history is not None:
        for (node_id, mode), rounds in sorted(history.rounds.items()):
            regret[f"{node_id}|{int(mode)}"] = regret_report(rounds, evaluation.loss)

    stability = stability_report(states, arrivals, budgets)
    log.info(
        "%s: %d slots, %d nodes, cloud share %.3f, %d retrievals, %d fallbacks",
        policy.value,
        len(slots),
        len(nodes),
        float(np.mean([a[2] for a in arrivals])) if arrivals else 0.0,
        case_base.search_count,
        suite.cloud.fallback_count,
    )
    return SimulationResult(
        policy=policy,
        trace=trace,
        budgets=budgets,
        stability=stability,
        regret=regret,
        retrieval_count=case_base.search_count,
        fallback_count=suite.cloud.fallback_count,
        missing_targets=buffer.missing_targets,
        max_load_gap=max_gap,
        str_threshold=threshold if policy == Policy.STR else None,
    )
