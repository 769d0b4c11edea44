"""
End-to-end steps behind the CLI commands: load and split the data, prepare the
branch models and calibration bundle, and run one policy over the test split.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from edgecast.bundle import CalibrationBundle
from edgecast.calibration import (
    ExecutedModeCalibrator,
    ReplaySplit,
    build_replay_set,
    fit_gain_curves,
    score_replay,
)
from edgecast.config import DataSource, RunConfig
from edgecast.core import LossSpec
from edgecast.data import (
    CaseBase,
    FeatureLayout,
    RawSeries,
    Sample,
    build_samples,
    chronological_split,
    layout_for,
    load_capacity_csv,
    load_csv_dataset,
    synthesize_scenario,
)
from edgecast.exceptions import ConfigError
from edgecast.fusion import PriorMode, RegretReport, replay_priors
from edgecast.predictors.model_set import ModelSet, train_model_set
from edgecast.queues import Budgets, StabilityReport
from edgecast.screening import (
    OodReference,
    compute_features_many,
    fit_screening_weights,
    mutation_intensity,
    weather_scale,
)
from edgecast.simulation.engine import SimulationResult, run_simulation
from edgecast.simulation.metrics import (
    HardSubsetLabeler,
    MetricReport,
    auroc,
    compute_metrics,
)
from edgecast.simulation.policies import Policy, tune_static_threshold

log = logging.getLogger(__name__)

SUMMARY_FILE = "summary.json"
# offset of the evaluation scenario's seed from the run seed
EVAL_SEED_OFFSET = 1000


class DataSplits(BaseModel):
    """
    Attributes:
        train: training samples of every node
        validation: validation samples
        test: evaluation samples
        layout: feature layout shared by all samples
        node_ids: nodes in sorted order
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    train: list[Sample]
    validation: list[Sample]
    test: list[Sample]
    layout: FeatureLayout
    node_ids: list[str]


def load_series(config: RunConfig) -> list[RawSeries]:
    data = config.data
    if data.source == DataSource.synthetic:
        return synthesize_scenario(data.scenario, config.seed)
    paths = [*data.csv_paths, data.capacity_path]
    missing = [p for p in paths if not Path(str(p)).exists()]
    if missing:
        raise ConfigError(f"data files not found: {missing}")
    capacity = load_capacity_csv(str(data.capacity_path))
    return load_csv_dataset(data.csv_paths, capacity, data.columns).series


def _samples(series: Sequence[RawSeries], config: RunConfig) -> list[Sample]:
    samples = []
    for s in series:
        samples.extend(
            build_samples(
                s, config.model.w_lag, config.model.horizon, config.screening.w_mu
            )
        )
    return samples


def build_splits(config: RunConfig) -> DataSplits:
    """
    Chronological train / validation / test blocks. With an evaluation scenario the
    validation and test blocks come from that scenario instead.

    Raises:
        ConfigError: no series, no training samples, or scenarios with different
            covariates
    """
    series = load_series(config)
    if not series:
        raise ConfigError("the data source produced no series")
    layout = layout_for(series[0], config.model.w_lag)
    for s in series[1:]:
        if layout_for(s, config.model.w_lag) != layout:
            raise ConfigError(f"node {s.node_id} has different covariates")
    train, validation, test = chronological_split(
        _samples(series, config), config.data.split
    )

    if config.data.eval_scenario is not None:
        shifted = synthesize_scenario(
            config.data.eval_scenario, config.seed + EVAL_SEED_OFFSET
        )
        if layout_for(shifted[0], config.model.w_lag) != layout:
            raise ConfigError("evaluation scenario has different covariates")
        _, validation, test = chronological_split(
            _samples(shifted, config), config.data.split
        )
        log.info("validation and test blocks taken from the evaluation scenario")

    if not train:
        raise ConfigError("no training samples; series too short for W_lag + H")
    node_ids = sorted({s.node_id for s in [*train, *validation, *test]})
    log.info(
        "%d nodes, samples train/val/test = %d/%d/%d",
        len(node_ids), len(train), len(validation), len(test),
    )
    return DataSplits(
        train=train, validation=validation, test=test, layout=layout, node_ids=node_ids
    )


class Prepared(BaseModel):
    """
    Everything a simulation needs, fit on data before the test block.

    Attributes:
        splits: the data splits
        models: trained branches
        case_base: training case base
        bundle: calibration bundle
        oracle_labels: replayed oracle labels on the test block, by (node, slot)
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    splits: DataSplits
    models: ModelSet
    case_base: CaseBase
    bundle: CalibrationBundle
    oracle_labels: dict[tuple[str, int], int] = Field(default_factory=dict)


def _screening_features(
    samples: Sequence[Sample],
    models: ModelSet,
    case_base: CaseBase,
    ood: OodReference,
    scale: np.ndarray,
) -> np.ndarray:
    """Screening features without running the cloud branch."""
    if not samples:
        return np.zeros((0, 4))
    suite = models.suite(case_base)
    windows = [s.window for s in samples]
    expert = suite.expert.predict_many(windows)
    ensembles = suite.small.ensemble_many(windows)
    keys = models.encoder.encode_matrix(np.vstack([w.features for w in windows]))
    return compute_features_many(windows, expert, ensembles, keys, ood, scale)


def fit_bundle(
    config: RunConfig, splits: DataSplits, models: ModelSet, case_base: CaseBase
) -> CalibrationBundle:
    """Offline calibration: replay, screening fit, gains, calibrator and labeler."""
    if len(case_base) == 0:
        raise ConfigError("empty training case base")
    ood = OodReference.fit(case_base.keys, config.screening.ood_jitter)
    scale = weather_scale(splits.train, len(splits.layout.covariates))
    replay_on = (
        splits.train
        if config.calibration.replay_split == ReplaySplit.train
        else splits.validation
    )
    if not replay_on:
        raise ConfigError(f"the {config.calibration.replay_split} split is empty")

    records = build_replay_set(
        replay_on, models.suite(case_base), models.encoder, ood, scale,
        config.evaluation.loss,
    )
    features = np.vstack([r.features.numpy for r in records])
    labels = np.array([r.oracle_label for r in records])
    weights = fit_screening_weights(features, labels, config.screening, config.seed)
    records = score_replay(records, weights)
    s_max = weights.max_score

    val_features = _screening_features(splits.validation, models, case_base, ood, scale)
    val_scores = (
        weights.alpha * weights.raw_scores(val_features) if len(val_features) else []
    )
    train_mutation = [
        mutation_intensity(s.window.weather_history, scale) for s in splits.train
    ]
    labeler = HardSubsetLabeler.fit(
        splits.train,
        train_mutation,
        val_features[:, 1] if len(val_features) else [],
        splits.layout.last_lag,
        config.evaluation.ramp_quantile,
        config.evaluation.mutation_quantile,
        config.evaluation.ood_quantile,
    )
    replay_auroc = auroc(
        [r.oracle_label for r in records], [r.raw_score or 0.0 for r in records]
    )
    bundle = CalibrationBundle(
        horizon=models.horizon,
        w_lag=splits.layout.w_lag,
        seed=config.seed,
        screening=weights,
        ood=ood,
        weather_scale=[float(x) for x in scale],
        gains=fit_gain_curves(
            records, config.calibration.per_node, config.calibration.m_min, s_max
        ),
        calibrator=ExecutedModeCalibrator.from_replay(
            records, config.calibration.b_bins, s_max
        ),
        fusion_priors=(
            replay_priors(records)
            if config.fusion.prior_mode == PriorMode.inverse_replay_loss
            else {}
        ),
        labeler=labeler,
        str_threshold=tune_static_threshold(
            list(val_scores), config.controller.budgets.rho_max, s_max
        ),
        replay_split=config.calibration.replay_split,
        replay_records=len(records),
        replay_positive_rate=float(labels.mean()),
        replay_auroc=replay_auroc,
    )
    if replay_auroc is not None:
        log.info("replay AUROC of the routing score: %.4f", replay_auroc)
    return bundle


def oracle_labels(
    models: ModelSet,
    case_base: CaseBase,
    bundle: CalibrationBundle,
    samples: Sequence[Sample],
    loss: LossSpec,
) -> dict[tuple[str, int], int]:
    """Oracle routing labels from a full-branch replay over `samples`."""
    if not samples:
        return {}
    records = build_replay_set(
        samples,
        models.suite(case_base.copy()),
        models.encoder,
        bundle.ood,
        np.asarray(bundle.weather_scale),
        loss,
    )
    return {(r.node_id, r.slot): r.oracle_label for r in records}


def prepare(config: RunConfig, with_oracle: bool = False) -> Prepared:
    """Trains the branches and fits the calibration bundle, in memory."""
    splits = build_splits(config)
    models, case_base = train_model_set(
        splits.train,
        splits.layout,
        config.model,
        config.seed,
        splits.node_ids,
        config.data.expert_prefix_frac,
    )
    bundle = fit_bundle(config, splits, models, case_base)
    prepared = Prepared(splits=splits, models=models, case_base=case_base, bundle=bundle)
    if with_oracle:
        prepared.oracle_labels = oracle_labels(
            models, case_base, bundle, splits.test, config.evaluation.loss
        )
    return prepared


def write_prepared(config: RunConfig, prepared: Prepared) -> tuple[Path, Path]:
    config.models_file.parent.mkdir(parents=True, exist_ok=True)
    prepared.models.save(config.models_file)
    log.info("wrote branch models to %s", config.models_file)
    return config.models_file, prepared.bundle.save(config.bundle_file)


def load_prepared(config: RunConfig) -> Prepared:
    """
    Reloads the artifacts written by `prepare` and rebuilds the splits and case base
    from the config.

    Raises:
        ConfigError: missing artifacts, or artifacts fit for another horizon or lag
    """
    bundle = CalibrationBundle.load(config.bundle_file)
    if not config.models_file.exists():
        raise ConfigError(f"branch models not found at {config.models_file}")
    models = ModelSet.load(config.models_file)
    if bundle.horizon != config.model.horizon or models.horizon != config.model.horizon:
        raise ConfigError(
            f"artifacts were fit for H={bundle.horizon}, config has "
            f"H={config.model.horizon}"
        )
    if bundle.w_lag != config.model.w_lag:
        raise ConfigError(
            f"artifacts were fit for W_lag={bundle.w_lag}, config has "
            f"W_lag={config.model.w_lag}"
        )
    splits = build_splits(config)
    return Prepared(
        splits=splits,
        models=models,
        case_base=models.case_base(splits.train),
        bundle=bundle,
    )


class RunSummary(BaseModel):
    """
    Provenance and results of one simulation run.

    Attributes:
        config: the resolved run config
        policy: simulated policy
        seed: run seed
        budgets: budgets with `c_max` resolved
        labeler: hard-subset and OOD thresholds applied to the trace
        str_threshold: STR baseline threshold, for STR runs
        stability: queue stability diagnostics
        regret: per "node|mode" fusion regret, when recorded
        metrics: metric report of the trace
        retrieval_count: case-base searches during the run
        fallback_count: cloud requests served by the small-model fallback
        missing_targets: reveal attempts without a target
        max_load_gap: largest |rho - rho_star|
    """

    config: dict[str, Any]
    policy: Policy
    seed: int
    budgets: Budgets
    labeler: HardSubsetLabeler
    str_threshold: Optional[float] = None
    stability: StabilityReport
    regret: dict[str, RegretReport] = Field(default_factory=dict)
    metrics: MetricReport
    retrieval_count: int = 0
    fallback_count: int = 0
    missing_targets: int = 0
    max_load_gap: float = 0.0

    def dumps(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, indent=2)


def simulate(
    config: RunConfig, prepared: Prepared
) -> tuple[SimulationResult, RunSummary]:
    """Runs `config.policy` over the test block and summarizes the trace."""
    labels = prepared.oracle_labels or oracle_labels(
        prepared.models,
        prepared.case_base,
        prepared.bundle,
        prepared.splits.test,
        config.evaluation.loss,
    )
    result = run_simulation(
        prepared.bundle,
        prepared.models,
        prepared.case_base,
        prepared.splits.test,
        config.policy,
        config.controller,
        config.fusion,
        config.screening,
        config.evaluation,
        labels,
    )
    summary = RunSummary(
        config=config.resolved(),
        policy=config.policy,
        seed=config.seed,
        budgets=result.budgets,
        labeler=prepared.bundle.labeler,
        str_threshold=result.str_threshold,
        stability=result.stability,
        regret=result.regret,
        metrics=compute_metrics(result.trace),
        retrieval_count=result.retrieval_count,
        fallback_count=result.fallback_count,
        missing_targets=result.missing_targets,
        max_load_gap=result.max_load_gap,
    )
    if result.stability.unstable:
        log.warning(
            "%s: a virtual queue grows beyond its stability margin", config.policy
        )
    return result, summary


def write_run(
    out_dir: Path, result: SimulationResult, summary: RunSummary
) -> tuple[Path, Path, Path]:
    trace_path, slots_path = result.trace.write(out_dir)
    summary_path = Path(out_dir) / SUMMARY_FILE
    summary_path.write_text(summary.dumps())
    log.info("wrote run summary to %s", summary_path)
    return trace_path, slots_path, summary_path

