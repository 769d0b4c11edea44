"""
Training and persistence of the full set of branch models.

`prepare` trains a `ModelSet` and writes it to `models.json`; `simulate` loads it
back and rebuilds the case base deterministically from the same training windows.
"""

from __future__ import annotations

import logging
import math
from pathlib import Path
from typing import Sequence, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from edgecast.data import (
    DEFAULT_HORIZON,
    DEFAULT_W_LAG,
    CaseBase,
    FeatureLayout,
    Sample,
)
from edgecast.predictors.branches import (
    BranchSuite,
    CloudPredictor,
    ExpertPredictor,
    SmallPredictor,
)
from edgecast.predictors.retrieval import (
    DEFAULT_K,
    DEFAULT_TEMPERATURE,
    QueryEncoder,
    context_arrays,
)
from edgecast.predictors.ridge import (
    DEFAULT_ENSEMBLE_SIZE,
    DEFAULT_RIDGE_LAMBDA,
    ConditionalRegressor,
    ExpertModel,
    SmallModel,
    train_conditional_regressor,
    train_expert,
    train_small,
)

log = logging.getLogger(__name__)


class ModelConfig(BaseModel):
    """
    Branch model settings.

    Attributes:
        w_lag: lagged power values per window (alias `W_lag`)
        horizon: forecast steps (alias `H`)
        ridge_lambda: ridge penalty of every linear head
        ensemble_size: bootstrap replicas of the small model (alias `B`)
        k: retrieved cases per query (alias `K`)
        temperature: softmax temperature of the context weights
    """

    model_config = ConfigDict(frozen=True, extra="forbid", populate_by_name=True)

    w_lag: int = Field(DEFAULT_W_LAG, ge=1, alias="W_lag")
    horizon: int = Field(DEFAULT_HORIZON, ge=1, alias="H")
    ridge_lambda: float = Field(DEFAULT_RIDGE_LAMBDA, ge=0)
    ensemble_size: int = Field(DEFAULT_ENSEMBLE_SIZE, ge=2, alias="B")
    k: int = Field(DEFAULT_K, ge=1, alias="K")
    temperature: float = Field(DEFAULT_TEMPERATURE, gt=0)


class ModelSet(BaseModel):
    """
    Every trained branch model plus what is needed to rebuild the runtime.

    Attributes:
        layout: feature layout of the windows
        horizon: forecast steps
        experts: site expert per node id
        small: pooled small model
        encoder: retrieval query encoder
        regressor: cloud conditional regressor
        k: retrieved cases per query
        temperature: context softmax temperature
        seed: seed used for the bootstrap
    """

    layout: FeatureLayout
    horizon: int
    experts: dict[str, ExpertModel]
    small: SmallModel
    encoder: QueryEncoder
    regressor: ConditionalRegressor
    k: int
    temperature: float
    seed: int

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(self.model_dump_json(indent=2))

    @classmethod
    def load(cls, path: Union[str, Path]) -> ModelSet:
        return cls.model_validate_json(Path(path).read_text())

    def case_base(self, train_samples: Sequence[Sample]) -> CaseBase:
        """Case base over the training windows, keyed with this set's encoder."""
        if not train_samples:
            return CaseBase.empty()
        keys = self.encoder.encode_matrix(
            np.vstack([s.window.features for s in train_samples])
        )
        return CaseBase(
            keys,
            np.vstack([s.target.numpy for s in train_samples]),
            np.array([s.reveal_slot for s in train_samples], dtype=np.int64),
            [s.node_id for s in train_samples],
        )

    def suite(self, case_base: CaseBase) -> BranchSuite:
        small = SmallPredictor(self.small)
        return BranchSuite(
            expert=ExpertPredictor(self.experts),
            small=small,
            cloud=CloudPredictor(
                self.regressor, case_base, self.encoder, small, self.k, self.temperature
            ),
        )


def _expert_subset(samples: list[Sample], prefix_frac: float) -> list[Sample]:
    if prefix_frac >= 1.0:
        return samples
    ordered = sorted(samples, key=lambda s: s.slot)
    return ordered[: math.ceil(prefix_frac * len(ordered))]


def train_model_set(
    train_samples: Sequence[Sample],
    layout: FeatureLayout,
    config: ModelConfig = ModelConfig(),
    seed: int = 0,
    node_ids: Sequence[str] = (),
    expert_prefix_frac: float = 1.0,
) -> tuple[ModelSet, CaseBase]:
    """
    Trains every branch on the training split.

    The cloud regressor is fit on training windows whose leakage-filtered retrieval
    (cases ending before the window's slot) returned at least one case.

    Args:
        train_samples: pooled training samples of all nodes
        layout: feature layout
        config: model settings
        seed: bootstrap seed
        node_ids: nodes that need an expert even without training samples
        expert_prefix_frac: fraction of each node's training history the site
            expert may use (data-scarce setting)
    """
    by_node: dict[str, list[Sample]] = {n: [] for n in node_ids}
    for s in train_samples:
        by_node.setdefault(s.node_id, []).append(s)
    experts = {
        node_id: train_expert(
            _expert_subset(samples, expert_prefix_frac),
            node_id,
            layout,
            config.horizon,
            config.ridge_lambda,
        )
        for node_id, samples in by_node.items()
    }
    small = train_small(
        train_samples, layout, config.horizon, config.ensemble_size, seed,
        config.ridge_lambda,
    )
    encoder = QueryEncoder.fit(train_samples, layout)

    partial = ModelSet(
        layout=layout,
        horizon=config.horizon,
        experts=experts,
        small=small,
        encoder=encoder,
        regressor=ConditionalRegressor(n_features=layout.dim, horizon=config.horizon),
        k=config.k,
        temperature=config.temperature,
        seed=seed,
    )
    case_base = partial.case_base(train_samples)

    rows, contexts, spreads = [], [], []
    if len(case_base):
        hits = case_base.search_batch(
            case_base.keys, config.k, [s.slot for s in train_samples]
        )
        for i, (idx, dist) in enumerate(hits):
            if len(idx) == 0:
                continue
            ctx, spread = context_arrays(
                dist, case_base.trajectories[idx], config.temperature
            )
            rows.append(i)
            contexts.append(ctx)
            spreads.append(spread)
    case_base.search_count = 0

    if rows:
        x = np.vstack([train_samples[i].window.features for i in rows])
        y = np.vstack([train_samples[i].target.numpy for i in rows])
        regressor = train_conditional_regressor(
            x, np.vstack(contexts), np.asarray(spreads), y, config.ridge_lambda
        )
    else:
        regressor = train_conditional_regressor(
            np.zeros((0, layout.dim)), np.zeros((0, config.horizon)), np.zeros(0),
            np.zeros((0, config.horizon)), config.ridge_lambda,
        )
    log.info(
        "trained %d experts, %d small replicas, cloud regressor on %d/%d windows",
        len(experts), len(small.replicas), len(rows), len(train_samples),
    )
    return partial.model_copy(update={"regressor": regressor}), case_base
