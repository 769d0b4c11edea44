"""
Query encoding, leakage-filtered case retrieval and the context summary fed to the
cloud regressor.
"""

from __future__ import annotations

import logging
from typing import Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.special import softmax

from edgecast.core import HorizonVector
from edgecast.data import CaseBase, FeatureLayout, ObservationWindow, Sample
from edgecast.exceptions import RetrievalError

log = logging.getLogger(__name__)

DEFAULT_K: int = 8
DEFAULT_TEMPERATURE: float = 1.0


class QueryEncoder(BaseModel):
    """
    Maps a window to its retrieval key: lag and covariate features z-scored with
    statistics frozen on the training split, followed by the calendar encodings.

    Attributes:
        layout: feature layout of the windows
        mean: per-feature mean of the lag and covariate block
        scale: per-feature standard deviation (ones where a feature is constant)
    """

    layout: FeatureLayout
    mean: list[float]
    scale: list[float]

    @classmethod
    def fit(cls, samples: Sequence[Sample], layout: FeatureLayout) -> QueryEncoder:
        width = layout.calendar.start
        if not samples:
            return cls(layout=layout, mean=[0.0] * width, scale=[1.0] * width)
        block = np.vstack([s.window.features[:width] for s in samples])
        scale = block.std(axis=0)
        scale[scale < 1e-12] = 1.0
        return cls(layout=layout, mean=block.mean(axis=0).tolist(), scale=scale.tolist())

    @property
    def dim(self) -> int:
        return self.layout.dim

    def encode_matrix(self, features: np.ndarray) -> np.ndarray:
        features = np.atleast_2d(features)
        width = self.layout.calendar.start
        z = (features[:, :width] - np.asarray(self.mean)) / np.asarray(self.scale)
        return np.hstack([z, features[:, width:]])

    def encode(self, window: ObservationWindow) -> np.ndarray:
        return self.encode_matrix(window.features)[0]


def form_query(encoder: QueryEncoder, window: ObservationWindow) -> np.ndarray:
    return encoder.encode(window)


class SupportEntry(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    key: np.ndarray
    trajectory: HorizonVector
    distance: float = Field(ge=0)
    end_slot: int
    node_id: str


class SupportSet(BaseModel):
    """
    Retrieved cases for one query, nearest first.

    Attributes:
        entries: at most K cases, all ending before the requesting slot
        current_slot: slot of the request
    """

    entries: list[SupportEntry] = Field(default_factory=list)
    current_slot: int

    @model_validator(mode="after")
    def check_support(self) -> SupportSet:
        distances = [e.distance for e in self.entries]
        if any(b < a for a, b in zip(distances, distances[1:])):
            raise ValueError("support distances must be nondecreasing")
        if any(e.end_slot >= self.current_slot for e in self.entries):
            raise RetrievalError(
                "retrieved a case that ends at or after the current slot"
            )
        return self

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def distances(self) -> np.ndarray:
        return np.array([e.distance for e in self.entries])

    @property
    def trajectories(self) -> np.ndarray:
        return np.vstack([e.trajectory.numpy for e in self.entries])


def _support_from(
    case_base: CaseBase, idx: np.ndarray, dist: np.ndarray, current_slot: int
) -> SupportSet:
    entries = [
        SupportEntry(
            key=case_base.keys[i],
            trajectory=HorizonVector.from_numpy(case_base.trajectories[i]),
            distance=float(d),
            end_slot=int(case_base.end_slots[i]),
            node_id=case_base.node_ids[i],
        )
        for i, d in zip(idx, dist)
    ]
    return SupportSet(entries=entries, current_slot=current_slot)


def retrieve_support(
    case_base: CaseBase, query: np.ndarray, k: int, current_slot: int
) -> SupportSet:
    """
    The k nearest cases to `query` among those ending strictly before
    `current_slot`; fewer (possibly none) when not enough cases qualify.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    idx, dist = case_base.search(query, k, current_slot)
    return _support_from(case_base, idx, dist, current_slot)


def retrieve_support_batch(
    case_base: CaseBase, queries: np.ndarray, k: int, current_slots: Sequence[int]
) -> list[SupportSet]:
    hits = case_base.search_batch(queries, k, current_slots)
    return [
        _support_from(case_base, idx, dist, slot)
        for (idx, dist), slot in zip(hits, current_slots)
    ]


class CloudContext(BaseModel):
    """
    Summary of a support set.

    Attributes:
        context_vector: softmax(-distance / temperature)-weighted mean trajectory
        dispersion: weighted standard deviation of the trajectories, averaged over
            the horizon
    """

    context_vector: HorizonVector
    dispersion: float = Field(ge=0)


def context_arrays(
    distances: np.ndarray, trajectories: np.ndarray, temperature: float
) -> tuple[np.ndarray, float]:
    w = softmax(-np.asarray(distances) / temperature)
    context = w @ trajectories
    spread = np.sqrt(np.clip(w @ (trajectories - context) ** 2, 0.0, None))
    return context, float(spread.mean())


def build_context(
    support: SupportSet, temperature: float = DEFAULT_TEMPERATURE
) -> CloudContext:
    """
    Raises:
        RetrievalError: on an empty support set
    """
    if not support.entries:
        raise RetrievalError("cannot build a context from an empty support set")
    context, dispersion = context_arrays(
        support.distances, support.trajectories, temperature
    )
    return CloudContext(
        context_vector=HorizonVector.from_numpy(context), dispersion=dispersion
    )
