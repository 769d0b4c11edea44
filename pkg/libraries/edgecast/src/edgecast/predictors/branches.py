"""
Runtime wrappers around the trained branch models.

Every branch is a `BasePredictor`: `predict()` runs preprocessing, the model and
postprocessing (clamping onto the forecast box) and keeps track of how many
predictions were made. The cloud branch also counts retrievals and flags when it
had to fall back to the small model because no eligible case existed.
"""

from __future__ import annotations

import logging
from typing import Mapping, Sequence

import numpy as np

from edgecast.core import Branch, HorizonVector, Mode
from edgecast.data import CaseBase, ObservationWindow
from edgecast.exceptions import ConfigError
from edgecast.predictors.base_predictor import BasePredictor
from edgecast.predictors.retrieval import QueryEncoder, context_arrays
from edgecast.predictors.ridge import ConditionalRegressor, ExpertModel, SmallModel

log = logging.getLogger(__name__)


class ExpertPredictor(BasePredictor):
    branch = Branch.expert

    def __init__(self, experts: Mapping[str, ExpertModel]) -> None:
        super().__init__()
        self.experts = dict(experts)

    def model_for(self, node_id: str) -> ExpertModel:
        try:
            return self.experts[node_id]
        except KeyError:
            raise ConfigError(f"no site expert for node {node_id}")

    def do_run_model(
        self, window: ObservationWindow, features: np.ndarray
    ) -> np.ndarray:
        return self.model_for(window.node_id).predict_matrix(features)[0]

    def predict_many(self, windows: Sequence[ObservationWindow]) -> np.ndarray:
        out = np.zeros((len(windows), 0))
        by_node: dict[str, list[int]] = {}
        for i, w in enumerate(windows):
            by_node.setdefault(w.node_id, []).append(i)
        for node_id, rows in by_node.items():
            model = self.model_for(node_id)
            pred = model.predict_matrix(np.vstack([windows[i].features for i in rows]))
            if out.shape[1] == 0:
                out = np.zeros((len(windows), pred.shape[1]))
            out[rows] = pred
        return out


class SmallPredictor(BasePredictor):
    branch = Branch.small

    def __init__(self, model: SmallModel) -> None:
        super().__init__()
        self.model = model

    def do_run_model(
        self, window: ObservationWindow, features: np.ndarray
    ) -> np.ndarray:
        return self.model.predict_matrix(features)[0]

    def ensemble(self, window: ObservationWindow) -> np.ndarray:
        """Replica outputs for one window, shape (B, H)."""
        return self.model.ensemble_matrix(window.features)[:, 0, :]

    def ensemble_many(self, windows: Sequence[ObservationWindow]) -> np.ndarray:
        """Replica outputs, shape (B, n, H)."""
        return self.model.ensemble_matrix(np.vstack([w.features for w in windows]))

    def predict_many(self, windows: Sequence[ObservationWindow]) -> np.ndarray:
        return self.ensemble_many(windows).mean(axis=0)


class CloudPredictor(BasePredictor):
    """
    Query encoding, leakage-filtered retrieval, context building and the
    conditional regressor. When nothing eligible is retrieved the small model's
    forecast is returned instead and `last_fallback` is set.
    """

    branch = Branch.cloud

    def __init__(
        self,
        regressor: ConditionalRegressor,
        case_base: CaseBase,
        encoder: QueryEncoder,
        small: SmallPredictor,
        k: int,
        temperature: float,
    ) -> None:
        super().__init__()
        self.regressor = regressor
        self.case_base = case_base
        self.encoder = encoder
        self.small = small
        self.k = k
        self.temperature = temperature
        self.last_fallback: bool = False
        self.last_dispersion: float = 0.0
        self.fallback_count: int = 0

    @property
    def retrieval_count(self) -> int:
        return self.case_base.search_count

    def do_preprocessing(self, window: ObservationWindow) -> np.ndarray:
        return self.encoder.encode(window)

    def do_run_model(
        self, window: ObservationWindow, features: np.ndarray
    ) -> np.ndarray:
        out, flags, spreads = self._run([window], features[None, :])
        self.last_fallback = bool(flags[0])
        self.last_dispersion = float(spreads[0])
        return out[0]

    def predict_many(self, windows: Sequence[ObservationWindow]) -> np.ndarray:
        return self.predict_many_flagged(windows)[0]

    def predict_many_flagged(
        self, windows: Sequence[ObservationWindow]
    ) -> tuple[np.ndarray, np.ndarray]:
        """Forecasts plus a boolean fallback flag per window."""
        if not windows:
            return np.zeros((0, self.regressor.horizon)), np.zeros(0, dtype=bool)
        keys = self.encoder.encode_matrix(np.vstack([w.features for w in windows]))
        out, flags, _ = self._run(windows, keys)
        return out, flags

    def _run(
        self, windows: Sequence[ObservationWindow], keys: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        hits = self.case_base.search_batch(keys, self.k, [w.slot for w in windows])
        horizon = self.regressor.horizon
        features = np.vstack([w.features for w in windows])
        out = np.zeros((len(windows), horizon))
        flags = np.zeros(len(windows), dtype=bool)
        spreads = np.zeros(len(windows))
        rows, contexts = [], []
        for i, (idx, dist) in enumerate(hits):
            if len(idx) == 0:
                flags[i] = True
                continue
            ctx, spreads[i] = context_arrays(
                dist, self.case_base.trajectories[idx], self.temperature
            )
            rows.append(i)
            contexts.append(ctx)
        if rows:
            out[rows] = self.regressor.predict_matrix(
                features[rows], np.vstack(contexts), spreads[rows]
            )
        if flags.any():
            fallback = [windows[i] for i in np.flatnonzero(flags)]
            out[flags] = self.small.model.predict_matrix(
                np.vstack([w.features for w in fallback])
            )
            self.fallback_count += int(flags.sum())
            log.debug("cloud branch fell back to small model for %d window(s)",
                      int(flags.sum()))
        return out, flags, spreads


class BranchSuite:
    """
    The three branches of one deployment. Candidates are produced on demand for the
    active set of the executed mode only.
    """

    def __init__(
        self, expert: ExpertPredictor, small: SmallPredictor, cloud: CloudPredictor
    ) -> None:
        self.expert = expert
        self.small = small
        self.cloud = cloud

    def predictor(self, branch: Branch) -> BasePredictor:
        match branch:
            case Branch.expert:
                return self.expert
            case Branch.small:
                return self.small
            case Branch.cloud:
                return self.cloud

    def candidates(
        self, window: ObservationWindow, mode: Mode
    ) -> dict[Branch, HorizonVector]:
        return {b: self.predictor(b).predict(window) for b in mode.branches}

    def candidates_many(
        self, windows: Sequence[ObservationWindow], mode: Mode
    ) -> dict[Branch, np.ndarray]:
        return {b: self.predictor(b).predict_many(windows) for b in mode.branches}
