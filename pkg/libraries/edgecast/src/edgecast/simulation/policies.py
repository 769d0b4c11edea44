"""
Routing policies: the adaptive router and the fixed baselines it is compared with.
"""

from __future__ import annotations

import logging
from enum import StrEnum
from typing import Mapping, Sequence

import numpy as np

from edgecast.core import Mode

log = logging.getLogger(__name__)


class Policy(StrEnum):
    """
    CAPE: mean-field router over the queue-priced routing indices
    ExO: expert only (mode 0)
    EdO: edge fusion always (mode 1)
    CO: cloud only; mode 2 with all weight on the cloud branch
    ACA: always cloud-assisted; mode 2 with learned fusion weights
    STR: mode 2 iff the calibrated score reaches a fixed threshold, else mode 0
    """

    CAPE = "CAPE"
    ExO = "ExO"
    EdO = "EdO"
    CO = "CO"
    ACA = "ACA"
    STR = "STR"

    @property
    def learns_weights(self) -> bool:
        return self != Policy.CO


FIXED_MODES: dict[Policy, Mode] = {
    Policy.ExO: Mode.EXPERT_ONLY,
    Policy.EdO: Mode.EDGE_FUSION,
    Policy.CO: Mode.CLOUD_ASSISTED,
    Policy.ACA: Mode.CLOUD_ASSISTED,
}


def fixed_modes(policy: Policy, node_ids: Sequence[str]) -> dict[str, Mode]:
    return {n: FIXED_MODES[policy] for n in node_ids}


def static_threshold_modes(
    scores: Mapping[str, float], threshold: float
) -> dict[str, Mode]:
    return {
        n: Mode.CLOUD_ASSISTED if s >= threshold else Mode.EXPERT_ONLY
        for n, s in scores.items()
    }


def tune_static_threshold(
    validation_scores: Sequence[float], rho_max: float, s_max: float = 1.0
) -> float:
    """
    Smallest threshold whose validation cloud-usage share (scores >= threshold) is at
    most `rho_max`. Candidates are 0 and the distinct validation scores; if none
    qualifies the threshold sits just above the largest score.
    """
    scores = np.sort(np.asarray(validation_scores, dtype=float))
    if scores.size == 0:
        log.warning("no validation scores; static threshold set to s_max")
        return s_max
    for theta in np.r_[0.0, np.unique(scores)]:
        # share of scores >= theta
        share = 1.0 - np.searchsorted(scores, theta, side="left") / scores.size
        if share <= rho_max:
            return float(theta)
    return float(np.nextafter(scores[-1], np.inf))
