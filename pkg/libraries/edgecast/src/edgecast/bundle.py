"""
The calibration bundle: everything `prepare` fits offline and `simulate` needs online
besides the branch models themselves.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Optional, Union

from pydantic import BaseModel, Field

from edgecast.calibration import ExecutedModeCalibrator, GainCurves, ReplaySplit
from edgecast.exceptions import ConfigError
from edgecast.screening import OodReference, ScreeningWeights
from edgecast.simulation.metrics import HardSubsetLabeler

log = logging.getLogger(__name__)

BUNDLE_FILE = "bundle.json"


class CalibrationBundle(BaseModel):
    """
    Attributes:
        horizon: forecast steps the bundle was fit for
        w_lag: power lags per window
        seed: seed of the preparation run
        screening: logistic routing-score weights and calibration scale
        ood: OOD reference of the training query keys
        weather_scale: per-covariate scale of the mutation feature
        gains: isotonic gain curves
        calibrator: executed-mode calibrator seeded with replayed losses
        fusion_priors: fusion priors by mode, when learned from the replay
        labeler: hard-subset and OOD thresholds
        str_threshold: validation-tuned threshold of the static baseline
        replay_split: split the replay was built on
        replay_records: number of replayed samples
        replay_positive_rate: share of cloud-positive oracle labels
        replay_auroc: AUROC of the fitted raw score on the replay set
    """

    horizon: int = Field(ge=1)
    w_lag: int = Field(ge=1)
    seed: int
    screening: ScreeningWeights
    ood: OodReference
    weather_scale: list[float]
    gains: GainCurves
    calibrator: ExecutedModeCalibrator
    fusion_priors: dict[int, tuple[float, ...]] = Field(default_factory=dict)
    labeler: HardSubsetLabeler
    str_threshold: float = Field(ge=0)
    replay_split: ReplaySplit
    replay_records: int = Field(ge=0)
    replay_positive_rate: float = Field(ge=0, le=1)
    replay_auroc: Optional[float] = None

    def dumps(self) -> str:
        """Canonical JSON: sorted keys and fixed indentation."""
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, indent=2)

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps())
        log.info("wrote calibration bundle to %s", path)
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> CalibrationBundle:
        path = Path(path)
        if not path.exists():
            raise ConfigError(
                f"calibration bundle not found at {path}; run prepare first"
            )
        return cls.model_validate_json(path.read_text())
