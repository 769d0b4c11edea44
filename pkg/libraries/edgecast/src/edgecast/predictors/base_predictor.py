"""
Module implementing the base forecast branch.

Subclass it for each branch; only `do_run_model` is mandatory.
"""

from __future__ import annotations

import abc
import logging
from typing import Sequence

import numpy as np

from edgecast.core import Branch, HorizonVector
from edgecast.data import ObservationWindow

log = logging.getLogger(__name__)


class BasePredictor(metaclass=abc.ABCMeta):
    """
    Base class for a forecast branch
    """

    branch: Branch

    def __init__(self) -> None:
        self.__prediction_count: int = 0

    @property
    def prediction_count(self) -> int:
        return self.__prediction_count

    def predict(self, window: ObservationWindow) -> HorizonVector:
        """
        Forecast for one window.

        Args:
            window (ObservationWindow): the local input at the decision slot

        Returns:
            HorizonVector: the branch candidate, clamped to [0, 1]^H
        """
        features = self.do_preprocessing(window)
        output = self.do_run_model(window, features)
        self.__prediction_count += 1
        return self.do_postprocessing(window, output)

    def predict_many(self, windows: Sequence[ObservationWindow]) -> np.ndarray:
        """
        Forecasts for several windows at once, shape (n, H). Subclasses override this
        with a vectorized path; the default loops over `predict`.
        """
        return np.vstack([self.predict(w).numpy for w in windows])

    def do_preprocessing(self, window: ObservationWindow) -> np.ndarray:
        """
        Extract the model input from the window. By default the raw feature vector.
        """
        return window.features

    @abc.abstractmethod
    def do_run_model(
        self, window: ObservationWindow, features: np.ndarray
    ) -> np.ndarray:
        """run the branch model on preprocessed features

        Args:
            window (ObservationWindow): the window being predicted
            features (np.ndarray): preprocessed features

        Returns:
            np.ndarray: raw H-step output
        """
        pass

    def do_postprocessing(
        self, window: ObservationWindow, output: np.ndarray
    ) -> HorizonVector:
        return HorizonVector.from_numpy(output)
