from pathlib import Path

import numpy as np
import pytest

from edgecast.config import RunConfig
from edgecast.data import ScenarioConfig, build_samples
from edgecast.pipeline import Prepared, prepare
from edgecast.predictors.model_set import ModelConfig
from series_factory import make_series

# small enough to prepare and simulate in seconds
TINY_SCENARIO = ScenarioConfig(n_nodes=3, n_slots=480, slot_minutes=30)
TINY_MODEL = ModelConfig(W_lag=8, H=4, B=3, K=4)


def tiny_run_config(out_dir: Path) -> RunConfig:
    return RunConfig.model_validate(
        {
            "data": {"scenario": TINY_SCENARIO.model_dump()},
            "model": TINY_MODEL.model_dump(by_alias=True),
            "screening": {"W_mu": 4, "W_cdf": 64},
            "calibration": {"M_min": 20, "B_bins": 5},
            "output_dir": str(out_dir),
        }
    )


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(7)


@pytest.fixture
def tiny_config(tmp_path: Path) -> RunConfig:
    return tiny_run_config(tmp_path / "out")


@pytest.fixture(scope="session")
def tiny_prepared(
    tmp_path_factory: pytest.TempPathFactory,
) -> tuple[RunConfig, Prepared]:
    config = tiny_run_config(tmp_path_factory.mktemp("prepared"))
    return config, prepare(config, with_oracle=True)


@pytest.fixture
def ramp_samples() -> list:
    series = make_series(list(np.linspace(0.0, 10.0, 60)))
    return build_samples(series, w_lag=6, horizon=3, w_mu=3)
