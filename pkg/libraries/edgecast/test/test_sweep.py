import numpy as np
import pandas as pd
import pytest

from edgecast.config import DataConfig, DataSource, RunConfig
from edgecast.exceptions import ConfigError
from edgecast.simulation.metrics import MetricReport
from edgecast.simulation.sweep import (
    SweepAxis,
    prepare_key,
    run_config,
    run_sweep,
    sweep_columns,
)


def test_run_config_sets_axis_and_seed(tiny_config: RunConfig) -> None:
    config = run_config(tiny_config, SweepAxis.rho_max, 0.3, seed=5)
    assert config.controller.budgets.rho_max == 0.3
    assert config.seed == 5
    assert run_config(tiny_config, SweepAxis.N, 2, 0).data.scenario.n_nodes == 2
    assert run_config(tiny_config, SweepAxis.K, 2, 0).model.k == 2

    csv = tiny_config.model_copy(
        update={
            "data": DataConfig(
                source=DataSource.csv, csv_paths=["a.csv"], capacity_path="c.csv"
            )
        }
    )
    with pytest.raises(ConfigError):
        run_config(csv, SweepAxis.N, 2, 0)


def test_prepare_key(tiny_config: RunConfig) -> None:
    base = prepare_key(tiny_config)
    assert prepare_key(run_config(tiny_config, SweepAxis.V, 5.0, 0)) == base
    assert prepare_key(run_config(tiny_config, SweepAxis.tau_max, 90.0, 0)) == base
    assert prepare_key(run_config(tiny_config, SweepAxis.K, 2, 0)) != base
    assert prepare_key(run_config(tiny_config, SweepAxis.rho_max, 0.2, 0)) != base


def test_single_value_sweep(tiny_config: RunConfig) -> None:
    table = run_sweep("V", [10.0], tiny_config, seeds=[0])
    assert len(table) == 1
    assert list(table.columns) == sweep_columns()
    assert table.loc[0, "axis"] == "V" and table.loc[0, "seed"] == 0
    assert table.loc[0, "n_rows"] > 0
    assert set(MetricReport().scalars()) <= set(table.columns)


def test_sweep_is_deterministic(tiny_config: RunConfig) -> None:
    serial = run_sweep(SweepAxis.V, [1.0, 80.0], tiny_config, seeds=[0], threads=1)
    threaded = run_sweep(SweepAxis.V, [1.0, 80.0], tiny_config, seeds=[0], threads=2)
    assert serial["value"].tolist() == [1.0, 80.0]
    pd.testing.assert_frame_equal(serial, threaded)


def test_empty_sweep_is_rejected(tiny_config: RunConfig) -> None:
    with pytest.raises(ConfigError):
        run_sweep(SweepAxis.V, [], tiny_config, seeds=[0])
    with pytest.raises(ConfigError):
        run_sweep(SweepAxis.V, [1.0], tiny_config, seeds=[])


V_GRID = (1.0, 10.0, 80.0, 320.0)


@pytest.mark.slow
def test_backlog_grows_and_loss_falls_with_v() -> None:
    table = run_sweep(SweepAxis.V, list(V_GRID), RunConfig(), seeds=[0, 1, 2], threads=3)
    means = table.groupby("value")[["avg_backlog", "avg_loss"]].mean().loc[list(V_GRID)]
    backlog = means["avg_backlog"].to_numpy()
    loss = means["avg_loss"].to_numpy()
    assert np.all(np.diff(backlog) >= 0)
    # at most one adjacent pair may rise, by no more than 2%
    assert int((loss[1:] > loss[:-1]).sum()) <= 1
    assert np.all(loss[1:] <= 1.02 * loss[:-1])
