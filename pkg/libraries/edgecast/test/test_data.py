from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from edgecast.data import (
    CaseBase,
    ColumnSchema,
    Regime,
    ScenarioConfig,
    SplitSpec,
    build_case_base,
    build_samples,
    chronological_split,
    load_capacity_csv,
    load_csv_dataset,
    regime_transition_matrix,
    stationary_distribution,
    synthesize_scenario,
    write_dataset,
)
from edgecast.exceptions import ConfigError, DataError, SchemaError

from series_factory import make_series


def _write(path: Path, rows: list[dict]) -> Path:
    pd.DataFrame(rows).to_csv(path, index=False)
    return path


def test_load_well_formed_file(tmp_path: Path) -> None:
    path = _write(
        tmp_path / "a.csv",
        [
            {"timestamp": 0, "node_id": "a", "power": 1.0, "temp": 10.0},
            {"timestamp": 900, "node_id": "a", "power": 2.0, "temp": 11.0},
            {"timestamp": 1800, "node_id": "a", "power": 3.0, "temp": 12.0},
        ],
    )
    dataset = load_csv_dataset(path, {"a": 5.0})
    assert len(dataset.series) == 1
    assert len(dataset.series[0]) == 3
    assert dataset.series[0].covariate_names == ["temp"]
    assert dataset.dropped_rows == 0


def test_load_drops_incomplete_rows(tmp_path: Path) -> None:
    path = _write(
        tmp_path / "a.csv",
        [
            {"timestamp": 0, "node_id": "a", "power": 1.0},
            {"timestamp": 900, "node_id": "a", "power": None},
            {"timestamp": 1800, "node_id": "a", "power": 3.0},
        ],
    )
    dataset = load_csv_dataset(path, {"a": 5.0})
    assert len(dataset.series[0]) == 2
    assert dataset.dropped_rows == 1


def test_load_interleaved_nodes(tmp_path: Path) -> None:
    path = _write(
        tmp_path / "ab.csv",
        [
            {"timestamp": "2024-01-01T00:00:00Z", "node_id": "a", "power": 1.0},
            {"timestamp": "2024-01-01T00:00:00Z", "node_id": "b", "power": 4.0},
            {"timestamp": "2024-01-01T00:15:00Z", "node_id": "a", "power": 2.0},
            {"timestamp": "2024-01-01T00:15:00Z", "node_id": "b", "power": 5.0},
        ],
    )
    dataset = load_csv_dataset(path, {"a": 5.0, "b": 5.0})
    by_node = {s.node_id: s for s in dataset.series}
    assert set(by_node) == {"a", "b"}
    assert list(by_node["a"].power) == [1.0, 2.0]
    assert list(by_node["b"].power) == [4.0, 5.0]
    assert np.diff(by_node["a"].timestamps).tolist() == [900]


def test_load_missing_column(tmp_path: Path) -> None:
    path = _write(tmp_path / "a.csv", [{"timestamp": 0, "node_id": "a"}])
    with pytest.raises(SchemaError):
        load_csv_dataset(path, {"a": 1.0})


def test_load_non_monotone_timestamps(tmp_path: Path) -> None:
    path = _write(
        tmp_path / "a.csv",
        [
            {"timestamp": 900, "node_id": "a", "power": 1.0},
            {"timestamp": 0, "node_id": "a", "power": 1.0},
        ],
    )
    with pytest.raises(DataError):
        load_csv_dataset(path, {"a": 1.0})


def test_custom_schema_and_capacity_file(tmp_path: Path) -> None:
    path = _write(
        tmp_path / "a.csv",
        [{"ts": 0, "site": "x", "kw": 2.0}, {"ts": 60, "site": "x", "kw": 3.0}],
    )
    cap = _write(tmp_path / "capacity.csv", [{"node_id": "x", "capacity": 4.0}])
    schema = ColumnSchema(timestamp="ts", node="site", power="kw")
    dataset = load_csv_dataset(path, load_capacity_csv(cap), schema)
    assert dataset.series[0].capacity == 4.0


@pytest.mark.parametrize("extra, expected", [(0, 1), (-1, 0), (5, 6)])
def test_build_samples_counts(extra: int, expected: int) -> None:
    w_lag, horizon = 4, 3
    series = make_series([1.0] * (w_lag + horizon + extra))
    assert len(build_samples(series, w_lag, horizon)) == expected


def test_constant_series_targets() -> None:
    series = make_series([5.0] * 20, capacity=10.0)
    for s in build_samples(series, w_lag=4, horizon=3):
        assert s.target.values == (0.5, 0.5, 0.5)
        assert s.reveal_slot == s.slot + 3


def test_features_ignore_future_records() -> None:
    power = list(np.linspace(0.0, 9.0, 30))
    base = build_samples(make_series(power), w_lag=5, horizon=2)
    t = 12
    perturbed_power = power[:t] + [9.9] * (len(power) - t)
    perturbed = make_series(perturbed_power)
    perturbed.covariates["cloud_cover"][t:] = 0.123
    after = build_samples(perturbed, w_lag=5, horizon=2)
    for a, b in zip(base, after):
        if a.slot <= t:
            assert np.array_equal(a.window.features, b.window.features)
            assert np.array_equal(a.window.weather_history, b.window.weather_history)


def test_power_above_capacity_is_clamped() -> None:
    series = make_series([20.0] * 10, capacity=10.0)
    samples = build_samples(series, w_lag=3, horizon=2)
    assert all(max(s.target.values) == 1.0 for s in samples)


def test_chronological_split_boundaries() -> None:
    # slots 2..11 with reveal t + 2
    samples = build_samples(make_series([1.0] * 13), w_lag=2, horizon=2)
    assert len(samples) == 10
    train, val, test = chronological_split(samples, SplitSpec())
    assert [s.slot for s in train] == [2, 3, 4, 5, 6]
    assert [s.slot for s in val] == [8]
    assert [s.slot for s in test] == [10, 11]
    assert chronological_split(samples, SplitSpec()) == (train, val, test)


def test_split_edge_cases() -> None:
    samples = build_samples(make_series([1.0] * 13), w_lag=2, horizon=2)
    train, val, test = chronological_split(samples, SplitSpec(1.0, 0.0, 0.0))
    assert len(train) == len(samples) and not val and not test
    assert chronological_split([], SplitSpec()) == ([], [], [])
    with pytest.raises(ConfigError):
        SplitSpec(train_frac=0.5, val_frac=0.2, test_frac=0.2)


def test_degenerate_scenario_is_periodic() -> None:
    config = ScenarioConfig(n_nodes=2, n_slots=96 * 2, hazard=0.0, noise=0.0)
    a = synthesize_scenario(config, seed=1)
    b = synthesize_scenario(config, seed=2)
    assert np.array_equal(a[0].power, b[0].power)
    assert np.array_equal(a[0].power, a[1].power)
    # one day at 15-minute slots
    assert np.allclose(a[0].power[:96], a[0].power[96:])
    assert set(a[0].regime.tolist()) == {Regime.calm}


def test_scenario_is_deterministic() -> None:
    config = ScenarioConfig(n_nodes=3, n_slots=300)
    a, b = synthesize_scenario(config, 5), synthesize_scenario(config, 5)
    for x, y in zip(a, b):
        assert np.array_equal(x.power, y.power)
        for name in x.covariate_names:
            assert np.array_equal(x.covariates[name], y.covariates[name])


def test_regime_frequencies_match_stationary_distribution() -> None:
    n = 10_000
    config = ScenarioConfig(n_nodes=1, n_slots=n, hazard=1.0)
    regime = synthesize_scenario(config, seed=3)[0].regime
    pi = stationary_distribution(regime_transition_matrix(1.0))
    freq = np.bincount(regime, minlength=3) / n
    # a generous band for the autocorrelated chain
    sigma = np.sqrt(pi * (1 - pi) / n)
    assert np.all(np.abs(freq - pi) < 3 * sigma * 3)


def test_write_dataset_round_trip(tmp_path: Path) -> None:
    series = synthesize_scenario(ScenarioConfig(n_nodes=2, n_slots=50), seed=0)
    paths = write_dataset(series, tmp_path)
    assert len(paths) == 2
    assert (tmp_path / "regimes.csv").exists()
    loaded = load_csv_dataset(paths, load_capacity_csv(tmp_path / "capacity.csv"))
    assert [s.node_id for s in loaded.series] == [s.node_id for s in series]
    assert np.allclose(loaded.series[0].power, series[0].power)
    assert len(loaded.series[0]) == 50


def test_case_base_counts_and_exact_match() -> None:
    series = make_series(list(np.linspace(0, 9, 12)))
    samples = build_samples(series, w_lag=3, horizon=2)[:5]
    base = build_case_base(samples, lambda w: w.features)
    assert len(base) == 5
    idx, dist = base.search(samples[2].window.features, k=1, before_slot=10_000)
    assert idx.tolist() == [2]
    assert dist[0] == pytest.approx(0.0, abs=1e-9)
    assert base.end_slots.tolist() == [s.reveal_slot for s in samples]


def test_case_base_matches_brute_force(rng: np.random.Generator) -> None:
    keys = rng.normal(size=(10, 4))
    base = CaseBase(keys, rng.uniform(size=(10, 2)), np.zeros(10), ["n"] * 10)
    query = rng.normal(size=4)
    idx, dist = base.search(query, k=3, before_slot=1)
    brute = np.argsort(np.linalg.norm(keys - query, axis=1))[:3]
    assert idx.tolist() == brute.tolist()
    assert base.search_count == 1


def test_case_base_orders_far_from_origin_keys() -> None:
    offsets = np.array([0.0, 3e-3, 1e-3, 2e-3])
    keys = 1e8 + np.column_stack([offsets, offsets])
    base = CaseBase(keys, np.zeros((4, 1)), np.zeros(4), ["n"] * 4)
    query = np.full(2, 1e8 + 1.1e-3)
    idx, dist = base.search(query, k=4, before_slot=1)
    assert idx.tolist() == [2, 3, 0, 1]
    expected = np.sqrt(2) * np.abs(offsets[[2, 3, 0, 1]] - 1.1e-3)
    np.testing.assert_allclose(dist, expected, rtol=1e-3)


def test_case_base_ties_keep_insertion_order() -> None:
    keys = np.array([[1.0], [-1.0], [1.0], [-1.0], [3.0]])
    base = CaseBase(keys, np.zeros((5, 1)), np.zeros(5), ["n"] * 5)
    idx, dist = base.search(np.zeros(1), k=3, before_slot=1)
    assert idx.tolist() == [0, 1, 2]
    assert dist.tolist() == [1.0, 1.0, 1.0]


def test_case_base_temporal_filter() -> None:
    keys = np.arange(6, dtype=float)[:, None]
    base = CaseBase(keys, np.zeros((6, 1)), np.arange(6), ["n"] * 6)
    idx, _ = base.search(np.array([5.0]), k=6, before_slot=3)
    assert sorted(idx.tolist()) == [0, 1, 2]
    assert all(base.end_slots[i] < 3 for i in idx)


def test_case_base_insert_and_empty() -> None:
    base = CaseBase.empty()
    assert len(base) == 0
    idx, _ = base.search(np.zeros(2), k=3, before_slot=10)
    assert idx.size == 0
    base.insert(np.array([1.0, 2.0]), np.array([0.5]), 3, "n")
    idx, dist = base.search(np.array([1.0, 2.0]), k=3, before_slot=10)
    assert idx.tolist() == [0] and dist[0] == pytest.approx(0.0)
    assert build_case_base([], lambda w: w.features).keys.shape[0] == 0
