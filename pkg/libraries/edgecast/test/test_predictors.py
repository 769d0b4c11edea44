from pathlib import Path

import numpy as np
import pytest
from pydantic import ValidationError

from edgecast.core import HorizonVector
from edgecast.data import CaseBase, FeatureLayout, ObservationWindow, build_samples
from edgecast.exceptions import DimensionError, RetrievalError
from edgecast.predictors.model_set import ModelConfig, ModelSet, train_model_set
from edgecast.predictors.retrieval import (
    CloudContext,
    QueryEncoder,
    SupportEntry,
    SupportSet,
    build_context,
    form_query,
    retrieve_support,
)
from edgecast.predictors.ridge import (
    ExpertModel,
    LinearHead,
    SmallModel,
    predict_cloud,
    predict_expert,
    predict_small,
    train_conditional_regressor,
    train_expert,
    train_small,
)

from series_factory import make_series

LAYOUT = FeatureLayout(w_lag=6, covariates=("cloud_cover",))


def _window(
    features: list[float], slot: int = 100, node_id: str = "n0"
) -> ObservationWindow:
    return ObservationWindow(
        node_id=node_id,
        slot=slot,
        timestamp=slot * 900,
        features=np.asarray(features, dtype=float),
        weather_history=np.zeros((0, 1)),
    )


def _entry(trajectory: list[float], distance: float, end_slot: int = 0) -> SupportEntry:
    return SupportEntry(
        key=np.zeros(2),
        trajectory=HorizonVector(values=trajectory),
        distance=distance,
        end_slot=end_slot,
        node_id="n0",
    )


def test_constant_target_expert() -> None:
    samples = build_samples(make_series([5.0] * 40, capacity=10.0), w_lag=6, horizon=3)
    model = train_expert(samples, "n0", LAYOUT, horizon=3)
    pred = model.predict_matrix(np.vstack([s.window.features for s in samples]))
    assert np.abs(pred - 0.5).max() < 1e-6


def test_ridge_recovers_linear_slope(rng: np.random.Generator) -> None:
    x = rng.uniform(size=(30, 1))
    y = 0.25 * x + 0.1
    head = LinearHead.fit(x, y, ridge_lambda=0.0)
    assert head.coefficients[0][0] == pytest.approx(0.25, abs=1e-8)
    assert head.intercepts[0] == pytest.approx(0.1, abs=1e-8)


def test_small_model_is_deterministic(ramp_samples: list) -> None:
    a = train_small(ramp_samples, LAYOUT, horizon=3, ensemble_size=3, seed=11)
    b = train_small(ramp_samples, LAYOUT, horizon=3, ensemble_size=3, seed=11)
    assert a == b
    assert len(a.replicas) == 3


def test_constant_heads_and_clamp() -> None:
    dim = LAYOUT.dim
    window = _window([0.0] * dim)
    expert = ExpertModel(
        node_id="n0", head=LinearHead.constant(dim, [0.3] * 3), n_features=dim,
        horizon=3, last_lag=LAYOUT.last_lag,
    )
    assert predict_expert(expert, window).numpy == pytest.approx([0.3] * 3)

    hot = expert.model_copy(update={"head": LinearHead.constant(dim, [1.7, -0.2, 0.5])})
    assert predict_expert(hot, window).values == (1.0, 0.0, 0.5)


def test_identical_replicas_mean() -> None:
    dim = LAYOUT.dim
    head = LinearHead.constant(dim, [0.2, 0.4, 0.6])
    small = SmallModel(
        replicas=[head, head, head], n_features=dim, horizon=3, last_lag=LAYOUT.last_lag
    )
    out = predict_small(small, _window([0.0] * dim))
    assert out.numpy == pytest.approx([0.2, 0.4, 0.6])
    with pytest.raises(ValidationError):
        SmallModel(replicas=[head], n_features=dim, horizon=3, last_lag=0)


def test_feature_length_mismatch() -> None:
    dim = LAYOUT.dim
    expert = ExpertModel(
        node_id="n0", head=LinearHead.constant(dim, [0.3]), n_features=dim, horizon=1,
        last_lag=0,
    )
    with pytest.raises(DimensionError):
        predict_expert(expert, _window([0.0] * (dim + 1)))


def test_empty_training_falls_back_to_persistence() -> None:
    expert = train_expert([], "n0", LAYOUT, horizon=3)
    small = train_small([], LAYOUT, horizon=3)
    assert expert.fallback and small.fallback
    features = [0.0] * LAYOUT.dim
    features[LAYOUT.last_lag] = 0.42
    assert predict_expert(expert, _window(features)).numpy == pytest.approx([0.42] * 3)
    assert predict_small(small, _window(features)).numpy == pytest.approx([0.42] * 3)


def test_query_encoding(ramp_samples: list) -> None:
    encoder = QueryEncoder.fit(ramp_samples, LAYOUT)
    width = LAYOUT.calendar.start
    mean_window = _window(list(encoder.mean) + [0.0, 1.0])
    key = form_query(encoder, mean_window)
    assert np.abs(key[:width]).max() < 1e-12
    assert np.array_equal(key, form_query(encoder, mean_window))

    shifted = mean_window.features.copy()
    shifted[2] += 0.1
    diff = form_query(encoder, _window(list(shifted))) - key
    assert np.flatnonzero(diff).tolist() == [2]


def test_retrieve_support_single_and_brute_force() -> None:
    one = CaseBase(np.array([[1.0, 1.0]]), np.array([[0.3]]), np.array([2]), ["a"])
    support = retrieve_support(one, np.zeros(2), k=3, current_slot=5)
    assert len(support) == 1
    assert support.trajectories.tolist() == [[0.3]]

    keys = np.array([[0, 0], [3, 0], [1, 1], [0, 2], [5, 5], [-1, 0]], dtype=float)
    base = CaseBase(keys, np.zeros((6, 1)), np.zeros(6), ["a"] * 6)
    query = np.array([0.9, 0.2])
    support = retrieve_support(base, query, k=2, current_slot=1)
    brute = np.argsort(np.linalg.norm(keys - query, axis=1))[:2]
    assert [e.key.tolist() for e in support.entries] == keys[brute].tolist()
    assert np.all(np.diff(support.distances) >= 0)


def test_retrieve_support_leakage_filter(rng: np.random.Generator) -> None:
    base = CaseBase(
        rng.normal(size=(5, 3)), rng.uniform(size=(5, 2)), np.full(5, 10), ["a"] * 5
    )
    assert len(retrieve_support(base, np.zeros(3), k=5, current_slot=10)) == 0

    ends = rng.integers(0, 100, size=50)
    base = CaseBase(
        rng.normal(size=(50, 3)), rng.uniform(size=(50, 2)), ends, ["a"] * 50
    )
    slots = rng.integers(0, 120, size=10_000)
    hits = base.search_batch(rng.normal(size=(10_000, 3)), 4, slots.tolist())
    for (idx, _), slot in zip(hits, slots):
        assert np.all(ends[idx] < slot)


def test_support_set_invariants() -> None:
    with pytest.raises(ValidationError):
        SupportSet(entries=[_entry([0.1], 2.0), _entry([0.1], 1.0)], current_slot=5)
    with pytest.raises(RetrievalError):
        SupportSet(entries=[_entry([0.1], 1.0, end_slot=5)], current_slot=5)


def test_build_context_examples() -> None:
    single = build_context(SupportSet(entries=[_entry([0.2, 0.6], 0.7)], current_slot=9))
    assert single.context_vector.numpy == pytest.approx([0.2, 0.6])
    assert single.dispersion == pytest.approx(0.0, abs=1e-12)

    pair = build_context(
        SupportSet(entries=[_entry([0.2, 0.6], 1.0), _entry([0.4, 0.0], 1.0)],
                   current_slot=9)
    )
    assert pair.context_vector.numpy == pytest.approx([0.3, 0.3])
    assert pair.dispersion == pytest.approx(0.2)

    far = build_context(
        SupportSet(entries=[_entry([0.2, 0.6], 0.0), _entry([0.9, 0.9], 50.0)],
                   current_slot=9)
    )
    assert far.context_vector.numpy == pytest.approx([0.2, 0.6], abs=1e-6)

    with pytest.raises(RetrievalError):
        build_context(SupportSet(current_slot=9))


def test_identity_regressor(rng: np.random.Generator) -> None:
    features = rng.uniform(size=(60, 3))
    contexts = rng.uniform(size=(60, 2))
    regressor = train_conditional_regressor(
        features, contexts, rng.uniform(size=60), contexts, ridge_lambda=0.0
    )
    context = CloudContext(
        context_vector=HorizonVector(values=[0.4, 0.4]), dispersion=0.1
    )
    out = predict_cloud(regressor, _window([0.5, 0.1, 0.9]), context)
    assert out.numpy == pytest.approx([0.4, 0.4], abs=1e-6)


def test_cloud_falls_back_without_support(ramp_samples: list) -> None:
    config = ModelConfig(W_lag=6, H=3, B=2, K=2)
    models, _ = train_model_set(ramp_samples, LAYOUT, config, seed=0)
    suite = models.suite(CaseBase.empty())
    window = ramp_samples[10].window
    cloud = suite.cloud.predict(window)
    assert suite.cloud.last_fallback
    assert cloud.numpy == pytest.approx(suite.small.predict(window).numpy)
    preds, flags = suite.cloud.predict_many_flagged([s.window for s in ramp_samples[:4]])
    assert flags.all() and suite.cloud.fallback_count == 5
    assert preds.shape == (4, 3)


def test_model_set_round_trip_and_bounds(ramp_samples: list, tmp_path: Path) -> None:
    config = ModelConfig(W_lag=6, H=3, B=2, K=2)
    models, case_base = train_model_set(ramp_samples, LAYOUT, config, seed=4)
    again, _ = train_model_set(ramp_samples, LAYOUT, config, seed=4)
    assert models == again

    path = tmp_path / "models.json"
    models.save(path)
    loaded = ModelSet.load(path)
    assert loaded == models

    windows = [s.window for s in ramp_samples]
    suite = loaded.suite(loaded.case_base(ramp_samples))
    assert len(case_base) == len(ramp_samples)
    for branch in (suite.expert, suite.small, suite.cloud):
        out = branch.predict_many(windows)
        assert out.shape == (len(windows), 3)
        assert out.min() >= 0.0 and out.max() <= 1.0
    assert suite.small.ensemble_many(windows).shape == (2, len(windows), 3)
