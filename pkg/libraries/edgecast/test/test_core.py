import numpy as np
import pytest
from pydantic import ValidationError

from edgecast.core import (
    ActiveBranchSet,
    Branch,
    HorizonVector,
    LossKind,
    LossSpec,
    Mode,
    SimplexWeights,
    eval_loss,
    fuse_candidates,
    loss_subgradient_weights,
)
from edgecast.exceptions import ConfigError, DimensionError

E, S, C = Branch.expert, Branch.small, Branch.cloud
ALL_SPECS = [
    LossSpec(),
    LossSpec(kind=LossKind.WeightedMAE, horizon_weights=(3, 2, 1)),
    LossSpec(kind=LossKind.Huber),
    LossSpec(kind=LossKind.Squared),
]


def _random_simplex(rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.dirichlet(np.ones(n))


@pytest.mark.parametrize(
    "spec, target, prediction, expected",
    [
        (LossSpec(), [0.5], [0.5], 0.0),
        (LossSpec(), [0.5, 0.5], [0.7, 0.3], 0.2),
        (LossSpec(kind=LossKind.Squared), [0.0], [1.0], 1.0),
    ],
)
def test_eval_loss_examples(
    spec: LossSpec, target: list[float], prediction: list[float], expected: float
) -> None:
    assert eval_loss(target, prediction, spec) == pytest.approx(expected, abs=1e-15)


def test_eval_loss_length_mismatch() -> None:
    with pytest.raises(DimensionError):
        eval_loss([0.1, 0.2], [0.1])


def test_horizon_vector_clamps() -> None:
    v = HorizonVector(values=[-0.5, 0.25, 1.5])
    assert v.values == (0.0, 0.25, 1.0)
    with pytest.raises(ValidationError):
        HorizonVector(values=[])


def test_active_sets() -> None:
    assert Mode.EXPERT_ONLY.branches == (E,)
    assert Mode.EDGE_FUSION.branches == (E, S)
    assert Mode.CLOUD_ASSISTED.branches == (E, S, C)
    assert ActiveBranchSet.for_mode(2).mode == Mode.CLOUD_ASSISTED
    with pytest.raises(ValidationError):
        ActiveBranchSet(branches=(S, E))


def test_simplex_weights_validation() -> None:
    with pytest.raises(ValidationError):
        SimplexWeights(branches=(E, S), weights=(0.7, 0.7))
    with pytest.raises(ValidationError):
        SimplexWeights(branches=(E, S), weights=(1.5, -0.5))
    assert SimplexWeights.uniform((E, S, C)).numpy.sum() == pytest.approx(1.0)


def test_fuse_candidates_examples() -> None:
    fused = fuse_candidates(
        {E: [0.2, 0.4], S: [0.6, 0.8]}, SimplexWeights.uniform((E, S))
    )
    assert fused.numpy == pytest.approx([0.4, 0.6])

    candidates = {E: [0.1, 0.9], S: [0.6, 0.8], C: [0.3, 0.3]}
    one_hot = fuse_candidates(candidates, SimplexWeights.one_hot((E, S, C), E))
    assert one_hot.values == (0.1, 0.9)

    same = fuse_candidates(
        {E: [0.37], S: [0.37]}, SimplexWeights(branches=(E, S), weights=(0.2, 0.8))
    )
    assert same.numpy == pytest.approx([0.37])


def test_fuse_candidates_key_mismatch() -> None:
    with pytest.raises(ConfigError):
        fuse_candidates({E: [0.1], C: [0.2]}, SimplexWeights.uniform((E, S)))


@pytest.mark.parametrize(
    "spec, weights, expected",
    [
        (LossSpec(), (0.5, 0.5), (0.0, 0.0)),
        (LossSpec(), (1.0, 0.0), (0.7, 0.3)),
    ],
)
def test_subgradient_examples(
    spec: LossSpec, weights: tuple[float, float], expected: tuple[float, float]
) -> None:
    g = loss_subgradient_weights(
        [0.5],
        {E: [0.7], S: [0.3]},
        SimplexWeights(branches=(E, S), weights=weights),
        spec,
    )
    assert g == pytest.approx(expected, abs=1e-15)


def test_subgradient_squared() -> None:
    g = loss_subgradient_weights(
        [0.0],
        {E: [1.0], S: [0.0]},
        SimplexWeights(branches=(E, S), weights=(1.0, 0.0)),
        LossSpec(kind=LossKind.Squared),
    )
    assert g == pytest.approx((2.0, 0.0))


@pytest.mark.parametrize("spec", ALL_SPECS, ids=lambda s: s.kind.value)
def test_fusion_objective_is_convex(spec: LossSpec, rng: np.random.Generator) -> None:
    for _ in range(200):
        candidates = {b: rng.uniform(size=3) for b in (E, S, C)}
        y = rng.uniform(size=3)
        w1, w2 = _random_simplex(rng, 3), _random_simplex(rng, 3)
        lam = rng.uniform()

        def f(w: np.ndarray) -> float:
            return eval_loss(
                y,
                fuse_candidates(candidates, SimplexWeights.from_numpy((E, S, C), w)),
                spec,
            )

        mixed = lam * w1 + (1 - lam) * w2
        assert f(mixed) <= lam * f(w1) + (1 - lam) * f(w2) + 1e-9


@pytest.mark.parametrize("spec", ALL_SPECS, ids=lambda s: s.kind.value)
def test_subgradient_inequality(spec: LossSpec, rng: np.random.Generator) -> None:
    for _ in range(50):
        candidates = {b: rng.uniform(size=3) for b in (E, S, C)}
        y = rng.uniform(size=3)
        w = SimplexWeights.from_numpy((E, S, C), _random_simplex(rng, 3))
        g = loss_subgradient_weights(y, candidates, w, spec)
        fw = eval_loss(y, fuse_candidates(candidates, w), spec)
        for _ in range(20):
            u = SimplexWeights.from_numpy((E, S, C), _random_simplex(rng, 3))
            fu = eval_loss(y, fuse_candidates(candidates, u), spec)
            assert fu >= fw + g @ (u.numpy - w.numpy) - 1e-9


@pytest.mark.parametrize("spec", ALL_SPECS, ids=lambda s: s.kind.value)
def test_loss_is_bounded(spec: LossSpec, rng: np.random.Generator) -> None:
    worst = max(
        eval_loss(rng.uniform(size=3), rng.uniform(size=3), spec) for _ in range(500)
    )
    assert worst <= spec.upper_bound
    assert eval_loss([0.0, 0.0, 0.0], [1.0, 1.0, 1.0], spec) <= spec.upper_bound


def test_weighted_mae_needs_weights() -> None:
    with pytest.raises(ValidationError):
        LossSpec(kind=LossKind.WeightedMAE)
    spec = LossSpec(kind=LossKind.WeightedMAE, horizon_weights=(1, 1, 2))
    assert spec.horizon_weights == pytest.approx((0.25, 0.25, 0.5))
    with pytest.raises(DimensionError):
        eval_loss([0.1, 0.2], [0.1, 0.2], spec)
