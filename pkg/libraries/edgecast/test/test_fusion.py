import math

import numpy as np
import pytest
from pydantic import ValidationError
from scipy.optimize import minimize

from edgecast.calibration import ExecutedModeCalibrator, ReplayRecord
from edgecast.core import (
    Branch,
    HorizonVector,
    LossKind,
    LossSpec,
    Mode,
    SimplexWeights,
    eval_loss,
    loss_subgradient_weights,
)
from edgecast.fusion import (
    CumulativeGradient,
    FusionConfig,
    FusionHistory,
    FusionRound,
    PendingForecast,
    PriorMode,
    RevealBuffer,
    fuse_and_emit,
    fusion_weights,
    regret_report,
    replay_priors,
    reveal_and_update,
)
from edgecast.screening import ScreeningFeatures

E, S, C = Branch.expert, Branch.small, Branch.cloud


def _pending(
    mode: Mode,
    candidates: dict[Branch, list[float]],
    weights: SimplexWeights | None,
    slot: int = 0,
    reveal_slot: int = 2,
    node_id: str = "n0",
) -> PendingForecast:
    vectors = {b: HorizonVector(values=v) for b, v in candidates.items()}
    prediction = fuse_and_emit(mode, vectors, weights)
    return PendingForecast(
        node_id=node_id,
        slot=slot,
        mode=mode,
        candidates=vectors,
        weights=weights,
        prediction=prediction,
        calibrated_score=0.4,
        reveal_slot=reveal_slot,
    )


def _state() -> tuple[RevealBuffer, CumulativeGradient, ExecutedModeCalibrator]:
    return RevealBuffer(), CumulativeGradient(), ExecutedModeCalibrator()


def _kl_objective(
    w: np.ndarray, eta: float, prior: np.ndarray, gamma: np.ndarray
) -> float:
    return float(eta * gamma @ w + np.sum(w * np.log(w / prior)))


def test_fusion_weight_examples() -> None:
    gamma = CumulativeGradient()
    uniform = fusion_weights(FusionConfig(), gamma, "n0", Mode.CLOUD_ASSISTED)
    assert uniform.numpy == pytest.approx([1 / 3] * 3, abs=1e-15)

    gamma.add("n0", Mode.EDGE_FUSION, np.array([0.0, math.log(2)]))
    w = fusion_weights(FusionConfig(eta=1.0), gamma, "n0", Mode.EDGE_FUSION)
    assert w.branches == (E, S)
    assert w.numpy == pytest.approx([2 / 3, 1 / 3], abs=1e-12)

    shifted = CumulativeGradient()
    shifted.add("n0", Mode.EDGE_FUSION, np.array([5.0, 5.0 + math.log(2)]))
    w2 = fusion_weights(FusionConfig(eta=1.0), shifted, "n0", Mode.EDGE_FUSION)
    assert w2.numpy == pytest.approx(w.numpy, abs=1e-12)

    with pytest.raises(ValueError):
        fusion_weights(FusionConfig(), gamma, "n0", Mode.EXPERT_ONLY)


def test_fusion_weights_stay_positive_after_long_losing_streak() -> None:
    gamma = CumulativeGradient()
    gamma.add("n0", Mode.CLOUD_ASSISTED, np.array([0.0, 2000.0, 0.0]))
    w = fusion_weights(FusionConfig(eta=0.5), gamma, "n0", Mode.CLOUD_ASSISTED).numpy
    assert (w > 0).all()
    assert w.sum() == pytest.approx(1.0)
    assert w[[0, 2]] == pytest.approx([0.5, 0.5])

    # the losing branch regains weight once the others catch up
    gamma.add("n0", Mode.CLOUD_ASSISTED, np.array([2000.0, 0.0, 2000.0]))
    w = fusion_weights(FusionConfig(eta=0.5), gamma, "n0", Mode.CLOUD_ASSISTED).numpy
    assert w == pytest.approx([1 / 3] * 3)

    gamma.add("n0", Mode.EDGE_FUSION, np.array([1e6, 0.0]))
    edge = fusion_weights(FusionConfig(eta=5.0), gamma, "n0", Mode.EDGE_FUSION).numpy
    assert edge[0] > 0 and edge[1] == pytest.approx(1.0)


def test_closed_form_minimizes_kl_objective(rng: np.random.Generator) -> None:
    for _ in range(300):
        mode = Mode.CLOUD_ASSISTED if rng.uniform() < 0.5 else Mode.EDGE_FUSION
        m = len(mode.branches)
        prior = rng.dirichlet(np.full(m, 2.0))
        eta = rng.uniform(0.1, 2.0)
        g = rng.normal(scale=0.5, size=m)
        config = FusionConfig(eta=eta, priors={int(mode): tuple(prior / prior.sum())})
        gamma = CumulativeGradient()
        gamma.add("n0", mode, g)
        closed = fusion_weights(config, gamma, "n0", mode).numpy
        assert np.all(closed > 0)

        res = minimize(
            _kl_objective,
            config.prior(mode),
            args=(eta, config.prior(mode), g),
            jac=lambda w, eta, p, g: eta * g + np.log(w / p) + 1.0,
            method="SLSQP",
            bounds=[(1e-12, 1.0)] * m,
            constraints=[{"type": "eq", "fun": lambda w: w.sum() - 1.0}],
            options={"ftol": 1e-15, "maxiter": 1000},
        )
        numeric = res.x / res.x.sum()
        p = config.prior(mode)
        best = _kl_objective(numeric, eta, p, g)
        assert _kl_objective(closed, eta, p, g) <= best + 1e-12
        assert np.abs(closed - numeric).max() < 1e-5


def test_fuse_and_emit() -> None:
    candidates = {E: [0.2, 0.4], S: [0.6, 0.8]}
    assert fuse_and_emit(Mode.EXPERT_ONLY, {E: [0.2, 0.4]}).values == (0.2, 0.4)
    fused = fuse_and_emit(Mode.EDGE_FUSION, candidates, SimplexWeights.uniform((E, S)))
    assert fused.numpy == pytest.approx([0.4, 0.6])
    one_hot = fuse_and_emit(
        Mode.EDGE_FUSION, candidates, SimplexWeights.one_hot((E, S), S)
    )
    assert one_hot.numpy == pytest.approx([0.6, 0.8])
    with pytest.raises(ValueError):
        fuse_and_emit(Mode.EDGE_FUSION, candidates)


def test_fusion_config_priors() -> None:
    config = FusionConfig(priors={2: (0.5, 0.25, 0.25)})
    assert config.prior(2) == pytest.approx([0.5, 0.25, 0.25])
    assert config.prior(1) == pytest.approx([0.5, 0.5])
    for bad in ({0: (1.0,)}, {1: (0.5, 0.25, 0.25)}, {1: (1.0, 0.0)}, {1: (0.7, 0.7)}):
        with pytest.raises(ValidationError):
            FusionConfig(priors=bad)


def test_replay_priors() -> None:
    record = ReplayRecord(
        node_id="n0",
        slot=0,
        features=ScreeningFeatures(u=0, o=0, mu=0, d=0),
        loss0=0.1,
        loss1=0.1,
        loss2=0.1,
        branch_losses=(0.1, 0.2, 0.4),
        oracle_label=1,
    )
    priors = replay_priors([record])
    assert priors[1] == pytest.approx((2 / 3, 1 / 3))
    assert priors[2] == pytest.approx((10 / 17.5, 5 / 17.5, 2.5 / 17.5))

    config = FusionConfig(
        prior_mode=PriorMode.inverse_replay_loss, priors={1: (0.5, 0.5)}
    ).with_replay_priors([record])
    assert config.priors[1] == (0.5, 0.5)
    assert config.priors[2] == pytest.approx(priors[2])
    assert FusionConfig().with_replay_priors([record]).priors == {}


def test_reveal_empty_buffer() -> None:
    buffer, gamma, calibrator = _state()
    assert reveal_and_update(buffer, gamma, calibrator, 10, {}) == []
    assert gamma.snapshot() == {} and calibrator.counts == {}


def test_reveal_expert_only_record() -> None:
    buffer, gamma, calibrator = _state()
    buffer.push(_pending(Mode.EXPERT_ONLY, {E: [0.7]}, None))
    (realized,) = reveal_and_update(buffer, gamma, calibrator, 2, {("n0", 0): [0.5]})
    assert realized.loss == pytest.approx(0.2)
    assert sum(calibrator.counts["n0|0"]) == 1
    assert gamma.snapshot() == {}
    assert len(buffer) == 0


def test_reveal_fused_record_updates_gamma() -> None:
    buffer, gamma, calibrator = _state()
    weights = SimplexWeights(branches=(E, S), weights=(1.0, 0.0))
    buffer.push(_pending(Mode.EDGE_FUSION, {E: [0.7], S: [0.3]}, weights))
    history = FusionHistory()
    reveal_and_update(
        buffer, gamma, calibrator, 2, {("n0", 0): [0.5]}, history=history
    )
    expected = loss_subgradient_weights([0.5], {E: [0.7], S: [0.3]}, weights)
    assert gamma.get("n0", Mode.EDGE_FUSION) == pytest.approx(expected)
    assert gamma.get("n0", Mode.EDGE_FUSION) == pytest.approx([0.7, 0.3])
    assert len(history.by_mode(Mode.EDGE_FUSION)["n0"]) == 1

    frozen = CumulativeGradient()
    buffer.push(_pending(Mode.EDGE_FUSION, {E: [0.7], S: [0.3]}, weights, slot=1,
                         reveal_slot=3))
    reveal_and_update(
        buffer, frozen, calibrator, 3, {("n0", 1): [0.5]}, learn_weights=False
    )
    assert frozen.snapshot() == {}
    assert sum(calibrator.counts["n0|1"]) == 2


def test_reveal_waits_for_reveal_slot_and_keeps_missing_targets() -> None:
    buffer, gamma, calibrator = _state()
    weights = SimplexWeights(branches=(E, S), weights=(1.0, 0.0))
    buffer.push(
        _pending(Mode.EDGE_FUSION, {E: [0.7], S: [0.3]}, weights, reveal_slot=10)
    )
    targets = {("n0", 0): [0.5]}
    for slot in range(10):
        assert reveal_and_update(buffer, gamma, calibrator, slot, targets) == []
        assert gamma.snapshot() == {}
    assert len(reveal_and_update(buffer, gamma, calibrator, 10, targets)) == 1
    assert gamma.snapshot() != {}

    buffer.push(_pending(Mode.EXPERT_ONLY, {E: [0.7]}, None, slot=5, reveal_slot=7))
    assert reveal_and_update(buffer, gamma, calibrator, 7, targets) == []
    assert buffer.missing_targets == 1 and len(buffer) == 1
    realized = reveal_and_update(buffer, gamma, calibrator, 8, {("n0", 5): [0.7]})
    assert [r.slot for r in realized] == [5]
    assert len(buffer) == 0


def test_reveal_order_is_slot_then_node() -> None:
    buffer = RevealBuffer()
    for node_id, slot in (("b", 1), ("a", 1), ("c", 0)):
        buffer.push(_pending(Mode.EXPERT_ONLY, {E: [0.1]}, None, slot, 2, node_id))
    assert [(r.slot, r.node_id) for r in buffer.pop_due(5)] == [
        (0, "c"), (1, "a"), (1, "b")
    ]


def test_regret_single_round_and_exact_branch(rng: np.random.Generator) -> None:
    stack = rng.uniform(size=(3, 2))
    single = regret_report([FusionRound(stack, rng.uniform(size=2), np.full(3, 1 / 3))])
    assert single.rounds == 1 and single.method == "linprog"
    assert single.regret >= -1e-9

    rounds = []
    for _ in range(30):
        stack = rng.uniform(size=(3, 2))
        rounds.append(FusionRound(stack, stack[0].copy(), rng.dirichlet(np.ones(3))))
    report = regret_report(rounds)
    assert report.comparator_loss == pytest.approx(0.0, abs=1e-7)
    assert report.regret == pytest.approx(report.algorithm_loss, abs=1e-7)
    assert report.comparator[0] == pytest.approx(1.0, abs=1e-6)


def test_regret_smooth_loss_comparator(rng: np.random.Generator) -> None:
    spec = LossSpec(kind=LossKind.Squared)
    rounds = [
        FusionRound(rng.uniform(size=(2, 3)), rng.uniform(size=3), np.array([0.5, 0.5]))
        for _ in range(40)
    ]
    report = regret_report(rounds, spec)
    assert report.method == "slsqp"
    assert report.kkt_verified and report.kkt_residual < 1e-8
    grid = np.linspace(0, 1, 201)
    brute = min(
        sum(eval_loss(r.target, np.array([a, 1 - a]) @ r.stack, spec) for r in rounds)
        for a in grid
    )
    assert report.comparator_loss <= brute + 1e-9
    with pytest.raises(ValueError):
        regret_report([])


@pytest.mark.parametrize(
    "spec",
    [
        LossSpec(),
        LossSpec(kind=LossKind.WeightedMAE, horizon_weights=(3.0, 1.0, 1.0)),
        LossSpec(kind=LossKind.Squared),
        LossSpec(kind=LossKind.Squared, horizon_weights=(1.0, 2.0, 4.0)),
        LossSpec(kind=LossKind.Huber, huber_delta=1.0),
    ],
)
def test_comparator_kkt_residual_is_verified(
    rng: np.random.Generator, spec: LossSpec
) -> None:
    for _ in range(20):
        m = int(rng.integers(2, 4))
        rounds = [
            FusionRound(
                rng.uniform(size=(m, 3)), rng.uniform(size=3), rng.dirichlet(np.ones(m))
            )
            for _ in range(int(rng.integers(5, 40)))
        ]
        report = regret_report(rounds, spec)
        assert report.kkt_verified
        assert report.kkt_residual < 1e-8
        assert sum(report.comparator) == pytest.approx(1.0)
        assert min(report.comparator) >= 0.0


def _ftrl_stream(rng: np.random.Generator, rounds: int) -> float:
    m = 3
    config = FusionConfig(eta=math.sqrt(math.log(m) / rounds))
    buffer, gamma, calibrator = _state()
    history = FusionHistory()
    offsets = np.array([0.05, 0.15, 0.3])
    for t in range(rounds):
        target = rng.uniform(0.2, 0.8, size=2)
        noise = rng.uniform(-1, 1, size=(m, 2)) * offsets[:, None]
        candidates = {
            b: np.clip(target + n, 0, 1).tolist() for b, n in zip((E, S, C), noise)
        }
        weights = fusion_weights(config, gamma, "n0", Mode.CLOUD_ASSISTED)
        buffer.push(
            _pending(Mode.CLOUD_ASSISTED, candidates, weights, slot=t, reveal_slot=t + 1)
        )
        reveal_and_update(
            buffer, gamma, calibrator, t + 1, {("n0", t): target}, history=history
        )
    report = regret_report(history.by_mode(Mode.CLOUD_ASSISTED)["n0"])
    assert report.rounds == rounds
    return report.regret


def test_regret_is_sublinear(rng: np.random.Generator) -> None:
    for rounds in (100, 400, 1600):
        regret = _ftrl_stream(rng, rounds)
        # entropic FTRL: log(m) / eta + eta * R with subgradients bounded by 1
        assert regret <= 2 * math.sqrt(rounds * math.log(3)) + 1e-9
        assert regret / rounds <= 2 * math.sqrt(math.log(3) / rounds) + 1e-9
