import math

import numpy as np
import pytest

from app.data.models import TrainingPairs
from app.policy.ddpm import build_schedule
from app.policy.noise_net import (
    AdamState,
    LossHistory,
    NetConfig,
    NetParams,
    TrainConfig,
    adam_step,
    backward,
    forward,
    init_params,
    loss_and_grads,
    measure_inference_frequency,
    step_embedding,
    train,
)
from app.utils.exceptions import ConfigurationError, DimensionMismatchError, TrainingDivergenceError


def random_params(config: NetConfig, seed: int = 0) -> NetParams:
    rng = np.random.default_rng(seed)
    params = init_params(config, rng)
    return NetParams(config=config, arrays={k: rng.normal(0.0, 0.5, size=v.shape) for k, v in params.arrays.items()})


def test_parameter_layout() -> None:
    config = NetConfig(width=16, num_residual_blocks=2, obs_dim=36, action_dim=6, tau_embed_dim=16)
    params = init_params(config, np.random.default_rng(0))

    assert list(params.arrays) == [
        "input.W", "input.b",
        "block0.W1", "block0.b1", "block0.W2", "block0.b2",
        "block1.W1", "block1.b1", "block1.W2", "block1.b2",
        "head.W", "head.b",
    ]
    assert params.arrays["input.W"].shape == (36 + 6 + 16, 16)
    assert params.arrays["head.W"].shape == (16, 6)
    assert np.all(params.arrays["input.b"] == 0.0)
    limit = np.sqrt(6.0 / 16)
    assert np.all(np.abs(params.arrays["block0.W1"]) <= limit)


def test_wrong_parameter_shape_is_rejected() -> None:
    config = NetConfig(width=4, num_residual_blocks=1, obs_dim=2, action_dim=1)
    arrays = dict(init_params(config, np.random.default_rng(0)).arrays)
    arrays["head.W"] = np.zeros((5, 1))

    with pytest.raises(DimensionMismatchError):
        NetParams(config=config, arrays=arrays)


def test_invalid_net_config() -> None:
    with pytest.raises(ConfigurationError):
        NetConfig(width=0)
    with pytest.raises(ConfigurationError):
        NetConfig(tau_embed_dim=15)


def test_step_embedding_values() -> None:
    code = step_embedding(np.array([0, 3]), 16)

    assert code.shape == (2, 16)
    np.testing.assert_array_equal(code[0, :8], np.zeros(8))
    np.testing.assert_array_equal(code[0, 8:], np.ones(8))
    assert code[1, 0] == pytest.approx(np.sin(3.0))
    assert code[1, 8] == pytest.approx(np.cos(3.0))


def test_single_and_batched_forward_agree() -> None:
    config = NetConfig(width=8, num_residual_blocks=2, obs_dim=3, action_dim=2)
    params = random_params(config)
    rng = np.random.default_rng(1)
    obs = rng.normal(size=(4, 3))
    a_tau = rng.normal(size=(4, 2))
    taus = np.array([1, 2, 3, 4])

    batched = forward(params, obs, a_tau, taus)

    assert batched.shape == (4, 2)
    for row in range(4):
        np.testing.assert_allclose(forward(params, obs[row], a_tau[row], int(taus[row])), batched[row], atol=1e-12)
    np.testing.assert_allclose(params(obs, a_tau, taus), batched)


def test_zero_residual_branches_reduce_to_input_and_head() -> None:
    config = NetConfig(width=8, num_residual_blocks=2, obs_dim=3, action_dim=2)
    params = random_params(config)
    for i in range(2):
        params.arrays[f"block{i}.W2"][:] = 0.0
        params.arrays[f"block{i}.b2"][:] = 0.0
    rng = np.random.default_rng(2)
    obs, a_tau = rng.normal(size=(3, 3)), rng.normal(size=(3, 2))
    taus = np.array([1, 5, 9])

    x = np.concatenate([obs, a_tau, step_embedding(taus, 16)], axis=1)
    h = np.maximum(x @ params.arrays["input.W"] + params.arrays["input.b"], 0.0)
    expected = h @ params.arrays["head.W"] + params.arrays["head.b"]

    np.testing.assert_allclose(forward(params, obs, a_tau, taus), expected, atol=1e-12)


def test_forward_rejects_wrong_conditioning_size() -> None:
    params = init_params(NetConfig(width=4, obs_dim=3, action_dim=2), np.random.default_rng(0))

    with pytest.raises(DimensionMismatchError):
        forward(params, np.zeros(4), np.zeros(2), 1)


def test_gradient_matches_central_differences() -> None:
    config = NetConfig(width=8, num_residual_blocks=2, obs_dim=3, action_dim=2)
    params = random_params(config, seed=4)
    rng = np.random.default_rng(5)
    obs = rng.normal(size=(5, 3))
    a_tau = rng.normal(size=(5, 2))
    taus = rng.integers(1, 20, size=5)
    eps = rng.normal(size=(5, 2))

    _, grads = loss_and_grads(params, obs, a_tau, taus, eps)
    h = 1e-5
    failures = []
    for name, array in params.arrays.items():
        for index in np.ndindex(array.shape):
            original = array[index]
            array[index] = original + h
            plus, _ = loss_and_grads(params, obs, a_tau, taus, eps)
            array[index] = original - h
            minus, _ = loss_and_grads(params, obs, a_tau, taus, eps)
            array[index] = original
            numeric = (plus - minus) / (2 * h)
            analytic = grads[name][index]
            # relative error below 1e-4, with an absolute floor for near-zero entries
            if abs(numeric - analytic) > 1e-4 * max(abs(numeric), abs(analytic)) + 1e-7:
                failures.append((name, index, numeric, analytic))
    assert failures == []


def test_backward_matches_loss_and_grads() -> None:
    config = NetConfig(width=4, num_residual_blocks=1, obs_dim=2, action_dim=1)
    params = random_params(config)
    batch = (np.ones((2, 2)), np.ones((2, 1)), np.array([1, 2]), np.zeros((2, 1)))

    grads = backward(params, batch)

    _, expected = loss_and_grads(params, *batch)
    for name in params.arrays:
        np.testing.assert_array_equal(grads[name], expected[name])


def test_first_adam_step_matches_closed_form() -> None:
    config = NetConfig(width=4, num_residual_blocks=1, obs_dim=2, action_dim=1)
    params = random_params(config)
    grads = {k: np.full(v.shape, 0.5) for k, v in params.arrays.items()}
    grads["head.b"] = np.array([-2.0])

    updated, state = adam_step(params, grads, AdamState.zeros(params), lr=0.01)

    assert state.t == 1
    # bias-corrected first step moves every weight by lr * g / (|g| + eps)
    np.testing.assert_allclose(
        updated.arrays["input.W"], params.arrays["input.W"] - 0.01 * 0.5 / (0.5 + 1e-8), rtol=0, atol=1e-12
    )
    np.testing.assert_allclose(updated.arrays["head.b"], params.arrays["head.b"] + 0.01 * 2.0 / (2.0 + 1e-8), atol=1e-12)
    np.testing.assert_allclose(state.m["head.b"], [-0.2])
    np.testing.assert_allclose(state.v["head.b"], [0.004])


def test_adam_rejects_mismatched_gradients() -> None:
    params = init_params(NetConfig(width=4, num_residual_blocks=1, obs_dim=2, action_dim=1), np.random.default_rng(0))

    with pytest.raises(DimensionMismatchError):
        adam_step(params, {"input.W": np.zeros((19, 4))}, AdamState.zeros(params), lr=0.01)


def _overfit_pairs() -> TrainingPairs:
    rng = np.random.default_rng(7)
    return TrainingPairs(obs=rng.normal(size=(8, 2)), actions=rng.normal(size=(8, 2)))


def test_training_overfits_a_small_dataset() -> None:
    sched = build_schedule(10, 0.05, 0.3)

    result = train(
        _overfit_pairs(),
        NetConfig(width=32, num_residual_blocks=2, obs_dim=2, action_dim=2),
        TrainConfig(epochs=400, batch_size=8, learning_rate=3e-3, seed=0),
        sched,
    )

    first = np.mean(result.history.train[:10])
    last = np.mean(result.history.train[-20:])
    assert last < 0.5 * first


def test_training_fits_a_constant_dataset() -> None:
    pairs = TrainingPairs(obs=np.full((1024, 2), 0.2), actions=np.full((1024, 1), 0.5))

    result = train(
        pairs,
        NetConfig(width=64, num_residual_blocks=1, obs_dim=2, action_dim=1),
        TrainConfig(epochs=200, batch_size=128, learning_rate=3e-3, seed=0),
        build_schedule(4, 0.8, 0.9),
    )

    assert len(result.history.train) == 200
    assert result.history.train[-1] < 0.05


def test_training_is_bitwise_deterministic() -> None:
    sched = build_schedule(10, 0.05, 0.3)
    net_config = NetConfig(width=8, num_residual_blocks=1, obs_dim=2, action_dim=2)
    train_config = TrainConfig(epochs=10, batch_size=4, learning_rate=1e-3, seed=3)
    pairs = _overfit_pairs()

    first = train(pairs, net_config, train_config, sched, validation=pairs)
    second = train(pairs, net_config, train_config, sched, validation=pairs)

    assert first.history.train == second.history.train
    assert first.history.validation == second.history.validation
    for name in first.params.arrays:
        np.testing.assert_array_equal(first.params.arrays[name], second.params.arrays[name])


def test_validation_loss_is_recorded_every_five_epochs() -> None:
    pairs = _overfit_pairs()

    result = train(
        pairs,
        NetConfig(width=8, num_residual_blocks=1, obs_dim=2, action_dim=2),
        TrainConfig(epochs=12, batch_size=8, seed=0),
        build_schedule(10, 0.05, 0.3),
        validation=pairs,
    )

    assert [epoch for epoch, _ in result.history.validation] == [5, 10]
    rows = result.history.rows()
    assert len(rows) == 12
    assert rows[4][2] is not None and rows[3][2] is None


def test_training_divergence_is_reported() -> None:
    pairs = _overfit_pairs()
    pairs.actions[0, 0] = np.nan

    with pytest.raises(TrainingDivergenceError):
        train(
            pairs,
            NetConfig(width=8, num_residual_blocks=1, obs_dim=2, action_dim=2),
            TrainConfig(epochs=2, batch_size=8),
            build_schedule(10, 0.05, 0.3),
        )


def test_training_rejects_mismatched_pairs() -> None:
    with pytest.raises(DimensionMismatchError):
        train(
            _overfit_pairs(),
            NetConfig(width=8, num_residual_blocks=1, obs_dim=3, action_dim=2),
            TrainConfig(epochs=1),
            build_schedule(10, 0.05, 0.3),
        )


def test_loss_history_finals() -> None:
    history = LossHistory(train=[3.0, 2.0], validation=[(5, 1.5)])

    assert history.final_train == 2.0
    assert history.final_validation == 1.5
    assert LossHistory().final_train is None


def test_inference_timing_needs_enough_trials() -> None:
    params = init_params(NetConfig(width=4, num_residual_blocks=1), np.random.default_rng(0))

    with pytest.raises(ConfigurationError):
        measure_inference_frequency(params, build_schedule(5, 1e-3, 1e-2), trials=10)


def test_inference_timing_reports_frequency() -> None:
    params = init_params(NetConfig(width=4, num_residual_blocks=1), np.random.default_rng(0))

    timing = measure_inference_frequency(params, build_schedule(3, 1e-3, 1e-2), trials=100, warmup=2)

    assert len(timing.durations_s) == 100
    assert timing.hz == pytest.approx(1.0 / timing.median_s)


def test_forward_matches_elementwise_arithmetic() -> None:
    config = NetConfig(width=4, num_residual_blocks=1, obs_dim=2, action_dim=1, tau_embed_dim=16)
    params = random_params(config, seed=11)
    obs, a_tau, tau = [0.3, -0.7], [1.1], 7

    code = [math.sin(tau * 10000.0 ** (-k / 8)) for k in range(8)]
    code += [math.cos(tau * 10000.0 ** (-k / 8)) for k in range(8)]
    x = obs + a_tau + code
    p = {name: array.tolist() for name, array in params.arrays.items()}

    def affine(vector: list[float], weight: list[list[float]], bias: list[float]) -> list[float]:
        return [sum(vector[i] * weight[i][j] for i in range(len(vector))) + bias[j] for j in range(len(bias))]

    def relu(vector: list[float]) -> list[float]:
        return [max(v, 0.0) for v in vector]

    h = relu(affine(x, p["input.W"], p["input.b"]))
    branch = affine(relu(affine(h, p["block0.W1"], p["block0.b1"])), p["block0.W2"], p["block0.b2"])
    h = [a + b for a, b in zip(h, branch)]
    expected = affine(h, p["head.W"], p["head.b"])

    np.testing.assert_allclose(forward(params, np.array(obs), np.array(a_tau), tau), expected, rtol=0, atol=1e-10)


def _gradient_batch(seed: int, size: int = 6) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    return rng.normal(size=(size, 3)), rng.normal(size=(size, 2)), rng.integers(1, 20, size=size), rng.normal(size=(size, 2))


def test_duplicated_batch_keeps_mean_gradient() -> None:
    params = random_params(NetConfig(width=8, num_residual_blocks=2, obs_dim=3, action_dim=2), seed=12)
    batch = _gradient_batch(13)
    doubled = tuple(np.concatenate([part, part]) for part in batch)

    single = backward(params, batch)
    twice = backward(params, doubled)

    for name in params.arrays:
        np.testing.assert_allclose(twice[name], single[name], rtol=0, atol=1e-12)


def test_exact_noise_estimate_gives_zero_gradient() -> None:
    params = random_params(NetConfig(width=8, num_residual_blocks=2, obs_dim=3, action_dim=2), seed=14)
    obs, a_tau, taus, _ = _gradient_batch(15)
    eps = forward(params, obs, a_tau, taus)

    loss, grads = loss_and_grads(params, obs, a_tau, taus, eps)

    assert loss == 0.0
    for name in params.arrays:
        np.testing.assert_array_equal(grads[name], np.zeros_like(params.arrays[name]))


def test_gradient_ignores_batch_order() -> None:
    params = random_params(NetConfig(width=8, num_residual_blocks=2, obs_dim=3, action_dim=2), seed=16)
    batch = _gradient_batch(17)
    order = np.random.default_rng(18).permutation(6)

    ordered = backward(params, batch)
    shuffled = backward(params, tuple(part[order] for part in batch))

    for name in params.arrays:
        np.testing.assert_allclose(shuffled[name], ordered[name], rtol=0, atol=1e-12)


def test_adam_descends_a_quadratic_like_a_textbook_optimizer() -> None:
    params = random_params(NetConfig(width=4, num_residual_blocks=1, obs_dim=2, action_dim=1), seed=19)
    signs = np.random.default_rng(20)
    targets = {name: value + signs.choice([-1.0, 1.0], size=value.shape) for name, value in params.arrays.items()}
    lr, beta1, beta2, eps = 1e-3, 0.9, 0.999, 1e-8

    flat = {name: value.ravel().tolist() for name, value in params.arrays.items()}
    flat_targets = {name: value.ravel().tolist() for name, value in targets.items()}
    m = {name: [0.0] * len(values) for name, values in flat.items()}
    v = {name: [0.0] * len(values) for name, values in flat.items()}

    def quadratic(arrays: dict[str, np.ndarray]) -> float:
        return 0.5 * sum(float(np.sum((arrays[name] - targets[name]) ** 2)) for name in arrays)

    state = AdamState.zeros(params)
    losses = [quadratic(params.arrays)]
    for t in range(1, 101):
        grads = {name: params.arrays[name] - targets[name] for name in params.arrays}
        params, state = adam_step(params, grads, state, lr, beta1, beta2, eps)
        losses.append(quadratic(params.arrays))

        for name, values in flat.items():
            for k, value in enumerate(values):
                g = value - flat_targets[name][k]
                m[name][k] = beta1 * m[name][k] + (1 - beta1) * g
                v[name][k] = beta2 * v[name][k] + (1 - beta2) * g * g
                m_hat = m[name][k] / (1 - beta1 ** t)
                v_hat = v[name][k] / (1 - beta2 ** t)
                values[k] = value - lr * m_hat / (math.sqrt(v_hat) + eps)
        for name, values in flat.items():
            np.testing.assert_allclose(params.arrays[name].ravel(), values, rtol=0, atol=1e-8)

    assert state.t == 100
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_cosine_learning_rate_endpoints() -> None:
    config = TrainConfig(learning_rate=1e-3, final_lr_fraction=0.1)

    assert config.learning_rate_at(0, 101) == pytest.approx(1e-3)
    assert config.learning_rate_at(50, 101) == pytest.approx(0.55e-3)
    assert config.learning_rate_at(100, 101) == pytest.approx(1e-4)
    assert TrainConfig(final_lr_fraction=1.0).learning_rate_at(40, 101) == pytest.approx(1e-3)
    assert config.learning_rate_at(0, 1) == 1e-3


@pytest.mark.parametrize("fraction", [0.0, -0.5, 1.5])
def test_invalid_learning_rate_floor_is_rejected(fraction: float) -> None:
    with pytest.raises(ConfigurationError):
        TrainConfig(final_lr_fraction=fraction)
