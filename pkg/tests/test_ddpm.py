from decimal import Decimal, getcontext

import numpy as np
import pytest

from app.policy.ddpm import (
    DiffusedAction,
    ScheduleConfig,
    build_schedule,
    denoise_step,
    diffuse_batch,
    diffuse_closed_form,
    diffuse_step,
    sample,
    training_loss,
)
from app.utils.exceptions import ConfigurationError, DimensionMismatchError, NonFiniteValueError, StepIndexError


def zero_net(obs, a_tau, tau):
    return np.zeros_like(np.asarray(a_tau, dtype=np.float64))


def test_schedule_invariants() -> None:
    sched = build_schedule(50, 1e-4, 1e-2)

    assert sched.T == 50
    assert sched.beta[0] == pytest.approx(1e-4, abs=1e-14)
    assert sched.beta[-1] == pytest.approx(1e-2, abs=1e-14)
    assert np.all(np.diff(sched.beta) > 0)
    np.testing.assert_allclose(sched.alpha, 1.0 - sched.beta, rtol=0, atol=1e-14)
    np.testing.assert_allclose(sched.alpha_bar, np.cumprod(sched.alpha), rtol=0, atol=1e-14)
    np.testing.assert_allclose(sched.sigma ** 2, sched.beta, rtol=0, atol=1e-14)
    assert np.all(np.diff(sched.alpha_bar) < 0)
    assert np.all((sched.alpha_bar > 0) & (sched.alpha_bar < 1))


def test_alpha_bar_matches_high_precision_product() -> None:
    sched = build_schedule(50, 1e-4, 1e-2)
    getcontext().prec = 50
    product = Decimal(1)
    for alpha in sched.alpha:
        product *= Decimal(float(alpha))

    assert abs(float(product) - sched.alpha_bar[-1]) < 1e-12


def test_schedule_arrays_are_read_only() -> None:
    sched = build_schedule(10, 1e-3, 1e-2)

    with pytest.raises(ValueError):
        sched.beta[0] = 0.5


@pytest.mark.parametrize(
    ("T", "beta_start", "beta_end"),
    [(0, 1e-4, 1e-2), (10, 0.0, 1e-2), (10, 1e-2, 1e-3), (10, 1e-4, 1.0)],
)
def test_invalid_schedule_is_rejected(T: int, beta_start: float, beta_end: float) -> None:
    with pytest.raises(ConfigurationError):
        build_schedule(T, beta_start, beta_end)


def test_step_index_range_is_checked() -> None:
    sched = build_schedule(5, 1e-3, 1e-2)

    assert sched.index(1) == 0
    assert sched.index(5) == 4
    with pytest.raises(StepIndexError):
        sched.index(0)
    with pytest.raises(StepIndexError):
        sched.index(6)
    with pytest.raises(StepIndexError):
        diffuse_batch(np.zeros((2, 1)), np.zeros((2, 1)), np.array([1, 6]), sched)


def test_schedule_config_round_trips_through_schedule() -> None:
    config = ScheduleConfig(T=20, beta_start=1e-3, beta_end=5e-2, final_step_noise=True)

    assert config.build().config == config


@pytest.mark.parametrize("tau", [1, 10, 25, 50])
def test_closed_form_variance_matches_schedule(tau: int) -> None:
    sched = build_schedule(50, 1e-4, 1e-2)
    n = 100_000
    eps = np.random.default_rng(tau).standard_normal(n)

    value = diffuse_closed_form(np.zeros(n), eps, tau, sched).value

    expected = 1.0 - sched.alpha_bar[tau - 1]
    standard_error = expected * np.sqrt(2.0 / (n - 1))
    assert abs(value.var(ddof=1) - expected) < 4 * standard_error


def test_iterated_steps_match_scalar_recursion() -> None:
    sched = build_schedule(50, 1e-4, 1e-2)
    rng = np.random.default_rng(0)
    noises = rng.standard_normal((50, 1))

    a = DiffusedAction(value=np.array([0.7]), tau=0)
    expected = 0.7
    for tau in range(1, 51):
        a = diffuse_step(a, noises[tau - 1], tau, sched)
        expected = float(np.sqrt(1.0 - sched.beta[tau - 1])) * expected + float(np.sqrt(sched.beta[tau - 1])) * float(
            noises[tau - 1, 0]
        )
        assert abs(a.value[0] - expected) < 1e-12
    assert a.tau == 50


def test_diffuse_step_requires_previous_step() -> None:
    sched = build_schedule(5, 1e-3, 1e-2)

    with pytest.raises(ConfigurationError):
        diffuse_step(DiffusedAction(value=np.zeros(2), tau=2), np.zeros(2), 2, sched)


def test_noise_shape_must_match_action() -> None:
    sched = build_schedule(5, 1e-3, 1e-2)

    with pytest.raises(DimensionMismatchError):
        diffuse_closed_form(np.zeros(3), np.zeros(2), 1, sched)


def test_non_finite_diffused_action_is_rejected() -> None:
    with pytest.raises(NonFiniteValueError):
        DiffusedAction(value=np.array([np.nan]), tau=1)


def test_denoise_with_true_noise_recovers_clean_action_at_first_step() -> None:
    sched = build_schedule(10, 1e-2, 0.1)
    a0 = np.array([0.3, -1.2])
    eps = np.array([0.5, 0.8])
    a1 = diffuse_closed_form(a0, eps, 1, sched)

    restored = denoise_step(a1, eps, np.array([9.0, 9.0]), 1, sched)

    assert restored.tau == 0
    np.testing.assert_allclose(restored.value, a0, atol=1e-12)


def test_final_step_noise_flag_adds_sigma_term() -> None:
    plain = build_schedule(10, 1e-2, 0.1)
    noisy = build_schedule(10, 1e-2, 0.1, final_step_noise=True)
    a1 = DiffusedAction(value=np.array([0.4]), tau=1)
    z = np.array([1.5])

    without = denoise_step(a1, np.zeros(1), z, 1, plain)
    with_noise = denoise_step(a1, np.zeros(1), z, 1, noisy)

    np.testing.assert_allclose(with_noise.value - without.value, noisy.sigma[0] * z, atol=1e-15)


def test_training_loss_of_zero_estimator_is_noise_energy() -> None:
    sched = build_schedule(10, 1e-3, 1e-2)
    eps = np.array([0.3, -0.4, 1.2])

    loss = training_loss(np.zeros(4), np.ones(3), 5, eps, zero_net, sched)

    assert loss == pytest.approx(float(np.sum(eps ** 2)))


def test_training_loss_averages_over_batch() -> None:
    sched = build_schedule(10, 1e-3, 1e-2)
    eps = np.array([[1.0, 0.0], [0.0, 2.0]])

    loss = training_loss(np.zeros((2, 3)), np.zeros((2, 2)), np.array([1, 7]), eps, zero_net, sched)

    assert loss == pytest.approx(2.5)


def test_sample_is_deterministic_and_traced() -> None:
    sched = build_schedule(8, 1e-3, 0.1)

    first = sample(np.zeros(4), zero_net, sched, np.random.default_rng(11), action_dim=3, trace=True)
    second = sample(np.zeros(4), zero_net, sched, np.random.default_rng(11), action_dim=3, trace=True)

    np.testing.assert_array_equal(first.action, second.action)
    assert first.trace_taus == list(range(8, -1, -1))
    assert len(first.trace) == 9
    np.testing.assert_array_equal(first.trace[-1], first.action)


def test_batched_sample_shape_and_denormalization() -> None:
    sched = build_schedule(4, 1e-3, 0.1)

    result = sample(
        np.zeros((5, 2)), zero_net, sched, np.random.default_rng(0), action_dim=3,
        denormalize=lambda a: a * 10.0 + 1.0, trace=True,
    )

    assert result.action.shape == (5, 3)
    raw = sample(np.zeros((5, 2)), zero_net, sched, np.random.default_rng(0), action_dim=3)
    np.testing.assert_allclose(result.action, raw.action * 10.0 + 1.0)
    np.testing.assert_allclose(result.trace[-1], result.action)


def test_sample_rejects_non_finite_estimates() -> None:
    sched = build_schedule(4, 1e-3, 0.1)

    def broken(obs, a_tau, tau):
        return np.full_like(a_tau, np.nan)

    with pytest.raises(NonFiniteValueError):
        sample(np.zeros(2), broken, sched, np.random.default_rng(0), action_dim=2)


def test_sample_rejects_wrong_estimator_shape() -> None:
    sched = build_schedule(4, 1e-3, 0.1)

    def wrong(obs, a_tau, tau):
        return np.zeros(5)

    with pytest.raises(DimensionMismatchError):
        sample(np.zeros(2), wrong, sched, np.random.default_rng(0), action_dim=2)


@pytest.mark.slow
def test_toy_conditional_two_mode_distribution_is_learned() -> None:
    from app.data.models import TrainingPairs
    from app.policy.noise_net import NetConfig, TrainConfig, train

    rng = np.random.default_rng(0)
    n = 20_000
    condition = rng.choice([-1.0, 1.0], size=n)
    weight_positive = np.where(condition > 0, 0.8, 0.2)
    mode = np.where(rng.random(n) < weight_positive, 1.0, -1.0)
    target = mode + rng.normal(0.0, 0.1, size=n)
    pairs = TrainingPairs(obs=condition[:, None], actions=target[:, None])
    sched = build_schedule(50, 1e-4, 0.2)

    result = train(
        pairs,
        NetConfig(width=64, num_residual_blocks=2, obs_dim=1, action_dim=1),
        TrainConfig(epochs=300, batch_size=256, learning_rate=1e-3, seed=0, max_steps_per_epoch=40),
        sched,
    )

    for c, expected_weight in ((1.0, 0.8), (-1.0, 0.2)):
        draws = sample(np.full((2000, 1), c), result.params, sched, np.random.default_rng(1), action_dim=1).action[:, 0]
        positive = draws[draws > 0]
        negative = draws[draws <= 0]
        assert abs(positive.mean() - 1.0) < 0.15
        assert abs(negative.mean() + 1.0) < 0.15
        assert abs(positive.size / draws.size - expected_weight) < 0.1


def test_noiseless_reverse_chain_telescopes_to_alpha_bar_scaling() -> None:
    sched = build_schedule(50, 1e-4, 1e-2)
    e1 = np.array([1.0, 0.0, 0.0, 0.0, 0.0, 0.0])
    zeros = np.zeros(6)

    current = DiffusedAction(value=e1, tau=sched.T)
    for tau in range(sched.T, 0, -1):
        current = denoise_step(current, zeros, zeros, tau, sched)

    getcontext().prec = 50
    product = Decimal(1)
    for alpha in sched.alpha:
        product *= Decimal(float(alpha))
    expected = float(Decimal(1) / product.sqrt())

    assert current.tau == 0
    assert abs(current.value[0] - expected) < 1e-10
    np.testing.assert_array_equal(current.value[1:], zeros[1:])
