"""
Variance schedule, forward diffusion, training loss and the denoising sampler.

Step indices follow the usual DDPM notation: tau runs from 1 to T inclusive and
is mapped onto 0-based arrays through ``VarianceSchedule.index``. tau = 0 is a
clean action, tau = T is pure prior noise.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

from app.utils.exceptions import (
    ConfigurationError,
    DimensionMismatchError,
    NonFiniteValueError,
    StepIndexError,
)

__all__ = [
    "ScheduleConfig",
    "VarianceSchedule",
    "DiffusedAction",
    "NoiseEstimator",
    "SampleResult",
    "build_schedule",
    "diffuse_step",
    "diffuse_closed_form",
    "diffuse_batch",
    "training_loss",
    "denoise_step",
    "sample",
]


class NoiseEstimator(Protocol):
    """Callable predicting the injected noise from (obs, a_tau, tau)."""

    def __call__(self, obs: np.ndarray, a_tau: np.ndarray, tau: np.ndarray | int) -> np.ndarray: ...


@dataclass(frozen=True)
class ScheduleConfig:
    """
    Parameters a variance schedule is built from.

    Attributes:
    - T (int): Diffusion horizon.
    - beta_start (float): First noise weight.
    - beta_end (float): Last noise weight.
    - final_step_noise (bool): Add sigma_1 * eps on the last denoising step.
    """
    T: int = 50
    beta_start: float = 1e-4
    beta_end: float = 1e-2
    final_step_noise: bool = False

    def build(self) -> "VarianceSchedule":
        return build_schedule(self.T, self.beta_start, self.beta_end, final_step_noise=self.final_step_noise)


@dataclass(frozen=True)
class VarianceSchedule:
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray
    final_step_noise: bool = False

    def index(self, tau: int) -> int:
        """Return the 0-based array index of step ``tau`` after validating its range."""
        if not 1 <= int(tau) <= self.T:
            raise StepIndexError(tau=tau, T=self.T)
        return int(tau) - 1

    def indices(self, taus: np.ndarray) -> np.ndarray:
        taus = np.asarray(taus, dtype=np.int64)
        if taus.size and (taus.min() < 1 or taus.max() > self.T):
            bad = taus[(taus < 1) | (taus > self.T)][0]
            raise StepIndexError(tau=int(bad), T=self.T)
        return taus - 1

    @property
    def config(self) -> ScheduleConfig:
        return ScheduleConfig(
            T=self.T,
            beta_start=float(self.beta[0]),
            beta_end=float(self.beta[-1]),
            final_step_noise=self.final_step_noise,
        )


@dataclass(frozen=True)
class DiffusedAction:
    value: np.ndarray
    tau: int

    def __post_init__(self) -> None:
        value = np.asarray(self.value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise NonFiniteValueError(where=f"diffused action at tau={self.tau}")
        object.__setattr__(self, "value", value)


@dataclass
class SampleResult:
    """Output of :func:`sample`; ``trace`` holds a_T .. a_0 when requested."""
    action: np.ndarray
    trace: list[np.ndarray] = field(default_factory=list)
    trace_taus: list[int] = field(default_factory=list)


def build_schedule(T: int, beta_start: float, beta_end: float, *, final_step_noise: bool = False) -> VarianceSchedule:
    """
    Build a linear beta schedule and its derived quantities.

    :param T: Diffusion horizon, at least 1.
    :param beta_start: beta_1, in (0, 1).
    :param beta_end: beta_T, in [beta_start, 1).
    :param final_step_noise: Keep the sigma_1 * eps term on the last denoising step.
    :return: The variance schedule.
    """
    if int(T) != T or T < 1:
        raise ConfigurationError(reason=f"diffusion horizon T must be a positive integer, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ConfigurationError(
            reason=f"betas must satisfy 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )

    beta = np.linspace(beta_start, beta_end, int(T), dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    sigma = np.sqrt(beta)

    for array in (beta, alpha, alpha_bar, sigma):
        array.setflags(write=False)

    return VarianceSchedule(
        T=int(T),
        beta=beta,
        alpha=alpha,
        alpha_bar=alpha_bar,
        sigma=sigma,
        final_step_noise=final_step_noise,
    )


def diffuse_step(a_prev: DiffusedAction, eps: np.ndarray, tau: int, sched: VarianceSchedule) -> DiffusedAction:
    """Apply one forward noising step: a_tau = sqrt(alpha_tau) a_{tau-1} + sqrt(beta_tau) eps."""
    i = sched.index(tau)
    if a_prev.tau != tau - 1:
        raise ConfigurationError(reason=f"diffuse_step to tau={tau} expects a_prev at tau={tau - 1}, got {a_prev.tau}")
    eps = _check_like(eps, a_prev.value, "diffuse_step noise")
    value = np.sqrt(sched.alpha[i]) * a_prev.value + np.sqrt(sched.beta[i]) * eps
    return DiffusedAction(value=value, tau=tau)


def diffuse_closed_form(a0: np.ndarray, eps: np.ndarray, tau: int, sched: VarianceSchedule) -> DiffusedAction:
    """Jump straight to step tau: a_tau = sqrt(alpha_bar) a0 + sqrt(1 - alpha_bar) eps."""
    i = sched.index(tau)
    a0 = np.asarray(a0, dtype=np.float64)
    eps = _check_like(eps, a0, "diffuse_closed_form noise")
    value = np.sqrt(sched.alpha_bar[i]) * a0 + np.sqrt(1.0 - sched.alpha_bar[i]) * eps
    return DiffusedAction(value=value, tau=int(tau))


def diffuse_batch(a0: np.ndarray, eps: np.ndarray, taus: np.ndarray, sched: VarianceSchedule) -> np.ndarray:
    """Vectorized closed-form diffusion of a (B, d) batch with per-row steps."""
    a0 = np.asarray(a0, dtype=np.float64)
    eps = _check_like(eps, a0, "diffuse_batch noise")
    idx = sched.indices(taus)
    ab = sched.alpha_bar[idx][:, None]
    return np.sqrt(ab) * a0 + np.sqrt(1.0 - ab) * eps


def training_loss(
    obs: np.ndarray,
    a0: np.ndarray,
    tau: int | np.ndarray,
    eps: np.ndarray,
    net: NoiseEstimator,
    sched: VarianceSchedule,
) -> float:
    """
    Noise-prediction loss ||eps_hat(obs, a_tau, tau) - eps||^2, averaged over a batch.

    Single samples (1-D ``a0``) and batches (2-D ``a0`` with per-row ``tau``) are both accepted.
    """
    a0 = np.asarray(a0, dtype=np.float64)
    eps = _check_like(eps, a0, "training_loss noise")
    batched = a0.ndim == 2
    a0_b = np.atleast_2d(a0)
    eps_b = np.atleast_2d(eps)
    taus = np.broadcast_to(np.asarray(tau, dtype=np.int64), (a0_b.shape[0],))
    a_tau = diffuse_batch(a0_b, eps_b, taus, sched)

    obs_b = np.atleast_2d(np.asarray(obs, dtype=np.float64))
    eps_hat = np.asarray(net(obs_b if batched else obs_b[0], a_tau if batched else a_tau[0], taus if batched else int(taus[0])))
    eps_hat = np.atleast_2d(eps_hat)
    if eps_hat.shape != eps_b.shape:
        raise DimensionMismatchError(where="noise estimator output", expected=eps_b.shape, actual=eps_hat.shape)
    return float(np.mean(np.sum((eps_hat - eps_b) ** 2, axis=1)))


def denoise_step(
    a_tau: DiffusedAction,
    eps_hat: np.ndarray,
    eps: np.ndarray,
    tau: int,
    sched: VarianceSchedule,
) -> DiffusedAction:
    """
    One reverse step:
    a_{tau-1} = (a_tau - (1 - alpha)/sqrt(1 - alpha_bar) * eps_hat) / sqrt(alpha) + sigma * eps.

    At tau = 1 the sigma * eps term is dropped unless the schedule keeps final-step noise.
    """
    i = sched.index(tau)
    eps_hat = _check_like(eps_hat, a_tau.value, "denoise_step estimate")
    eps = _check_like(eps, a_tau.value, "denoise_step noise")
    value = _reverse(a_tau.value, eps_hat, eps, i, sched)
    return DiffusedAction(value=value, tau=int(tau) - 1)


def sample(
    obs: np.ndarray,
    net: NoiseEstimator,
    sched: VarianceSchedule,
    rng: np.random.Generator,
    *,
    action_dim: int = 6,
    denormalize: Callable[[np.ndarray], np.ndarray] | None = None,
    trace: bool = False,
) -> SampleResult:
    """
    Draw an action by running the full reverse chain from a_T ~ N(0, I).

    ``obs`` may be a single conditioning vector or a (B, obs_dim) batch; the draws for
    a batch come from the same generator in a fixed order, so results are a pure
    function of (obs, net, seed).

    :param obs: Conditioning vector(s), already normalized.
    :param net: Noise estimator.
    :param sched: Variance schedule.
    :param rng: Seeded generator.
    :param action_dim: Dimension of the action space.
    :param denormalize: Maps normalized actions back to physical units (also applied to the trace).
    :param trace: Record a_T, ..., a_0.
    :return: The sampled action(s) and the optional trace.
    """
    obs = np.asarray(obs, dtype=np.float64)
    batched = obs.ndim == 2
    shape = (obs.shape[0], action_dim) if batched else (action_dim,)

    a = rng.standard_normal(shape)
    states: list[np.ndarray] = [a.copy()] if trace else []
    taus: list[int] = [sched.T] if trace else []

    for tau in range(sched.T, 0, -1):
        i = tau - 1
        eps_hat = np.asarray(net(obs, a, np.full(shape[0], tau) if batched else tau), dtype=np.float64)
        if eps_hat.shape != a.shape:
            raise DimensionMismatchError(where="noise estimator output", expected=a.shape, actual=eps_hat.shape)
        eps = rng.standard_normal(shape)
        a = _reverse(a, eps_hat, eps, i, sched)
        if not np.all(np.isfinite(a)):
            raise NonFiniteValueError(where=f"denoising step tau={tau}")
        if trace:
            states.append(a.copy())
            taus.append(tau - 1)

    if denormalize is not None:
        action = denormalize(a)
        states = [denormalize(state) for state in states]
    else:
        action = a
    return SampleResult(action=action, trace=states, trace_taus=taus)


def _reverse(a: np.ndarray, eps_hat: np.ndarray, eps: np.ndarray, i: int, sched: VarianceSchedule) -> np.ndarray:
    alpha = sched.alpha[i]
    coef = (1.0 - alpha) / np.sqrt(1.0 - sched.alpha_bar[i])
    mean = (a - coef * eps_hat) / np.sqrt(alpha)
    if i == 0 and not sched.final_step_noise:
        return mean
    return mean + sched.sigma[i] * eps


def _check_like(array: np.ndarray, like: np.ndarray, where: str) -> np.ndarray:
    array = np.asarray(array, dtype=np.float64)
    if array.shape != np.shape(like):
        raise DimensionMismatchError(where=where, expected=np.shape(like), actual=array.shape)
    return array
