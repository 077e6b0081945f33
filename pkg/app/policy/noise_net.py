"""
Residual MLP noise estimator eps_hat(o, a_tau, tau) written directly against numpy.

Layout (all sizes from ``NetConfig``)::

    x  = [obs | a_tau | sinusoid(tau)]
    h  = relu(x @ W_in + b_in)
    h  = h + relu(h @ W1 + b1) @ W2 + b2        (repeated num_residual_blocks times)
    out = h @ W_head + b_head
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
from cachetools import LRUCache, cached

from app.data.models import TrainingPairs
from app.utils.exceptions import (
    ConfigurationError,
    DimensionMismatchError,
    EmptyDatasetError,
    NonFiniteValueError,
    TrainingDivergenceError,
)

from .ddpm import VarianceSchedule, diffuse_batch, sample

logger = logging.getLogger(__name__)

__all__ = [
    "NetConfig",
    "TrainConfig",
    "NetParams",
    "AdamState",
    "LossHistory",
    "TrainResult",
    "InferenceTiming",
    "init_params",
    "forward",
    "loss_and_grads",
    "backward",
    "adam_step",
    "train",
    "evaluate_loss",
    "measure_inference_frequency",
    "step_embedding",
]


@dataclass(frozen=True)
class NetConfig:
    """
    Shape of the noise estimator.

    Attributes:
    - width (int): Hidden neurons N, the size sweep variable (128/256/512/1024).
    - num_residual_blocks (int): Residual blocks between input layer and head.
    - obs_dim (int): Conditioning size (current + previous observation).
    - action_dim (int): Action size.
    - tau_embed_dim (int): Size of the sinusoidal step code, even.
    """
    width: int = 256
    num_residual_blocks: int = 2
    obs_dim: int = 36
    action_dim: int = 6
    tau_embed_dim: int = 16

    def __post_init__(self) -> None:
        for name in ("width", "num_residual_blocks", "obs_dim", "action_dim", "tau_embed_dim"):
            if getattr(self, name) < 1:
                raise ConfigurationError(reason=f"{name} must be positive, got {getattr(self, name)}")
        if self.tau_embed_dim % 2:
            raise ConfigurationError(reason=f"tau_embed_dim must be even, got {self.tau_embed_dim}")

    @property
    def input_dim(self) -> int:
        return self.obs_dim + self.action_dim + self.tau_embed_dim


@dataclass(frozen=True)
class TrainConfig:
    """
    Optimizer and loop settings. Defaults are desk scale; ``full_scale()`` gives the long large-batch run.

    ``max_steps_per_epoch`` truncates each shuffled pass so an epoch costs a bounded
    number of Adam steps on large datasets; ``None`` runs full passes. The learning rate
    follows a cosine from ``learning_rate`` down to ``final_lr_fraction * learning_rate``
    over all steps; ``final_lr_fraction=1`` keeps it constant.
    """
    epochs: int = 300
    batch_size: int = 256
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    max_steps_per_epoch: int | None = 120
    final_lr_fraction: float = 0.1
    validate_every: int = 5
    log_every: int = 25

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ConfigurationError(reason=f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigurationError(reason=f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ConfigurationError(reason=f"learning_rate must be > 0, got {self.learning_rate}")
        if self.max_steps_per_epoch is not None and self.max_steps_per_epoch < 1:
            raise ConfigurationError(reason="max_steps_per_epoch must be >= 1 or None")
        if not 0.0 < self.final_lr_fraction <= 1.0:
            raise ConfigurationError(reason=f"final_lr_fraction must be in (0, 1], got {self.final_lr_fraction}")

    @classmethod
    def full_scale(cls, seed: int = 0) -> "TrainConfig":
        return cls(epochs=1500, batch_size=4096, learning_rate=1e-3, seed=seed, max_steps_per_epoch=None)

    def learning_rate_at(self, step: int, total_steps: int) -> float:
        """Cosine-annealed rate for 0-based ``step`` out of ``total_steps``."""
        if total_steps <= 1:
            return self.learning_rate
        progress = min(step / (total_steps - 1), 1.0)
        floor = self.final_lr_fraction
        return self.learning_rate * (floor + (1.0 - floor) * 0.5 * (1.0 + math.cos(math.pi * progress)))


@dataclass
class NetParams:
    """Weights and biases keyed by layer name, in forward order."""

    config: NetConfig
    arrays: dict[str, np.ndarray]

    def __post_init__(self) -> None:
        expected = _shapes(self.config)
        if list(self.arrays) != list(expected):
            raise DimensionMismatchError(where="parameter names", expected=list(expected), actual=list(self.arrays))
        for name, shape in expected.items():
            if self.arrays[name].shape != shape:
                raise DimensionMismatchError(where=f"parameter {name}", expected=shape, actual=self.arrays[name].shape)

    def __call__(self, obs: np.ndarray, a_tau: np.ndarray, tau: np.ndarray | int) -> np.ndarray:
        return forward(self, obs, a_tau, tau)

    def copy(self) -> "NetParams":
        return NetParams(config=self.config, arrays={k: v.copy() for k, v in self.arrays.items()})

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.arrays.values())

    @property
    def size(self) -> int:
        return sum(v.size for v in self.arrays.values())


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros(cls, params: NetParams) -> "AdamState":
        return cls(
            m={k: np.zeros_like(a) for k, a in params.arrays.items()},
            v={k: np.zeros_like(a) for k, a in params.arrays.items()},
            t=0,
        )


@dataclass
class LossHistory:
    train: list[float] = field(default_factory=list)
    validation: list[tuple[int, float]] = field(default_factory=list)

    def rows(self) -> list[tuple[int, float, float | None]]:
        """(epoch, train_loss, validation_loss or None) rows for CSV export."""
        val = dict(self.validation)
        return [(epoch, loss, val.get(epoch)) for epoch, loss in enumerate(self.train, start=1)]

    @property
    def final_train(self) -> float | None:
        return self.train[-1] if self.train else None

    @property
    def final_validation(self) -> float | None:
        return self.validation[-1][1] if self.validation else None


@dataclass
class TrainResult:
    params: NetParams
    history: LossHistory


@dataclass(frozen=True)
class InferenceTiming:
    hz: float
    median_s: float
    durations_s: tuple[float, ...]


def _shapes(config: NetConfig) -> dict[str, tuple[int, ...]]:
    n = config.width
    shapes: dict[str, tuple[int, ...]] = {
        "input.W": (config.input_dim, n),
        "input.b": (n,),
    }
    for i in range(config.num_residual_blocks):
        shapes[f"block{i}.W1"] = (n, n)
        shapes[f"block{i}.b1"] = (n,)
        shapes[f"block{i}.W2"] = (n, n)
        shapes[f"block{i}.b2"] = (n,)
    shapes["head.W"] = (n, config.action_dim)
    shapes["head.b"] = (config.action_dim,)
    return shapes


def init_params(config: NetConfig, rng: np.random.Generator) -> NetParams:
    """He-uniform weights (fan-in scaling), zero biases."""
    arrays: dict[str, np.ndarray] = {}
    for name, shape in _shapes(config).items():
        if len(shape) == 2:
            limit = math.sqrt(6.0 / shape[0])
            arrays[name] = rng.uniform(-limit, limit, size=shape)
        else:
            arrays[name] = np.zeros(shape)
    return NetParams(config=config, arrays=arrays)


@cached(LRUCache(maxsize=32))
def _embedding_table(dim: int, size: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = np.arange(size, dtype=np.float64)[:, None] * freqs[None, :]
    table = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    table.setflags(write=False)
    return table


def step_embedding(tau: np.ndarray | int, dim: int) -> np.ndarray:
    """Sinusoidal code of the diffusion step, shape (B, dim)."""
    taus = np.atleast_1d(np.asarray(tau, dtype=np.int64))
    size = 1 << max(6, int(taus.max()).bit_length())
    return _embedding_table(dim, size)[taus]


def _prepare(params: NetParams, obs: np.ndarray, a_tau: np.ndarray, tau: np.ndarray | int) -> tuple[np.ndarray, bool]:
    config = params.config
    obs = np.asarray(obs, dtype=np.float64)
    a_tau = np.asarray(a_tau, dtype=np.float64)
    single = a_tau.ndim == 1
    obs2, a2 = np.atleast_2d(obs), np.atleast_2d(a_tau)
    if obs2.shape[1] != config.obs_dim:
        raise DimensionMismatchError(where="conditioning input", expected=config.obs_dim, actual=obs2.shape[1])
    if a2.shape[1] != config.action_dim:
        raise DimensionMismatchError(where="diffused action input", expected=config.action_dim, actual=a2.shape[1])
    if obs2.shape[0] != a2.shape[0]:
        raise DimensionMismatchError(where="batch size", expected=a2.shape[0], actual=obs2.shape[0])
    taus = np.broadcast_to(np.asarray(tau, dtype=np.int64), (a2.shape[0],))
    x = np.concatenate([obs2, a2, step_embedding(taus, config.tau_embed_dim)], axis=1)
    return x, single


def _forward(params: NetParams, x: np.ndarray, check: bool) -> tuple[np.ndarray, list[np.ndarray]]:
    p = params.arrays
    z0 = x @ p["input.W"] + p["input.b"]
    h = np.maximum(z0, 0.0)
    cache: list[np.ndarray] = [x, z0]
    if check and not np.all(np.isfinite(h)):
        raise NonFiniteValueError(where="noise estimator layer 0 (input)")
    for i in range(params.config.num_residual_blocks):
        u = h @ p[f"block{i}.W1"] + p[f"block{i}.b1"]
        r = np.maximum(u, 0.0)
        cache.extend([h, u, r])
        h = h + r @ p[f"block{i}.W2"] + p[f"block{i}.b2"]
        if check and not np.all(np.isfinite(h)):
            raise NonFiniteValueError(where=f"noise estimator layer {i + 1} (residual block {i})")
    cache.append(h)
    out = h @ p["head.W"] + p["head.b"]
    if check and not np.all(np.isfinite(out)):
        raise NonFiniteValueError(where=f"noise estimator layer {params.config.num_residual_blocks + 1} (head)")
    return out, cache


def forward(params: NetParams, obs: np.ndarray, a_tau: np.ndarray, tau: np.ndarray | int) -> np.ndarray:
    """
    Evaluate the noise estimate for a single input or a batch.

    :param params: Network parameters.
    :param obs: (obs_dim,) or (B, obs_dim) conditioning.
    :param a_tau: (action_dim,) or (B, action_dim) diffused action.
    :param tau: Step index, scalar or (B,).
    :return: Noise estimate with the shape of ``a_tau``.
    """
    x, single = _prepare(params, obs, a_tau, tau)
    out, _ = _forward(params, x, check=True)
    return out[0] if single else out


def loss_and_grads(
    params: NetParams,
    obs: np.ndarray,
    a_tau: np.ndarray,
    tau: np.ndarray,
    eps: np.ndarray,
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean squared noise error over the batch and its exact gradient."""
    x, _ = _prepare(params, obs, a_tau, tau)
    eps = np.atleast_2d(np.asarray(eps, dtype=np.float64))
    out, cache = _forward(params, x, check=False)
    if out.shape != eps.shape:
        raise DimensionMismatchError(where="noise target", expected=out.shape, actual=eps.shape)

    p = params.arrays
    batch = out.shape[0]
    diff = out - eps
    loss = float(np.mean(np.sum(diff * diff, axis=1)))

    grads: dict[str, np.ndarray] = {}
    g = (2.0 / batch) * diff
    h_last = cache[-1]
    grads["head.W"] = h_last.T @ g
    grads["head.b"] = g.sum(axis=0)
    g_h = g @ p["head.W"].T

    for i in reversed(range(params.config.num_residual_blocks)):
        h_in, u, r = cache[2 + 3 * i: 5 + 3 * i]
        grads[f"block{i}.W2"] = r.T @ g_h
        grads[f"block{i}.b2"] = g_h.sum(axis=0)
        g_u = (g_h @ p[f"block{i}.W2"].T) * (u > 0.0)
        grads[f"block{i}.W1"] = h_in.T @ g_u
        grads[f"block{i}.b1"] = g_u.sum(axis=0)
        g_h = g_h + g_u @ p[f"block{i}.W1"].T

    x_in, z0 = cache[0], cache[1]
    g_z0 = g_h * (z0 > 0.0)
    grads["input.W"] = x_in.T @ g_z0
    grads["input.b"] = g_z0.sum(axis=0)

    return loss, {name: grads[name] for name in p}


def backward(params: NetParams, batch: tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]) -> dict[str, np.ndarray]:
    """Gradient of the mean loss for an (obs, a_tau, tau, eps) batch, keyed like ``params.arrays``."""
    obs, a_tau, tau, eps = batch
    _, grads = loss_and_grads(params, obs, a_tau, tau, eps)
    return grads


def adam_step(
    params: NetParams,
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[NetParams, AdamState]:
    """Bias-corrected Adam update; returns new parameter and state objects."""
    if set(grads) != set(params.arrays):
        raise DimensionMismatchError(where="gradient names", expected=sorted(params.arrays), actual=sorted(grads))
    t = state.t + 1
    correction1 = 1.0 - beta1 ** t
    correction2 = 1.0 - beta2 ** t
    new_arrays: dict[str, np.ndarray] = {}
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    for name, value in params.arrays.items():
        g = grads[name]
        if g.shape != value.shape:
            raise DimensionMismatchError(where=f"gradient {name}", expected=value.shape, actual=g.shape)
        m = beta1 * state.m[name] + (1.0 - beta1) * g
        v = beta2 * state.v[name] + (1.0 - beta2) * (g * g)
        m_hat = m / correction1
        v_hat = v / correction2
        new_arrays[name] = value - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[name] = m
        new_v[name] = v
    return NetParams(config=params.config, arrays=new_arrays), AdamState(m=new_m, v=new_v, t=t)


def evaluate_loss(
    params: NetParams,
    pairs: TrainingPairs,
    sched: VarianceSchedule,
    rng: np.random.Generator,
    chunk: int = 4096,
) -> float:
    """Mean noise-prediction loss over ``pairs`` with steps and noise drawn from ``rng``."""
    total = 0.0
    count = len(pairs)
    for start in range(0, count, chunk):
        obs = pairs.obs[start:start + chunk]
        a0 = pairs.actions[start:start + chunk]
        taus = rng.integers(1, sched.T + 1, size=a0.shape[0])
        eps = rng.standard_normal(a0.shape)
        a_tau = diffuse_batch(a0, eps, taus, sched)
        x, _ = _prepare(params, obs, a_tau, taus)
        out, _ = _forward(params, x, check=False)
        total += float(np.sum((out - eps) ** 2))
    return total / count


def train(
    pairs: TrainingPairs,
    net_config: NetConfig,
    train_config: TrainConfig,
    sched: VarianceSchedule,
    validation: TrainingPairs | None = None,
) -> TrainResult:
    """
    Minimize the noise-prediction loss with minibatch Adam.

    The training loss is recorded every epoch; when ``validation`` is given its loss is
    recorded every ``validate_every`` epochs with a fixed draw of steps and noise.

    :raises EmptyDatasetError: no training pairs.
    :raises TrainingDivergenceError: the loss became non-finite.
    """
    count = len(pairs)
    if count == 0:
        raise EmptyDatasetError(reason="no training pairs")
    if pairs.obs.shape[1] != net_config.obs_dim or pairs.actions.shape[1] != net_config.action_dim:
        raise DimensionMismatchError(
            where="training pairs",
            expected=(net_config.obs_dim, net_config.action_dim),
            actual=(pairs.obs.shape[1], pairs.actions.shape[1]),
        )

    rng = np.random.default_rng(train_config.seed)
    params = init_params(net_config, rng)
    state = AdamState.zeros(params)
    history = LossHistory()
    batch_size = min(train_config.batch_size, count)
    steps = math.ceil(count / batch_size)
    if train_config.max_steps_per_epoch is not None:
        steps = min(steps, train_config.max_steps_per_epoch)

    logger.info(
        "Training width=%s blocks=%s pairs=%s epochs=%s steps_per_epoch=%s batch=%s lr=%s..%s",
        net_config.width, net_config.num_residual_blocks, count, train_config.epochs, steps, batch_size,
        train_config.learning_rate, train_config.learning_rate * train_config.final_lr_fraction,
    )
    total_steps = train_config.epochs * steps
    for epoch in range(1, train_config.epochs + 1):
        order = rng.permutation(count)
        epoch_loss = 0.0
        for step in range(steps):
            idx = order[step * batch_size:(step + 1) * batch_size]
            a0 = pairs.actions[idx]
            taus = rng.integers(1, sched.T + 1, size=idx.shape[0])
            eps = rng.standard_normal(a0.shape)
            a_tau = diffuse_batch(a0, eps, taus, sched)
            loss, grads = loss_and_grads(params, pairs.obs[idx], a_tau, taus, eps)
            if not math.isfinite(loss):
                raise TrainingDivergenceError(epoch=epoch, step=step, loss=loss)
            lr = train_config.learning_rate_at((epoch - 1) * steps + step, total_steps)
            params, state = adam_step(
                params, grads, state, lr,
                train_config.adam_beta1, train_config.adam_beta2, train_config.adam_eps,
            )
            epoch_loss += loss
        history.train.append(epoch_loss / steps)

        if validation is not None and len(validation) and epoch % train_config.validate_every == 0:
            val_loss = evaluate_loss(params, validation, sched, np.random.default_rng([train_config.seed, 1]))
            history.validation.append((epoch, val_loss))
            logger.info("epoch=%s train_loss=%.5f val_loss=%.5f", epoch, history.train[-1], val_loss)
        elif epoch % train_config.log_every == 0:
            logger.info("epoch=%s train_loss=%.5f", epoch, history.train[-1])

    if not params.is_finite():
        raise TrainingDivergenceError(epoch=train_config.epochs, step=steps, loss="non-finite parameters")
    return TrainResult(params=params, history=history)


def measure_inference_frequency(
    params: NetParams,
    sched: VarianceSchedule,
    trials: int = 100,
    warmup: int = 10,
    seed: int = 0,
) -> InferenceTiming:
    """
    Time full T-step sampling calls and report 1 / median duration.

    :param params: Network to time.
    :param sched: Schedule (its T sets the number of estimator calls).
    :param trials: Timed calls, at least 100.
    :param warmup: Untimed calls made first.
    """
    if trials < 100:
        raise ConfigurationError(reason=f"inference timing needs at least 100 trials, got {trials}")
    rng = np.random.default_rng(seed)
    obs = rng.standard_normal(params.config.obs_dim)
    for _ in range(warmup):
        sample(obs, params, sched, rng, action_dim=params.config.action_dim)

    durations = []
    for _ in range(trials):
        started = time.perf_counter()
        sample(obs, params, sched, rng, action_dim=params.config.action_dim)
        durations.append(time.perf_counter() - started)
    median = float(np.median(durations))
    return InferenceTiming(hz=1.0 / median, median_s=median, durations_s=tuple(durations))

