"""
Rigid-body plant, Cartesian impedance control with feed-forward wrench, and
internal-wrench reconstruction from motor torques.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Protocol

import numpy as np
from scipy.linalg import sqrtm

from app.utils.exceptions import (
    ConfigurationError,
    DimensionMismatchError,
    NonFiniteValueError,
    PlantDivergenceError,
    SingularJacobianError,
)

logger = logging.getLogger(__name__)

TICK_SECONDS = 0.001
DESK_MASS_DIAG = (3.0, 3.0, 3.0, 0.05, 0.05, 0.05)
DESK_STIFFNESS_DIAG = (500.0, 500.0, 500.0, 20.0, 20.0, 20.0)
DESK_DAMPING_RATIO = 0.7

__all__ = [
    "RobotModel",
    "ConstantRobotModel",
    "RobotState",
    "ControllerGains",
    "SafetyLimits",
    "Wrench",
    "desk_model",
    "default_gains",
    "clamp_wrench",
    "impedance_torque",
    "internal_wrench",
    "dynamics_step",
    "body_pseudo_inverse",
]


class RobotModel(Protocol):
    n: int

    def mass_matrix(self, q: np.ndarray) -> np.ndarray: ...

    def coriolis_matrix(self, q: np.ndarray, q_dot: np.ndarray) -> np.ndarray: ...

    def gravity_vector(self, q: np.ndarray) -> np.ndarray: ...

    def jacobian(self, q: np.ndarray) -> np.ndarray: ...

    def body_jacobian(self, q: np.ndarray) -> np.ndarray: ...

    def forward_kinematics(self, q: np.ndarray) -> np.ndarray: ...


@dataclass
class ConstantRobotModel:
    """
    Robot model whose matrices do not depend on the configuration.

    Kinematics are linear, x = J q and x_dot = J q_dot. The desk plant is the
    identity-Jacobian instance returned by :func:`desk_model`.
    """
    M: np.ndarray
    J: np.ndarray
    J_body: np.ndarray
    C: np.ndarray | None = None
    g: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.M = np.asarray(self.M, dtype=np.float64)
        self.J = np.asarray(self.J, dtype=np.float64)
        self.J_body = np.asarray(self.J_body, dtype=np.float64)
        n = self.M.shape[0]
        self.C = np.zeros((n, n)) if self.C is None else np.asarray(self.C, dtype=np.float64)
        self.g = np.zeros(n) if self.g is None else np.asarray(self.g, dtype=np.float64)
        if self.M.shape != (n, n) or not np.allclose(self.M, self.M.T):
            raise ConfigurationError(reason="mass matrix must be square and symmetric")
        if np.any(np.linalg.eigvalsh(self.M) <= 0.0):
            raise ConfigurationError(reason="mass matrix must be positive definite")
        for name, matrix in (("J", self.J), ("J_body", self.J_body)):
            if matrix.shape != (6, n):
                raise DimensionMismatchError(where=f"jacobian {name}", expected=(6, n), actual=matrix.shape)
        if self.C.shape != (n, n):
            raise DimensionMismatchError(where="coriolis matrix", expected=(n, n), actual=self.C.shape)
        if self.g.shape != (n,):
            raise DimensionMismatchError(where="gravity vector", expected=(n,), actual=self.g.shape)

    @property
    def n(self) -> int:
        return int(self.M.shape[0])

    def mass_matrix(self, q: np.ndarray) -> np.ndarray:
        return self.M

    def coriolis_matrix(self, q: np.ndarray, q_dot: np.ndarray) -> np.ndarray:
        return self.C

    def gravity_vector(self, q: np.ndarray) -> np.ndarray:
        return self.g

    def jacobian(self, q: np.ndarray) -> np.ndarray:
        return self.J

    def body_jacobian(self, q: np.ndarray) -> np.ndarray:
        return self.J_body

    def forward_kinematics(self, q: np.ndarray) -> np.ndarray:
        return self.J @ q

    @cached_property
    def body_pinv(self) -> np.ndarray:
        return _checked_pinv(self.J_body)


def _checked_pinv(J_body: np.ndarray) -> np.ndarray:
    singular_values = np.linalg.svd(J_body, compute_uv=False)
    tol = max(J_body.shape) * np.finfo(np.float64).eps * (singular_values[0] if singular_values.size else 0.0)
    rank = int(np.sum(singular_values > tol))
    if rank < J_body.shape[0]:
        raise SingularJacobianError(rank=rank, required=J_body.shape[0])
    return np.linalg.pinv(J_body)


def body_pseudo_inverse(model: RobotModel, q: np.ndarray) -> np.ndarray:
    """Moore-Penrose inverse of the body Jacobian, rejecting rank-deficient Jacobians."""
    if isinstance(model, ConstantRobotModel):
        return model.body_pinv
    return _checked_pinv(np.asarray(model.body_jacobian(q), dtype=np.float64))


@dataclass(frozen=True)
class RobotState:
    q: np.ndarray
    q_dot: np.ndarray
    x: np.ndarray
    x_dot: np.ndarray

    @classmethod
    def from_joints(cls, model: RobotModel, q: np.ndarray, q_dot: np.ndarray | None = None) -> "RobotState":
        q = np.asarray(q, dtype=np.float64)
        q_dot = np.zeros_like(q) if q_dot is None else np.asarray(q_dot, dtype=np.float64)
        return cls(q=q, q_dot=q_dot, x=model.forward_kinematics(q), x_dot=model.jacobian(q) @ q_dot)

    def is_finite(self) -> bool:
        return bool(
            np.all(np.isfinite(self.q)) and np.all(np.isfinite(self.q_dot))
            and np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.x_dot))
        )


@dataclass(frozen=True)
class Wrench:
    force: np.ndarray
    torque: np.ndarray

    @classmethod
    def from_vector(cls, vector: np.ndarray) -> "Wrench":
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != (6,):
            raise DimensionMismatchError(where="wrench", expected=(6,), actual=vector.shape)
        return cls(force=vector[:3].copy(), torque=vector[3:].copy())

    @classmethod
    def zero(cls) -> "Wrench":
        return cls(force=np.zeros(3), torque=np.zeros(3))

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.force, self.torque])


@dataclass(frozen=True)
class SafetyLimits:
    max_force: float = 40.0
    max_torque: float = 5.0


def clamp_wrench(wrench: np.ndarray, limits: SafetyLimits) -> np.ndarray:
    """Scale force and torque parts down so their norms respect ``limits``; direction is kept."""
    wrench = np.asarray(wrench, dtype=np.float64)
    clamped = wrench.copy()
    force_norm = float(np.linalg.norm(wrench[:3]))
    torque_norm = float(np.linalg.norm(wrench[3:]))
    if force_norm > limits.max_force:
        clamped[:3] *= limits.max_force / force_norm
    if torque_norm > limits.max_torque:
        clamped[3:] *= limits.max_torque / torque_norm
    return clamped


@dataclass
class ControllerGains:
    """
    Attributes:
    - K (np.ndarray): 6x6 diagonal stiffness.
    - D (np.ndarray): 6x6 diagonal damping.
    - x_d (np.ndarray): Desired pose.
    - x_d_dot (np.ndarray): Desired twist.
    - x_d_ddot (np.ndarray): Desired acceleration.
    - stiffness_profile (Callable | None): Optional K(t) override, time in seconds.
    """
    K: np.ndarray
    D: np.ndarray
    x_d: np.ndarray = field(default_factory=lambda: np.zeros(6))
    x_d_dot: np.ndarray = field(default_factory=lambda: np.zeros(6))
    x_d_ddot: np.ndarray = field(default_factory=lambda: np.zeros(6))
    stiffness_profile: Callable[[float], np.ndarray] | None = None

    def __post_init__(self) -> None:
        self.K = np.asarray(self.K, dtype=np.float64)
        self.D = np.asarray(self.D, dtype=np.float64)
        for name, matrix in (("K", self.K), ("D", self.D)):
            if matrix.shape != (6, 6):
                raise DimensionMismatchError(where=f"gain {name}", expected=(6, 6), actual=matrix.shape)
            if np.any(matrix != np.diag(np.diag(matrix))) or np.any(np.diag(matrix) < 0.0):
                raise ConfigurationError(reason=f"gain {name} must be diagonal positive semi-definite")
        self.x_d = np.asarray(self.x_d, dtype=np.float64)
        self.x_d_dot = np.asarray(self.x_d_dot, dtype=np.float64)
        self.x_d_ddot = np.asarray(self.x_d_ddot, dtype=np.float64)

    def stiffness(self, t: float = 0.0) -> np.ndarray:
        if self.stiffness_profile is None:
            return self.K
        return np.asarray(self.stiffness_profile(t), dtype=np.float64)


def desk_model() -> ConstantRobotModel:
    """Six Cartesian coordinates, identity Jacobians, diagonal mass, no gravity or Coriolis terms."""
    return ConstantRobotModel(M=np.diag(DESK_MASS_DIAG), J=np.eye(6), J_body=np.eye(6))


def default_gains(
    model: RobotModel | None = None,
    x_d: np.ndarray | None = None,
    stiffness: tuple[float, ...] = DESK_STIFFNESS_DIAG,
    damping_ratio: float = DESK_DAMPING_RATIO,
) -> ControllerGains:
    """Diagonal stiffness with damping D = 2 * zeta * sqrt(K M) per axis."""
    model = model or desk_model()
    K = np.diag(stiffness)
    M = model.mass_matrix(np.zeros(model.n))
    D = 2.0 * damping_ratio * np.real(sqrtm(K @ M))
    # sqrtm of a diagonal product is diagonal up to rounding
    D = np.diag(np.diag(D))
    return ControllerGains(K=K, D=D, x_d=np.zeros(6) if x_d is None else np.asarray(x_d, dtype=np.float64))


def impedance_torque(
    state: RobotState,
    gains: ControllerGains,
    f_ff: np.ndarray,
    model: RobotModel,
    t: float = 0.0,
) -> np.ndarray:
    """
    Motor torque of the impedance law with feed-forward wrench:

        tau_m = J^T [F_ff + K e + D e_dot + M x_d_ddot] + C q_dot + g,   e = x_d - x

    The M x_d_ddot term uses the model mass matrix as written; it needs n = 6.
    """
    f_ff = np.asarray(f_ff, dtype=np.float64)
    if f_ff.shape != (6,):
        raise DimensionMismatchError(where="feed-forward wrench", expected=(6,), actual=f_ff.shape)
    if not (np.all(np.isfinite(f_ff)) and state.is_finite()):
        raise NonFiniteValueError(where="impedance controller input")

    q, q_dot = state.q, state.q_dot
    J = model.jacobian(q)
    M = model.mass_matrix(q)
    e = gains.x_d - state.x
    e_dot = gains.x_d_dot - state.x_dot
    cartesian = f_ff + gains.stiffness(t) @ e + gains.D @ e_dot
    if np.any(gains.x_d_ddot):
        if M.shape[0] != 6:
            raise DimensionMismatchError(where="mass matrix times desired acceleration", expected=(6, 6), actual=M.shape)
        cartesian = cartesian + M @ gains.x_d_ddot
    return J.T @ cartesian + model.coriolis_matrix(q, q_dot) @ q_dot + model.gravity_vector(q)


def internal_wrench(tau_m: np.ndarray, state: RobotState, model: RobotModel) -> np.ndarray:
    """F_in = (J_body^+)^T (tau_m - C q_dot - g)."""
    tau_m = np.asarray(tau_m, dtype=np.float64)
    if tau_m.shape != (model.n,):
        raise DimensionMismatchError(where="motor torque", expected=(model.n,), actual=tau_m.shape)
    q, q_dot = state.q, state.q_dot
    residual = tau_m - model.coriolis_matrix(q, q_dot) @ q_dot - model.gravity_vector(q)
    return body_pseudo_inverse(model, q).T @ residual


def dynamics_step(
    state: RobotState,
    tau_m: np.ndarray,
    tau_ext: np.ndarray,
    model: RobotModel,
    dt: float = TICK_SECONDS,
    tick: int = -1,
) -> RobotState:
    """
    Solve M q_ddot = tau_m + tau_ext - C q_dot - g and advance by semi-implicit Euler.

    :raises PlantDivergenceError: the acceleration or the new state is not finite.
    """
    q, q_dot = state.q, state.q_dot
    rhs = tau_m + tau_ext - model.coriolis_matrix(q, q_dot) @ q_dot - model.gravity_vector(q)
    q_ddot = np.linalg.solve(model.mass_matrix(q), rhs)
    if not np.all(np.isfinite(q_ddot)):
        raise PlantDivergenceError(tick=tick, reason=f"non-finite acceleration {q_ddot.tolist()}")

    q_dot_next = q_dot + q_ddot * dt
    q_next = q + q_dot_next * dt
    next_state = RobotState(
        q=q_next,
        q_dot=q_dot_next,
        x=model.forward_kinematics(q_next),
        x_dot=model.jacobian(q_next) @ q_dot_next,
    )
    if not next_state.is_finite():
        raise PlantDivergenceError(tick=tick, reason="non-finite state after integration")
    return next_state
