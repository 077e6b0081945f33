"""
Planar peg-in-hole task: penalty contact, observation assembly and outcome checks.

Frames: the hole is centred at x = 0, its entrance lies at z = surface_height and
its walls at x = +/- hole_half_width. The end-effector is the centre of the peg's
bottom face; the peg occupies lx in [-w, w], lz in [0, L] of its own frame,
which is tilted by theta = x[4] about the y axis:

    x_world = px + lx cos(theta) + lz sin(theta)
    z_world = pz - lx sin(theta) + lz cos(theta)

Only x, z and theta couple to contact; y, roll and yaw stay free.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from app.data.models import EpisodeOutcome, OBS_DIM, TerminationReason
from app.utils.exceptions import InvalidGeometryError, UnknownTaskError

from .plant import (
    TICK_SECONDS,
    ConstantRobotModel,
    ControllerGains,
    RobotModel,
    RobotState,
    SafetyLimits,
    clamp_wrench,
    default_gains,
    desk_model,
    dynamics_step,
    impedance_torque,
    internal_wrench,
)

logger = logging.getLogger(__name__)

FRICTION_SMOOTHING = 1e-3
MAX_CONTACT_FORCE = 1e4
TILT_VALIDITY = 0.3
SUCCESS_TILT = 0.05
CONTACT_NAMES = ("corner_left", "corner_right", "rim_left", "rim_right", "floor")


@dataclass(frozen=True)
class TaskGeometry:
    """
    Peg and hole dimensions plus penalty-contact parameters. Lengths in metres.

    Attributes:
    - name (str): Preset name.
    - peg_half_width (float): Half the peg width in the insertion plane.
    - clearance (float): Gap between hole and peg half-widths.
    - peg_length (float): Peg height above its bottom face.
    - hole_depth_target (float): Depth at which insertion counts as complete.
    - hole_floor_depth (float): Depth of the hole bottom.
    - surface_height (float): Height of the hole entrance.
    - friction_coeff (float): Coulomb coefficient.
    - contact_stiffness (float): Penalty stiffness per contact point, N/m.
    - contact_damping (float): Penalty damping per contact point, N s/m.
    """
    name: str
    peg_half_width: float
    clearance: float
    peg_length: float
    hole_depth_target: float = 0.015
    hole_floor_depth: float = 0.03
    surface_height: float = 0.0
    friction_coeff: float = 0.3
    contact_stiffness: float = 5e4
    contact_damping: float = 200.0

    def __post_init__(self) -> None:
        if self.clearance <= 0.0:
            raise InvalidGeometryError(reason=f"clearance must be positive, got {self.clearance}")
        if self.peg_half_width <= 0.0 or self.clearance >= 0.1 * self.peg_half_width:
            raise InvalidGeometryError(
                reason=f"clearance {self.clearance} is not tight for half-width {self.peg_half_width}"
            )
        if self.contact_stiffness <= 0.0:
            raise InvalidGeometryError(reason="contact_stiffness must be positive")
        if self.contact_damping < 0.0 or self.friction_coeff < 0.0:
            raise InvalidGeometryError(reason="contact damping and friction must be non-negative")
        if not 0.0 < self.hole_depth_target < self.hole_floor_depth:
            raise InvalidGeometryError(reason="target depth must lie between the entrance and the floor")
        if self.peg_length <= self.hole_floor_depth:
            raise InvalidGeometryError(reason="peg must be longer than the hole is deep")

    @property
    def hole_half_width(self) -> float:
        return self.peg_half_width + self.clearance

    @property
    def floor_height(self) -> float:
        return self.surface_height - self.hole_floor_depth


TASK_PRESETS: dict[str, TaskGeometry] = {
    "cuboid": TaskGeometry(name="cuboid", peg_half_width=0.0125, clearance=1e-4, peg_length=0.06),
    "key": TaskGeometry(name="key", peg_half_width=0.0035, clearance=1e-4, peg_length=0.037),
    "cyl_s": TaskGeometry(name="cyl_s", peg_half_width=0.010, clearance=2e-5, peg_length=0.05),
    "cyl_l": TaskGeometry(name="cyl_l", peg_half_width=0.015, clearance=2.5e-5, peg_length=0.05),
    # octagonal prism, 11 mm sides: half-width across flats s (1 + sqrt 2) / 2
    "prism": TaskGeometry(name="prism", peg_half_width=0.01328, clearance=5e-5, peg_length=0.05),
}
TRAINING_TASK = "cuboid"


def make_task(name: str, **overrides: float) -> TaskGeometry:
    """
    Return a geometry preset, or a ``custom`` geometry built from the cuboid with ``overrides``.

    :raises UnknownTaskError: ``name`` is neither a preset nor ``custom``.
    :raises InvalidGeometryError: overrides break a geometry invariant.
    """
    if name == "custom":
        return replace(TASK_PRESETS[TRAINING_TASK], name="custom", **overrides)
    if name not in TASK_PRESETS:
        raise UnknownTaskError(name=name, known=", ".join([*TASK_PRESETS, "custom"]))
    geometry = TASK_PRESETS[name]
    return replace(geometry, **overrides) if overrides else geometry


@dataclass(frozen=True)
class Observation:
    f_ext: np.ndarray
    f_in: np.ndarray
    ee_twist: np.ndarray

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.f_ext, self.f_in, self.ee_twist])

    @classmethod
    def from_vector(cls, vector: np.ndarray) -> "Observation":
        vector = np.asarray(vector, dtype=np.float64)
        return cls(f_ext=vector[0:6], f_in=vector[6:12], ee_twist=vector[12:18])


class ContactPoint(NamedTuple):
    name: str
    x: float
    z: float
    normal: tuple[float, float]
    penetration: float
    normal_force: float
    friction_force: float


@dataclass(frozen=True)
class ContactResult:
    wrench: np.ndarray
    points: tuple[ContactPoint, ...] = ()

    @property
    def flags(self) -> tuple[bool, ...]:
        active = {point.name for point in self.points}
        return tuple(name in active for name in CONTACT_NAMES)

    @property
    def in_contact(self) -> bool:
        return bool(self.points)


def _solid_penetration(x: float, z: float, geom: TaskGeometry) -> tuple[float, float, float, str] | None:
    """Penetration, outward normal and face kind of a point inside the hole block, nearest face wins."""
    surface = geom.surface_height
    if z >= surface:
        return None
    wall = geom.hole_half_width
    ax = abs(x)
    if ax >= wall:
        top = surface - z
        side = ax - wall
        if top <= side:
            return (top, 0.0, 1.0, "top") if top > 0.0 else None
        return (side, -math.copysign(1.0, x), 0.0, "wall") if side > 0.0 else None
    if z < geom.floor_height:
        return geom.floor_height - z, 0.0, 1.0, "floor"
    return None


def _point_force(
    name: str,
    x: float,
    z: float,
    nx: float,
    nz: float,
    depth: float,
    state: tuple[float, ...],
    geom: TaskGeometry,
) -> tuple[ContactPoint, float, float, float]:
    px, pz, vx, vz, omega = state
    r_x, r_z = x - px, z - pz
    vpx = vx + omega * r_z
    vpz = vz - omega * r_x
    depth_rate = -(vpx * nx + vpz * nz)
    fn = geom.contact_stiffness * depth + geom.contact_damping * depth_rate
    fn = min(max(fn, 0.0), MAX_CONTACT_FORCE)
    tx, tz = nz, -nx
    ft = -geom.friction_coeff * fn * math.tanh((vpx * tx + vpz * tz) / FRICTION_SMOOTHING)
    fx = fn * nx + ft * tx
    fz = fn * nz + ft * tz
    point = ContactPoint(name=name, x=x, z=z, normal=(nx, nz), penetration=depth, normal_force=fn, friction_force=ft)
    return point, fx, fz, r_z * fx - r_x * fz


def contact_wrench(state: RobotState, geom: TaskGeometry) -> ContactResult:
    """
    External wrench on the end-effector from penalty contacts.

    Two families of contact points are checked: the peg's bottom corners against
    the hole block and floor, and the two rim edges of the hole against the peg
    rectangle. Each penetrating point contributes a normal force k d + c d_dot
    (never negative) and a regularized Coulomb friction force bounded by mu times
    the normal force.
    """
    px, pz, theta = float(state.x[0]), float(state.x[2]), float(state.x[4])
    kinematics = (px, pz, float(state.x_dot[0]), float(state.x_dot[2]), float(state.x_dot[4]))
    c, s = math.cos(theta), math.sin(theta)
    w, length = geom.peg_half_width, geom.peg_length

    points: list[ContactPoint] = []
    fx_total = fz_total = torque_total = 0.0

    for name, lx in (("corner_left", -w), ("corner_right", w)):
        cx, cz = px + c * lx, pz - s * lx
        hit = _solid_penetration(cx, cz, geom)
        if hit is None:
            continue
        depth, nx, nz, face = hit
        point, fx, fz, ty = _point_force("floor" if face == "floor" else name, cx, cz, nx, nz, depth, kinematics, geom)
        points.append(point)
        fx_total += fx
        fz_total += fz
        torque_total += ty

    for name, sign in (("rim_left", -1.0), ("rim_right", 1.0)):
        rx, rz = sign * geom.hole_half_width, geom.surface_height
        dx, dz = rx - px, rz - pz
        lx, lz = c * dx - s * dz, s * dx + c * dz
        if not (-w < lx < w and 0.0 < lz < length):
            continue
        faces = ((lx + w, -1.0, 0.0), (w - lx, 1.0, 0.0), (lz, 0.0, -1.0), (length - lz, 0.0, 1.0))
        depth, nlx, nlz = min(faces, key=lambda face: face[0])
        # the rim pushes the peg against the outward normal of the penetrated face
        nx = -(c * nlx + s * nlz)
        nz = -(-s * nlx + c * nlz)
        point, fx, fz, ty = _point_force(name, rx, rz, nx, nz, depth, kinematics, geom)
        points.append(point)
        fx_total += fx
        fz_total += fz
        torque_total += ty

    wrench = np.array([fx_total, 0.0, fz_total, 0.0, torque_total, 0.0])
    return ContactResult(wrench=wrench, points=tuple(points))


@dataclass(frozen=True)
class EpisodeConfig:
    """
    Attributes:
    - timeout_s (float): Episode time limit.
    - lateral_range (float): Initial lateral offset drawn from U(-r, r), metres.
    - tilt_range (float): Initial tilt drawn from U(-r, r), radians.
    - start_clearance (float): Height of the lowest peg corner above the surface at start.
    - sensor_noise_std (float): Per-channel Gaussian noise added to observations.
    - dt (float): Control period.
    """
    timeout_s: float = 10.0
    lateral_range: float = 0.002
    tilt_range: float = 0.03
    start_clearance: float = 0.0005
    sensor_noise_std: float = 0.0
    dt: float = TICK_SECONDS


@dataclass(frozen=True)
class EnvState:
    robot: RobotState
    tick: int = 0
    observation: np.ndarray = field(default_factory=lambda: np.zeros(OBS_DIM))
    contact: ContactResult = field(default_factory=lambda: ContactResult(wrench=np.zeros(6)))

    @property
    def pose(self) -> np.ndarray:
        return self.robot.x

    @property
    def tilt(self) -> float:
        return float(self.robot.x[4])

    @property
    def lateral_error(self) -> float:
        return float(self.robot.x[0])


def insertion_depth(state: EnvState, geom: TaskGeometry) -> float:
    return geom.surface_height - float(state.robot.x[2])


def initial_state(
    geom: TaskGeometry,
    config: EpisodeConfig,
    rng: np.random.Generator,
    model: RobotModel | None = None,
) -> EnvState:
    """Random start above the hole: lateral offset and tilt uniform, lowest corner just above the surface."""
    model = model or desk_model()
    px = rng.uniform(-config.lateral_range, config.lateral_range)
    theta = rng.uniform(-config.tilt_range, config.tilt_range)
    pz = geom.surface_height + config.start_clearance + geom.peg_half_width * abs(math.sin(theta))
    q = np.array([px, 0.0, pz, 0.0, theta, 0.0])
    return EnvState(robot=RobotState.from_joints(model, q))


def env_step(
    state: EnvState,
    f_ff: np.ndarray,
    gains: ControllerGains,
    geom: TaskGeometry,
    model: RobotModel,
    limits: SafetyLimits | None = None,
    dt: float = TICK_SECONDS,
    noise: np.ndarray | None = None,
) -> tuple[EnvState, np.ndarray]:
    """
    One control tick: contact wrench, impedance torque, dynamics, internal wrench, observation.

    :param f_ff: Feed-forward wrench, clamped to ``limits`` before use.
    :param noise: Optional additive sensor noise for the 18 observation channels.
    :return: Next state and its 18-dim observation.
    """
    limits = limits or SafetyLimits()
    robot = state.robot
    contact = contact_wrench(robot, geom)
    jacobian = model.jacobian(robot.q)
    tau_ext = jacobian.T @ contact.wrench
    tau_m = impedance_torque(robot, gains, clamp_wrench(f_ff, limits), model, t=state.tick * dt)
    f_in = internal_wrench(tau_m, robot, model)
    next_robot = dynamics_step(robot, tau_m, tau_ext, model, dt=dt, tick=state.tick)

    observation = np.concatenate([contact.wrench, f_in, next_robot.x_dot])
    if noise is not None:
        observation = observation + noise
    return EnvState(robot=next_robot, tick=state.tick + 1, observation=observation, contact=contact), observation


def check_outcome(state: EnvState, geom: TaskGeometry, elapsed: float, timeout: float) -> EpisodeOutcome | None:
    """Success, timeout, safety abort, or ``None`` while the episode is still running."""
    depth = insertion_depth(state, geom)
    if depth >= geom.hole_depth_target and abs(state.lateral_error) < geom.clearance and abs(state.tilt) < SUCCESS_TILT:
        return EpisodeOutcome(success=True, duration=elapsed, termination_reason=TerminationReason.INSERTED)
    if abs(state.tilt) > TILT_VALIDITY:
        return EpisodeOutcome(
            success=False,
            duration=elapsed,
            termination_reason=TerminationReason.SAFETY_ABORT,
            detail=f"tilt {state.tilt:.3f} rad left the small-angle range",
        )
    if elapsed >= timeout:
        return EpisodeOutcome(success=False, duration=min(elapsed, timeout), termination_reason=TerminationReason.TIMEOUT)
    return None


class PegInHoleEnv:
    """Stateful episode runner around :func:`env_step` used by the expert and the harness."""

    def __init__(
        self,
        geom: TaskGeometry,
        config: EpisodeConfig | None = None,
        gains: ControllerGains | None = None,
        model: ConstantRobotModel | None = None,
        limits: SafetyLimits | None = None,
    ) -> None:
        self.geom = geom
        self.config = config or EpisodeConfig()
        self.model = model or desk_model()
        self.gains = gains or default_gains(self.model, x_d=np.array([0.0, 0.0, geom.surface_height, 0.0, 0.0, 0.0]))
        self.limits = limits or SafetyLimits()
        self.state: EnvState | None = None
        self._noise_rng: np.random.Generator | None = None

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        self.state = initial_state(self.geom, self.config, rng, self.model)
        self._noise_rng = np.random.default_rng(rng.integers(2**32)) if self.config.sensor_noise_std > 0 else None
        return self.state.observation

    def step(self, f_ff: np.ndarray) -> np.ndarray:
        if self.state is None:
            raise RuntimeError("reset() must be called before step()")
        noise = None
        if self._noise_rng is not None:
            noise = self._noise_rng.normal(0.0, self.config.sensor_noise_std, size=OBS_DIM)
        self.state, observation = env_step(
            self.state, f_ff, self.gains, self.geom, self.model, self.limits, self.config.dt, noise
        )
        return observation

    @property
    def elapsed(self) -> float:
        return 0.0 if self.state is None else self.state.tick * self.config.dt

    @property
    def depth(self) -> float:
        return insertion_depth(self.state, self.geom)

    def outcome(self) -> EpisodeOutcome | None:
        return check_outcome(self.state, self.geom, self.elapsed, self.config.timeout_s)
