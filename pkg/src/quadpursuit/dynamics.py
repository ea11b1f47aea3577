"""Quadrotor rigid-body physics, motor lag, command delay and rate autopilot.

Every function works on batches: arrays carry arbitrary leading dimensions
and the trailing dimension(s) hold the per-vehicle quantity (``(..., 3)`` for
vectors, ``(..., 3, 3)`` for rotations, ``(..., 4)`` for rotors).  Frames are
ENU-style with world +z up and body +z along the thrust axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

PHYSICS_DT = 0.001
SUBSTEPS = 10


@dataclass(frozen=True)
class QuadParams:
    """Physical and low-level control constants of one airframe.

    Defaults describe a generic 5-inch racing quadrotor. Units: SI, rotor
    speeds in rad/s, ``command_delay_steps`` in physics ticks.
    """

    mass: float = 0.75
    inertia_diag: tuple[float, float, float] = (2.5e-3, 2.5e-3, 4.3e-3)
    arm_length: float = 0.12
    thrust_coeff: float = 1.0e-6
    torque_coeff: float = 1.6e-8
    linear_drag_coeffs: tuple[float, float, float] = (0.3, 0.3, 0.4)
    motor_time_constant: float = 0.03
    max_rotor_speed: float = 3000.0
    command_delay_steps: int = 2
    body_radius: float = 0.15
    rate_gain: float = 20.0
    gravity: float = 9.81
    thrust_max: float = 4 * 9.81
    omega_max: float = 10.0

    def __post_init__(self):
        positive = {
            "mass": self.mass,
            "arm_length": self.arm_length,
            "thrust_coeff": self.thrust_coeff,
            "torque_coeff": self.torque_coeff,
            "motor_time_constant": self.motor_time_constant,
            "max_rotor_speed": self.max_rotor_speed,
            "body_radius": self.body_radius,
            "rate_gain": self.rate_gain,
            "thrust_max": self.thrust_max,
            "omega_max": self.omega_max,
        }
        for name, value in positive.items():
            if not value > 0:
                raise ValueError(f"QuadParams.{name} must be > 0, got {value}")
        if min(self.inertia_diag) <= 0:
            raise ValueError("QuadParams.inertia_diag entries must be > 0")
        # zero drag / zero gravity are allowed for analytic test configurations
        if min(self.linear_drag_coeffs) < 0 or self.gravity < 0:
            raise ValueError("drag coefficients and gravity must be >= 0")
        if self.command_delay_steps < 0 or int(self.command_delay_steps) != self.command_delay_steps:
            raise ValueError("command_delay_steps must be a non-negative integer")
        object.__setattr__(self, "inertia_diag", tuple(float(x) for x in self.inertia_diag))
        object.__setattr__(self, "linear_drag_coeffs", tuple(float(x) for x in self.linear_drag_coeffs))
        object.__setattr__(self, "command_delay_steps", int(self.command_delay_steps))

    @property
    def inertia(self) -> np.ndarray:
        return np.asarray(self.inertia_diag)

    @property
    def drag(self) -> np.ndarray:
        return np.asarray(self.linear_drag_coeffs)

    @property
    def hover_rotor_speed(self) -> float:
        return float(np.sqrt(self.mass * self.gravity / (4 * self.thrust_coeff)))

    def with_updates(self, **changes) -> "QuadParams":
        return replace(self, **changes)


def allocation_matrix(params: QuadParams) -> np.ndarray:
    """Map squared rotor speeds to ``[thrust N, tau_x, tau_y, tau_z N*m]``.

    X layout, rotors numbered front-right, rear-right, rear-left, front-left
    (body x forward, y left).  Diagonal pairs share a spin direction.
    """
    d = params.arm_length / np.sqrt(2.0)
    x = np.array([d, -d, -d, d])
    y = np.array([-d, -d, d, d])
    spin = np.array([1.0, -1.0, 1.0, -1.0])
    kf, kq = params.thrust_coeff, params.torque_coeff
    return np.stack([kf * np.ones(4), kf * y, -kf * x, kq * spin])


# cached inverse keyed on the params instance; QuadParams is frozen and hashable
_INV_CACHE: dict[QuadParams, np.ndarray] = {}


def inverse_allocation(params: QuadParams) -> np.ndarray:
    inv = _INV_CACHE.get(params)
    if inv is None:
        inv = np.linalg.inv(allocation_matrix(params))
        _INV_CACHE[params] = inv
    return inv


@dataclass
class RigidBodyState:
    p: np.ndarray
    v: np.ndarray
    R: np.ndarray
    omega: np.ndarray

    @classmethod
    def level(cls, p, v=None) -> "RigidBodyState":
        p = np.asarray(p, dtype=float)
        batch = p.shape[:-1]
        v = np.zeros_like(p) if v is None else np.asarray(v, dtype=float)
        R = np.broadcast_to(np.eye(3), batch + (3, 3)).copy()
        return cls(p=p.copy(), v=v.copy(), R=R, omega=np.zeros_like(p))

    def copy(self) -> "RigidBodyState":
        return RigidBodyState(self.p.copy(), self.v.copy(), self.R.copy(), self.omega.copy())

    def take(self, idx) -> "RigidBodyState":
        return RigidBodyState(self.p[idx], self.v[idx], self.R[idx], self.omega[idx])

    def is_finite(self) -> bool:
        return bool(all(np.isfinite(a).all() for a in (self.p, self.v, self.R, self.omega)))


@dataclass
class MotorState:
    rotor_speeds: np.ndarray

    @classmethod
    def hover(cls, params: QuadParams, batch: tuple[int, ...] = ()) -> "MotorState":
        return cls(np.full(batch + (4,), params.hover_rotor_speed))


@dataclass(frozen=True)
class LowLevelCommand:
    """Mass-normalized collective thrust (m/s^2) plus desired body rates.

    Values are clamped on construction to ``[0, thrust_max]`` and
    ``[-omega_max, omega_max]`` when ``params`` is given.
    """

    thrust: np.ndarray
    omega_des: np.ndarray

    @classmethod
    def clamped(cls, thrust, omega_des, params: QuadParams) -> "LowLevelCommand":
        thrust = np.clip(np.asarray(thrust, dtype=float), 0.0, params.thrust_max)
        omega_des = np.clip(np.asarray(omega_des, dtype=float), -params.omega_max, params.omega_max)
        return cls(thrust=thrust, omega_des=omega_des)

    @classmethod
    def hover(cls, params: QuadParams, batch: tuple[int, ...] = ()) -> "LowLevelCommand":
        return cls(np.full(batch, params.gravity), np.zeros(batch + (3,)))

    def as_array(self) -> np.ndarray:
        return np.concatenate([np.asarray(self.thrust)[..., None], self.omega_des], axis=-1)

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "LowLevelCommand":
        return cls(thrust=arr[..., 0], omega_des=arr[..., 1:4])


@dataclass
class DelayLine:
    """Shift register of ``command_delay_steps + 1`` packed commands.

    Slot ``-1`` receives the newest command, slot ``0`` is the one applied.
    """

    buffer: np.ndarray  # (..., delay + 1, 4)

    @classmethod
    def filled(cls, cmd: LowLevelCommand, params: QuadParams) -> "DelayLine":
        packed = cmd.as_array()
        n = params.command_delay_steps + 1
        buf = np.repeat(packed[..., None, :], n, axis=-2)
        return cls(buffer=buf)

    def push_pop(self, packed: np.ndarray) -> tuple["DelayLine", np.ndarray]:
        buf = self.buffer.copy()
        buf[..., -1, :] = packed
        out = buf[..., 0, :].copy()
        buf[..., :-1, :] = buf[..., 1:, :]
        return DelayLine(buf), out


def hat(w: np.ndarray) -> np.ndarray:
    out = np.zeros(w.shape[:-1] + (3, 3))
    out[..., 0, 1] = -w[..., 2]
    out[..., 0, 2] = w[..., 1]
    out[..., 1, 0] = w[..., 2]
    out[..., 1, 2] = -w[..., 0]
    out[..., 2, 0] = -w[..., 1]
    out[..., 2, 1] = w[..., 0]
    return out


def vee(M: np.ndarray) -> np.ndarray:
    return np.stack([M[..., 2, 1], M[..., 0, 2], M[..., 1, 0]], axis=-1)


def so3_exp(phi: np.ndarray) -> np.ndarray:
    """Rodrigues formula for a batch of rotation vectors."""
    theta = np.linalg.norm(phi, axis=-1)
    K = hat(phi)
    small = theta < 1e-6
    th = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta**2 / 6.0, np.sin(th) / th)
    b = np.where(small, 0.5 - theta**2 / 24.0, (1.0 - np.cos(th)) / th**2)
    return np.eye(3) + a[..., None, None] * K + b[..., None, None] * (K @ K)


def orthonormalize(R: np.ndarray) -> np.ndarray:
    """One Newton step of the polar decomposition (nearest rotation).

    Quadratically convergent from near-orthonormal input, so a single step per
    physics tick keeps ``R^T R`` at machine precision.
    """
    return 1.5 * R - 0.5 * R @ np.swapaxes(R, -1, -2) @ R


def orthonormality_error(R: np.ndarray) -> np.ndarray:
    E = np.swapaxes(R, -1, -2) @ R - np.eye(3)
    return np.linalg.norm(E, axis=(-2, -1))


def mix(thrust_total: np.ndarray, torque: np.ndarray, params: QuadParams) -> np.ndarray:
    """Rotor speed setpoints for a desired wrench, clamped to the motor range."""
    wrench = np.concatenate([np.asarray(thrust_total)[..., None], torque], axis=-1)
    sq = wrench @ inverse_allocation(params).T
    return np.clip(np.sqrt(np.maximum(sq, 0.0)), 0.0, params.max_rotor_speed)


def wrench_from_speeds(rotor_speeds: np.ndarray, params: QuadParams) -> tuple[np.ndarray, np.ndarray]:
    w = rotor_speeds**2 @ allocation_matrix(params).T
    return w[..., 0], w[..., 1:]


def attitude_autopilot(state: RigidBodyState, cmd: LowLevelCommand, params: QuadParams) -> np.ndarray:
    torque = params.inertia * params.rate_gain * (cmd.omega_des - state.omega)
    return mix(params.mass * np.asarray(cmd.thrust), torque, params)


def motor_step(motors: MotorState, setpoints: np.ndarray, params: QuadParams, dt: float = PHYSICS_DT) -> MotorState:
    alpha = 1.0 - np.exp(-dt / params.motor_time_constant)
    w = motors.rotor_speeds + (setpoints - motors.rotor_speeds) * alpha
    return MotorState(np.clip(w, 0.0, params.max_rotor_speed))


def physics_step(state: RigidBodyState, motors: MotorState, params: QuadParams, dt: float = PHYSICS_DT) -> RigidBodyState:
    """Advance one physics tick.

    Velocity and body rates use semi-implicit Euler; the position update uses
    the mean of old and new velocity, which is exact for the piecewise-constant
    acceleration of one tick.  Attitude is advanced on SO(3) with the new rate.
    """
    assert np.isfinite(state.v).all() and np.isfinite(state.omega).all(), "non-finite state passed to physics_step"
    thrust, torque = wrench_from_speeds(motors.rotor_speeds, params)
    z_body = state.R[..., :, 2]
    acc = z_body * (thrust / params.mass)[..., None] - params.drag * state.v
    acc = acc - np.array([0.0, 0.0, params.gravity])
    v_new = state.v + acc * dt
    p_new = state.p + 0.5 * (state.v + v_new) * dt

    J = params.inertia
    w = state.omega
    w_dot = (torque - np.cross(w, J * w)) / J
    w_new = w + w_dot * dt
    R_new = orthonormalize(state.R @ so3_exp(w_new * dt))
    return RigidBodyState(p=p_new, v=v_new, R=R_new, omega=w_new)


def acceleration(state: RigidBodyState, motors: MotorState, params: QuadParams) -> np.ndarray:
    """Instantaneous world-frame linear acceleration (derived, not stored)."""
    thrust, _ = wrench_from_speeds(motors.rotor_speeds, params)
    acc = state.R[..., :, 2] * (thrust / params.mass)[..., None] - params.drag * state.v
    return acc - np.array([0.0, 0.0, params.gravity])


@dataclass
class TickTrace:
    """Per-substep acceleration history collected by :func:`control_tick`."""

    accelerations: list[np.ndarray] = field(default_factory=list)


def control_tick(
    state: RigidBodyState,
    motors: MotorState,
    delay: DelayLine,
    cmd: LowLevelCommand,
    params: QuadParams,
    trace: TickTrace | None = None,
) -> tuple[RigidBodyState, MotorState, DelayLine]:
    """One 100 Hz control step: 10 physics substeps with the delayed command."""
    packed = cmd.as_array()
    for _ in range(SUBSTEPS):
        delay, applied = delay.push_pop(packed)
        setpoints = attitude_autopilot(state, LowLevelCommand.from_array(applied), params)
        motors = motor_step(motors, setpoints, params)
        v_before = state.v
        state = physics_step(state, motors, params)
        if trace is not None:
            trace.accelerations.append((state.v - v_before) / PHYSICS_DT)
    return state, motors, delay
