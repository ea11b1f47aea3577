"""Geometric SE(3) tracking control and heuristic guidance behaviours.

The heuristics return a :class:`Reference`; :func:`se3_control` turns any
reference into the thrust + body-rate command consumed by the dynamics.
All functions broadcast over leading batch dimensions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import LowLevelCommand, QuadParams, RigidBodyState, vee

E3 = np.array([0.0, 0.0, 1.0])


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    w = np.mod(np.asarray(a, dtype=float) + np.pi, 2 * np.pi) - np.pi
    return np.where(w <= -np.pi, np.pi, w)


@dataclass
class Reference:
    p_ref: np.ndarray
    v_ref: np.ndarray
    a_ref: np.ndarray
    yaw_ref: np.ndarray


@dataclass(frozen=True)
class Se3Gains:
    k_p: float | tuple = 6.0
    k_v: float | tuple = 4.0
    k_R: float | tuple = 8.0

    def __post_init__(self):
        for name in ("k_p", "k_v", "k_R"):
            if np.any(np.asarray(getattr(self, name)) <= 0):
                raise ValueError(f"Se3Gains.{name} must be strictly positive")


@dataclass(frozen=True)
class ApfGains:
    influence_radius: float = 3.0
    k_rep: float = 8.0
    a_cap: float = 2 * 9.81


@dataclass(frozen=True)
class GuidanceConfig:
    se3: Se3Gains = Se3Gains()
    apf: ApfGains = ApfGains()
    pp_chase_speed: float = 5.0
    pn_gain: float = 3.0
    pn_chase_speed: float = 5.0


def _unit(x: np.ndarray, eps: float = 1e-6) -> tuple[np.ndarray, np.ndarray]:
    n = np.linalg.norm(x, axis=-1)
    ok = n >= eps
    u = x / np.where(ok, n, 1.0)[..., None]
    return np.where(ok[..., None], u, 0.0), n


def desired_rotation(z_des: np.ndarray, yaw: np.ndarray, R_now: np.ndarray) -> np.ndarray:
    """Rotation with body z along ``z_des`` and heading ``yaw``.

    When ``z_des`` is (anti)parallel to the heading vector the current body y
    axis is used to complete the frame.
    """
    x_c = np.stack([np.cos(yaw), np.sin(yaw), np.zeros_like(yaw)], axis=-1)
    y_raw = np.cross(z_des, x_c)
    y_d, n = _unit(y_raw)
    fallback = R_now[..., :, 1] - np.sum(R_now[..., :, 1] * z_des, axis=-1, keepdims=True) * z_des
    fallback, _ = _unit(fallback)
    y_d = np.where((n < 1e-6)[..., None], fallback, y_d)
    x_d = np.cross(y_d, z_des)
    return np.stack([x_d, y_d, z_des], axis=-1)


def current_yaw(R: np.ndarray) -> np.ndarray:
    return np.arctan2(R[..., 1, 0], R[..., 0, 0])


def se3_control(state: RigidBodyState, ref: Reference, gains: Se3Gains, params: QuadParams) -> LowLevelCommand:
    g = params.gravity
    a_des = (
        ref.a_ref
        + np.asarray(gains.k_p) * (ref.p_ref - state.p)
        + np.asarray(gains.k_v) * (ref.v_ref - state.v)
        + g * E3
    )
    z_b = state.R[..., :, 2]
    thrust = np.maximum(np.sum(a_des * z_b, axis=-1), 0.05 * g)

    z_des, norm = _unit(a_des)
    degenerate = norm < 1e-6
    z_des = np.where(degenerate[..., None], E3, z_des)
    yaw = np.where(degenerate, current_yaw(state.R), ref.yaw_ref)
    R_d = desired_rotation(z_des, yaw, state.R)

    Rt = np.swapaxes(state.R, -1, -2)
    R_dt = np.swapaxes(R_d, -1, -2)
    e_R = 0.5 * vee(R_dt @ state.R - Rt @ R_d)
    omega_des = -np.asarray(gains.k_R) * e_R
    return LowLevelCommand.clamped(thrust, omega_des, params)


def hover_ref(p_hold, yaw: float = 0.0) -> Reference:
    p_hold = np.asarray(p_hold, dtype=float)
    z = np.zeros_like(p_hold)
    return Reference(p_hold.copy(), z, z.copy(), np.full(p_hold.shape[:-1], float(yaw)))


def pure_pursuit(p_self, p_tgt, chase_speed: float, dt_control: float = 0.01) -> Reference:
    p_self = np.asarray(p_self, dtype=float)
    los = np.asarray(p_tgt, dtype=float) - p_self
    u, _ = _unit(los)
    v_ref = chase_speed * u
    yaw = wrap_angle(np.arctan2(los[..., 1], los[..., 0]))
    return Reference(p_self + v_ref * dt_control, v_ref, np.zeros_like(v_ref), yaw)


def los_rate(r: np.ndarray, v_rel: np.ndarray) -> np.ndarray:
    """Angular velocity of the line of sight, ``(r x v_rel) / |r|^2``."""
    r2 = np.sum(r * r, axis=-1, keepdims=True)
    return np.cross(r, v_rel) / np.where(r2 > 0, r2, 1.0)


def prop_nav(
    state_self: RigidBodyState,
    p_tgt,
    v_tgt,
    nav_gain: float,
    params: QuadParams,
    chase_speed: float = 10.0,
    dt_control: float = 0.01,
) -> Reference:
    """True proportional navigation.

    ``a_ref`` carries only the lateral PN acceleration ``N * Vc * (Omega x u)``;
    gravity is compensated downstream by :func:`se3_control`.  The velocity
    reference points along the line of sight at ``chase_speed`` so that the
    law engages from rest, where the closing speed is still zero.
    """
    if nav_gain <= 0:
        raise ValueError("nav_gain must be > 0")
    r = np.asarray(p_tgt, dtype=float) - state_self.p
    v_rel = np.asarray(v_tgt, dtype=float) - state_self.v
    u, dist = _unit(r)
    coincident = dist < 1e-6
    omega_los = los_rate(r, v_rel)
    closing = -np.sum(r * v_rel, axis=-1) / np.where(coincident, 1.0, dist)
    a_lat = nav_gain * closing[..., None] * np.cross(omega_los, u)
    a_lat = np.where(coincident[..., None], 0.0, a_lat)
    mag = np.linalg.norm(a_lat, axis=-1, keepdims=True)
    a_lat = a_lat * np.minimum(1.0, params.thrust_max / np.maximum(mag, 1e-12))

    v_ref = chase_speed * u
    yaw = np.where(coincident, current_yaw(state_self.R), np.arctan2(r[..., 1], r[..., 0]))
    p_ref = state_self.p + v_ref * dt_control + 0.5 * a_lat * dt_control**2
    return Reference(p_ref, v_ref, a_lat, wrap_angle(yaw))


def apf_acceleration(p_self, p_pursuer, arena_lo, arena_hi, gains: ApfGains) -> np.ndarray:
    """Summed repulsion from the pursuer and the six faces of the arena box."""
    p_self = np.asarray(p_self, dtype=float)
    d0, k = gains.influence_radius, gains.k_rep

    def term(d):
        d_safe = np.maximum(d, 1e-9)
        mag = k * (1.0 / d_safe - 1.0 / d0) / d_safe**2
        return np.where(d < d0, np.minimum(mag, gains.a_cap), 0.0)

    away, d_p = _unit(p_self - np.asarray(p_pursuer, dtype=float), eps=1e-9)
    acc = term(d_p)[..., None] * away

    lo = np.asarray(arena_lo, dtype=float)
    hi = np.asarray(arena_hi, dtype=float)
    eye = np.eye(3)
    for axis in range(3):
        acc = acc + term(p_self[..., axis] - lo[axis])[..., None] * eye[axis]
        acc = acc - term(hi[axis] - p_self[..., axis])[..., None] * eye[axis]

    mag = np.linalg.norm(acc, axis=-1, keepdims=True)
    return acc * np.minimum(1.0, gains.a_cap / np.maximum(mag, 1e-12))


def apf_evader(p_self, v_self, p_pursuer, arena_lo, arena_hi, gains: ApfGains, dt_control: float = 0.01) -> Reference:
    acc = apf_acceleration(p_self, p_pursuer, arena_lo, arena_hi, gains)
    v_ref = np.asarray(v_self, dtype=float) + acc * dt_control
    p_ref = np.asarray(p_self, dtype=float) + v_ref * dt_control
    return Reference(p_ref, v_ref, acc, np.zeros(acc.shape[:-1]))
