"""Two-agent pursuit-evasion environment stepping at 100 Hz.

A :class:`WorldState` holds a batch of ``B`` independent worlds.  Per-agent
arrays are stacked on axis 1 with index :data:`PURSUER` = 0 and
:data:`EVADER` = 1, so both vehicles go through the physics in one call.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .dynamics import (
    DelayLine,
    LowLevelCommand,
    MotorState,
    QuadParams,
    RigidBodyState,
    control_tick,
)

PURSUER = 0
EVADER = 1
OBS_DIM = 24
ACTION_DIM = 4
PRIV_OBS_DIM = 2 * 15 + ACTION_DIM


class Outcome(enum.IntEnum):
    NONE = -1
    CATCH = 0
    TIMEOUT = 1
    PURSUER_CRASH = 2
    EVADER_CRASH = 3
    DOUBLE_CRASH = 4


@dataclass(frozen=True)
class ArenaConfig:
    size: tuple[float, float, float] = (8.0, 8.0, 5.0)
    inner_lo: tuple[float, float, float] = (1.0, 1.0, 0.5)
    inner_hi: tuple[float, float, float] = (7.0, 7.0, 4.5)
    buffer_threshold: float = 1.0
    buffer_scale: float = 0.25
    episode_max_steps: int = 1000
    dt_control: float = 0.01
    obs_range: float = 10.0  # k_p, m
    obs_max_speed: float = 8.0  # k_v, m/s
    spawn_margin: float = 0.5

    def __post_init__(self):
        size = np.asarray(self.size)
        lo, hi = np.asarray(self.inner_lo), np.asarray(self.inner_hi)
        if np.any(size <= 0) or np.any(lo < 0) or np.any(hi > size) or np.any(lo >= hi):
            raise ValueError("inner bounds must lie inside the arena box")
        if np.any(2 * self.spawn_margin >= size):
            raise ValueError("spawn_margin too large for the arena")
        for name in ("buffer_threshold", "buffer_scale", "dt_control", "obs_range", "obs_max_speed"):
            if not getattr(self, name) > 0:
                raise ValueError(f"ArenaConfig.{name} must be > 0")
        if self.episode_max_steps < 1:
            raise ValueError("episode_max_steps must be >= 1")

    @property
    def horizon(self) -> float:
        return self.episode_max_steps * self.dt_control

    @property
    def hi(self) -> np.ndarray:
        return np.asarray(self.size, dtype=float)

    @property
    def centre(self) -> np.ndarray:
        return 0.5 * self.hi


def _centred_inner(size, inner):
    size, inner = np.asarray(size, float), np.asarray(inner, float)
    lo = 0.5 * (size - inner)
    return tuple(lo), tuple(lo + inner)


def arena_preset(name: str) -> ArenaConfig:
    """``small``: 8x8x5 m with a 6x6x4 evader volume; ``large``: 40x40x14 with 20x20x4."""
    if name == "small":
        size, inner, k_p = (8.0, 8.0, 5.0), (6.0, 6.0, 4.0), 10.0
    elif name == "large":
        size, inner, k_p = (40.0, 40.0, 14.0), (20.0, 20.0, 4.0), 40.0
    else:
        raise ValueError(f"unknown arena preset {name!r} (expected 'small' or 'large')")
    lo, hi = _centred_inner(size, inner)
    return ArenaConfig(size=size, inner_lo=lo, inner_hi=hi, obs_range=k_p)


@dataclass(frozen=True)
class NetConfig:
    radius: float = 0.5
    capture_dist: float = 0.1
    center_offset: tuple[float, float, float] = (0.2, 0.0, 0.0)
    normal_axis: int = 0

    def __post_init__(self):
        if not (self.radius > 0 and self.capture_dist > 0):
            raise ValueError("net radius and capture_dist must be > 0")
        if self.normal_axis not in (0, 1, 2):
            raise ValueError("normal_axis must be 0, 1 or 2")


@dataclass(frozen=True)
class RewardCoefficients:
    catch: float = 10.0
    dist: float = 0.001
    coll: float = 0.1
    fail: float = 30.0
    cmd: float = 2e-4
    bnd: float = 1.0


@dataclass(frozen=True)
class EnvConfig:
    arena: ArenaConfig = field(default_factory=ArenaConfig)
    net: NetConfig = field(default_factory=NetConfig)
    quad: QuadParams = field(default_factory=QuadParams)
    rewards: RewardCoefficients = field(default_factory=RewardCoefficients)

    @property
    def min_separation(self) -> float:
        reach = np.linalg.norm(self.net.center_offset) + self.net.radius + self.net.capture_dist
        return float(max(2 * (self.net.capture_dist + self.net.radius), reach + 0.1))


@dataclass
class WorldState:
    body: RigidBodyState  # arrays shaped (B, 2, ...)
    motors: MotorState  # (B, 2, 4)
    delay: DelayLine  # (B, 2, delay + 1, 4)
    step_count: np.ndarray  # (B,) int
    done: np.ndarray  # (B,) bool
    last_actions: np.ndarray  # (B, 2, 4), normalized actions of the previous step
    spawn: np.ndarray  # (B, 2, 3)
    world_id: np.ndarray  # (B,) int
    episode: np.ndarray  # (B,) int, per-world episode counter (RNG stream key)
    seed: int = 0

    @property
    def n(self) -> int:
        return self.step_count.shape[0]

    def copy(self) -> "WorldState":
        return WorldState(
            body=self.body.copy(),
            motors=MotorState(self.motors.rotor_speeds.copy()),
            delay=DelayLine(self.delay.buffer.copy()),
            step_count=self.step_count.copy(),
            done=self.done.copy(),
            last_actions=self.last_actions.copy(),
            spawn=self.spawn.copy(),
            world_id=self.world_id.copy(),
            episode=self.episode.copy(),
            seed=self.seed,
        )

    def take(self, idx) -> "WorldState":
        """Sub-batch of worlds selected by an index array or boolean mask."""
        return WorldState(
            body=self.body.take(idx),
            motors=MotorState(self.motors.rotor_speeds[idx]),
            delay=DelayLine(self.delay.buffer[idx]),
            step_count=self.step_count[idx],
            done=self.done[idx],
            last_actions=self.last_actions[idx],
            spawn=self.spawn[idx],
            world_id=self.world_id[idx],
            episode=self.episode[idx],
            seed=self.seed,
        )

    def arrays(self) -> dict[str, np.ndarray]:
        """Flat name -> array view, used for checkpointing."""
        return {
            "p": self.body.p, "v": self.body.v, "R": self.body.R, "omega": self.body.omega,
            "rotor_speeds": self.motors.rotor_speeds, "delay": self.delay.buffer,
            "step_count": self.step_count, "done": self.done.astype(np.uint8),
            "last_actions": self.last_actions, "spawn": self.spawn,
            "world_id": self.world_id, "episode": self.episode,
        }

    @classmethod
    def from_arrays(cls, a: dict[str, np.ndarray], seed: int) -> "WorldState":
        return cls(
            body=RigidBodyState(a["p"].copy(), a["v"].copy(), a["R"].copy(), a["omega"].copy()),
            motors=MotorState(a["rotor_speeds"].copy()),
            delay=DelayLine(a["delay"].copy()),
            step_count=a["step_count"].astype(np.int64),
            done=a["done"].astype(bool),
            last_actions=a["last_actions"].copy(),
            spawn=a["spawn"].copy(),
            world_id=a["world_id"].astype(np.int64),
            episode=a["episode"].astype(np.int64),
            seed=int(seed),
        )


def episode_rng(seed: int, world_id: int, episode: int) -> np.random.Generator:
    """Independent stream per (seed, world, episode); stateless across resumes."""
    return np.random.default_rng([int(seed), int(world_id), int(episode)])


def sample_spawn(rng: np.random.Generator, cfg: EnvConfig) -> np.ndarray:
    """Two i.i.d. uniform positions with the minimum separation rule."""
    arena = cfg.arena
    lo = np.full(3, arena.spawn_margin)
    hi = arena.hi - arena.spawn_margin
    for _ in range(100):
        pts = rng.uniform(lo, hi, size=(2, 3))
        if np.linalg.norm(pts[0] - pts[1]) >= cfg.min_separation:
            return pts
    return np.stack([lo, hi])


def reset_worlds(seed: int, world_ids, episodes, cfg: EnvConfig) -> WorldState:
    world_ids = np.asarray(world_ids, dtype=np.int64)
    episodes = np.asarray(episodes, dtype=np.int64)
    B = world_ids.shape[0]
    spawn = np.stack([sample_spawn(episode_rng(seed, w, e), cfg) for w, e in zip(world_ids, episodes)])
    spawn = spawn.reshape(B, 2, 3)
    q = cfg.quad
    body = RigidBodyState.level(spawn)
    motors = MotorState.hover(q, (B, 2))
    delay = DelayLine.filled(LowLevelCommand.hover(q, (B, 2)), q)
    return WorldState(
        body=body,
        motors=motors,
        delay=delay,
        step_count=np.zeros(B, dtype=np.int64),
        done=np.zeros(B, dtype=bool),
        last_actions=np.broadcast_to(hover_action(q), (B, 2, ACTION_DIM)).copy(),
        spawn=spawn,
        world_id=world_ids,
        episode=episodes,
        seed=int(seed),
    )


def reset(seed: int, cfg: EnvConfig, n_worlds: int = 1) -> WorldState:
    return reset_worlds(seed, np.arange(n_worlds), np.zeros(n_worlds, dtype=np.int64), cfg)


def reset_done(world: WorldState, cfg: EnvConfig) -> WorldState:
    """Replace finished worlds by fresh episodes (next episode index)."""
    idx = np.flatnonzero(world.done)
    if idx.size == 0:
        return world
    fresh = reset_worlds(world.seed, world.world_id[idx], world.episode[idx] + 1, cfg)
    out = world.copy()
    out.body.p[idx] = fresh.body.p
    out.body.v[idx] = fresh.body.v
    out.body.R[idx] = fresh.body.R
    out.body.omega[idx] = fresh.body.omega
    out.motors.rotor_speeds[idx] = fresh.motors.rotor_speeds
    out.delay.buffer[idx] = fresh.delay.buffer
    out.step_count[idx] = 0
    out.done[idx] = False
    out.last_actions[idx] = fresh.last_actions
    out.spawn[idx] = fresh.spawn
    out.episode[idx] = fresh.episode
    return out


def hover_action(params: QuadParams) -> np.ndarray:
    return command_to_action(LowLevelCommand.hover(params), params)


def action_to_command(action: np.ndarray, params: QuadParams) -> LowLevelCommand:
    """Map ``[-1, 1]^4`` to thrust ``[0, thrust_max]`` and rates ``[-omega_max, omega_max]``."""
    a = np.clip(action, -1.0, 1.0)
    thrust = 0.5 * (a[..., 0] + 1.0) * params.thrust_max
    return LowLevelCommand.clamped(thrust, a[..., 1:4] * params.omega_max, params)


def command_to_action(cmd: LowLevelCommand, params: QuadParams) -> np.ndarray:
    thrust = 2.0 * np.asarray(cmd.thrust) / params.thrust_max - 1.0
    rates = np.asarray(cmd.omega_des) / params.omega_max
    return np.clip(np.concatenate([thrust[..., None], rates], axis=-1), -1.0, 1.0)


# ---------------------------------------------------------------- geometry

def net_frame(body: RigidBodyState, net: NetConfig) -> tuple[np.ndarray, np.ndarray]:
    """World-frame net centre and disc normal."""
    centre = body.p + body.R @ np.asarray(net.center_offset, dtype=float)
    normal = body.R[..., :, net.normal_axis]
    return centre, normal


def capture_check(pursuer: RigidBodyState, p_evader, net: NetConfig) -> tuple[np.ndarray, np.ndarray]:
    """Distance from the evader centre to the closed net disc, and the capture flag."""
    centre, normal = net_frame(pursuer, net)
    rel = np.asarray(p_evader, dtype=float) - centre
    h = np.sum(rel * normal, axis=-1)
    radial = np.linalg.norm(rel - h[..., None] * normal, axis=-1)
    d = np.sqrt(h**2 + np.maximum(radial - net.radius, 0.0) ** 2)
    return d <= net.capture_dist, d


def collision_check(p_pursuer, p_evader, params: QuadParams) -> np.ndarray:
    gap = np.linalg.norm(np.asarray(p_pursuer) - np.asarray(p_evader), axis=-1)
    return gap <= 2 * params.body_radius


def inner_boundary_distance(p, arena: ArenaConfig) -> np.ndarray:
    """Distance to the nearest inner-volume face; 0 outside the inner volume."""
    p = np.asarray(p, dtype=float)
    lo, hi = np.asarray(arena.inner_lo), np.asarray(arena.inner_hi)
    d = np.minimum(p - lo, hi - p).min(axis=-1)
    return np.maximum(d, 0.0)


def boundary_penalty(d_bnd, arena: ArenaConfig, coef: float = 1.0) -> np.ndarray:
    d_bnd = np.asarray(d_bnd, dtype=float)
    return np.where(d_bnd < arena.buffer_threshold, coef * np.exp(-d_bnd / arena.buffer_scale), 0.0)


def outside_arena(p, arena: ArenaConfig) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    return np.any(p < 0.0, axis=-1) | np.any(p > arena.hi, axis=-1)


def crashed(body: RigidBodyState, params: QuadParams, arena: ArenaConfig) -> np.ndarray:
    ground = (body.p[..., 2] <= params.body_radius) & (body.v[..., 2] < 0.0)
    return ground | outside_arena(body.p, arena)


# ------------------------------------------------------------ observations

def wall_distances(p, arena: ArenaConfig) -> np.ndarray:
    """Distances to the x-, x+, y-, y+ walls, the ceiling and the ground."""
    p = np.asarray(p, dtype=float)
    L = arena.hi
    return np.stack([p[..., 0], L[0] - p[..., 0], p[..., 1], L[1] - p[..., 1], L[2] - p[..., 2], p[..., 2]], axis=-1)


def observe(world: WorldState, agent: int, arena: ArenaConfig) -> np.ndarray:
    b = world.body
    other = 1 - agent
    p_i, v_i = b.p[:, agent], b.v[:, agent]
    k_p, k_v = arena.obs_range, arena.obs_max_speed
    parts = [
        np.clip(v_i / k_v, -1, 1),
        b.R[:, agent].reshape(-1, 9),
        np.clip((b.p[:, other] - p_i) / k_p, -1, 1),
        np.clip((b.v[:, other] - v_i) / k_v, -1, 1),
        np.clip(wall_distances(p_i, arena) / k_p, -1, 1),
    ]
    return np.concatenate(parts, axis=-1)


def privileged_observation(world: WorldState, agent: int, opponent_action: np.ndarray, arena: ArenaConfig) -> np.ndarray:
    """Both agents' normalized [p, v, vec(R)], own first, plus the opponent's action."""
    b = world.body
    parts = []
    for k in (agent, 1 - agent):
        parts += [
            np.clip((b.p[:, k] - arena.centre) / arena.obs_range, -1, 1),
            np.clip(b.v[:, k] / arena.obs_max_speed, -1, 1),
            b.R[:, k].reshape(-1, 9),
        ]
    parts.append(np.clip(opponent_action, -1, 1))
    return np.concatenate(parts, axis=-1)


# ----------------------------------------------------------------- rewards

@dataclass
class RewardBreakdown:
    """Signed per-step reward contributions of one agent; ``total`` is their sum."""

    catch: np.ndarray
    dist: np.ndarray
    coll: np.ndarray
    fail: np.ndarray
    cmd: np.ndarray
    bnd: np.ndarray

    @property
    def total(self) -> np.ndarray:
        return self.catch + self.dist + self.coll + self.fail + self.cmd + self.bnd


@dataclass
class Events:
    catch: np.ndarray
    contact: np.ndarray
    fail_p: np.ndarray
    fail_e: np.ndarray


def compute_rewards(
    world_next: WorldState,
    commands: LowLevelCommand,
    events: Events,
    cfg: EnvConfig,
) -> tuple[RewardBreakdown, RewardBreakdown]:
    """Reward decomposition for the pursuer and the evader.

    ``commands`` are the low-level commands of this step stacked ``(B, 2)``.
    On any step where an agent fails the catch and distance terms are
    withheld from both agents.
    """
    lam = cfg.rewards
    body = world_next.body
    centre, _ = net_frame(body.take((slice(None), PURSUER)), cfg.net)
    dist = np.linalg.norm(body.p[:, EVADER] - centre, axis=-1)
    any_fail = events.fail_p | events.fail_e
    signal = ~any_fail

    r_catch = lam.catch * (events.catch & signal)
    r_dist = lam.dist * dist * signal
    r_coll = lam.coll * events.contact
    rate_norm = np.linalg.norm(commands.omega_des, axis=-1)
    r_cmd = lam.cmd * rate_norm
    r_bnd = boundary_penalty(inner_boundary_distance(body.p[:, EVADER], cfg.arena), cfg.arena, lam.bnd)
    zero = np.zeros_like(r_dist)

    pursuer = RewardBreakdown(
        catch=r_catch, dist=-r_dist, coll=-r_coll, fail=-lam.fail * events.fail_p,
        cmd=-r_cmd[:, PURSUER], bnd=zero,
    )
    evader = RewardBreakdown(
        catch=-r_catch, dist=r_dist.copy(), coll=-r_coll, fail=-lam.fail * events.fail_e,
        cmd=-r_cmd[:, EVADER], bnd=-r_bnd,
    )
    return pursuer, evader


# -------------------------------------------------------------------- step

@dataclass
class StepResult:
    world: WorldState
    reward_p: RewardBreakdown
    reward_e: RewardBreakdown
    events: Events
    done: np.ndarray
    outcome: np.ndarray  # Outcome codes, NONE where not done
    t_end: np.ndarray  # episode time at this step, s

    @property
    def censored_time_to_catch(self) -> np.ndarray:
        return censored_time(self.outcome, self.t_end, self.world_horizon)

    world_horizon: float = 10.0


def censored_time(outcome, t_end, horizon: float = 10.0) -> np.ndarray:
    outcome = np.asarray(outcome)
    return np.where(outcome == Outcome.CATCH, np.asarray(t_end, dtype=float), float(horizon))


def classify(catch, fail_p, fail_e, timeout) -> np.ndarray:
    """Outcome per world; capture takes precedence over crashes in the same tick."""
    out = np.full(np.shape(catch), int(Outcome.NONE))
    out = np.where(timeout, int(Outcome.TIMEOUT), out)
    out = np.where(fail_p & ~fail_e, int(Outcome.PURSUER_CRASH), out)
    out = np.where(fail_e & ~fail_p, int(Outcome.EVADER_CRASH), out)
    out = np.where(fail_p & fail_e, int(Outcome.DOUBLE_CRASH), out)
    return np.where(catch, int(Outcome.CATCH), out)


def env_step(world: WorldState, action_p: np.ndarray, action_e: np.ndarray, cfg: EnvConfig) -> StepResult:
    """Advance every world by one control tick.

    Actions are normalized ``[-1, 1]^4`` vectors (thrust, roll/pitch/yaw rate).
    """
    assert not world.done.any(), "env_step called on a finished world; reset it first"
    q = cfg.quad
    actions = np.stack([np.asarray(action_p, float), np.asarray(action_e, float)], axis=1)
    cmd = action_to_command(actions, q)
    body, motors, delay = control_tick(world.body, world.motors, world.delay, cmd, q)
    step_count = world.step_count + 1

    nxt = WorldState(
        body=body, motors=motors, delay=delay, step_count=step_count,
        done=world.done.copy(), last_actions=np.clip(actions, -1, 1), spawn=world.spawn,
        world_id=world.world_id, episode=world.episode, seed=world.seed,
    )
    catch, _ = capture_check(body.take((slice(None), PURSUER)), body.p[:, EVADER], cfg.net)
    contact = collision_check(body.p[:, PURSUER], body.p[:, EVADER], q)
    crash = crashed(body, q, cfg.arena)
    fail_p = crash[:, PURSUER] & ~catch
    fail_e = crash[:, EVADER] & ~catch
    timeout = step_count >= cfg.arena.episode_max_steps
    events = Events(catch=catch, contact=contact, fail_p=fail_p, fail_e=fail_e)

    reward_p, reward_e = compute_rewards(nxt, cmd, events, cfg)
    done = catch | fail_p | fail_e | timeout
    outcome = np.where(done, classify(catch, fail_p, fail_e, timeout), int(Outcome.NONE))
    nxt.done = done
    return StepResult(
        world=nxt, reward_p=reward_p, reward_e=reward_e, events=events, done=done,
        outcome=outcome, t_end=step_count * cfg.arena.dt_control,
        world_horizon=cfg.arena.horizon,
    )
