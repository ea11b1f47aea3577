"""Decision makers that emit normalized actions for one side of a world batch.

Heuristics read only their own state plus the opponent's position and
velocity, and are converted to thrust + body rates through the SE(3)
controller each control tick.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import guidance
from .arena import EnvConfig, WorldState, command_to_action, observe
from .dynamics import RigidBodyState
from .guidance import GuidanceConfig


def _own_state(world: WorldState, agent: int) -> RigidBodyState:
    return world.body.take((slice(None), agent))


class Actor:
    """Base class; ``act`` returns ``(B, 4)`` actions in ``[-1, 1]``."""

    name = "actor"
    roles: tuple[int, ...] = (0, 1)
    learnable = False

    def act(self, world: WorldState, agent: int, cfg: EnvConfig, rng: np.random.Generator | None = None) -> np.ndarray:
        raise NotImplementedError


@dataclass
class HeuristicActor(Actor):
    guidance: GuidanceConfig = GuidanceConfig()

    def reference(self, world: WorldState, agent: int, cfg: EnvConfig) -> guidance.Reference:
        raise NotImplementedError

    def act(self, world, agent, cfg, rng=None):
        ref = self.reference(world, agent, cfg)
        cmd = guidance.se3_control(_own_state(world, agent), ref, self.guidance.se3, cfg.quad)
        return command_to_action(cmd, cfg.quad)


class HoverActor(HeuristicActor):
    """Holds the position where the episode started."""

    name = "hover"
    roles = (1,)

    def reference(self, world, agent, cfg):
        return guidance.hover_ref(world.spawn[:, agent])


class PurePursuitActor(HeuristicActor):
    name = "pp"
    roles = (0,)

    def reference(self, world, agent, cfg):
        p = world.body.p
        return guidance.pure_pursuit(p[:, agent], p[:, 1 - agent], self.guidance.pp_chase_speed, cfg.arena.dt_control)


class PropNavActor(HeuristicActor):
    name = "pn"
    roles = (0,)

    def reference(self, world, agent, cfg):
        b = world.body
        return guidance.prop_nav(
            _own_state(world, agent), b.p[:, 1 - agent], b.v[:, 1 - agent], self.guidance.pn_gain,
            cfg.quad, self.guidance.pn_chase_speed, cfg.arena.dt_control,
        )


class ApfActor(HeuristicActor):
    name = "apf"
    roles = (1,)

    def reference(self, world, agent, cfg):
        b = world.body
        return guidance.apf_evader(
            b.p[:, agent], b.v[:, agent], b.p[:, 1 - agent], np.zeros(3), cfg.arena.hi,
            self.guidance.apf, cfg.arena.dt_control,
        )


class PolicyActor(Actor):
    """Wraps a policy network; deterministic (``tanh(mean)``) unless sampling."""

    name = "policy"
    learnable = True

    def __init__(self, policy, deterministic: bool = True):
        self.policy = policy
        self.deterministic = deterministic

    def act(self, world, agent, cfg, rng=None):
        from .nn import SquashedGaussian, policy_forward

        obs = observe(world, agent, cfg.arena)
        mean, log_std = policy_forward(self.policy, obs)
        if self.deterministic or rng is None:
            return np.tanh(mean).astype(float)
        action, _, _ = SquashedGaussian(mean, log_std).sample(rng)
        return action.astype(float)


HEURISTICS = {
    "hover": HoverActor,
    "pp": PurePursuitActor,
    "pn": PropNavActor,
    "apf": ApfActor,
}
