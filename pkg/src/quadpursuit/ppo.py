"""Co-evolution PPO: batched rollouts for both agents, GAE, clipped updates.

Both agents read the same shared worlds.  Either side may instead be a fixed
heuristic :class:`~quadpursuit.agents.Actor` (frozen-opponent mode).  All
randomness is drawn from streams keyed on ``(seed, iteration, purpose)`` so a
run resumed from a checkpoint replays bit-exactly.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .agents import Actor
from .arena import (
    ACTION_DIM,
    EVADER,
    OBS_DIM,
    PRIV_OBS_DIM,
    PURSUER,
    EnvConfig,
    Outcome,
    WorldState,
    env_step,
    hover_action,
    observe,
    privileged_observation,
    reset,
    reset_done,
)
from .nn import (
    LOG_STD_MAX,
    LOG_STD_MIN,
    TANH_EPS,
    Adam,
    Mlp,
    SquashedGaussian,
    clip_by_global_norm,
    init_policy,
    init_value,
    load_arrays,
    mlp_arrays,
    mlp_from_arrays,
    save_arrays,
    split_policy_output,
    value_forward,
)

log = logging.getLogger(__name__)

METRICS_COLUMNS = ["iteration", "env_steps", "mean_return_P", "mean_return_E", "mean_ep_len", "catch_rate"]
METRICS_HEADER = "# format: quadpursuit.metrics/1"


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass(frozen=True)
class PpoConfig:
    n_envs: int = 1024
    rollout_len: int = 128
    lr: float = 5e-4
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip: float = 0.2
    epochs: int = 15
    minibatches: int = 1
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    max_grad_norm: float = 0.5
    lr_decay: bool = False
    # "gaussian": closed-form pre-squash entropy; "squashed": adds the reparameterized tanh log-Jacobian
    entropy_estimate: str = "gaussian"
    # 2e9 by default; 4e9 is the other commonly quoted budget
    total_steps: int = 2_000_000_000
    hidden: tuple[int, ...] = (256, 256)
    init_log_std: float = -0.5
    checkpoint_every: int = 10

    def __post_init__(self):
        if not 0 < self.clip < 1:
            raise ValueError("clip must be in (0, 1)")
        for name in ("n_envs", "rollout_len", "lr", "gamma", "gae_lambda", "epochs", "minibatches",
                     "max_grad_norm", "total_steps"):
            if not getattr(self, name) > 0:
                raise ValueError(f"PpoConfig.{name} must be > 0")
        if self.entropy_estimate not in ("gaussian", "squashed"):
            raise ValueError("entropy_estimate must be 'gaussian' or 'squashed'")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    @property
    def steps_per_iteration(self) -> int:
        return self.n_envs * self.rollout_len


class Learner:
    """Actor-critic pair for one agent with a shared Adam optimizer."""

    learnable = True

    def __init__(self, policy: Mlp, value: Mlp, lr: float):
        self.policy = policy
        self.value = value
        self.optimizer = Adam(policy.params() + value.params(), lr=lr)

    @classmethod
    def create(cls, cfg: PpoConfig, env: EnvConfig, rng: np.random.Generator, dtype=np.float32) -> "Learner":
        # thrust mean starts at the hover command so early rollouts do not shoot into the ceiling
        hover = hover_action(env.quad)
        mean_bias = np.arctanh(np.clip(hover, -0.999, 0.999))
        policy = init_policy(OBS_DIM, ACTION_DIM, cfg.hidden, rng, dtype, mean_bias, cfg.init_log_std)
        value = init_value(PRIV_OBS_DIM, cfg.hidden, rng, dtype)
        return cls(policy, value, cfg.lr)

    def arrays(self, prefix: str) -> dict[str, np.ndarray]:
        out = {**mlp_arrays(f"{prefix}.policy", self.policy), **mlp_arrays(f"{prefix}.value", self.value)}
        for k, (m, v) in enumerate(zip(self.optimizer.m, self.optimizer.v)):
            out[f"{prefix}.adam.m{k}"] = m
            out[f"{prefix}.adam.v{k}"] = v
        out[f"{prefix}.adam.t"] = np.array([self.optimizer.t], dtype=np.int64)
        return out

    @classmethod
    def from_arrays(cls, prefix: str, arrays: dict[str, np.ndarray], lr: float) -> "Learner":
        learner = cls(mlp_from_arrays(f"{prefix}.policy", arrays), mlp_from_arrays(f"{prefix}.value", arrays), lr)
        opt = learner.optimizer
        for k in range(len(opt.m)):
            opt.m[k][...] = arrays[f"{prefix}.adam.m{k}"]
            opt.v[k][...] = arrays[f"{prefix}.adam.v{k}"]
        opt.t = int(arrays[f"{prefix}.adam.t"][0])
        return learner


@dataclass
class RolloutBatch:
    """Time-major ``(T, B, ...)`` transitions of one agent."""

    obs: np.ndarray
    priv_obs: np.ndarray
    actions: np.ndarray
    pre_tanh: np.ndarray
    log_probs: np.ndarray
    values: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    last_value: np.ndarray


@dataclass
class EpisodeTracker:
    returns: np.ndarray  # (B, 2) running returns
    lengths: np.ndarray  # (B,)
    finished: list[tuple[float, float, int, int]] = field(default_factory=list)

    @classmethod
    def zeros(cls, n: int) -> "EpisodeTracker":
        return cls(np.zeros((n, 2)), np.zeros(n, dtype=np.int64))

    def update(self, r_p, r_e, done, outcome) -> None:
        self.returns[:, PURSUER] += r_p
        self.returns[:, EVADER] += r_e
        self.lengths += 1
        for i in np.flatnonzero(done):
            self.finished.append((self.returns[i, 0], self.returns[i, 1], int(self.lengths[i]), int(outcome[i])))
        self.returns[done] = 0.0
        self.lengths[done] = 0

    def pop_finished(self):
        out, self.finished = self.finished, []
        return out


def _act(agent, world: WorldState, index: int, opp_action_hint, env: EnvConfig, rng):
    """Returns ``(action, pre_tanh, log_prob)``; the last two are None for heuristics."""
    if isinstance(agent, Learner):
        out = agent.policy(observe(world, index, env.arena))
        mean, log_std = split_policy_output(out)
        action, u, logp = SquashedGaussian(mean, log_std).sample(rng)
        return action.astype(float), u, logp
    return agent.act(world, index, env, rng), None, None


def _mean_action(agent, world, index, env):
    if isinstance(agent, Learner):
        mean, _ = split_policy_output(agent.policy(observe(world, index, env.arena)))
        return np.tanh(mean).astype(float)
    return agent.act(world, index, env)


def collect_rollouts(
    world: WorldState,
    pursuer,
    evader,
    env: EnvConfig,
    rollout_len: int,
    rng: np.random.Generator,
    tracker: EpisodeTracker | None = None,
    log_transitions: list | None = None,
) -> tuple[RolloutBatch | None, RolloutBatch | None, WorldState]:
    """Step all worlds ``rollout_len`` times; finished worlds are auto-reset.

    Each learner's privileged observation includes the opponent's action at
    the same step.  ``log_transitions`` (if given) receives the raw
    :class:`~quadpursuit.arena.StepResult` objects for replay checks.
    """
    agents = (pursuer, evader)
    B, T = world.n, rollout_len
    store = {}
    for k, agent in enumerate(agents):
        if isinstance(agent, Learner):
            dtype = agent.policy.dtype
            store[k] = dict(
                obs=np.zeros((T, B, OBS_DIM), dtype), priv_obs=np.zeros((T, B, PRIV_OBS_DIM), dtype),
                actions=np.zeros((T, B, ACTION_DIM)), pre_tanh=np.zeros((T, B, ACTION_DIM), dtype),
                log_probs=np.zeros((T, B), dtype), values=np.zeros((T, B), dtype),
                rewards=np.zeros((T, B)), dones=np.zeros((T, B), dtype=bool),
            )

    for t in range(T):
        obs = [observe(world, k, env.arena) for k in (PURSUER, EVADER)]
        acts = []
        for k, agent in enumerate(agents):
            a, u, logp = _act(agent, world, k, None, env, rng)
            acts.append((a, u, logp))
        for k in store:
            s = store[k]
            opp = acts[1 - k][0]
            priv = privileged_observation(world, k, opp, env.arena)
            s["obs"][t] = obs[k]
            s["priv_obs"][t] = priv
            s["actions"][t] = acts[k][0]
            s["pre_tanh"][t] = acts[k][1]
            s["log_probs"][t] = acts[k][2]
            s["values"][t] = value_forward(agents[k].value, priv)
        res = env_step(world, acts[0][0], acts[1][0], env)
        rewards = (res.reward_p.total, res.reward_e.total)
        for k in store:
            store[k]["rewards"][t] = rewards[k]
            store[k]["dones"][t] = res.done
        if tracker is not None:
            tracker.update(rewards[0], rewards[1], res.done, res.outcome)
        if log_transitions is not None:
            log_transitions.append((world, acts[0][0], acts[1][0], res))
        world = reset_done(res.world, env)

    batches: list[RolloutBatch | None] = [None, None]
    for k in store:
        opp_action = _mean_action(agents[1 - k], world, 1 - k, env)
        last_value = value_forward(agents[k].value, privileged_observation(world, k, opp_action, env.arena))
        batches[k] = RolloutBatch(**store[k], last_value=last_value)
    return batches[0], batches[1], world


def compute_gae(rewards, values, dones, last_value, gamma: float, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimates and value targets (unnormalized).

    ``dones[t]`` marks that the episode ended with transition ``t``; the
    bootstrap ``last_value`` is the value of the state after the final step.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    notdone = 1.0 - np.asarray(dones, dtype=np.float64)
    T = rewards.shape[0]
    adv = np.zeros_like(rewards)
    next_value = np.asarray(last_value, dtype=np.float64)
    running = np.zeros_like(next_value)
    for t in range(T - 1, -1, -1):
        delta = rewards[t] + gamma * next_value * notdone[t] - values[t]
        running = delta + gamma * lam * notdone[t] * running
        adv[t] = running
        next_value = values[t]
    return adv, adv + values


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    std = adv.std()
    return (adv - adv.mean()) / (std if std > 1e-12 else 1.0)


def ppo_loss_and_grads(learner: Learner, obs, priv_obs, pre_tanh, old_log_probs, adv, returns, cfg: PpoConfig):
    """Total PPO loss and its exact gradient w.r.t. policy then value params.

    ``adv`` is used as given (normalize beforehand).
    """
    policy, value = learner.policy, learner.value
    n = obs.shape[0]
    out, p_cache = policy.forward(obs)
    act_dim = out.shape[-1] // 2
    mean = out[:, :act_dim]
    raw_log_std = out[:, act_dim:]
    log_std = np.clip(raw_log_std, LOG_STD_MIN, LOG_STD_MAX)
    dist = SquashedGaussian(mean, log_std)
    new_log_probs = dist.log_prob(pre_tanh)

    ratio = np.exp(new_log_probs - old_log_probs)
    surr1 = ratio * adv
    surr2 = np.clip(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip) * adv
    policy_loss = -np.mean(np.minimum(surr1, surr2))
    entropy = np.mean(dist.entropy())

    v, v_cache = value.forward(priv_obs)
    v = v[:, 0]
    value_loss = np.mean((v - returns) ** 2)

    # d loss / d log_prob, only through the unclipped branch when it is the active minimum
    active = surr1 <= surr2
    g_logp = np.where(active, -ratio * adv, 0.0) / n
    inv_var = np.exp(-2.0 * log_std)
    z2 = (pre_tanh - mean) ** 2 * inv_var
    g_mean = g_logp[:, None] * (pre_tanh - mean) * inv_var
    g_log_std = g_logp[:, None] * (z2 - 1.0) - cfg.entropy_coef / n
    if cfg.entropy_estimate == "squashed":
        # sample u = mean + std * eps with eps held fixed; saturating the squash lowers the entropy
        t = np.tanh(pre_tanh)
        jac = 1.0 - t**2
        entropy = entropy + np.mean(np.sum(np.log(jac + TANH_EPS), axis=-1))
        g_u = (cfg.entropy_coef / n) * 2.0 * t * jac / (jac + TANH_EPS)
        g_mean = g_mean + g_u
        g_log_std = g_log_std + g_u * (pre_tanh - mean)
    loss = policy_loss + cfg.value_coef * value_loss - cfg.entropy_coef * entropy
    g_log_std = g_log_std * ((raw_log_std >= LOG_STD_MIN) & (raw_log_std <= LOG_STD_MAX))
    g_out = np.concatenate([g_mean, g_log_std], axis=-1).astype(policy.dtype)
    g_v = (cfg.value_coef * 2.0 * (v - returns) / n)[:, None].astype(value.dtype)

    grads = policy.backward(p_cache, g_out) + value.backward(v_cache, g_v)
    info = {
        "loss": float(loss), "policy_loss": float(policy_loss), "value_loss": float(value_loss),
        "entropy": float(entropy), "clip_frac": float(np.mean(np.abs(ratio - 1.0) > cfg.clip)),
    }
    return float(loss), grads, info


def ppo_update(learner: Learner, batch: RolloutBatch, adv: np.ndarray, returns: np.ndarray,
               cfg: PpoConfig, rng: np.random.Generator | None = None) -> dict:
    """``cfg.epochs`` passes over the batch split into ``cfg.minibatches`` parts.

    Advantages are normalized once per update batch.  A non-finite loss
    restores the parameters from before the update and raises
    :class:`TrainingDivergedError`.
    """
    dtype = learner.policy.dtype
    flat = lambda x: x.reshape((-1,) + x.shape[2:])  # noqa: E731
    obs, priv = flat(batch.obs), flat(batch.priv_obs)
    pre_tanh, old_logp = flat(batch.pre_tanh), flat(batch.log_probs).astype(np.float64)
    adv = normalize_advantages(flat(adv)).astype(dtype)
    returns = flat(returns).astype(dtype)
    n = obs.shape[0]

    snapshot = [p.copy() for p in learner.optimizer.params]
    opt_snapshot = ([m.copy() for m in learner.optimizer.m], [v.copy() for v in learner.optimizer.v], learner.optimizer.t)
    infos = []
    for epoch in range(cfg.epochs):
        order = np.arange(n) if cfg.minibatches == 1 or rng is None else rng.permutation(n)
        for idx in np.array_split(order, cfg.minibatches):
            loss, grads, info = ppo_loss_and_grads(
                learner, obs[idx], priv[idx], pre_tanh[idx], old_logp[idx].astype(dtype), adv[idx], returns[idx], cfg,
            )
            if not math.isfinite(loss) or not all(np.isfinite(g).all() for g in grads):
                for p, s in zip(learner.optimizer.params, snapshot):
                    p[...] = s
                opt = learner.optimizer
                for m, s in zip(opt.m, opt_snapshot[0]):
                    m[...] = s
                for v, s in zip(opt.v, opt_snapshot[1]):
                    v[...] = s
                opt.t = opt_snapshot[2]
                raise TrainingDivergedError(
                    f"non-finite PPO loss at epoch {epoch}: {info}; parameters restored to pre-update values"
                )
            grads, norm = clip_by_global_norm(grads, cfg.max_grad_norm)
            learner.optimizer.step(grads)
            info["grad_norm"] = norm
            infos.append(info)
    return {k: float(np.mean([i[k] for i in infos])) for k in infos[0]}


# ---------------------------------------------------------------- training

@dataclass
class TrainState:
    iteration: int
    env_steps: int
    world: WorldState
    pursuer: object
    evader: object
    tracker: EpisodeTracker
    seed: int


def init_train_state(cfg: PpoConfig, env: EnvConfig, seed: int, pursuer=None, evader=None) -> TrainState:
    """``pursuer`` / ``evader`` default to fresh learners; pass an Actor to freeze a side."""
    init_rng = np.random.default_rng([seed, 0xC0DE])
    pursuer = pursuer if pursuer is not None else Learner.create(cfg, env, init_rng)
    evader = evader if evader is not None else Learner.create(cfg, env, init_rng)
    world = reset(seed, env, cfg.n_envs)
    return TrainState(0, 0, world, pursuer, evader, EpisodeTracker.zeros(cfg.n_envs), seed)


def train_iteration(state: TrainState, cfg: PpoConfig, env: EnvConfig) -> dict:
    """One collect -> update cycle for every learning agent; returns a metrics row."""
    it = state.iteration + 1
    rng = np.random.default_rng([state.seed, it, 1])
    batch_p, batch_e, world = collect_rollouts(state.world, state.pursuer, state.evader, env, cfg.rollout_len, rng, state.tracker)
    stats = {}
    for k, (agent, batch) in enumerate(((state.pursuer, batch_p), (state.evader, batch_e))):
        if batch is None:
            continue
        adv, ret = compute_gae(batch.rewards, batch.values, batch.dones, batch.last_value, cfg.gamma, cfg.gae_lambda)
        stats[k] = ppo_update(agent, batch, adv, ret, cfg, np.random.default_rng([state.seed, it, 2, k]))
    state.world = world
    state.iteration = it
    state.env_steps += cfg.steps_per_iteration

    finished = state.tracker.pop_finished()
    if finished:
        arr = np.array([f[:3] for f in finished], dtype=float)
        outcomes = np.array([f[3] for f in finished])
        ret_p, ret_e, ep_len = arr.mean(axis=0)
        catch_rate = float(np.mean(outcomes == Outcome.CATCH))
    else:
        # no episode ended this iteration: report in-progress partial returns
        ret_p, ret_e = state.tracker.returns.mean(axis=0)
        ep_len = float(state.tracker.lengths.mean())
        catch_rate = 0.0
    row = {
        "iteration": it, "env_steps": state.env_steps, "mean_return_P": float(ret_p),
        "mean_return_E": float(ret_e), "mean_ep_len": float(ep_len), "catch_rate": catch_rate,
    }
    row["_stats"] = stats
    row["_episodes"] = len(finished)
    return row


def save_train_state(path, state: TrainState, cfg: PpoConfig, env_meta: dict | None = None) -> None:
    arrays = {f"world.{k}": v for k, v in state.world.arrays().items()}
    arrays["tracker.returns"] = state.tracker.returns
    arrays["tracker.lengths"] = state.tracker.lengths
    roles = {}
    for name, agent in (("pursuer", state.pursuer), ("evader", state.evader)):
        if isinstance(agent, Learner):
            arrays.update(agent.arrays(name))
            roles[name] = "learner"
        else:
            roles[name] = getattr(agent, "name", "actor")
    meta = {
        "kind": "train_state", "iteration": state.iteration, "env_steps": state.env_steps,
        "seed": state.seed, "roles": roles, "ppo": asdict(cfg), "env": env_meta or {},
    }
    save_arrays(path, arrays, meta)


def load_train_state(path, cfg: PpoConfig, pursuer=None, evader=None) -> TrainState:
    """Restore a :class:`TrainState`; frozen sides must be supplied again as actors."""
    arrays, meta = load_arrays(path)
    if meta.get("kind") != "train_state":
        raise ValueError(f"{path} is not a training checkpoint")
    world_arrays = {k[len("world."):]: v for k, v in arrays.items() if k.startswith("world.")}
    world = WorldState.from_arrays(world_arrays, meta["seed"])
    agents = []
    for name, given in (("pursuer", pursuer), ("evader", evader)):
        if meta["roles"][name] == "learner":
            agents.append(Learner.from_arrays(name, arrays, cfg.lr))
        elif given is None:
            raise ValueError(f"checkpoint has a frozen {name} ({meta['roles'][name]}); pass it explicitly")
        else:
            agents.append(given)
    tracker = EpisodeTracker(arrays["tracker.returns"].copy(), arrays["tracker.lengths"].astype(np.int64))
    return TrainState(meta["iteration"], meta["env_steps"], world, agents[0], agents[1], tracker, meta["seed"])


def export_policy(path, learner: Learner, meta: dict | None = None) -> None:
    """Policy-only checkpoint consumed by the evaluation harness."""
    save_arrays(path, mlp_arrays("policy", learner.policy), {"kind": "policy", **(meta or {})})


class MetricsWriter:
    """Appends rows to the metrics CSV, writing the header on first use."""

    def __init__(self, path):
        self.path = Path(path)
        if not self.path.exists():
            with open(self.path, "w", newline="") as fh:
                fh.write(METRICS_HEADER + "\n")
                csv.writer(fh).writerow(METRICS_COLUMNS)

    def append(self, row: dict) -> None:
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in METRICS_COLUMNS])


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = list(csv.DictReader(lines))
    return [{k: (int(v) if k in ("iteration", "env_steps") else float(v)) for k, v in r.items()} for r in rows]


def train_selfplay(
    cfg: PpoConfig,
    env: EnvConfig,
    out_dir,
    seed: int = 0,
    state: TrainState | None = None,
    pursuer=None,
    evader=None,
    max_iterations: int | None = None,
    callback=None,
    env_meta: dict | None = None,
) -> TrainState:
    """Latest-vs-latest co-evolution until ``cfg.total_steps`` env steps.

    Writes ``metrics.csv`` and ``checkpoints/iter_XXXXXX.ckpt`` (plus
    ``latest.ckpt``) under ``out_dir``.  ``callback(state, row)`` returning
    True stops training early.
    """
    out = Path(out_dir)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    if state is None:
        state = init_train_state(cfg, env, seed, pursuer, evader)
    writer = MetricsWriter(out / "metrics.csv")
    n_iter = 0
    while state.env_steps < cfg.total_steps:
        t0 = time.perf_counter()
        row = train_iteration(state, cfg, env)
        writer.append(row)
        n_iter += 1
        log.info(
            "iter %d steps %d ret_P %.3f ret_E %.3f len %.1f catch %.3f (%.1fs)",
            row["iteration"], row["env_steps"], row["mean_return_P"], row["mean_return_E"],
            row["mean_ep_len"], row["catch_rate"], time.perf_counter() - t0,
        )
        last = state.env_steps >= cfg.total_steps or (max_iterations is not None and n_iter >= max_iterations)
        stop = bool(callback(state, row)) if callback is not None else False
        if state.iteration % cfg.checkpoint_every == 0 or last or stop:
            ckpt = out / "checkpoints" / f"iter_{state.iteration:06d}.ckpt"
            save_train_state(ckpt, state, cfg, env_meta)
            save_train_state(out / "checkpoints" / "latest.ckpt", state, cfg, env_meta)
        if last or stop:
            break
    return state
