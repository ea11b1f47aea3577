import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import hover_actions, placed_world
from quadpursuit.arena import (
    ACTION_DIM, EVADER, OBS_DIM, PRIV_OBS_DIM, PURSUER, EnvConfig, Events, NetConfig, Outcome, action_to_command,
    arena_preset, boundary_penalty, capture_check, censored_time, classify, collision_check, command_to_action,
    compute_rewards, env_step, hover_action, inner_boundary_distance, observe, privileged_observation, reset,
    reset_done, reset_worlds,
)
from quadpursuit.dynamics import LowLevelCommand, RigidBodyState, so3_exp

NET = NetConfig()


# ---------------------------------------------------------------- presets

def test_presets_match_published_sizes():
    small, large = arena_preset("small"), arena_preset("large")
    assert small.size == (8.0, 8.0, 5.0)
    assert large.size == (40.0, 40.0, 14.0)
    assert tuple(np.subtract(small.inner_hi, small.inner_lo)) == (6.0, 6.0, 4.0)
    assert tuple(np.subtract(large.inner_hi, large.inner_lo)) == (20.0, 20.0, 4.0)
    with pytest.raises(ValueError):
        arena_preset("medium")


# ----------------------------------------------------------------- reset

def test_reset_is_deterministic(env):
    a, b = reset(7, env, 16), reset(7, env, 16)
    for k, v in a.arrays().items():
        np.testing.assert_array_equal(v, b.arrays()[k])
    assert not np.array_equal(reset(8, env, 16).body.p, a.body.p)


def test_reset_state_is_level_hover(env):
    w = reset(0, env, 8)
    np.testing.assert_array_equal(w.body.v, 0.0)
    np.testing.assert_array_equal(w.body.R, np.broadcast_to(np.eye(3), (8, 2, 3, 3)))
    assert np.ptp(w.motors.rotor_speeds) == 0.0
    np.testing.assert_array_equal(w.step_count, 0)


def test_reset_position_moments_and_separation(env):
    n = 10_000
    w = reset_worlds(3, np.arange(n), np.zeros(n, dtype=np.int64), env)
    a = env.arena
    lo, hi = np.full(3, a.spawn_margin), a.hi - a.spawn_margin
    sigma = (hi - lo) / np.sqrt(12.0)
    for k in (PURSUER, EVADER):
        mean = w.body.p[:, k].mean(axis=0)
        assert np.all(np.abs(mean - a.centre) <= 3 * sigma / np.sqrt(n))
        assert np.all((w.body.p[:, k] >= lo) & (w.body.p[:, k] <= hi))
    sep = np.linalg.norm(w.body.p[:, 0] - w.body.p[:, 1], axis=-1)
    assert sep.min() >= 2 * (NET.capture_dist + NET.radius)
    captured, _ = capture_check(w.body.take((slice(None), PURSUER)), w.body.p[:, EVADER], env.net)
    assert not captured.any()


def test_reset_done_only_touches_finished_worlds(env):
    w = reset(1, env, 4)
    w.body.p[:, 0, 2] += 0.3
    w.done[:] = [False, True, False, True]
    out = reset_done(w, env)
    np.testing.assert_array_equal(out.body.p[[0, 2]], w.body.p[[0, 2]])
    np.testing.assert_array_equal(out.episode, [0, 1, 0, 1])
    fresh = reset_worlds(1, [1, 3], [1, 1], env)
    np.testing.assert_array_equal(out.body.p[[1, 3]], fresh.body.p)
    assert not out.done.any()


# --------------------------------------------------------------- capture

def level_pursuer(p=(0.0, 0.0, 0.0)):
    return RigidBodyState.level(np.asarray(p, dtype=float))


def test_capture_at_net_centre():
    ok, d = capture_check(level_pursuer(), np.array([0.2, 0.0, 0.0]), NET)
    assert ok and d == 0.0


def test_capture_boundary_on_normal():
    eps = 1e-9
    ok, d = capture_check(level_pursuer(), np.array([0.2 + NET.capture_dist + eps, 0.0, 0.0]), NET)
    assert not ok
    ok, _ = capture_check(level_pursuer(), np.array([0.2 - NET.capture_dist, 0.0, 0.0]), NET)
    assert ok  # both sides of the disc


def test_capture_radial_offsets():
    ok, d = capture_check(level_pursuer(), np.array([0.2, NET.radius, 0.0]), NET)
    assert ok and d == pytest.approx(0.0, abs=1e-15)
    delta = 0.37
    ok, d = capture_check(level_pursuer(), np.array([0.2, 0.0, NET.radius + delta]), NET)
    assert not ok and d == pytest.approx(delta, abs=1e-12)


def brute_disc_distance(centre, normal, p, radius):
    # dense polar sampling of the disc, independent of the projection formula
    a = np.cross(normal, [1.0, 0.0, 0.0])
    if np.linalg.norm(a) < 1e-6:
        a = np.cross(normal, [0.0, 1.0, 0.0])
    a /= np.linalg.norm(a)
    b = np.cross(normal, a)
    r = np.linspace(0, radius, 201)[:, None]
    th = np.linspace(0, 2 * np.pi, 721)[None, :]
    pts = centre + (r * np.cos(th))[..., None] * a + (r * np.sin(th))[..., None] * b
    return np.linalg.norm(pts - p, axis=-1).min()


@settings(max_examples=40, deadline=None)
@given(phi=st.lists(st.floats(-3, 3), min_size=3, max_size=3), q=st.lists(st.floats(-1.5, 1.5), min_size=3, max_size=3))
def test_disc_distance_matches_brute_force(phi, q):
    body = RigidBodyState(np.zeros(3), np.zeros(3), so3_exp(np.array(phi)), np.zeros(3))
    p = np.array(q)
    _, d = capture_check(body, p, NET)
    centre = body.R @ np.array(NET.center_offset)
    ref = brute_disc_distance(centre, body.R[:, 0], p, NET.radius)
    # grid resolution bounds the brute-force overestimate
    assert d <= ref + 1e-12
    assert ref - d < 5e-3


@settings(max_examples=100, deadline=None)
@given(q=st.lists(st.floats(-2, 2), min_size=3, max_size=3), dq=st.lists(st.floats(-1, 1), min_size=3, max_size=3))
def test_disc_distance_is_lipschitz(q, dq):
    body = level_pursuer()
    p, step = np.array(q), 1e-3 * np.array(dq)
    _, d1 = capture_check(body, p, NET)
    _, d2 = capture_check(body, p + step, NET)
    assert abs(d1 - d2) <= np.linalg.norm(step) + 1e-12


# ------------------------------------------------------------- collision

def test_collision_convention(env):
    r = env.quad.body_radius
    assert not collision_check(np.zeros(3), np.array([3 * r, 0, 0]), env.quad)
    assert collision_check(np.zeros(3), np.zeros(3), env.quad)
    assert collision_check(np.zeros(3), np.array([0, 2 * r, 0]), env.quad)


# ------------------------------------------------------------ boundary

def test_boundary_penalty_shape(env):
    a = env.arena
    assert boundary_penalty(a.buffer_threshold, a) == 0.0
    assert boundary_penalty(5.0, a) == 0.0
    assert boundary_penalty(0.0, a, 1.0) == 1.0
    d = np.linspace(0, a.buffer_threshold, 50, endpoint=False)
    assert np.all(np.diff(boundary_penalty(d, a)) < 0)


def test_inner_boundary_distance(env):
    a = env.arena
    assert inner_boundary_distance(a.centre, a) == pytest.approx(2.0)  # z half-height of the 4 m inner box
    assert inner_boundary_distance(np.array([0.5, 4.0, 2.5]), a) == 0.0  # outside the inner volume
    assert inner_boundary_distance(np.array([1.3, 4.0, 2.5]), a) == pytest.approx(0.3)


# -------------------------------------------------------------- actions

@settings(max_examples=100, deadline=None)
@given(a=st.lists(st.floats(-1, 1), min_size=4, max_size=4))
def test_action_command_round_trip(env, a):
    a = np.array(a)
    back = command_to_action(action_to_command(a, env.quad), env.quad)
    np.testing.assert_allclose(back, a, atol=1e-12)


def test_hover_action_maps_to_hover_thrust(env):
    cmd = action_to_command(hover_action(env.quad), env.quad)
    assert cmd.thrust == pytest.approx(env.quad.gravity)
    np.testing.assert_array_equal(cmd.omega_des, 0.0)


# ---------------------------------------------------------- observation

def test_observation_at_arena_centre(env):
    c = env.arena.centre
    w = placed_world(env, c, c)
    o = observe(w, PURSUER, env.arena)[0]
    assert o.shape == (OBS_DIM,)
    np.testing.assert_array_equal(o[:3], 0.0)
    np.testing.assert_array_equal(o[3:12], np.eye(3).ravel())
    np.testing.assert_array_equal(o[12:18], 0.0)
    np.testing.assert_allclose(o[18:] * env.arena.obs_range, [4, 4, 4, 4, 2.5, 2.5])


def test_observation_normalization(env):
    a = dataclasses.replace(env.arena, size=(30.0, 8.0, 5.0), inner_lo=(1, 1, 0.5), inner_hi=(29, 7, 4.5))
    w = placed_world(dataclasses.replace(env, arena=a), np.array([5.0, 4.0, 2.0]), np.array([15.0, 4.0, 2.0]))
    o = observe(w, PURSUER, a)[0]
    np.testing.assert_allclose(o[12:15], [1.0, 0.0, 0.0])


@settings(max_examples=50, deadline=None)
@given(shift=st.lists(st.floats(-0.5, 0.5), min_size=3, max_size=3))
def test_observation_translation_invariance(env, shift):
    p, e = np.array([3.0, 3.0, 2.0]), np.array([5.0, 4.0, 3.0])
    o1 = observe(placed_world(env, p, e), PURSUER, env.arena)[0]
    o2 = observe(placed_world(env, p + shift, e + shift), PURSUER, env.arena)[0]
    np.testing.assert_allclose(o1[:18], o2[:18], atol=1e-12)


def test_observation_bounds_on_random_states(env):
    rng = np.random.default_rng(0)
    w = reset(0, env, 256)
    w.body.p[:] = rng.uniform(-5, 15, size=w.body.p.shape)
    w.body.v[:] = rng.normal(0, 20, size=w.body.v.shape)
    w.body.R[:] = so3_exp(rng.normal(size=(256, 2, 3)))
    for agent in (PURSUER, EVADER):
        o = observe(w, agent, env.arena)
        assert np.all(np.isfinite(o)) and np.all(np.abs(o) <= 1.5)
        priv = privileged_observation(w, agent, np.zeros((256, ACTION_DIM)), env.arena)
        assert priv.shape == (256, PRIV_OBS_DIM) and np.all(np.isfinite(priv))


def test_privileged_observation_carries_opponent_action(env):
    w = reset(0, env, 1)
    act = np.array([[0.1, -0.2, 0.3, -0.4]])
    priv = privileged_observation(w, EVADER, act, env.arena)[0]
    np.testing.assert_array_equal(priv[-4:], act[0])
    np.testing.assert_allclose(priv[:3], (w.body.p[0, EVADER] - env.arena.centre) / env.arena.obs_range)


# --------------------------------------------------------------- rewards

def events(n=1, catch=False, contact=False, fail_p=False, fail_e=False):
    f = lambda x: np.full(n, x)  # noqa: E731
    return Events(f(catch), f(contact), f(fail_p), f(fail_e))


def hover_cmds(env, n=1, rates=(0.0, 0.0, 0.0)):
    return LowLevelCommand.clamped(np.full((n, 2), env.quad.gravity), np.tile(rates, (n, 2, 1)), env.quad)


def test_catch_reward(env):
    w = placed_world(env, np.array([2.0, 4.0, 2.5]), np.array([2.2, 4.0, 2.5]))
    rp, re = compute_rewards(w, hover_cmds(env), events(catch=True), env)
    assert rp.catch[0] == 10.0 and re.catch[0] == -10.0


def test_dist_reward_five_metres(env):
    w = placed_world(env, np.array([1.0, 4.0, 2.5]), np.array([6.2, 4.0, 2.5]))
    rp, re = compute_rewards(w, hover_cmds(env), events(), env)
    assert rp.dist[0] == pytest.approx(-0.005, abs=1e-15)
    assert re.dist[0] == pytest.approx(0.005, abs=1e-15)


def test_pursuer_crash_reward(env):
    w = placed_world(env, np.array([1.0, 4.0, 2.5]), np.array([6.2, 4.0, 2.5]))
    rp, re = compute_rewards(w, hover_cmds(env), events(fail_p=True), env)
    assert rp.fail[0] == -30.0 and re.fail[0] == 0.0
    assert re.catch[0] == 0.0 and re.dist[0] == 0.0
    assert rp.total[0] == pytest.approx(-30.0)


def test_evader_crash_reward(env):
    w = placed_world(env, np.array([1.0, 4.0, 2.5]), np.array([6.2, 4.0, 2.5]))
    rp, re = compute_rewards(w, hover_cmds(env), events(fail_e=True), env)
    assert re.fail[0] == -30.0 and rp.fail[0] == 0.0
    assert rp.dist[0] == 0.0 and rp.catch[0] == 0.0


def test_command_and_contact_rewards(env):
    w = placed_world(env, np.array([4.0, 4.0, 2.5]), np.array([4.0, 4.2, 2.5]))
    rp, re = compute_rewards(w, hover_cmds(env, rates=(6.0, 8.0, 0.0)), events(contact=True), env)
    assert rp.cmd[0] == pytest.approx(-2e-3) and re.cmd[0] == pytest.approx(-2e-3)
    assert rp.coll[0] == -0.1 and re.coll[0] == -0.1
    assert rp.bnd[0] == 0.0


def test_boundary_reward_only_for_evader(env):
    # evader on an inner face -> d_bnd = 0 -> full penalty
    w = placed_world(env, np.array([4.0, 4.0, 2.5]), np.array([1.0, 4.0, 2.5]))
    rp, re = compute_rewards(w, hover_cmds(env), events(), env)
    assert re.bnd[0] == pytest.approx(-1.0) and rp.bnd[0] == 0.0


def test_zero_sum_core_on_random_transitions(env):
    rng = np.random.default_rng(4)
    n = 4096
    w = reset(2, env, n)
    w.body.p[:] = rng.uniform(0, 5, size=w.body.p.shape)
    w.body.R[:] = so3_exp(rng.normal(size=(n, 2, 3)))
    ev = Events(rng.random(n) < 0.2, rng.random(n) < 0.2, rng.random(n) < 0.1, rng.random(n) < 0.1)
    cmds = LowLevelCommand.clamped(rng.uniform(0, 30, (n, 2)), rng.uniform(-10, 10, (n, 2, 3)), env.quad)
    rp, re = compute_rewards(w, cmds, ev, env)
    np.testing.assert_allclose(rp.catch + re.catch, 0.0, atol=1e-12)
    np.testing.assert_allclose(rp.dist + re.dist, 0.0, atol=1e-12)
    common = rp.coll + re.coll + rp.fail + re.fail + rp.cmd + re.cmd + re.bnd
    np.testing.assert_allclose(rp.total + re.total, common, atol=1e-12)
    assert set(np.unique(rp.catch)) <= {0.0, 10.0}


# ------------------------------------------------------------- env_step

def test_hover_pair_does_not_terminate(env):
    w = placed_world(env, np.array([2.0, 2.0, 2.5]), np.array([6.0, 6.0, 2.5]))
    a_p, a_e = hover_actions(env)
    for _ in range(50):
        res = env_step(w, a_p, a_e, env)
        assert not res.done[0] and not res.events.catch[0]
        w = res.world


def test_forced_catch_at_first_step(env):
    p = np.array([3.0, 4.0, 2.5])
    w = placed_world(env, p, p + np.array([0.2, 0.0, 0.0]))
    res = env_step(w, *hover_actions(env), env)
    assert res.done[0] and res.outcome[0] == Outcome.CATCH
    assert res.t_end[0] == pytest.approx(0.01)
    assert res.censored_time_to_catch[0] == pytest.approx(0.01)


def test_timeout_after_full_horizon(env):
    w = placed_world(env, np.array([2.0, 2.0, 2.5]), np.array([6.0, 6.0, 2.5]))
    a_p, a_e = hover_actions(env)
    for k in range(1000):
        res = env_step(w, a_p, a_e, env)
        assert res.done[0] == (k == 999)
        w = res.world
    assert res.outcome[0] == Outcome.TIMEOUT
    assert res.censored_time_to_catch[0] == 10.0


def test_ground_crash_and_exit(env):
    w = placed_world(env, np.array([2.0, 2.0, 0.16]), np.array([6.0, 6.0, 2.5]))
    w.body.v[0, 0] = [0.0, 0.0, -2.0]
    res = env_step(w, *hover_actions(env), env)
    assert res.outcome[0] == Outcome.PURSUER_CRASH and res.events.fail_p[0]
    w = placed_world(env, np.array([2.0, 2.0, 2.5]), np.array([7.99, 6.0, 2.5]))
    w.body.v[0, 1] = [3.0, 0.0, 0.0]
    res = env_step(w, *hover_actions(env), env)
    assert res.outcome[0] == Outcome.EVADER_CRASH
    assert res.reward_e.fail[0] == -30.0 and res.reward_p.dist[0] == 0.0


def test_stepping_a_finished_world_is_rejected(env):
    p = np.array([3.0, 4.0, 2.5])
    res = env_step(placed_world(env, p, p + [0.2, 0, 0]), *hover_actions(env), env)
    with pytest.raises(AssertionError):
        env_step(res.world, *hover_actions(env), env)


def test_env_step_deterministic(env):
    rng = np.random.default_rng(0)
    w = reset(5, env, 32)
    a_p, a_e = rng.uniform(-1, 1, (32, 4)), rng.uniform(-1, 1, (32, 4))
    r1, r2 = env_step(w, a_p, a_e, env), env_step(w, a_p, a_e, env)
    for k, v in r1.world.arrays().items():
        np.testing.assert_array_equal(v, r2.world.arrays()[k])
    np.testing.assert_array_equal(r1.reward_p.total, r2.reward_p.total)


def test_classify_precedence():
    t, f = True, False
    cases = [
        ((t, t, t, t), Outcome.CATCH),
        ((f, t, t, t), Outcome.DOUBLE_CRASH),
        ((f, t, f, t), Outcome.PURSUER_CRASH),
        ((f, f, t, f), Outcome.EVADER_CRASH),
        ((f, f, f, t), Outcome.TIMEOUT),
        ((f, f, f, f), Outcome.NONE),
    ]
    for args, expect in cases:
        assert classify(*(np.array(x) for x in args)) == expect


def test_censoring_rule():
    outcomes = np.array([Outcome.CATCH, Outcome.TIMEOUT, Outcome.PURSUER_CRASH, Outcome.EVADER_CRASH,
                         Outcome.DOUBLE_CRASH])
    t = np.array([2.5, 10.0, 0.4, 3.3, 7.0])
    np.testing.assert_array_equal(censored_time(outcomes, t), [2.5, 10.0, 10.0, 10.0, 10.0])
