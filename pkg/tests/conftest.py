import re

import numpy as np
import pytest

from quadpursuit.arena import EnvConfig, arena_preset, hover_action, reset


@pytest.fixture(scope="session")
def env():
    return EnvConfig(arena=arena_preset("small"))


def placed_world(env, p_pursuer, p_evader, seed=0):
    """Single world with both agents level and hovering at the given positions."""
    w = reset(seed, env, 1)
    w.body.p[0, 0] = p_pursuer
    w.body.p[0, 1] = p_evader
    w.spawn[0, 0] = p_pursuer
    w.spawn[0, 1] = p_evader
    return w


def hover_actions(env, n=1):
    a = hover_action(env.quad)
    return np.tile(a, (n, 1)), np.tile(a, (n, 1))


# ------------------------------------------------- acceptance summary lines

_CRITERIA: dict[int, tuple[str, str]] = {}
_CRITERION_RE = re.compile(r"test_criterion_(\d+)_")


def pytest_runtest_logreport(report):
    m = _CRITERION_RE.search(report.nodeid)
    if not m or (report.when != "call" and not report.skipped and report.passed):
        return
    n = int(m.group(1))
    if report.skipped:
        verdict = "SKIP"
    elif report.failed:
        verdict = "FAIL"
    else:
        verdict = "PASS"
    detail = "; ".join(str(v) for k, v in report.user_properties if k == "detail")
    if report.skipped and not detail:
        detail = str(report.longrepr[-1]) if isinstance(report.longrepr, tuple) else ""
    if verdict != "PASS" or n not in _CRITERIA:
        _CRITERIA[n] = (verdict, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        verdict, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {verdict}  {detail}")
