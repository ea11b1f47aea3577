"""Pursuer x evader matchups and the outcome table.

Rates follow this accounting: the evade rate counts timeouts *and*
episodes where the pursuer crashed alone, so

    catch + evade + evader crash + double crash = 100 %.

Time to catch is right-censored: any episode that does not end in a capture
contributes the full horizon (10 s by default).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .agents import HEURISTICS, Actor, PolicyActor
from .arena import EVADER, OBS_DIM, PURSUER, EnvConfig, Outcome, censored_time, env_step, reset_worlds
from .guidance import GuidanceConfig
from .nn import load_arrays, mlp_from_arrays

REPORT_HEADER = "# format: quadpursuit.report/1"


class ConfigurationError(ValueError):
    pass


ROLE_NAMES = {PURSUER: "pursuer", EVADER: "evader"}
VALID_KINDS = {
    PURSUER: ("pp", "pn", "policy"),
    EVADER: ("hover", "apf", "policy"),
}
LABELS = {"pp": "PP", "pn": "PN", "apf": "APF", "hover": "Hov.", "policy": "DRL"}


@dataclass(frozen=True)
class AgentSpec:
    kind: str
    role: int
    path: str | None = None

    @classmethod
    def parse(cls, text: str, role: int, strict: bool = True) -> "AgentSpec":
        """``pp``, ``pn``, ``apf``, ``hover`` or ``policy:<checkpoint path>``."""
        kind, _, path = text.partition(":")
        kind = kind.strip().lower()
        spec = cls(kind=kind, role=role, path=path or None)
        spec.validate(strict)
        return spec

    def validate(self, strict: bool = True) -> None:
        if self.kind not in HEURISTICS and self.kind != "policy":
            raise ConfigurationError(f"unknown agent kind {self.kind!r}")
        if self.kind == "policy" and not self.path:
            raise ConfigurationError("policy agents need a checkpoint path: policy:<path>")
        if strict and self.kind not in VALID_KINDS[self.role]:
            raise ConfigurationError(
                f"{self.kind!r} cannot play the {ROLE_NAMES[self.role]} role "
                f"(allowed: {', '.join(VALID_KINDS[self.role])})"
            )

    @property
    def label(self) -> str:
        return LABELS.get(self.kind, self.kind)

    def build(self, guidance: GuidanceConfig | None = None) -> Actor:
        if self.kind == "policy":
            return PolicyActor(load_policy_for_role(self.path, self.role))
        return HEURISTICS[self.kind](guidance or GuidanceConfig())


def load_policy_for_role(path, role: int):
    """Load a policy from a policy-only or a training checkpoint."""
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"checkpoint not found: {path}")
    arrays, _ = load_arrays(path)
    for prefix in ("policy", f"{ROLE_NAMES[role]}.policy"):
        try:
            net = mlp_from_arrays(prefix, arrays)
        except KeyError:
            continue
        if net.sizes[0] != OBS_DIM or net.sizes[-1] != 8:
            raise ConfigurationError(
                f"{path}: policy shape {net.sizes} does not match observation width {OBS_DIM} / 4 actions"
            )
        return net
    raise ConfigurationError(f"{path}: no {ROLE_NAMES[role]} policy inside")


@dataclass
class MatchupReport:
    n_episodes: int
    counts: dict[str, int]
    catch_rate: float
    evade_rate: float
    timeout_rate: float
    pursuer_crash_rate: float
    evader_crash_rate: float
    double_crash_rate: float
    ttc_mean: float
    ttc_std: float
    pursuer: str = ""
    evader: str = ""
    arena: str = ""

    @classmethod
    def from_outcomes(cls, outcomes, t_end, horizon: float = 10.0, **labels) -> "MatchupReport":
        outcomes = np.asarray(outcomes)
        n = int(outcomes.size)
        if n < 1:
            raise ValueError("a report needs at least one episode")
        counts = {k.name: int(np.sum(outcomes == k)) for k in Outcome if k != Outcome.NONE}
        if sum(counts.values()) != n:
            raise ValueError("unfinished episodes in outcome list")
        pct = lambda c: 100.0 * c / n  # noqa: E731
        ttc = censored_time(outcomes, t_end, horizon)
        return cls(
            n_episodes=n,
            counts=counts,
            catch_rate=pct(counts["CATCH"]),
            evade_rate=pct(counts["TIMEOUT"] + counts["PURSUER_CRASH"]),
            timeout_rate=pct(counts["TIMEOUT"]),
            pursuer_crash_rate=pct(counts["PURSUER_CRASH"]),
            evader_crash_rate=pct(counts["EVADER_CRASH"]),
            double_crash_rate=pct(counts["DOUBLE_CRASH"]),
            ttc_mean=float(ttc.mean()),
            ttc_std=float(ttc.std(ddof=1)) if n > 1 else float("nan"),
            **labels,
        )

    def partition_total(self) -> float:
        return self.catch_rate + self.evade_rate + self.evader_crash_rate + self.double_crash_rate

    def as_row(self) -> dict:
        return {
            "pursuer": self.pursuer, "evader": self.evader, "arena": self.arena, "n_episodes": self.n_episodes,
            "catch_rate": self.catch_rate, "evade_rate": self.evade_rate, "timeout_rate": self.timeout_rate,
            "pursuer_crash_rate": self.pursuer_crash_rate, "evader_crash_rate": self.evader_crash_rate,
            "double_crash_rate": self.double_crash_rate, "ttc_mean": self.ttc_mean, "ttc_std": self.ttc_std,
        }


@dataclass
class EpisodeLog:
    outcome: np.ndarray
    t_end: np.ndarray


def run_episodes(pursuer: Actor, evader: Actor, env: EnvConfig, n_episodes: int, seed: int,
                 batch_size: int = 1000) -> EpisodeLog:
    """Play ``n_episodes`` seeded episodes in batches; finished worlds drop out."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    outcome = np.full(n_episodes, int(Outcome.NONE))
    t_end = np.zeros(n_episodes)
    for start in range(0, n_episodes, batch_size):
        ids = np.arange(start, min(start + batch_size, n_episodes))
        world = reset_worlds(seed, ids, np.zeros(ids.size, dtype=np.int64), env)
        alive = ids
        while alive.size:
            res = env_step(world, pursuer.act(world, PURSUER, env), evader.act(world, EVADER, env), env)
            d = res.done
            outcome[alive[d]] = res.outcome[d]
            t_end[alive[d]] = res.t_end[d]
            keep = ~d
            alive = alive[keep]
            world = res.world.take(keep)
    return EpisodeLog(outcome, t_end)


def run_matchup(pursuer: AgentSpec, evader: AgentSpec, env: EnvConfig, n_episodes: int = 1000, seed: int = 0,
                guidance: GuidanceConfig | None = None, arena_name: str = "", strict: bool = True,
                episodes_out=None) -> MatchupReport:
    pursuer.validate(strict)
    evader.validate(strict)
    if pursuer.role != PURSUER or evader.role != EVADER:
        raise ConfigurationError("agent specs passed in the wrong role slots")
    log = run_episodes(pursuer.build(guidance), evader.build(guidance), env, n_episodes, seed)
    if episodes_out is not None:
        write_episodes_jsonl(episodes_out, log, env.arena.horizon)
    return MatchupReport.from_outcomes(
        log.outcome, log.t_end, env.arena.horizon,
        pursuer=pursuer.label, evader=evader.label, arena=arena_name,
    )


def write_episodes_jsonl(path, log: EpisodeLog, horizon: float) -> None:
    ttc = censored_time(log.outcome, log.t_end, horizon)
    with open(path, "w") as fh:
        fh.write(json.dumps({"format": "quadpursuit.episodes/1"}) + "\n")
        for i, (o, t, c) in enumerate(zip(log.outcome, log.t_end, ttc)):
            fh.write(json.dumps({"episode": i, "outcome": Outcome(int(o)).name, "t_end": float(t), "censored_ttc": float(c)}) + "\n")


def _fmt(x: float, digits: int) -> str:
    return "—" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{x:.{digits}f}"


ROWS = [
    ("Catch Rate (%)", "catch_rate", 1),
    ("Evade Rate (%)", "evade_rate", 1),
    ("  of which timeout", "timeout_rate", 1),
    ("Crash rates (%)", None, None),
    ("  Pursuer", "pursuer_crash_rate", 1),
    ("  Evader", "evader_crash_rate", 1),
    ("  Double", "double_crash_rate", 1),
    ("Time to Catch (s)", None, None),
    ("  Mean", "ttc_mean", 2),
    ("  Std", "ttc_std", 2),
]


def format_report(grid: dict[str, dict[str, MatchupReport]]) -> str:
    """Text table with one block per pursuer and one column per evader.

    ``grid`` maps pursuer label -> evader column label -> report; insertion
    order is preserved.
    """
    label_w = max(len(r[0]) for r in ROWS)
    blocks = []
    for pursuer, row in grid.items():
        cols = list(row)
        col_w = max(8, *(len(c) for c in cols))
        lines = [f"{pursuer:<{label_w}}  " + "  ".join(f"{c:>{col_w}}" for c in cols)]
        lines.append("-" * len(lines[0]))
        for label, attr, digits in ROWS:
            if attr is None:
                lines.append(label)
                continue
            cells = [_fmt(getattr(row[c], attr), digits) for c in cols]
            lines.append(f"{label:<{label_w}}  " + "  ".join(f"{v:>{col_w}}" for v in cells))
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks) + "\n"


def write_reports_csv(path, reports: list[MatchupReport]) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(REPORT_HEADER + "\n")
        cols = list(reports[0].as_row())
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for r in reports:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.as_row().items()})
