"""``quadpursuit`` command line: train, eval, rollout, export-plots, config."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .agents import HEURISTICS
from .arena import EVADER, PURSUER, Outcome, env_step, reset
from .config import ConfigError, RunConfig, default_config_text, load_config, with_arena, write_resolved
from .evaluation import (AgentSpec, ConfigurationError, format_report, run_matchup, write_reports_csv)
from .ppo import (METRICS_COLUMNS, METRICS_HEADER, export_policy, load_train_state, read_metrics,
                  train_selfplay)
from .records import (TrajectoryWriter, export_metrics_series, export_trajectory_series, make_record,
                      read_trajectory)

log = logging.getLogger("quadpursuit")


class CliError(Exception):
    pass


def _resolve(args) -> RunConfig:
    cfg = load_config(args.config)
    if getattr(args, "arena", None):
        cfg = with_arena(cfg, args.arena)
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    ppo_over = {}
    for flag, key in (("total_steps", "total_steps"), ("n_envs", "n_envs"), ("rollout_len", "rollout_len"),
                      ("epochs", "epochs"), ("checkpoint_every", "checkpoint_every")):
        value = getattr(args, flag, None)
        if value is not None:
            ppo_over[key] = value
    if ppo_over:
        try:
            cfg = dataclasses.replace(cfg, ppo=dataclasses.replace(cfg.ppo, **ppo_over))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    return cfg


def _out_dir(args, cfg: RunConfig, default_name: str) -> Path:
    out = Path(args.out) if getattr(args, "out", None) else Path(cfg.output_dir) / default_name
    out.mkdir(parents=True, exist_ok=True)
    return out


# ------------------------------------------------------------------ train

def _frozen(kind: str, role: int, cfg: RunConfig):
    if kind == "learn":
        return None
    spec = AgentSpec.parse(kind, role)
    return spec.build(cfg.guidance)


def _truncate_metrics(path: Path, last_iteration: int) -> None:
    """Drop metric rows written after the checkpoint being resumed."""
    if not path.exists():
        return
    rows = [r for r in read_metrics(path) if r["iteration"] <= last_iteration]
    with open(path, "w", newline="") as fh:
        fh.write(METRICS_HEADER + "\n")
        fh.write(",".join(METRICS_COLUMNS) + "\n")
        for r in rows:
            fh.write(",".join(repr(r[c]) if isinstance(r[c], float) else str(r[c]) for c in METRICS_COLUMNS) + "\n")


def cmd_train(args) -> int:
    cfg = _resolve(args)
    env = cfg.env
    state = None
    if args.resume:
        ckpt = Path(args.resume)
        if not ckpt.is_file():
            raise CliError(f"checkpoint not found: {ckpt}")
        out = Path(args.out) if args.out else ckpt.parent.parent
        out.mkdir(parents=True, exist_ok=True)
        from .nn import load_arrays

        _, meta = load_arrays(ckpt)
        roles = meta.get("roles", {})
        frozen = {name: (None if r == "learner" else HEURISTICS[r](cfg.guidance)) for name, r in roles.items()}
        state = load_train_state(ckpt, cfg.ppo, frozen.get("pursuer"), frozen.get("evader"))
        if state.world.n != cfg.ppo.n_envs:
            raise CliError(f"checkpoint has {state.world.n} worlds but n_envs is {cfg.ppo.n_envs}")
        cfg = dataclasses.replace(cfg, seed=state.seed)
        _truncate_metrics(out / "metrics.csv", state.iteration)
        pursuer = evader = None
    else:
        out = _out_dir(args, cfg, f"train_{cfg.arena_name}_s{cfg.seed}")
        pursuer = _frozen(args.pursuer, PURSUER, cfg)
        evader = _frozen(args.evader, EVADER, cfg)
        metrics = out / "metrics.csv"
        if metrics.exists():
            metrics.unlink()
    write_resolved(cfg, out / "resolved_config.yaml")
    env_meta = {"arena": cfg.arena_name}
    state = train_selfplay(cfg.ppo, env, out, seed=cfg.seed, state=state, pursuer=pursuer, evader=evader,
                           max_iterations=args.max_iterations, env_meta=env_meta)
    for name, agent in (("pursuer", state.pursuer), ("evader", state.evader)):
        if getattr(agent, "optimizer", None) is not None:
            export_policy(out / f"{name}_policy.ckpt", agent,
                          {"role": name, "iteration": state.iteration, "arena": cfg.arena_name})
    print(f"trained {state.iteration} iterations, {state.env_steps} env steps -> {out}")
    return 0


# ------------------------------------------------------------------- eval

def _split(text: str) -> list[str]:
    return [t for t in text.split(",") if t]


def cmd_eval(args) -> int:
    cfg = _resolve(args)
    pursuers = [AgentSpec.parse(t, PURSUER) for t in _split(args.pursuer)]
    evaders = [AgentSpec.parse(t, EVADER) for t in _split(args.evader)]
    out = _out_dir(args, cfg, f"eval_{cfg.arena_name}_s{cfg.seed}")
    grid, reports = {}, []
    for p in pursuers:
        row = {}
        for e in evaders:
            rep = run_matchup(p, e, cfg.env, args.n_episodes, cfg.seed, cfg.guidance, cfg.arena_name)
            row[e.label] = rep
            reports.append(rep)
        grid[p.label] = row
    table = format_report(grid)
    write_reports_csv(out / "report.csv", reports)
    (out / "report.txt").write_text(table)
    print(table, end="")
    return 0


# ---------------------------------------------------------------- rollout

def run_rollout(pursuer: AgentSpec, evader: AgentSpec, cfg: RunConfig, path, episode: int = 0) -> dict:
    """Play world ``episode`` of ``cfg.seed`` and log every control tick."""
    env = cfg.env
    p_actor, e_actor = pursuer.build(cfg.guidance), evader.build(cfg.guidance)
    from .arena import reset_worlds

    world = reset_worlds(cfg.seed, np.array([episode]), np.zeros(1, dtype=np.int64), env)
    header = {"seed": cfg.seed, "world_id": episode, "arena": cfg.arena_name, "dt": env.arena.dt_control,
              "pursuer": pursuer.kind if pursuer.path is None else f"policy:{pursuer.path}",
              "evader": evader.kind if evader.path is None else f"policy:{evader.path}"}
    step = 0
    with TrajectoryWriter(path, header) as writer:
        while True:
            a_p = p_actor.act(world, PURSUER, env)
            a_e = e_actor.act(world, EVADER, env)
            res = env_step(world, a_p, a_e, env)
            done = bool(res.done[0])
            outcome = Outcome(int(res.outcome[0])).name if done else None
            writer.write(make_record(step, env.arena.dt_control, res.world, (a_p, a_e), res.events, done, outcome))
            world = res.world
            if done:
                break
            step += 1
    return {"outcome": outcome, "records": step + 1, "t_end": float(res.t_end[0]),
            "final_step": step, "trajectory": str(path)}


def cmd_rollout(args) -> int:
    cfg = _resolve(args)
    pursuer = AgentSpec.parse(args.pursuer, PURSUER, strict=False)
    evader = AgentSpec.parse(args.evader, EVADER, strict=False)
    out = _out_dir(args, cfg, f"rollout_{cfg.arena_name}_s{cfg.seed}")
    summary = run_rollout(pursuer, evader, cfg, out / "trajectory.jsonl", args.episode)
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary))
    return 0


# ----------------------------------------------------------- export-plots

def cmd_export_plots(args) -> int:
    if not args.metrics and not args.trajectory:
        raise CliError("export-plots needs --metrics and/or --trajectory")
    out = Path(args.out)
    written = []
    if args.metrics:
        path = Path(args.metrics)
        if not path.is_file():
            raise CliError(f"metrics file not found: {path}")
        written += export_metrics_series(read_metrics(path), out)
    if args.trajectory:
        path = Path(args.trajectory)
        if not path.is_file():
            raise CliError(f"trajectory file not found: {path}")
        _, records = read_trajectory(path)
        written.append(export_trajectory_series(records, out))
    for p in written:
        print(p)
    return 0


def cmd_config(args) -> int:
    print(default_config_text(), end="")
    return 0


# ------------------------------------------------------------------ main

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="quadpursuit", description="Quadrotor pursuit-evasion simulator and trainer.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, seed_default=None):
        p.add_argument("--config", help="YAML config file (see `quadpursuit config`)")
        p.add_argument("--arena", choices=("small", "large"), help="arena preset, overrides the config")
        p.add_argument("--seed", type=int, default=seed_default)
        p.add_argument("--out", help="output directory (default: <output_dir>/<command>_<arena>_s<seed>)")

    p = sub.add_parser("train", help="PPO training (co-evolution or against a frozen heuristic)")
    common(p)
    p.add_argument("--total-steps", type=int)
    p.add_argument("--n-envs", type=int)
    p.add_argument("--rollout-len", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--max-iterations", type=int, help="stop after this many iterations in this invocation")
    p.add_argument("--pursuer", default="learn", help="learn | pp | pn")
    p.add_argument("--evader", default="learn", help="learn | hover | apf")
    p.add_argument("--resume", help="training checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="pursuer x evader outcome table")
    common(p)
    p.add_argument("--pursuer", required=True, help="comma list of pp, pn, policy:<ckpt>")
    p.add_argument("--evader", required=True, help="comma list of hover, apf, policy:<ckpt>")
    p.add_argument("-n", "--n-episodes", type=int, default=1000)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("rollout", help="log one episode as JSONL")
    common(p)
    p.add_argument("--pursuer", required=True)
    p.add_argument("--evader", required=True)
    p.add_argument("--episode", type=int, default=0, help="world index within the seed")
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("export-plots", help="long-format CSVs from metrics / trajectory files")
    p.add_argument("--metrics")
    p.add_argument("--trajectory")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_plots)

    p = sub.add_parser("config", help="print the annotated default config")
    p.set_defaults(func=cmd_config)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ConfigurationError, CliError) as exc:
        print(f"quadpursuit {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
